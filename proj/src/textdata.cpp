#include "mtlse/textdata.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "mtlse/errors.hpp"
#include "mtlse/rng.hpp"

namespace mtlse::textdata {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

bool parse_int(const std::string& s, long& out) {
    const char* begin = s.data();
    const char* end = begin + s.size();
    auto [ptr, ec] = std::from_chars(begin, end, out);
    return ec == std::errc() && ptr == end;
}

std::size_t parse_size(const std::string& s, const std::string& where) {
    long v;
    if (!parse_int(s, v) || v < 0)
        throw config_error(where + ": expected a non-negative integer, got '" + s + "'");
    return static_cast<std::size_t>(v);
}

std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        std::size_t tab = line.find('\t', start);
        if (tab == std::string::npos) {
            out.push_back(line.substr(start));
            return out;
        }
        out.push_back(line.substr(start, tab - start));
        start = tab + 1;
    }
}

}  // namespace

// ------------------------------------------------------------------ vocab

Vocabulary::Vocabulary() {
    tokens_ = {"<pad>", "<unk>"};
    ids_ = {{"<pad>", kPad}, {"<unk>", kUnk}};
}

int Vocabulary::add(const std::string& token) {
    auto it = ids_.find(token);
    if (it != ids_.end()) return it->second;
    int id = static_cast<int>(tokens_.size());
    tokens_.push_back(token);
    ids_.emplace(token, id);
    return id;
}

int Vocabulary::index(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnk : it->second;
}

bool Vocabulary::contains(const std::string& token) const { return ids_.count(token) > 0; }

const std::string& Vocabulary::token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
        throw std::invalid_argument("Vocabulary::token: id out of range");
    return tokens_[static_cast<std::size_t>(id)];
}

std::vector<std::string> tokenize(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!cur.empty()) {
                out.push_back(cur);
                cur.clear();
            }
        } else {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

Vocabulary build_vocab(const std::vector<std::vector<std::string>>& corpus,
                       std::size_t min_count) {
    if (min_count < 1) throw std::invalid_argument("build_vocab: min_count must be >= 1");
    if (corpus.empty()) throw data_error("build_vocab: empty corpus");
    std::unordered_map<std::string, std::size_t> counts;
    std::vector<std::string> first_seen;
    for (const auto& seq : corpus)
        for (const auto& tok : seq) {
            auto [it, fresh] = counts.emplace(tok, 0);
            if (fresh) first_seen.push_back(tok);
            ++it->second;
        }
    Vocabulary v;
    for (const auto& tok : first_seen)
        if (counts[tok] >= min_count) v.add(tok);
    return v;
}

// -------------------------------------------------------------- embeddings

EmbeddingTable load_embeddings(const std::string& path, const Vocabulary& vocab,
                               OovPolicy policy, std::uint64_t seed) {
    std::ifstream in(path);
    if (!in) throw data_error("load_embeddings: cannot open " + path);

    std::size_t d_w = 0;
    std::vector<std::pair<int, std::vector<double>>> found;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string token;
        ss >> token;
        std::vector<double> vals;
        std::string field;
        while (ss >> field) {
            double v;
            const char* b = field.data();
            auto [ptr, ec] = std::from_chars(b, b + field.size(), v);
            if (ec != std::errc() || ptr != field.data() + field.size())
                throw data_error("load_embeddings: " + path + " line " + std::to_string(lineno) +
                                 ": unreadable float '" + field + "'");
            vals.push_back(v);
        }
        if (vals.empty())
            throw data_error("load_embeddings: " + path + " line " + std::to_string(lineno) +
                             ": no vector values");
        if (d_w == 0)
            d_w = vals.size();
        else if (vals.size() != d_w)
            throw data_error("load_embeddings: " + path + " line " + std::to_string(lineno) +
                             ": dimension " + std::to_string(vals.size()) + " != " +
                             std::to_string(d_w));
        if (vocab.contains(token)) found.emplace_back(vocab.index(token), std::move(vals));
    }
    if (d_w == 0) throw data_error("load_embeddings: " + path + ": empty file");

    EmbeddingTable table;
    table.weights = Tensor({vocab.size(), d_w});
    table.frozen = true;
    std::vector<bool> covered(vocab.size(), false);
    covered[Vocabulary::kPad] = true;  // padding row stays zero
    for (auto& [id, vals] : found) {
        std::copy(vals.begin(), vals.end(), table.weights.data.begin() + id * d_w);
        covered[static_cast<std::size_t>(id)] = true;
    }
    if (policy == OovPolicy::SeededUniform) {
        auto rng = seeded_rng(seed, "embeddings:oov");
        std::uniform_real_distribution<double> dist(-0.1, 0.1);
        for (std::size_t id = 0; id < vocab.size(); ++id)
            if (!covered[id])
                for (std::size_t j = 0; j < d_w; ++j) table.weights.at(id, j) = dist(rng);
    }
    return table;
}

EmbeddingTable random_embeddings(const Vocabulary& vocab, std::size_t d_w, std::uint64_t seed,
                                 double range) {
    if (range <= 0) throw std::invalid_argument("random_embeddings: range must be positive");
    EmbeddingTable table;
    table.weights = Tensor({vocab.size(), d_w});
    table.frozen = true;
    auto rng = seeded_rng(seed, "embeddings:random");
    std::uniform_real_distribution<double> dist(-range, range);
    for (std::size_t id = 1; id < vocab.size(); ++id)  // row 0 (padding) stays zero
        for (std::size_t j = 0; j < d_w; ++j) table.weights.at(id, j) = dist(rng);
    return table;
}

// ------------------------------------------------------------ kv text files

std::vector<KvEntry> parse_kv_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw config_error("cannot open " + path);
    std::vector<KvEntry> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        std::size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw config_error(path + " line " + std::to_string(lineno) +
                               ": expected `key = value`");
        KvEntry e;
        e.key = trim(t.substr(0, eq));
        e.value = trim(t.substr(eq + 1));
        e.line = lineno;
        if (e.key.empty())
            throw config_error(path + " line " + std::to_string(lineno) + ": empty key");
        out.push_back(std::move(e));
    }
    return out;
}

// ----------------------------------------------------------------- manifest

TaskSpec load_task_manifest(const std::string& path) {
    TaskSpec spec;
    SynthSpec synth;
    std::string type;
    bool saw_kind = false;
    for (const KvEntry& e : parse_kv_file(path)) {
        const std::string where = path + " line " + std::to_string(e.line);
        if (e.key == "name") {
            spec.name = e.value;
        } else if (e.key == "type") {
            type = e.value;
        } else if (e.key == "labels") {
            std::stringstream ss(e.value);
            std::string item;
            while (std::getline(ss, item, ',')) {
                item = trim(item);
                if (!item.empty()) spec.labels.push_back(item);
            }
        } else if (e.key == "train") {
            spec.train_path = e.value;
        } else if (e.key == "dev") {
            spec.dev_path = e.value;
        } else if (e.key == "test") {
            spec.test_path = e.value;
        } else if (e.key == "kind") {
            saw_kind = true;
            if (e.value == "SHARED-OVERLAP")
                synth.kind = SynthKind::SharedOverlap;
            else if (e.value == "PRIVATE-MARKER")
                synth.kind = SynthKind::PrivateMarker;
            else
                throw config_error(where + ": unknown synthetic spec name '" + e.value + "'");
        } else if (e.key == "marker") {
            synth.marker = e.value;
        } else if (e.key == "train_size") {
            spec.train_size = parse_size(e.value, where);
        } else if (e.key == "dev_size") {
            spec.dev_size = parse_size(e.value, where);
        } else if (e.key == "test_size") {
            spec.test_size = parse_size(e.value, where);
        } else if (e.key == "min_len") {
            synth.min_len = parse_size(e.value, where);
        } else if (e.key == "max_len") {
            synth.max_len = parse_size(e.value, where);
        } else if (e.key == "filler_count") {
            synth.filler_count = parse_size(e.value, where);
        } else if (e.key == "content_count") {
            synth.content_count = parse_size(e.value, where);
        } else if (e.key == "max_marker_pos") {
            synth.max_marker_pos = parse_size(e.value, where);
        } else {
            throw config_error(where + ": unknown key '" + e.key + "'");
        }
    }
    if (spec.name.empty()) throw config_error(path + ": missing task name");
    if (spec.name.find_first_of(" \t") != std::string::npos)
        throw config_error(path + ": task name must not contain whitespace");
    if (type == "synthetic") {
        if (!saw_kind) throw config_error(path + ": synthetic task needs a kind");
        spec.synthetic = synth;
    } else if (type == "files") {
        if (spec.labels.size() < 2)
            throw config_error(path + ": file task needs at least 2 labels");
        if (spec.train_path.empty() || spec.dev_path.empty())
            throw config_error(path + ": file task needs train and dev paths");
        // dataset paths are taken relative to the manifest's directory
        auto resolve = [&](std::string& p) {
            if (!p.empty() && std::filesystem::path(p).is_relative())
                p = (std::filesystem::path(path).parent_path() / p).string();
        };
        resolve(spec.train_path);
        resolve(spec.dev_path);
        resolve(spec.test_path);
    } else {
        throw config_error(path + ": type must be `synthetic` or `files`");
    }
    return spec;
}

// ----------------------------------------------------------------- datasets

Dataset map_raw(const RawDataset& raw, const std::string& task_name, std::size_t num_classes,
                const Vocabulary& vocab) {
    Dataset out;
    out.task = task_name;
    out.num_classes = num_classes;
    out.examples.reserve(raw.size());
    for (const RawExample& r : raw) {
        if (r.s1.empty() || r.s2.empty())
            throw data_error("map_raw: empty sentence in task " + task_name);
        if (r.label < 0 || static_cast<std::size_t>(r.label) >= num_classes)
            throw data_error("map_raw: label out of range in task " + task_name);
        Example e;
        e.task = task_name;
        e.label = r.label;
        for (const auto& t : r.s1) e.tokens1.push_back(vocab.index(t));
        for (const auto& t : r.s2) e.tokens2.push_back(vocab.index(t));
        out.examples.push_back(std::move(e));
    }
    return out;
}

RawDataset load_pair_raw(const std::string& path, const TaskSpec& task) {
    std::ifstream in(path);
    if (!in) throw data_error("load_pair_dataset: cannot open " + path);
    const std::size_t C = task.class_count();

    RawDataset raw;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const std::string where = path + " line " + std::to_string(lineno);
        std::vector<std::string> fields = split_tabs(line);
        if (fields.size() != 3)
            throw data_error(where + ": expected 3 tab-separated fields, got " +
                             std::to_string(fields.size()));
        RawExample r;
        long as_int;
        if (parse_int(fields[0], as_int)) {
            if (as_int < 0 || static_cast<std::size_t>(as_int) >= C)
                throw data_error(where + ": label " + fields[0] + " out of range for " +
                                 std::to_string(C) + " classes");
            r.label = static_cast<int>(as_int);
        } else {
            auto it = std::find(task.labels.begin(), task.labels.end(), fields[0]);
            if (it == task.labels.end())
                throw data_error(where + ": unknown label name '" + fields[0] + "'");
            r.label = static_cast<int>(it - task.labels.begin());
        }
        r.s1 = tokenize(fields[1]);
        r.s2 = tokenize(fields[2]);
        if (r.s1.empty() || r.s2.empty()) throw data_error(where + ": empty sentence field");
        raw.push_back(std::move(r));
    }
    return raw;
}

Dataset load_pair_dataset(const std::string& path, const TaskSpec& task,
                          const Vocabulary& vocab) {
    return map_raw(load_pair_raw(path, task), task.name, task.class_count(), vocab);
}

void save_pair_dataset(const std::string& path, const RawDataset& data) {
    std::ofstream out(path);
    if (!out) throw data_error("save_pair_dataset: cannot open " + path + " for writing");
    for (const RawExample& r : data) {
        out << r.label << '\t';
        for (std::size_t i = 0; i < r.s1.size(); ++i) out << (i ? " " : "") << r.s1[i];
        out << '\t';
        for (std::size_t i = 0; i < r.s2.size(); ++i) out << (i ? " " : "") << r.s2[i];
        out << '\n';
    }
}

// --------------------------------------------------------------- synthetic

int shared_overlap_label(const std::vector<std::string>& s1, const std::vector<std::string>& s2,
                         const std::unordered_set<std::string>& content) {
    std::unordered_set<std::string> in1;
    for (const auto& t : s1)
        if (content.count(t)) in1.insert(t);
    for (const auto& t : s2)
        if (in1.count(t)) return 1;
    return 0;
}

int marker_parity_label(const std::vector<std::string>& s1, const std::string& marker) {
    for (std::size_t i = 0; i < s1.size(); ++i)
        if (s1[i] == marker) return static_cast<int>(i % 2);
    throw std::invalid_argument("marker_parity_label: marker not present in sentence");
}

std::unordered_set<std::string> synth_content_set(const SynthSpec& spec) {
    std::unordered_set<std::string> content;
    for (std::size_t i = 0; i < spec.content_count; ++i) content.insert("c" + std::to_string(i));
    return content;
}

namespace {

// Fillers plus content tokens; the pool both generators sample from.
std::vector<std::string> token_pool(const SynthSpec& spec) {
    std::vector<std::string> pool;
    for (std::size_t i = 0; i < spec.filler_count; ++i) pool.push_back("f" + std::to_string(i));
    for (std::size_t i = 0; i < spec.content_count; ++i) pool.push_back("c" + std::to_string(i));
    return pool;
}

std::vector<std::string> draw_sentence(std::mt19937_64& rng, const std::vector<std::string>& pool,
                                       std::size_t len) {
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    std::vector<std::string> s(len);
    for (auto& t : s) t = pool[pick(rng)];
    return s;
}

}  // namespace

RawDataset synth_generate(const SynthSpec& spec) {
    if (spec.min_len < 2 || spec.max_len < spec.min_len)
        throw std::invalid_argument("synth_generate: bad length range");
    if (spec.filler_count == 0)
        throw std::invalid_argument("synth_generate: no filler tokens");

    auto rng = seeded_rng(spec.seed, "synth");
    const auto content = synth_content_set(spec);
    std::vector<std::string> content_list(content.begin(), content.end());
    std::sort(content_list.begin(), content_list.end());
    std::vector<std::string> fillers;
    for (std::size_t i = 0; i < spec.filler_count; ++i) fillers.push_back("f" + std::to_string(i));

    std::uniform_int_distribution<std::size_t> len_dist(spec.min_len, spec.max_len);
    auto pick_content = [&]() -> const std::string& {
        return content_list[std::uniform_int_distribution<std::size_t>(
            0, content_list.size() - 1)(rng)];
    };
    auto pos_in = [&](std::size_t len) {
        return std::uniform_int_distribution<std::size_t>(0, len - 1)(rng);
    };

    // Sentences start as fillers; content tokens are planted so that a pair
    // shares one exactly when the label says so. The marker task plants
    // content at the same marginal rate, keeping content statistics useless
    // for telling the tasks apart.
    RawDataset out;
    out.reserve(spec.size);
    for (std::size_t i = 0; i < spec.size; ++i) {
        const int want = static_cast<int>(i % 2);  // exact balance, shuffled below
        RawExample ex;
        std::size_t len1 = len_dist(rng), len2 = len_dist(rng);
        ex.s1 = draw_sentence(rng, fillers, len1);
        ex.s2 = draw_sentence(rng, fillers, len2);

        if (spec.kind == SynthKind::SharedOverlap) {
            if (content_list.size() < 2)
                throw std::invalid_argument(
                    "synth_generate: SHARED-OVERLAP needs at least 2 content tokens");
            if (want == 1) {
                const std::string& c = pick_content();
                ex.s1[pos_in(len1)] = c;
                ex.s2[pos_in(len2)] = c;
            } else if (i % 4 == 1) {
                // harder negative: both sides carry content, but different tokens
                const std::string& c1 = pick_content();
                std::string c2 = c1;
                while (c2 == c1) c2 = pick_content();
                ex.s1[pos_in(len1)] = c1;
                ex.s2[pos_in(len2)] = c2;
            } else {
                // easy negative: content on one side only, sides alternating
                if (i % 8 == 3)
                    ex.s1[pos_in(len1)] = pick_content();
                else
                    ex.s2[pos_in(len2)] = pick_content();
            }
            ex.label = shared_overlap_label(ex.s1, ex.s2, content);
            if (ex.label != want)
                throw std::logic_error("synth_generate: overlap generator violated its label");
        } else {
            // marker position of the requested parity, capped
            std::size_t hi = std::min(len1 - 1, spec.max_marker_pos);
            std::vector<std::size_t> slots;
            for (std::size_t p = (want == 1 ? 1 : 0); p <= hi; p += 2) slots.push_back(p);
            std::size_t mpos = slots[std::uniform_int_distribution<std::size_t>(
                0, slots.size() - 1)(rng)];
            ex.s1[mpos] = spec.marker;
            // decoy marker in the second sentence keeps per-sentence statistics
            // symmetric; the label reads sentence1 only
            ex.s2[pos_in(len2)] = spec.marker;
            // one content token per sentence, matching the overlap task's
            // marginals, planted clear of the marker
            if (!content_list.empty()) {
                for (auto* s : {&ex.s1, &ex.s2}) {
                    std::size_t p = pos_in(s->size());
                    while ((*s)[p] == spec.marker) p = pos_in(s->size());
                    (*s)[p] = pick_content();
                }
            }
            ex.label = marker_parity_label(ex.s1, spec.marker);
            if (ex.label != want)
                throw std::logic_error("synth_generate: marker generator violated its label");
        }
        out.push_back(std::move(ex));
    }
    std::shuffle(out.begin(), out.end(), rng);
    return out;
}

std::vector<std::vector<std::string>> synth_sentences(const SynthSpec& spec,
                                                      const std::vector<std::size_t>& lengths,
                                                      std::uint64_t seed) {
    auto rng = seeded_rng(seed, "synth:sentences");
    const std::vector<std::string> pool = token_pool(spec);
    std::vector<std::vector<std::string>> out;
    out.reserve(lengths.size());
    for (std::size_t len : lengths) {
        if (len == 0) throw std::invalid_argument("synth_sentences: zero length");
        out.push_back(draw_sentence(rng, pool, len));
    }
    return out;
}

// ----------------------------------------------------------------- batching

std::vector<Batch> batch_iter(const Dataset& data, std::size_t batch_size,
                              std::optional<std::uint64_t> shuffle_seed) {
    if (batch_size < 1) throw std::invalid_argument("batch_iter: batch_size must be >= 1");
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    if (shuffle_seed) {
        auto rng = seeded_rng(*shuffle_seed, "batch:shuffle");
        std::shuffle(order.begin(), order.end(), rng);
    }
    std::vector<Batch> batches;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
        std::size_t stop = std::min(start + batch_size, order.size());
        Batch b;
        std::size_t max1 = 0, max2 = 0;
        for (std::size_t i = start; i < stop; ++i) {
            const Example& e = data.examples[order[i]];
            max1 = std::max(max1, e.tokens1.size());
            max2 = std::max(max2, e.tokens2.size());
        }
        for (std::size_t i = start; i < stop; ++i) {
            const Example& e = data.examples[order[i]];
            b.ids.push_back(order[i]);
            b.labels.push_back(e.label);
            b.len1.push_back(e.tokens1.size());
            b.len2.push_back(e.tokens2.size());
            std::vector<int> p1 = e.tokens1, p2 = e.tokens2;
            p1.resize(max1, Vocabulary::kPad);
            p2.resize(max2, Vocabulary::kPad);
            b.s1.push_back(std::move(p1));
            b.s2.push_back(std::move(p2));
        }
        batches.push_back(std::move(b));
    }
    return batches;
}

}  // namespace mtlse::textdata
