#include "mtlse/probes.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "mtlse/errors.hpp"
#include "mtlse/graph.hpp"
#include "mtlse/rng.hpp"

namespace mtlse::probes {

using ndgrad::Graph;
using ndgrad::Var;
using textdata::Vocabulary;

TagSpec parse_tag(const std::string& text) {
    TagSpec out;
    if (text == "shared") {
        out.tag = EncoderTag::Shared;
    } else if (text == "concat") {
        out.tag = EncoderTag::Concat;
    } else if (text.rfind("concat:", 0) == 0) {
        out.tag = EncoderTag::Concat;
        out.task = text.substr(7);
    } else if (text.rfind("private:", 0) == 0) {
        out.tag = EncoderTag::Private;
        out.task = text.substr(8);
        if (out.task.empty())
            throw std::invalid_argument("parse_tag: private tag needs a task name");
    } else {
        throw std::invalid_argument("parse_tag: unknown encoder tag '" + text + "'");
    }
    return out;
}

std::string tag_name(const TagSpec& tag) {
    switch (tag.tag) {
        case EncoderTag::Shared: return "shared";
        case EncoderTag::Private: return "private:" + tag.task;
        case EncoderTag::Concat: return tag.task.empty() ? "concat" : "concat:" + tag.task;
    }
    return "?";
}

namespace {

// resolves which private encoder a tag refers to; -1 for shared-only
int private_index(const TagSpec& tag, MTLModel& model, const std::string& fallback_task) {
    if (tag.tag == EncoderTag::Shared) return -1;
    if (model.framework == mtl::Framework::FS)
        throw std::invalid_argument("encoder tag '" + tag_name(tag) +
                                    "' needs private encoders, model is FS");
    std::string task = tag.task.empty() ? fallback_task : tag.task;
    if (task.empty())
        throw std::invalid_argument("encoder tag '" + tag_name(tag) + "' needs a task name");
    int k = model.task_index(task);
    if (k < 0) throw std::invalid_argument("encoder tag names unknown task '" + task + "'");
    return k;
}

Tensor tagged_vector(const std::vector<int>& tokens, MTLModel& model,
                     const EmbeddingTable& table, const TagSpec& tag, int priv_idx) {
    Tensor s_shared, s_private;
    if (tag.tag != EncoderTag::Private)
        s_shared = encoder::encode_sentence(tokens, table, model.shared_enc);
    if (priv_idx >= 0)
        s_private = encoder::encode_sentence(
            tokens, table, model.private_enc[static_cast<std::size_t>(priv_idx)]);
    switch (tag.tag) {
        case EncoderTag::Shared: return s_shared;
        case EncoderTag::Private: return s_private;
        case EncoderTag::Concat: {
            std::vector<double> v = s_shared.data;
            v.insert(v.end(), s_private.data.begin(), s_private.data.end());
            return Tensor::vec(std::move(v));
        }
    }
    throw std::logic_error("tagged_vector: bad tag");
}

}  // namespace

FeatureMatrix extract_pair_features(const Dataset& data, MTLModel& model,
                                    const EmbeddingTable& table, const TagSpec& tag) {
    if (data.examples.empty()) throw std::invalid_argument("extract_pair_features: empty data");
    int priv = private_index(tag, model, data.task);
    FeatureMatrix out;
    out.tag = tag_name(tag);
    for (std::size_t i = 0; i < data.examples.size(); ++i) {
        const textdata::Example& ex = data.examples[i];
        Tensor s1 = tagged_vector(ex.tokens1, model, table, tag, priv);
        Tensor s2 = tagged_vector(ex.tokens2, model, table, tag, priv);
        Tensor pf = encoder::pair_features(s1, s2);
        if (i == 0) out.X = Tensor({data.examples.size(), pf.size()});
        std::copy(pf.data.begin(), pf.data.end(), out.X.data.begin() + i * pf.size());
        out.ids.push_back(i);
    }
    return out;
}

FeatureMatrix extract_sentence_vectors(const std::vector<std::vector<int>>& sentences,
                                       MTLModel& model, const EmbeddingTable& table,
                                       const TagSpec& tag) {
    if (sentences.empty()) throw std::invalid_argument("extract_sentence_vectors: no sentences");
    int priv = private_index(tag, model, "");
    FeatureMatrix out;
    out.tag = tag_name(tag);
    for (std::size_t i = 0; i < sentences.size(); ++i) {
        Tensor s = tagged_vector(sentences[i], model, table, tag, priv);
        if (i == 0) out.X = Tensor({sentences.size(), s.size()});
        std::copy(s.data.begin(), s.data.end(), out.X.data.begin() + i * s.size());
        out.ids.push_back(i);
    }
    return out;
}

FeatureMatrix bag_of_embeddings(const std::vector<std::vector<int>>& sentences,
                                const EmbeddingTable& table) {
    if (sentences.empty()) throw std::invalid_argument("bag_of_embeddings: no sentences");
    FeatureMatrix out;
    out.tag = "bag";
    out.X = Tensor({sentences.size(), table.dim()});
    for (std::size_t i = 0; i < sentences.size(); ++i) {
        std::size_t real = 0;
        for (int id : sentences[i]) {
            if (id == Vocabulary::kPad) continue;
            const double* row = table.row(id);
            for (std::size_t j = 0; j < table.dim(); ++j) out.X.at(i, j) += row[j];
            ++real;
        }
        if (real == 0) throw std::invalid_argument("bag_of_embeddings: empty sentence");
        for (std::size_t j = 0; j < table.dim(); ++j)
            out.X.at(i, j) /= static_cast<double>(real);
        out.ids.push_back(i);
    }
    return out;
}

void write_feature_csv(const std::string& path, const FeatureMatrix& fm) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw data_error("write_feature_csv: cannot open " + path);
    out << "id,tag=" << fm.tag << ",D=" << fm.dim() << "\n";
    char buf[40];
    for (std::size_t i = 0; i < fm.X.rows(); ++i) {
        out << fm.ids[i];
        for (std::size_t j = 0; j < fm.X.cols(); ++j) {
            std::snprintf(buf, sizeof(buf), "%.17g", fm.X.at(i, j));
            out << ',' << buf;
        }
        out << '\n';
    }
}

// ----------------------------------------------------------------- probes

ProbeResult train_probe(const FeatureMatrix& features, const std::vector<int>& labels,
                        const ProbeConfig& cfg) {
    const std::size_t N = features.X.rows();
    if (labels.size() != N) throw std::invalid_argument("train_probe: one label per row");
    if (cfg.epochs == 0 || cfg.lr <= 0 || cfg.test_fraction <= 0 || cfg.test_fraction >= 1)
        throw std::invalid_argument("train_probe: bad probe hyperparameters");

    int max_label = 0;
    for (int l : labels) {
        if (l < 0) throw std::invalid_argument("train_probe: negative label");
        max_label = std::max(max_label, l);
    }
    const std::size_t C = static_cast<std::size_t>(max_label) + 1;

    // deterministic held-out split
    std::vector<std::size_t> order(N);
    std::iota(order.begin(), order.end(), 0);
    auto rng = seeded_rng(cfg.seed, "probe:split");
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t test_n = std::max<std::size_t>(
        1, static_cast<std::size_t>(static_cast<double>(N) * cfg.test_fraction));
    if (test_n >= N) throw std::invalid_argument("train_probe: dataset too small to split");
    std::vector<std::size_t> test_ids(order.begin(), order.begin() + test_n);
    std::vector<std::size_t> train_ids(order.begin() + test_n, order.end());

    std::unordered_set<int> classes_present;
    for (std::size_t i : train_ids) classes_present.insert(labels[i]);
    if (classes_present.size() < 2)
        throw std::invalid_argument("train_probe: fewer than 2 classes present");

    const std::size_t D = features.X.cols();
    std::mt19937_64 init = seeded_rng(cfg.seed, "probe:init");
    const bool mlp = cfg.type == ProbeType::Mlp512;
    const std::size_t H = mlp ? cfg.hidden : 0;

    Tensor W1, b1, W2, b2;
    auto uniform = [&](std::size_t rows, std::size_t cols) {
        Tensor t({rows, cols});
        double bound = 1.0 / std::sqrt(static_cast<double>(cols));
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (double& v : t.data) v = dist(init);
        return t;
    };
    if (mlp) {
        W1 = uniform(H, D);
        b1 = Tensor({H});
        W2 = uniform(C, H);
        b2 = Tensor({C});
    } else {
        W2 = uniform(C, D);
        b2 = Tensor({C});
    }
    std::vector<Tensor*> params = mlp ? std::vector<Tensor*>{&W1, &b1, &W2, &b2}
                                      : std::vector<Tensor*>{&W2, &b2};
    for (Tensor* p : params) p->requires_grad = true;

    auto batch_matrix = [&](const std::vector<std::size_t>& ids, std::size_t from,
                            std::size_t to) {
        Tensor X({to - from, D});
        std::vector<int> y(to - from);
        for (std::size_t i = from; i < to; ++i) {
            std::copy(features.X.data.begin() + ids[i] * D,
                      features.X.data.begin() + (ids[i] + 1) * D,
                      X.data.begin() + (i - from) * D);
            y[i - from] = labels[ids[i]];
        }
        return std::pair{std::move(X), std::move(y)};
    };
    auto forward = [&](Graph& g, const Tensor& X) {
        Var x = g.constant(X);
        if (mlp) x = g.sigmoid(g.affine_rows(x, g.leaf(W1), g.leaf(b1)));
        return g.affine_rows(x, g.leaf(W2), g.leaf(b2));
    };

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        auto erng = seeded_rng(cfg.seed, "probe:epoch:" + std::to_string(epoch));
        std::shuffle(train_ids.begin(), train_ids.end(), erng);
        for (std::size_t start = 0; start < train_ids.size(); start += cfg.batch_size) {
            std::size_t stop = std::min(start + cfg.batch_size, train_ids.size());
            auto [X, y] = batch_matrix(train_ids, start, stop);
            for (Tensor* p : params) p->zero_grad();
            Graph g;
            g.backward(g.cross_entropy_rows(forward(g, X), y));
            for (Tensor* p : params)
                for (std::size_t i = 0; i < p->size(); ++i) p->data[i] -= cfg.lr * p->grad[i];
        }
    }

    auto [Xt, yt] = batch_matrix(test_ids, 0, test_ids.size());
    Graph g;
    const Tensor& logits = g.value(forward(g, Xt));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < Xt.rows(); ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < C; ++j)
            if (logits.at(i, j) > logits.at(i, best)) best = j;
        if (static_cast<int>(best) == yt[i]) ++correct;
    }
    ProbeResult res;
    res.accuracy = static_cast<double>(correct) / static_cast<double>(Xt.rows());
    res.train_n = train_ids.size();
    res.test_n = test_ids.size();
    return res;
}

// ---------------------------------------------------------- auxiliary tasks

int length_bin(std::size_t len) {
    static constexpr std::size_t bounds[] = {5, 8, 12, 16, 20, 25, 30};
    for (int b = 0; b < 7; ++b)
        if (len <= bounds[b]) return b;
    return 7;
}

double aux_length(const std::vector<std::vector<int>>& sentences, MTLModel& model,
                  const EmbeddingTable& table, const TagSpec& tag, const ProbeConfig& cfg) {
    FeatureMatrix fm = extract_sentence_vectors(sentences, model, table, tag);
    std::vector<int> labels;
    labels.reserve(sentences.size());
    for (const auto& s : sentences) labels.push_back(length_bin(s.size()));
    ProbeConfig pc = cfg;
    pc.type = ProbeType::Mlp512;
    return train_probe(fm, labels, pc).accuracy;
}

namespace {

// corpus-frequency deciles; ties broken by token id for determinism
std::vector<int> frequency_decile(const std::vector<std::vector<int>>& sentences,
                                  std::size_t vocab_size) {
    std::vector<std::size_t> freq(vocab_size, 0);
    for (const auto& s : sentences)
        for (int id : s)
            if (id != Vocabulary::kPad) ++freq[static_cast<std::size_t>(id)];
    std::vector<int> present;
    for (std::size_t id = 0; id < vocab_size; ++id)
        if (freq[id] > 0) present.push_back(static_cast<int>(id));
    std::sort(present.begin(), present.end(), [&](int a, int b) {
        if (freq[static_cast<std::size_t>(a)] != freq[static_cast<std::size_t>(b)])
            return freq[static_cast<std::size_t>(a)] < freq[static_cast<std::size_t>(b)];
        return a < b;
    });
    std::vector<int> decile(vocab_size, -1);
    for (std::size_t r = 0; r < present.size(); ++r)
        decile[static_cast<std::size_t>(present[r])] =
            static_cast<int>((r * 10) / std::max<std::size_t>(present.size(), 1));
    return decile;
}

FeatureMatrix with_word_columns(const FeatureMatrix& sv, const EmbeddingTable& table,
                                const std::vector<std::size_t>& row_of,
                                const std::vector<std::vector<int>>& words) {
    std::size_t extra = table.dim() * words[0].size();
    FeatureMatrix out;
    out.tag = sv.tag;
    out.X = Tensor({row_of.size(), sv.X.cols() + extra});
    for (std::size_t i = 0; i < row_of.size(); ++i) {
        std::copy(sv.X.data.begin() + row_of[i] * sv.X.cols(),
                  sv.X.data.begin() + (row_of[i] + 1) * sv.X.cols(),
                  out.X.data.begin() + i * out.X.cols());
        std::size_t off = sv.X.cols();
        for (int w : words[i]) {
            const double* row = table.row(w);
            std::copy(row, row + table.dim(), out.X.data.begin() + i * out.X.cols() + off);
            off += table.dim();
        }
        out.ids.push_back(i);
    }
    return out;
}

}  // namespace

double aux_word_content(const std::vector<std::vector<int>>& sentences, MTLModel& model,
                        const EmbeddingTable& table, const TagSpec& tag,
                        const ProbeConfig& cfg) {
    FeatureMatrix sv = extract_sentence_vectors(sentences, model, table, tag);
    std::vector<int> decile = frequency_decile(sentences, table.weights.rows());
    auto rng = seeded_rng(cfg.seed, "probe:content");

    std::vector<std::size_t> row_of;
    std::vector<std::vector<int>> words;
    std::vector<int> labels;
    for (std::size_t i = 0; i < sentences.size(); ++i) {
        const auto& s = sentences[i];
        std::unordered_set<int> in_sentence(s.begin(), s.end());
        const bool positive = (labels.size() % 2 == 0);  // strict alternation
        if (positive) {
            int w = s[std::uniform_int_distribution<std::size_t>(0, s.size() - 1)(rng)];
            row_of.push_back(i);
            words.push_back({w});
            labels.push_back(1);
        } else {
            // absent word from the same decile as a word of this sentence
            int anchor = s[std::uniform_int_distribution<std::size_t>(0, s.size() - 1)(rng)];
            std::vector<int> candidates;
            for (std::size_t id = 2; id < table.weights.rows(); ++id)
                if (decile[id] == decile[static_cast<std::size_t>(anchor)] &&
                    !in_sentence.count(static_cast<int>(id)))
                    candidates.push_back(static_cast<int>(id));
            if (candidates.empty()) continue;  // sentence covers its whole decile
            int w = candidates[std::uniform_int_distribution<std::size_t>(
                0, candidates.size() - 1)(rng)];
            row_of.push_back(i);
            words.push_back({w});
            labels.push_back(0);
        }
    }
    if (labels.size() < 4) throw data_error("aux_word_content: not enough usable sentences");
    FeatureMatrix fm = with_word_columns(sv, table, row_of, words);
    ProbeConfig pc = cfg;
    pc.type = ProbeType::Mlp512;
    return train_probe(fm, labels, pc).accuracy;
}

namespace {

struct OrderInstances {
    std::vector<std::size_t> row_of;
    std::vector<std::vector<int>> words;
    std::vector<int> labels;
};

OrderInstances order_instances(const std::vector<std::vector<int>>& sentences,
                               std::uint64_t seed) {
    auto rng = seeded_rng(seed, "probe:order");
    OrderInstances out;
    for (std::size_t i = 0; i < sentences.size(); ++i) {
        const auto& s = sentences[i];
        std::vector<int> distinct;
        std::unordered_set<int> seen;
        for (int id : s)
            if (seen.insert(id).second) distinct.push_back(id);
        if (distinct.size() < 2) continue;  // degenerate sentence
        std::size_t ai = std::uniform_int_distribution<std::size_t>(0, distinct.size() - 1)(rng);
        std::size_t bi = ai;
        while (bi == ai)
            bi = std::uniform_int_distribution<std::size_t>(0, distinct.size() - 1)(rng);
        int a = distinct[ai], b = distinct[bi];
        auto first_pos = [&](int w) { return std::find(s.begin(), s.end(), w) - s.begin(); };
        int label = first_pos(a) < first_pos(b) ? 1 : 0;
        // balance by swapping the pair orientation on alternating instances
        if (out.labels.size() % 2 == 1) {
            std::swap(a, b);
            label = 1 - label;
        }
        out.row_of.push_back(i);
        out.words.push_back({a, b});
        out.labels.push_back(label);
    }
    if (out.labels.size() < 4) throw data_error("aux_word_order: not enough usable sentences");
    return out;
}

}  // namespace

double aux_word_order(const std::vector<std::vector<int>>& sentences, MTLModel& model,
                      const EmbeddingTable& table, const TagSpec& tag, const ProbeConfig& cfg) {
    FeatureMatrix sv = extract_sentence_vectors(sentences, model, table, tag);
    OrderInstances inst = order_instances(sentences, cfg.seed);
    FeatureMatrix fm = with_word_columns(sv, table, inst.row_of, inst.words);
    ProbeConfig pc = cfg;
    pc.type = ProbeType::Mlp512;
    return train_probe(fm, inst.labels, pc).accuracy;
}

double aux_word_order_bag_baseline(const std::vector<std::vector<int>>& sentences,
                                   const EmbeddingTable& table, const ProbeConfig& cfg) {
    FeatureMatrix sv = bag_of_embeddings(sentences, table);
    OrderInstances inst = order_instances(sentences, cfg.seed);
    FeatureMatrix fm = with_word_columns(sv, table, inst.row_of, inst.words);
    ProbeConfig pc = cfg;
    pc.type = ProbeType::Mlp512;
    return train_probe(fm, inst.labels, pc).accuracy;
}

// ------------------------------------------------------- similarity scoring

std::vector<ScoredPair> load_scored_pairs(const std::string& path, const Vocabulary& vocab) {
    std::ifstream in(path);
    if (!in) throw data_error("load_scored_pairs: cannot open " + path);
    std::vector<ScoredPair> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const std::string where = path + " line " + std::to_string(lineno);
        std::size_t t1 = line.find('\t');
        std::size_t t2 = (t1 == std::string::npos) ? std::string::npos : line.find('\t', t1 + 1);
        if (t1 == std::string::npos || t2 == std::string::npos)
            throw data_error(where + ": expected `score<TAB>sentence1<TAB>sentence2`");
        ScoredPair sp;
        std::string score = line.substr(0, t1);
        const char* b = score.data();
        auto [ptr, ec] = std::from_chars(b, b + score.size(), sp.gold);
        if (ec != std::errc() || ptr != b + score.size())
            throw data_error(where + ": unreadable score '" + score + "'");
        for (const auto& tok : textdata::tokenize(line.substr(t1 + 1, t2 - t1 - 1)))
            sp.tokens1.push_back(vocab.index(tok));
        for (const auto& tok : textdata::tokenize(line.substr(t2 + 1)))
            sp.tokens2.push_back(vocab.index(tok));
        if (sp.tokens1.empty() || sp.tokens2.empty())
            throw data_error(where + ": empty sentence field");
        out.push_back(std::move(sp));
    }
    return out;
}

double cosine(const Tensor& a, const Tensor& b) {
    if (a.size() != b.size()) throw std::invalid_argument("cosine: length mismatch");
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a.data[i] * b.data[i];
        na += a.data[i] * a.data[i];
        nb += b.data[i] * b.data[i];
    }
    if (na == 0.0 || nb == 0.0) throw numeric_error("cosine: zero vector");
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

namespace {

// average ranks with tie handling
std::vector<double> ranks_of(const std::vector<double>& x) {
    std::vector<std::size_t> order(x.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> rank(x.size());
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
        double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
        i = j + 1;
    }
    return rank;
}

}  // namespace

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.size() < 3)
        throw std::invalid_argument("spearman: need at least 3 paired values");
    std::vector<double> ra = ranks_of(a), rb = ranks_of(b);
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= static_cast<double>(ra.size());
    mb /= static_cast<double>(rb.size());
    double cov = 0, va = 0, vb = 0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        cov += (ra[i] - ma) * (rb[i] - mb);
        va += (ra[i] - ma) * (ra[i] - ma);
        vb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (va == 0.0 || vb == 0.0) throw numeric_error("spearman: constant ranks");
    return cov / std::sqrt(va * vb);
}

double cosine_eval(const std::vector<ScoredPair>& pairs, MTLModel& model,
                   const EmbeddingTable& table, const TagSpec& tag) {
    if (pairs.size() < 3) throw std::invalid_argument("cosine_eval: need at least 3 pairs");
    int priv = private_index(tag, model, "");
    std::vector<double> sims, gold;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        Tensor s1 = tagged_vector(pairs[i].tokens1, model, table, tag, priv);
        Tensor s2 = tagged_vector(pairs[i].tokens2, model, table, tag, priv);
        try {
            sims.push_back(cosine(s1, s2));
        } catch (const numeric_error&) {
            throw numeric_error("cosine_eval: zero vector in pair " + std::to_string(i));
        }
        gold.push_back(pairs[i].gold);
    }
    return spearman(sims, gold);
}

std::string probe_report_csv(const std::vector<ProbeReportRow>& rows) {
    std::ostringstream out;
    out << "probe,encoder_tag,metric,value,seed\n";
    char buf[40];
    for (const ProbeReportRow& r : rows) {
        std::snprintf(buf, sizeof(buf), "%.17g", r.value);
        out << r.probe << ',' << r.encoder_tag << ',' << r.metric << ',' << buf << ',' << r.seed
            << '\n';
    }
    return out.str();
}

void write_probe_report(const std::string& path, const std::vector<ProbeReportRow>& rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw data_error("write_probe_report: cannot open " + path);
    out << probe_report_csv(rows);
}

}  // namespace mtlse::probes
