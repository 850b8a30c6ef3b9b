#include "mtlse/mtl.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include "mtlse/biatt.hpp"
#include "mtlse/errors.hpp"
#include "mtlse/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian");

namespace mtlse::mtl {

std::string framework_name(Framework f) {
    switch (f) {
        case Framework::FS: return "FS";
        case Framework::SP: return "SP";
        case Framework::ASP: return "ASP";
    }
    return "?";
}

Framework framework_from(const std::string& name) {
    if (name == "FS") return Framework::FS;
    if (name == "SP") return Framework::SP;
    if (name == "ASP") return Framework::ASP;
    throw config_error("unknown framework '" + name + "' (expected FS, SP or ASP)");
}

// ---------------------------------------------------------------- params

std::vector<std::pair<std::string, Tensor*>> ClassifierHead::named_params(
    const std::string& prefix) {
    return {{prefix + ".W1", &W1}, {prefix + ".b1", &b1}, {prefix + ".W2", &W2},
            {prefix + ".b2", &b2}};
}

void ClassifierHead::set_requires_grad(bool on) {
    W1.requires_grad = b1.requires_grad = W2.requires_grad = b2.requires_grad = on;
}

std::vector<std::pair<std::string, Tensor*>> DiscriminatorParams::named_params(
    const std::string& prefix) {
    return {{prefix + ".W", &W}, {prefix + ".b", &b}};
}

void DiscriminatorParams::set_requires_grad(bool on) {
    W.requires_grad = b.requires_grad = on;
}

std::vector<std::pair<std::string, Tensor*>> BiattentiveParams::named_params(
    const std::string& prefix) {
    return {{prefix + ".w1", &w1}, {prefix + ".w2", &w2}};
}

void BiattentiveParams::set_requires_grad(bool on) {
    w1.requires_grad = w2.requires_grad = on;
}

namespace {

Tensor uniform_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
    Tensor W({rows, cols});
    const double bound = 1.0 / std::sqrt(static_cast<double>(cols));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& v : W.data) v = dist(rng);
    return W;
}

}  // namespace

ClassifierHead init_head(std::size_t in_dim, std::size_t h_mlp, std::size_t classes,
                         std::mt19937_64& rng) {
    if (classes < 2) throw std::invalid_argument("init_head: need at least 2 classes");
    ClassifierHead h;
    h.W1 = uniform_matrix(h_mlp, in_dim, rng);
    h.b1 = Tensor({h_mlp});
    h.W2 = uniform_matrix(classes, h_mlp, rng);
    h.b2 = Tensor({classes});
    return h;
}

DiscriminatorParams init_discriminator(std::size_t d_s, std::size_t tasks,
                                       std::mt19937_64& rng) {
    if (tasks < 2) throw std::invalid_argument("init_discriminator: need at least 2 tasks");
    DiscriminatorParams d;
    d.W = uniform_matrix(tasks, d_s, rng);
    d.b = Tensor({tasks});
    return d;
}

// ----------------------------------------------------------------- model

int MTLModel::task_index(const std::string& name) const {
    for (std::size_t k = 0; k < task_names.size(); ++k)
        if (task_names[k] == name) return static_cast<int>(k);
    return -1;
}

std::vector<std::pair<std::string, Tensor*>> MTLModel::named_params() {
    std::vector<std::pair<std::string, Tensor*>> out;
    auto append = [&](std::vector<std::pair<std::string, Tensor*>> more) {
        for (auto& p : more) out.push_back(std::move(p));
    };
    append(shared_enc.named_params("shared"));
    for (std::size_t k = 0; k < task_names.size(); ++k) {
        if (has_private()) append(private_enc[k].named_params("private:" + task_names[k]));
        append(heads[k].named_params("head:" + task_names[k]));
    }
    if (disc) append(disc->named_params("disc"));
    if (biatt_pool) append(biatt_pool->named_params("biatt"));
    return out;
}

void MTLModel::set_requires_grad(bool on) {
    for (auto& [name, t] : named_params()) t->requires_grad = on;
}

void MTLModel::zero_grads() {
    for (auto& [name, t] : named_params()) t->zero_grad();
}

MTLModel init_model(const ModelShape& shape, std::uint64_t seed) {
    if (shape.task_names.empty()) throw std::invalid_argument("init_model: no tasks");
    if (shape.task_names.size() != shape.task_classes.size())
        throw std::invalid_argument("init_model: task name/class count mismatch");
    std::unordered_set<std::string> seen;
    for (const auto& name : shape.task_names) {
        if (name.empty() || name.find_first_of(" \t") != std::string::npos)
            throw std::invalid_argument("init_model: bad task name '" + name + "'");
        if (!seen.insert(name).second)
            throw std::invalid_argument("init_model: duplicate task '" + name + "'");
    }
    if (shape.framework != Framework::ASP && (shape.beta != 0.0 || shape.gamma != 0.0))
        throw std::invalid_argument("init_model: beta/gamma are ASP-only weights");
    if (shape.beta < 0.0 || shape.gamma < 0.0)
        throw std::invalid_argument("init_model: negative loss weights");
    if (shape.framework == Framework::ASP && shape.task_names.size() < 2)
        throw std::invalid_argument("init_model: adversarial training needs at least 2 tasks");
    if (shape.biatt && shape.framework == Framework::FS)
        throw std::invalid_argument("init_model: biattentive pooling needs private encoders");

    MTLModel m;
    m.framework = shape.framework;
    m.beta = shape.beta;
    m.gamma = shape.gamma;
    m.d = shape.d;
    m.d_w = shape.d_w;
    m.h_mlp = shape.h_mlp;
    m.task_names = shape.task_names;

    auto shared_rng = seeded_rng(seed, "init:shared");
    m.shared_enc = encoder::init_encoder(shape.d_w, shape.d, shared_rng);

    const std::size_t sent_dim =
        shape.framework == Framework::FS ? 2 * shape.d : 4 * shape.d;
    const std::size_t head_in = (shape.biatt ? 24 : 4) * sent_dim;
    for (std::size_t k = 0; k < shape.task_names.size(); ++k) {
        if (shape.framework != Framework::FS) {
            auto rng = seeded_rng(seed, "init:private:" + shape.task_names[k]);
            m.private_enc.push_back(encoder::init_encoder(shape.d_w, shape.d, rng));
        }
        auto rng = seeded_rng(seed, "init:head:" + shape.task_names[k]);
        m.heads.push_back(init_head(head_in, shape.h_mlp, shape.task_classes[k], rng));
    }
    if (shape.framework == Framework::ASP) {
        auto rng = seeded_rng(seed, "init:disc");
        m.disc = init_discriminator(2 * shape.d, shape.task_names.size(), rng);
    }
    if (shape.biatt) {
        BiattentiveParams bp;
        bp.w1 = Tensor({3 * sent_dim});
        bp.w2 = Tensor({3 * sent_dim});
        m.biatt_pool = std::move(bp);
    }
    return m;
}

// ----------------------------------------------------------- graph builders

Var head_logits(Graph& g, ClassifierHead& head, Var features) {
    Var hidden = g.sigmoid(g.linear(g.leaf(head.W1), features, g.leaf(head.b1)));
    return g.linear(g.leaf(head.W2), hidden, g.leaf(head.b2));
}

EncodedSentence encode_for_task(Graph& g, const std::vector<int>& tokens,
                                const EmbeddingTable& table, MTLModel& model,
                                std::size_t task_idx) {
    if (task_idx >= model.num_tasks())
        throw std::invalid_argument("encode_for_task: task index out of range");
    std::vector<int> real;
    real.reserve(tokens.size());
    for (int id : tokens)
        if (id != textdata::Vocabulary::kPad) real.push_back(id);
    if (real.empty()) throw std::invalid_argument("encode_for_task: no non-padding tokens");

    std::vector<Tensor> rows = encoder::embed_rows(real, table);
    EncodedSentence out;
    out.H_shared = encoder::bilstm_hidden(g, rows, model.shared_enc);
    out.s_shared = g.reduce_max(out.H_shared);
    if (model.has_private()) {
        out.H_private = encoder::bilstm_hidden(g, rows, model.private_enc[task_idx]);
        out.s = g.concat({out.s_shared, g.reduce_max(*out.H_private)});
    } else {
        out.s = out.s_shared;
    }
    return out;
}

Var discriminator_graph(Graph& g, DiscriminatorParams& disc, Var s_shared) {
    return g.softmax(g.linear(g.leaf(disc.W), s_shared, g.leaf(disc.b)));
}

Var diff_loss_graph(Graph& g, Var H_s, Var H_p, bool normalize) {
    const Tensor& hs = g.value(H_s);
    const Tensor& hp = g.value(H_p);
    if (hs.rank() != 2 || hp.rank() != 2 || hs.rows() != hp.rows())
        throw std::invalid_argument("diff_loss: hidden matrices must share the row count");
    Var a = normalize ? g.normalize_rows(H_s) : H_s;
    Var b = normalize ? g.normalize_rows(H_p) : H_p;
    Var m = g.matmul(g.transpose(a), b);
    return g.sum(g.mul(m, m));
}

ExampleTerms example_forward(Graph& g, const Example& ex, const EmbeddingTable& table,
                             MTLModel& model, const ForwardOptions& opts) {
    int k = model.task_index(ex.task);
    if (k < 0) throw std::invalid_argument("example_forward: unknown task '" + ex.task + "'");
    const std::size_t task = static_cast<std::size_t>(k);
    if (ex.label < 0 || static_cast<std::size_t>(ex.label) >= model.heads[task].num_classes())
        throw std::invalid_argument("example_forward: label out of range");

    EncodedSentence e1 = encode_for_task(g, ex.tokens1, table, model, task);
    EncodedSentence e2 = encode_for_task(g, ex.tokens2, table, model, task);

    ExampleTerms terms;
    if (model.biatt_pool) {
        Var X = g.hconcat({e1.H_shared, *e1.H_private});
        Var Y = g.hconcat({e2.H_shared, *e2.H_private});
        terms.logits = biatt::biatt_logits(g, X, Y, *model.biatt_pool, model.heads[task]);
    } else {
        Var v = encoder::pair_features(g, e1.s, e2.s);
        terms.logits = head_logits(g, model.heads[task], v);
    }
    terms.task_ce = g.cross_entropy(terms.logits, static_cast<std::size_t>(ex.label));
    terms.total = terms.task_ce;

    if (model.framework == Framework::ASP && opts.build_adv) {
        // With the reversal boundary in place the adversarial term enters the
        // tape unscaled, so the discriminator trains at full rate (the inner
        // max), while the boundary multiplies the encoder-side gradient by
        // -lambda*beta (the outer min's weighted push-back). Without the
        // boundary the term is a plain beta-weighted summand of the loss.
        const double factor = opts.reverse ? opts.lambda * model.beta : 0.0;
        Var in1 = opts.reverse ? g.grad_reverse(e1.s_shared, factor) : e1.s_shared;
        Var in2 = opts.reverse ? g.grad_reverse(e2.s_shared, factor) : e2.s_shared;
        Var Wd = g.leaf(model.disc->W);
        Var bd = g.leaf(model.disc->b);
        Var ce1 = g.cross_entropy(g.linear(Wd, in1, bd), task);
        Var ce2 = g.cross_entropy(g.linear(Wd, in2, bd), task);
        terms.adv_ce = g.scale(g.add(ce1, ce2), 0.5);
        terms.total = g.add(terms.total,
                            opts.reverse ? *terms.adv_ce : g.scale(*terms.adv_ce, model.beta));
    }
    if (model.has_private() && opts.build_diff) {
        Var d1 = diff_loss_graph(g, e1.H_shared, *e1.H_private, opts.normalize_diff);
        Var d2 = diff_loss_graph(g, e2.H_shared, *e2.H_private, opts.normalize_diff);
        terms.diff = g.scale(g.add(d1, d2), 0.5);
        terms.total = g.add(terms.total, g.scale(*terms.diff, model.gamma));
    }
    return terms;
}

// ------------------------------------------------------- tensor-level ops

namespace {

BatchForward batch_forward(const std::vector<Example>& batch, MTLModel& model,
                           const EmbeddingTable& table, bool keep_hidden) {
    if (batch.empty()) throw std::invalid_argument("forward: empty batch");
    for (const Example& ex : batch)
        if (ex.task != batch.front().task)
            throw std::invalid_argument("forward: mixed-task batch");

    int k0 = model.task_index(batch.front().task);
    if (k0 < 0)
        throw std::invalid_argument("forward: unknown task '" + batch.front().task + "'");

    BatchForward out;
    const std::size_t C = model.heads[static_cast<std::size_t>(k0)].num_classes();
    out.logits = Tensor({batch.size(), C});
    double acc = 0.0;
    ForwardOptions opts;
    opts.build_adv = false;
    opts.build_diff = false;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        Graph g;
        ExampleTerms t = example_forward(g, batch[i], table, model, opts);
        const Tensor& lg = g.value(t.logits);
        std::copy(lg.data.begin(), lg.data.end(), out.logits.data.begin() + i * C);
        acc += g.value(t.task_ce).item();
        if (keep_hidden) {
            Graph g2;
            for (const std::vector<int>* toks : {&batch[i].tokens1, &batch[i].tokens2}) {
                EncodedSentence e =
                    encode_for_task(g2, *toks, table, model, static_cast<std::size_t>(k0));
                out.H_shared.push_back(g2.value(e.H_shared));
                if (e.H_private) out.H_private.push_back(g2.value(*e.H_private));
            }
        }
    }
    out.task_loss = acc / static_cast<double>(batch.size());
    return out;
}

}  // namespace

BatchForward fs_forward(const std::vector<Example>& batch, MTLModel& model,
                        const EmbeddingTable& table) {
    if (model.framework != Framework::FS)
        throw std::invalid_argument("fs_forward: model framework is not FS");
    return batch_forward(batch, model, table, false);
}

BatchForward sp_forward(const std::vector<Example>& batch, MTLModel& model,
                        const EmbeddingTable& table) {
    if (model.framework == Framework::FS)
        throw std::invalid_argument("sp_forward: model framework is FS");
    return batch_forward(batch, model, table, true);
}

Tensor discriminator_forward(const Tensor& s_shared, const DiscriminatorParams& disc) {
    if (s_shared.rank() != 1 || s_shared.size() != disc.W.cols())
        throw std::invalid_argument("discriminator_forward: dimension mismatch");
    Graph g;
    DiscriminatorParams& d = const_cast<DiscriminatorParams&>(disc);
    return g.value(discriminator_graph(g, d, g.constant(s_shared)));
}

double adv_loss(const std::vector<Tensor>& shared_vecs, const std::vector<int>& task_ids,
                const DiscriminatorParams& disc, Framework framework) {
    if (framework != Framework::ASP)
        throw std::invalid_argument("adv_loss: adversarial loss requires the ASP framework");
    if (shared_vecs.size() != task_ids.size() || shared_vecs.empty())
        throw std::invalid_argument("adv_loss: need one task id per sentence vector");
    DiscriminatorParams& d = const_cast<DiscriminatorParams&>(disc);
    double acc = 0.0;
    for (std::size_t i = 0; i < shared_vecs.size(); ++i) {
        Graph g;
        Var logits = g.linear(g.leaf(d.W), g.constant(shared_vecs[i]), g.leaf(d.b));
        acc += g.value(g.cross_entropy(logits, static_cast<std::size_t>(task_ids[i]))).item();
    }
    return acc / static_cast<double>(shared_vecs.size());
}

double diff_loss(const Tensor& H_s, const Tensor& H_p, bool normalize) {
    Graph g;
    return g.value(diff_loss_graph(g, g.constant(H_s), g.constant(H_p), normalize)).item();
}

double diff_loss(const encoder::HiddenStates& H_s, const encoder::HiddenStates& H_p,
                 bool normalize) {
    if (H_s.mask != H_p.mask) throw std::invalid_argument("diff_loss: mask mismatch");
    std::size_t keep = 0;
    for (bool m : H_s.mask) keep += m ? 1 : 0;
    if (keep == 0) throw std::invalid_argument("diff_loss: fully masked input");
    Tensor hs({keep, H_s.H.cols()});
    Tensor hp({keep, H_p.H.cols()});
    std::size_t r = 0;
    for (std::size_t t = 0; t < H_s.mask.size(); ++t) {
        if (!H_s.mask[t]) continue;
        std::copy(H_s.H.data.begin() + t * H_s.H.cols(),
                  H_s.H.data.begin() + (t + 1) * H_s.H.cols(), hs.data.begin() + r * hs.cols());
        std::copy(H_p.H.data.begin() + t * H_p.H.cols(),
                  H_p.H.data.begin() + (t + 1) * H_p.H.cols(), hp.data.begin() + r * hp.cols());
        ++r;
    }
    return diff_loss(hs, hp, normalize);
}

LossBreakdown total_loss(const std::vector<std::pair<std::string, double>>& task_losses,
                         double adv, double diff, double beta, double gamma) {
    if (beta < 0.0 || gamma < 0.0) throw std::invalid_argument("total_loss: negative weights");
    LossBreakdown out;
    out.task_losses = task_losses;
    out.adv = adv;
    out.diff = diff;
    double total = 0.0;
    for (const auto& [name, v] : task_losses) total += v;
    total += beta * adv;
    total += gamma * diff;
    out.total = total;
    return out;
}

std::pair<double, double> recommended_adversarial_weights(std::size_t num_tasks) {
    if (num_tasks < 2)
        throw std::invalid_argument("recommended_adversarial_weights: need at least 2 tasks");
    return num_tasks == 2 ? std::pair{0.01, 0.05} : std::pair{0.005, 0.001};
}

// ----------------------------------------------------------- checkpointing

void save_checkpoint(const MTLModel& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw data_error("save_checkpoint: cannot open " + path + " for writing");
    out << "MTLSE1 " << framework_name(model.framework) << ' ' << model.num_tasks() << ' '
        << model.d << ' ' << model.d_w << ' ' << model.h_mlp << '\n';
    auto write_record = [&](const std::string& name, const double* data, std::size_t len) {
        out << name << ' ' << len << '\n';
        out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(len * 8));
    };
    MTLModel& m = const_cast<MTLModel&>(model);
    for (auto& [name, t] : m.named_params()) write_record(name, t->data.data(), t->size());
    write_record("beta", &model.beta, 1);
    write_record("gamma", &model.gamma, 1);
    if (!out) throw data_error("save_checkpoint: write failed for " + path);
}

MTLModel load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data_error("load_checkpoint: cannot open " + path);

    std::string header;
    if (!std::getline(in, header)) throw data_error("load_checkpoint: " + path + ": empty file");
    std::istringstream hs(header);
    std::string magic, fw;
    std::size_t K = 0, d = 0, d_w = 0, h_mlp = 0;
    hs >> magic >> fw >> K >> d >> d_w >> h_mlp;
    if (magic != "MTLSE1" || hs.fail())
        throw data_error("load_checkpoint: " + path + ": bad magic/header");
    Framework framework = framework_from(fw);
    if (K == 0 || d == 0 || d_w == 0 || h_mlp == 0)
        throw data_error("load_checkpoint: " + path + ": bad header dimensions");

    std::vector<std::pair<std::string, std::vector<double>>> records;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream rs(line);
        std::string name;
        std::size_t len = 0;
        rs >> name >> len;
        if (rs.fail() || name.empty() || len == 0)
            throw data_error("load_checkpoint: " + path + ": bad record header '" + line + "'");
        std::vector<double> vals(len);
        in.read(reinterpret_cast<char*>(vals.data()), static_cast<std::streamsize>(len * 8));
        if (static_cast<std::size_t>(in.gcount()) != len * 8)
            throw data_error("load_checkpoint: " + path + ": truncated record '" + name + "'");
        records.emplace_back(name, std::move(vals));
    }

    // task order is the order of first appearance in the records
    std::vector<std::string> task_names;
    auto task_of = [](const std::string& name) -> std::string {
        for (const char* prefix : {"private:", "head:"}) {
            if (name.rfind(prefix, 0) == 0) {
                std::size_t dot = name.find('.', std::strlen(prefix));
                if (dot != std::string::npos)
                    return name.substr(std::strlen(prefix), dot - std::strlen(prefix));
            }
        }
        return "";
    };
    for (const auto& [name, vals] : records) {
        std::string t = task_of(name);
        if (!t.empty() && std::find(task_names.begin(), task_names.end(), t) == task_names.end())
            task_names.push_back(t);
    }
    if (task_names.size() != K)
        throw data_error("load_checkpoint: " + path + ": header declares " + std::to_string(K) +
                         " tasks, records carry " + std::to_string(task_names.size()));

    MTLModel m;
    m.framework = framework;
    m.d = d;
    m.d_w = d_w;
    m.h_mlp = h_mlp;
    m.task_names = task_names;

    auto find = [&](const std::string& name) -> std::vector<double>& {
        for (auto& [n, vals] : records)
            if (n == name) return vals;
        throw data_error("load_checkpoint: " + path + ": missing record '" + name + "'");
    };
    auto take_tensor = [&](const std::string& name, std::vector<std::size_t> shape) {
        std::vector<double>& vals = find(name);
        if (Tensor::numel(shape) != vals.size())
            throw data_error("load_checkpoint: " + path + ": record '" + name +
                             "' has wrong length");
        return Tensor(std::move(shape), vals);
    };
    auto load_encoder = [&](const std::string& prefix) {
        EncoderParams p;
        p.input_dim = d_w;
        p.hidden_dim = d;
        p.fw_W = take_tensor(prefix + ".fw.W", {4 * d, d_w + d});
        p.fw_b = take_tensor(prefix + ".fw.b", {4 * d});
        p.bw_W = take_tensor(prefix + ".bw.W", {4 * d, d_w + d});
        p.bw_b = take_tensor(prefix + ".bw.b", {4 * d});
        return p;
    };

    m.shared_enc = load_encoder("shared");
    for (const std::string& task : task_names) {
        if (framework != Framework::FS) m.private_enc.push_back(load_encoder("private:" + task));
        ClassifierHead h;
        std::vector<double>& w1 = find("head:" + task + ".W1");
        if (w1.size() % h_mlp != 0)
            throw data_error("load_checkpoint: " + path + ": head W1 not divisible by h_mlp");
        std::size_t in_dim = w1.size() / h_mlp;
        h.W1 = take_tensor("head:" + task + ".W1", {h_mlp, in_dim});
        h.b1 = take_tensor("head:" + task + ".b1", {h_mlp});
        std::vector<double>& w2 = find("head:" + task + ".W2");
        if (w2.size() % h_mlp != 0)
            throw data_error("load_checkpoint: " + path + ": head W2 not divisible by h_mlp");
        std::size_t classes = w2.size() / h_mlp;
        h.W2 = take_tensor("head:" + task + ".W2", {classes, h_mlp});
        h.b2 = take_tensor("head:" + task + ".b2", {classes});
        m.heads.push_back(std::move(h));
    }
    if (framework == Framework::ASP) {
        DiscriminatorParams dp;
        dp.W = take_tensor("disc.W", {K, 2 * d});
        dp.b = take_tensor("disc.b", {K});
        m.disc = std::move(dp);
    }
    for (const auto& [name, vals] : records) {
        if (name == "biatt.w1") {
            BiattentiveParams bp;
            bp.w1 = take_tensor("biatt.w1", {vals.size()});
            bp.w2 = take_tensor("biatt.w2", {vals.size()});
            m.biatt_pool = std::move(bp);
            break;
        }
    }
    m.beta = find("beta")[0];
    m.gamma = find("gamma")[0];
    return m;
}

}  // namespace mtlse::mtl
