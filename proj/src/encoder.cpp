#include "mtlse/encoder.hpp"

#include <cmath>
#include <stdexcept>

namespace mtlse::encoder {

std::vector<std::pair<std::string, Tensor*>> EncoderParams::named_params(
    const std::string& prefix) {
    return {{prefix + ".fw.W", &fw_W},
            {prefix + ".fw.b", &fw_b},
            {prefix + ".bw.W", &bw_W},
            {prefix + ".bw.b", &bw_b}};
}

void EncoderParams::set_requires_grad(bool on) {
    fw_W.requires_grad = fw_b.requires_grad = on;
    bw_W.requires_grad = bw_b.requires_grad = on;
}

EncoderParams init_encoder(std::size_t d_w, std::size_t d, std::mt19937_64& rng) {
    if (d_w == 0 || d == 0) throw std::invalid_argument("init_encoder: zero dimension");
    EncoderParams p;
    p.input_dim = d_w;
    p.hidden_dim = d;
    const std::size_t fan_in = d_w + d;
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    auto gate_matrix = [&] {
        Tensor W({4 * d, fan_in});
        for (double& v : W.data) v = dist(rng);
        return W;
    };
    auto gate_bias = [&] {
        Tensor b({4 * d});
        for (std::size_t j = d; j < 2 * d; ++j) b.data[j] = 1.0;  // forget gate
        return b;
    };
    p.fw_W = gate_matrix();
    p.fw_b = gate_bias();
    p.bw_W = gate_matrix();
    p.bw_b = gate_bias();
    return p;
}

std::vector<Tensor> embed_rows(const std::vector<int>& tokens, const EmbeddingTable& table) {
    if (tokens.empty()) throw std::invalid_argument("embed_rows: empty token sequence");
    std::vector<Tensor> rows;
    rows.reserve(tokens.size());
    const std::size_t d_w = table.dim();
    for (int id : tokens) {
        if (id < 0 || static_cast<std::size_t>(id) >= table.weights.rows())
            throw std::invalid_argument("embed_rows: token id out of range");
        const double* src = table.row(id);
        rows.push_back(Tensor({d_w}, std::vector<double>(src, src + d_w)));
    }
    return rows;
}

namespace {

// One direction over rows in the given order; returns per-step h (1-D, d).
std::vector<Var> lstm_direction(Graph& g, const std::vector<const Tensor*>& xs, Tensor& W,
                                Tensor& b, std::size_t d) {
    Var Wl = g.leaf(W);
    Var bl = g.leaf(b);
    Var h = g.constant(Tensor({d}));
    Var c = g.constant(Tensor({d}));
    std::vector<Var> out;
    out.reserve(xs.size());
    for (const Tensor* x : xs) {
        Var z = g.concat({g.constant(*x), h});
        Var pre = g.linear(Wl, z, bl);
        Var i = g.sigmoid(g.slice(pre, 0, d));
        Var f = g.sigmoid(g.slice(pre, d, 2 * d));
        Var cand = g.tanh(g.slice(pre, 2 * d, 3 * d));
        Var o = g.sigmoid(g.slice(pre, 3 * d, 4 * d));
        c = g.add(g.mul(f, c), g.mul(i, cand));
        h = g.mul(o, g.tanh(c));
        out.push_back(h);
    }
    return out;
}

}  // namespace

Var bilstm_hidden(Graph& g, const std::vector<Tensor>& x_rows, EncoderParams& params) {
    if (x_rows.empty()) throw std::invalid_argument("bilstm_hidden: empty input");
    const std::size_t T = x_rows.size();
    const std::size_t d = params.hidden_dim;
    for (const Tensor& x : x_rows)
        if (x.rank() != 1 || x.size() != params.input_dim)
            throw std::invalid_argument("bilstm_hidden: input dim does not match encoder");

    std::vector<const Tensor*> fwd(T), bwd(T);
    for (std::size_t t = 0; t < T; ++t) {
        fwd[t] = &x_rows[t];
        bwd[t] = &x_rows[T - 1 - t];
    }
    std::vector<Var> hf = lstm_direction(g, fwd, params.fw_W, params.fw_b, d);
    std::vector<Var> hb = lstm_direction(g, bwd, params.bw_W, params.bw_b, d);

    std::vector<Var> rows;
    rows.reserve(T);
    for (std::size_t t = 0; t < T; ++t) rows.push_back(g.concat({hf[t], hb[T - 1 - t]}));
    return g.concat_rows(rows);
}

Var max_pool(Graph& g, Var H) { return g.reduce_max(H); }

Var max_pool(Graph& g, Var H, const std::vector<bool>& mask) {
    const Tensor& h = g.value(H);
    if (h.rank() != 2) throw std::invalid_argument("max_pool: rank-2 hidden matrix required");
    if (mask.size() != h.rows()) throw std::invalid_argument("max_pool: mask length mismatch");
    std::vector<Var> keep;
    for (std::size_t t = 0; t < mask.size(); ++t)
        if (mask[t]) keep.push_back(g.row(H, t));
    if (keep.empty()) throw std::invalid_argument("max_pool: fully masked input");
    if (keep.size() == mask.size()) return g.reduce_max(H);
    return g.reduce_max(g.concat_rows(keep));
}

Var pair_features(Graph& g, Var s1, Var s2) {
    const Tensor& a = g.value(s1);
    const Tensor& b = g.value(s2);
    if (a.rank() != 1 || b.rank() != 1 || a.size() != b.size())
        throw std::invalid_argument("pair_features: sentence vectors must be rank-1 and equal");
    return g.concat({s1, s2, g.sub(s1, s2), g.mul(s1, s2)});
}

Var encode_sentence_graph(Graph& g, const std::vector<int>& tokens, const EmbeddingTable& table,
                          EncoderParams& params) {
    // padding ids carry no content and are skipped outright
    std::vector<int> real;
    real.reserve(tokens.size());
    for (int id : tokens)
        if (id != Vocabulary::kPad) real.push_back(id);
    if (real.empty())
        throw std::invalid_argument("encode_sentence: no non-padding tokens");
    return g.reduce_max(bilstm_hidden(g, embed_rows(real, table), params));
}

// --------------------------------------------------------- tensor interfaces

HiddenStates bilstm_forward(const Tensor& embedded, const std::vector<bool>& mask,
                            EncoderParams& params) {
    if (embedded.rank() != 2) throw std::invalid_argument("bilstm_forward: rank-2 input required");
    const std::size_t T = embedded.rows();
    if (mask.size() != T) throw std::invalid_argument("bilstm_forward: mask length mismatch");
    if (embedded.cols() != params.input_dim)
        throw std::invalid_argument("bilstm_forward: input dim does not match encoder");

    // the recurrence runs over the unmasked subsequence; masked rows stay zero
    std::vector<Tensor> rows;
    std::vector<std::size_t> where;
    for (std::size_t t = 0; t < T; ++t)
        if (mask[t]) {
            const double* src = embedded.data.data() + t * embedded.cols();
            rows.push_back(
                Tensor({embedded.cols()}, std::vector<double>(src, src + embedded.cols())));
            where.push_back(t);
        }

    HiddenStates out;
    out.mask = mask;
    out.H = Tensor({T, params.output_dim()});
    if (!rows.empty()) {
        Graph g;
        const Tensor& h = g.value(bilstm_hidden(g, rows, params));
        for (std::size_t k = 0; k < where.size(); ++k)
            std::copy(h.data.begin() + k * h.cols(), h.data.begin() + (k + 1) * h.cols(),
                      out.H.data.begin() + where[k] * h.cols());
    }
    return out;
}

Tensor max_pool(const HiddenStates& h) {
    Graph g;
    return g.value(max_pool(g, g.constant(h.H), h.mask));
}

Tensor pair_features(const Tensor& s1, const Tensor& s2) {
    Graph g;
    return g.value(pair_features(g, g.constant(s1), g.constant(s2)));
}

Tensor encode_sentence(const std::vector<int>& tokens, const EmbeddingTable& table,
                       EncoderParams& params) {
    Graph g;
    return g.value(encode_sentence_graph(g, tokens, table, params));
}

Tensor encode_sentence(const std::vector<std::string>& tokens, const Vocabulary& vocab,
                       const EmbeddingTable& table, EncoderParams& params) {
    std::vector<int> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) ids.push_back(vocab.index(t));
    return encode_sentence(ids, table, params);
}

}  // namespace mtlse::encoder
