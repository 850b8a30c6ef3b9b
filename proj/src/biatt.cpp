#include "mtlse/biatt.hpp"

#include <stdexcept>

namespace mtlse::biatt {

Var affinity(Graph& g, Var X, Var Y) {
    const Tensor& x = g.value(X);
    const Tensor& y = g.value(Y);
    if (x.rank() != 2 || y.rank() != 2 || x.cols() != y.cols())
        throw std::invalid_argument("affinity: token matrices must share the vector dimension");
    return g.matmul(X, g.transpose(Y));
}

std::pair<Var, Var> attention_weights(Graph& g, Var A) {
    const Tensor& a = g.value(A);
    if (a.rank() != 2) throw std::invalid_argument("attention_weights: rank-2 affinity required");
    a.check_finite("attention_weights input");
    Var A_x = g.softmax(A, 0);
    Var A_y = g.softmax(g.transpose(A), 0);
    return {A_x, A_y};
}

std::pair<Var, Var> context_summaries(Graph& g, Var X, Var Y, Var A_x, Var A_y) {
    const Tensor& ax = g.value(A_x);
    const Tensor& ay = g.value(A_y);
    const Tensor& x = g.value(X);
    const Tensor& y = g.value(Y);
    if (ax.rows() != x.rows() || ay.rows() != y.rows() || ax.cols() != y.rows() ||
        ay.cols() != x.rows())
        throw std::invalid_argument("context_summaries: attention shape mismatch");
    Var C_x = g.matmul(g.transpose(A_x), X);  // T_y x d''
    Var C_y = g.matmul(g.transpose(A_y), Y);  // T_x x d''
    return {C_x, C_y};
}

Var augment(Graph& g, Var X, Var C_y) {
    const Tensor& x = g.value(X);
    const Tensor& c = g.value(C_y);
    if (x.shape != c.shape)
        throw std::invalid_argument("augment: X and its context summary must match");
    return g.hconcat({X, g.sub(X, C_y), g.mul(X, C_y)});
}

Var pool_multi(Graph& g, Var X_aug, Var w) {
    const Tensor& x = g.value(X_aug);
    const Tensor& wv = g.value(w);
    if (x.rank() != 2 || wv.rank() != 1 || wv.size() != x.cols())
        throw std::invalid_argument("pool_multi: scoring vector must match the row width");
    Var scores = g.linear(X_aug, w, g.constant(Tensor({x.rows()})));
    Var beta = g.softmax(scores);
    Var self = g.linear(g.transpose(X_aug), beta, g.constant(Tensor({x.cols()})));
    return g.concat({g.reduce_max(X_aug), g.reduce_mean(X_aug), g.reduce_min(X_aug), self});
}

Var biatt_logits(Graph& g, Var X, Var Y, BiattentiveParams& params, ClassifierHead& head) {
    Var A = affinity(g, X, Y);
    auto [A_x, A_y] = attention_weights(g, A);
    auto [C_x, C_y] = context_summaries(g, X, Y, A_x, A_y);
    Var s_x = pool_multi(g, augment(g, X, C_y), g.leaf(params.w1));
    Var s_y = pool_multi(g, augment(g, Y, C_x), g.leaf(params.w2));
    return mtl::head_logits(g, head, g.concat({s_x, s_y}));
}

Tensor biatt_classify(const Tensor& X, const Tensor& Y, BiattentiveParams& params,
                      ClassifierHead& head) {
    Graph g;
    return g.value(biatt_logits(g, g.constant(X), g.constant(Y), params, head));
}

namespace {

Tensor keep_rows(const Tensor& X, const std::vector<bool>& mask) {
    if (mask.size() != X.rows())
        throw std::invalid_argument("biatt_classify: mask length mismatch");
    std::size_t keep = 0;
    for (bool m : mask) keep += m ? 1 : 0;
    if (keep == 0) throw std::invalid_argument("biatt_classify: fully masked sentence");
    Tensor out({keep, X.cols()});
    std::size_t r = 0;
    for (std::size_t t = 0; t < mask.size(); ++t) {
        if (!mask[t]) continue;
        std::copy(X.data.begin() + t * X.cols(), X.data.begin() + (t + 1) * X.cols(),
                  out.data.begin() + r * X.cols());
        ++r;
    }
    return out;
}

}  // namespace

Tensor biatt_classify(const Tensor& X, const std::vector<bool>& mask_x, const Tensor& Y,
                      const std::vector<bool>& mask_y, BiattentiveParams& params,
                      ClassifierHead& head) {
    return biatt_classify(keep_rows(X, mask_x), keep_rows(Y, mask_y), params, head);
}

}  // namespace mtlse::biatt
