#pragma once

// Reference implementations used as independent oracles by the test and
// acceptance suites. Everything here is deliberately naive (triple loops,
// direct formulas) and shares no code with the library paths it checks.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "mtlse/graph.hpp"
#include "mtlse/tensor.hpp"

namespace oracle {

using mtlse::ndgrad::Tensor;

inline Tensor matmul_ref(const Tensor& a, const Tensor& b) {
    std::size_t m = a.rows(), k = a.cols(), p = b.cols();
    Tensor c({m, p});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < p; ++j) {
            double acc = 0.0;
            for (std::size_t l = 0; l < k; ++l) acc += a.at(i, l) * b.at(l, j);
            c.at(i, j) = acc;
        }
    return c;
}

inline std::vector<double> softmax_ref(const std::vector<double>& x) {
    double m = x[0];
    for (double v : x) m = std::max(m, v);
    double z = 0.0;
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = std::exp(x[i] - m);
        z += out[i];
    }
    for (double& v : out) v /= z;
    return out;
}

inline double cross_entropy_ref(const std::vector<double>& logits, std::size_t label) {
    double m = logits[0];
    for (double v : logits) m = std::max(m, v);
    double z = 0.0;
    for (double v : logits) z += std::exp(v - m);
    return -((logits[label] - m) - std::log(z));
}

// Squared Frobenius norm of Hs^T Hp as a quadruple loop.
inline double diff_loss_ref(const Tensor& hs, const Tensor& hp) {
    double acc = 0.0;
    for (std::size_t i = 0; i < hs.cols(); ++i)
        for (std::size_t j = 0; j < hp.cols(); ++j) {
            double dot = 0.0;
            for (std::size_t t = 0; t < hs.rows(); ++t) dot += hs.at(t, i) * hp.at(t, j);
            acc += dot * dot;
        }
    return acc;
}

inline Tensor l2_normalize_rows_ref(const Tensor& h, double eps = 1e-8) {
    Tensor out = h;
    for (std::size_t i = 0; i < h.rows(); ++i) {
        double nrm = 0.0;
        for (std::size_t j = 0; j < h.cols(); ++j) nrm += h.at(i, j) * h.at(i, j);
        nrm = std::max(std::sqrt(nrm), eps);
        for (std::size_t j = 0; j < h.cols(); ++j) out.at(i, j) = h.at(i, j) / nrm;
    }
    return out;
}

inline Tensor affinity_ref(const Tensor& x, const Tensor& y) {
    Tensor a({x.rows(), y.rows()});
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < y.rows(); ++j) {
            double dot = 0.0;
            for (std::size_t k = 0; k < x.cols(); ++k) dot += x.at(i, k) * y.at(j, k);
            a.at(i, j) = dot;
        }
    return a;
}

// C = A^T X computed as explicit weighted sums.
inline Tensor context_summary_ref(const Tensor& attn, const Tensor& x) {
    Tensor c({attn.cols(), x.cols()});
    for (std::size_t j = 0; j < attn.cols(); ++j)
        for (std::size_t k = 0; k < x.cols(); ++k) {
            double acc = 0.0;
            for (std::size_t i = 0; i < attn.rows(); ++i) acc += attn.at(i, j) * x.at(i, k);
            c.at(j, k) = acc;
        }
    return c;
}

// Central finite differences of a scalar-valued function w.r.t. each entry
// of the given tensors. The function must re-evaluate from current tensor
// contents on every call.
inline std::vector<std::vector<double>> finite_diff(const std::function<double()>& f,
                                                    const std::vector<Tensor*>& params,
                                                    double eps = 1e-5) {
    std::vector<std::vector<double>> grads;
    for (Tensor* p : params) {
        std::vector<double> g(p->size());
        for (std::size_t i = 0; i < p->size(); ++i) {
            double keep = p->data[i];
            p->data[i] = keep + eps;
            double up = f();
            p->data[i] = keep - eps;
            double down = f();
            p->data[i] = keep;
            g[i] = (up - down) / (2.0 * eps);
        }
        grads.push_back(std::move(g));
    }
    return grads;
}

inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

// Central finite differences computed by replaying one recorded graph in
// extended precision. The graph must already contain the loss; `build` is
// not re-run, so structural choices are frozen at the recorded values.
inline std::vector<std::vector<double>> finite_diff_replay(
    const mtlse::ndgrad::Graph& g, mtlse::ndgrad::Var loss,
    const std::vector<Tensor*>& params, double eps = 1e-5) {
    std::vector<std::vector<double>> grads;
    for (Tensor* p : params) {
        std::vector<double> gv(p->size());
        for (std::size_t i = 0; i < p->size(); ++i) {
            long double up = g.replay_shifted(loss, p, i, eps);
            long double down = g.replay_shifted(loss, p, i, -eps);
            gv[i] = static_cast<double>((up - down) / (2.0L * eps));
        }
        grads.push_back(std::move(gv));
    }
    return grads;
}

// Worst relative error between analytic grads (already in p->grad) and
// numeric grads from finite_diff.
inline double max_grad_rel_err(const std::vector<Tensor*>& params,
                               const std::vector<std::vector<double>>& numeric) {
    double worst = 0.0;
    for (std::size_t k = 0; k < params.size(); ++k)
        for (std::size_t i = 0; i < params[k]->size(); ++i)
            worst = std::max(worst, rel_err(params[k]->grad[i], numeric[k][i]));
    return worst;
}

inline Tensor random_tensor(std::vector<std::size_t> shape, std::mt19937_64& rng,
                            double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> dist(lo, hi);
    for (double& v : t.data) v = dist(rng);
    return t;
}

}  // namespace oracle
