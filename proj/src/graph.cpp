#include "mtlse/graph.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "mtlse/errors.hpp"

namespace mtlse::ndgrad {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape != b.shape)
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) +
                                    " vs " + shape_str(b));
}

// softmax of src[0..n) with stride, written to dst.
void softmax_slice(const double* src, double* dst, std::size_t n, std::size_t stride) {
    double m = src[0];
    for (std::size_t i = 1; i < n; ++i) m = std::max(m, src[i * stride]);
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double e = std::exp(src[i * stride] - m);
        dst[i * stride] = e;
        z += e;
    }
    for (std::size_t i = 0; i < n; ++i) dst[i * stride] /= z;
}

double log_sum_exp(const double* x, std::size_t n) {
    double m = x[0];
    for (std::size_t i = 1; i < n; ++i) m = std::max(m, x[i]);
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) z += std::exp(x[i] - m);
    return m + std::log(z);
}

}  // namespace

int Graph::push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

Graph::Node& Graph::at(Var v) {
    require(v.g == this && v.id >= 0 && v.id < static_cast<int>(nodes_.size()),
            "Graph: Var does not belong to this graph");
    return nodes_[v.id];
}

double* Graph::gbuf(int id) {
    if (!needs(id)) return nullptr;
    Node& n = nodes_[id];
    if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), 0.0);
    return n.grad.data();
}

void Graph::clear() {
    nodes_.clear();
    leaf_ids_.clear();
}

Var Graph::leaf(Tensor& t) {
    for (auto& [ptr, id] : leaf_ids_)
        if (ptr == &t) return Var{this, id};
    Node n;
    n.op = Op::Leaf;
    n.value = t;  // copy of the current value; grads go to t.grad
    n.leaf = &t;
    n.needs_grad = t.requires_grad;
    int id = push(std::move(n));
    leaf_ids_.emplace_back(&t, id);
    return Var{this, id};
}

Var Graph::constant(Tensor v) {
    Node n;
    n.op = Op::Constant;
    n.value = std::move(v);
    n.needs_grad = false;
    return Var{this, push(std::move(n))};
}

Var Graph::add(Var a, Var b) {
    Node& na = at(a);
    Node& nb = at(b);
    require_same_shape(na.value, nb.value, "add");
    Node n;
    n.op = Op::Add;
    n.a = a.id;
    n.b = b.id;
    n.needs_grad = na.needs_grad || nb.needs_grad;
    n.value = na.value;
    n.value.requires_grad = false;
    const double* pb = nb.value.data.data();
    for (std::size_t i = 0; i < n.value.size(); ++i) n.value.data[i] += pb[i];
    return Var{this, push(std::move(n))};
}

Var Graph::sub(Var a, Var b) {
    Node& na = at(a);
    Node& nb = at(b);
    require_same_shape(na.value, nb.value, "sub");
    Node n;
    n.op = Op::Sub;
    n.a = a.id;
    n.b = b.id;
    n.needs_grad = na.needs_grad || nb.needs_grad;
    n.value = na.value;
    n.value.requires_grad = false;
    const double* pb = nb.value.data.data();
    for (std::size_t i = 0; i < n.value.size(); ++i) n.value.data[i] -= pb[i];
    return Var{this, push(std::move(n))};
}

Var Graph::mul(Var a, Var b) {
    Node& na = at(a);
    Node& nb = at(b);
    require_same_shape(na.value, nb.value, "mul");
    Node n;
    n.op = Op::Mul;
    n.a = a.id;
    n.b = b.id;
    n.needs_grad = na.needs_grad || nb.needs_grad;
    n.value = na.value;
    n.value.requires_grad = false;
    const double* pb = nb.value.data.data();
    for (std::size_t i = 0; i < n.value.size(); ++i) n.value.data[i] *= pb[i];
    return Var{this, push(std::move(n))};
}

Var Graph::emax(Var a, Var b) {
    Node& na = at(a);
    Node& nb = at(b);
    require_same_shape(na.value, nb.value, "emax");
    Node n;
    n.op = Op::EMax;
    n.a = a.id;
    n.b = b.id;
    n.needs_grad = na.needs_grad || nb.needs_grad;
    n.value = na.value;
    n.value.requires_grad = false;
    const double* pb = nb.value.data.data();
    for (std::size_t i = 0; i < n.value.size(); ++i)
        n.value.data[i] = std::max(n.value.data[i], pb[i]);
    return Var{this, push(std::move(n))};
}

Var Graph::scale(Var a, double c) {
    Node& na = at(a);
    Node n;
    n.op = Op::Scale;
    n.a = a.id;
    n.alpha = c;
    n.needs_grad = na.needs_grad;
    n.value = na.value;
    n.value.requires_grad = false;
    for (double& v : n.value.data) v *= c;
    return Var{this, push(std::move(n))};
}

Var Graph::sigmoid(Var a) {
    Node& na = at(a);
    Node n;
    n.op = Op::Sigmoid;
    n.a = a.id;
    n.needs_grad = na.needs_grad;
    n.value = na.value;
    n.value.requires_grad = false;
    for (double& v : n.value.data) v = 1.0 / (1.0 + std::exp(-v));
    return Var{this, push(std::move(n))};
}

Var Graph::tanh(Var a) {
    Node& na = at(a);
    Node n;
    n.op = Op::Tanh;
    n.a = a.id;
    n.needs_grad = na.needs_grad;
    n.value = na.value;
    n.value.requires_grad = false;
    for (double& v : n.value.data) v = std::tanh(v);
    return Var{this, push(std::move(n))};
}

Var Graph::matmul(Var a, Var b) {
    Node& na = at(a);
    Node& nb = at(b);
    require(na.value.rank() == 2 && nb.value.rank() == 2, "matmul: rank-2 inputs required");
    require(na.value.cols() == nb.value.rows(),
            "matmul: inner dimensions disagree " + shape_str(na.value) + " vs " +
                shape_str(nb.value));
    std::size_t m = na.value.rows(), k = na.value.cols(), p = nb.value.cols();
    Node n;
    n.op = Op::MatMul;
    n.a = a.id;
    n.b = b.id;
    n.needs_grad = na.needs_grad || nb.needs_grad;
    n.value = Tensor({m, p});
    const double* A = na.value.data.data();
    const double* B = nb.value.data.data();
    double* C = n.value.data.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t l = 0; l < k; ++l) {
            double av = A[i * k + l];
            const double* Br = B + l * p;
            double* Cr = C + i * p;
            for (std::size_t j = 0; j < p; ++j) Cr[j] += av * Br[j];
        }
    return Var{this, push(std::move(n))};
}

Var Graph::linear(Var W, Var x, Var b) {
    Node& nw = at(W);
    Node& nx = at(x);
    Node& nb = at(b);
    require(nw.value.rank() == 2 && nx.value.rank() == 1 && nb.value.rank() == 1,
            "linear: W rank-2, x and b rank-1 required");
    std::size_t out = nw.value.rows(), in = nw.value.cols();
    require(nx.value.size() == in, "linear: x length " + std::to_string(nx.value.size()) +
                                       " does not match W cols " + std::to_string(in));
    require(nb.value.size() == out, "linear: b length does not match W rows");
    Node n;
    n.op = Op::Linear;
    n.a = W.id;
    n.b = x.id;
    n.c = b.id;
    n.needs_grad = nw.needs_grad || nx.needs_grad || nb.needs_grad;
    n.value = Tensor({out});
    const double* Wp = nw.value.data.data();
    const double* xp = nx.value.data.data();
    for (std::size_t j = 0; j < out; ++j) {
        double acc = nb.value.data[j];
        const double* Wr = Wp + j * in;
        for (std::size_t k = 0; k < in; ++k) acc += Wr[k] * xp[k];
        n.value.data[j] = acc;
    }
    return Var{this, push(std::move(n))};
}

Var Graph::affine_rows(Var X, Var W, Var b) {
    Node& nx = at(X);
    Node& nw = at(W);
    Node& nb = at(b);
    require(nx.value.rank() == 2 && nw.value.rank() == 2 && nb.value.rank() == 1,
            "affine_rows: X and W rank-2, b rank-1 required");
    std::size_t N = nx.value.rows(), in = nx.value.cols();
    std::size_t out = nw.value.rows();
    require(nw.value.cols() == in, "affine_rows: W cols do not match X cols");
    require(nb.value.size() == out, "affine_rows: b length does not match W rows");
    Node n;
    n.op = Op::AffineRows;
    n.a = X.id;
    n.b = W.id;
    n.c = b.id;
    n.needs_grad = nx.needs_grad || nw.needs_grad || nb.needs_grad;
    n.value = Tensor({N, out});
    const double* Xp = nx.value.data.data();
    const double* Wp = nw.value.data.data();
    for (std::size_t i = 0; i < N; ++i) {
        const double* xr = Xp + i * in;
        double* yr = n.value.data.data() + i * out;
        for (std::size_t j = 0; j < out; ++j) {
            double acc = nb.value.data[j];
            const double* Wr = Wp + j * in;
            for (std::size_t k = 0; k < in; ++k) acc += Wr[k] * xr[k];
            yr[j] = acc;
        }
    }
    return Var{this, push(std::move(n))};
}

Var Graph::transpose(Var a) {
    Node& na = at(a);
    require(na.value.rank() == 2, "transpose: rank-2 input required");
    std::size_t r = na.value.rows(), c = na.value.cols();
    Node n;
    n.op = Op::Transpose;
    n.a = a.id;
    n.needs_grad = na.needs_grad;
    n.value = Tensor({c, r});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) n.value.data[j * r + i] = na.value.data[i * c + j];
    return Var{this, push(std::move(n))};
}

Var Graph::concat(const std::vector<Var>& parts) {
    require(!parts.empty(), "concat: no inputs");
    std::size_t total = 0;
    bool ng = false;
    for (Var p : parts) {
        Node& np = at(p);
        require(np.value.rank() == 1, "concat: rank-1 inputs required");
        total += np.value.size();
        ng = ng || np.needs_grad;
    }
    Node n;
    n.op = Op::Concat;
    n.needs_grad = ng;
    n.value = Tensor({total});
    std::size_t off = 0;
    for (Var p : parts) {
        const Tensor& v = val(p.id);
        std::copy(v.data.begin(), v.data.end(), n.value.data.begin() + off);
        off += v.size();
        n.ins.push_back(p.id);
    }
    return Var{this, push(std::move(n))};
}

Var Graph::concat_rows(const std::vector<Var>& rows) {
    require(!rows.empty(), "concat_rows: no inputs");
    std::size_t width = val(rows[0].id).size();
    bool ng = false;
    for (Var r : rows) {
        Node& nr = at(r);
        require(nr.value.rank() == 1 && nr.value.size() == width,
                "concat_rows: rows must be rank-1 of equal length");
        ng = ng || nr.needs_grad;
    }
    Node n;
    n.op = Op::ConcatRows;
    n.needs_grad = ng;
    n.value = Tensor({rows.size(), width});
    for (std::size_t t = 0; t < rows.size(); ++t) {
        const Tensor& v = val(rows[t].id);
        std::copy(v.data.begin(), v.data.end(), n.value.data.begin() + t * width);
        n.ins.push_back(rows[t].id);
    }
    return Var{this, push(std::move(n))};
}

Var Graph::hconcat(const std::vector<Var>& mats) {
    require(!mats.empty(), "hconcat: no inputs");
    std::size_t rows = val(mats[0].id).rows();
    std::size_t total_cols = 0;
    bool ng = false;
    for (Var m : mats) {
        Node& nm = at(m);
        require(nm.value.rank() == 2 && nm.value.rows() == rows,
                "hconcat: rank-2 inputs with equal row counts required");
        total_cols += nm.value.cols();
        ng = ng || nm.needs_grad;
    }
    Node n;
    n.op = Op::HConcat;
    n.needs_grad = ng;
    n.value = Tensor({rows, total_cols});
    std::size_t coff = 0;
    for (Var m : mats) {
        const Tensor& v = val(m.id);
        for (std::size_t i = 0; i < rows; ++i)
            std::copy(v.data.begin() + i * v.cols(), v.data.begin() + (i + 1) * v.cols(),
                      n.value.data.begin() + i * total_cols + coff);
        coff += v.cols();
        n.ins.push_back(m.id);
    }
    return Var{this, push(std::move(n))};
}

Var Graph::slice(Var a, std::size_t from, std::size_t to) {
    Node& na = at(a);
    require(na.value.rank() == 1, "slice: rank-1 input required");
    require(from < to && to <= na.value.size(), "slice: bad range");
    Node n;
    n.op = Op::Slice;
    n.a = a.id;
    n.i0 = from;
    n.i1 = to;
    n.needs_grad = na.needs_grad;
    n.value = Tensor({to - from},
                     std::vector<double>(na.value.data.begin() + from, na.value.data.begin() + to));
    return Var{this, push(std::move(n))};
}

Var Graph::slice_rows(Var a, std::size_t from, std::size_t to) {
    Node& na = at(a);
    require(na.value.rank() == 2, "slice_rows: rank-2 input required");
    require(from < to && to <= na.value.rows(), "slice_rows: bad range");
    std::size_t c = na.value.cols();
    Node n;
    n.op = Op::SliceRows;
    n.a = a.id;
    n.i0 = from;
    n.i1 = to;
    n.needs_grad = na.needs_grad;
    n.value = Tensor({to - from, c}, std::vector<double>(na.value.data.begin() + from * c,
                                                         na.value.data.begin() + to * c));
    return Var{this, push(std::move(n))};
}

Var Graph::slice_cols(Var a, std::size_t from, std::size_t to) {
    Node& na = at(a);
    require(na.value.rank() == 2, "slice_cols: rank-2 input required");
    require(from < to && to <= na.value.cols(), "slice_cols: bad range");
    std::size_t r = na.value.rows(), c = na.value.cols(), w = to - from;
    Node n;
    n.op = Op::SliceCols;
    n.a = a.id;
    n.i0 = from;
    n.i1 = to;
    n.needs_grad = na.needs_grad;
    n.value = Tensor({r, w});
    for (std::size_t i = 0; i < r; ++i)
        std::copy(na.value.data.begin() + i * c + from, na.value.data.begin() + i * c + to,
                  n.value.data.begin() + i * w);
    return Var{this, push(std::move(n))};
}

Var Graph::row(Var a, std::size_t r) {
    Node& na = at(a);
    require(na.value.rank() == 2, "row: rank-2 input required");
    require(r < na.value.rows(), "row: index out of range");
    std::size_t c = na.value.cols();
    Node n;
    n.op = Op::Row;
    n.a = a.id;
    n.i0 = r;
    n.needs_grad = na.needs_grad;
    n.value = Tensor({c}, std::vector<double>(na.value.data.begin() + r * c,
                                              na.value.data.begin() + (r + 1) * c));
    return Var{this, push(std::move(n))};
}

namespace {

enum class Red { Max, Min, Mean };

Tensor reduce_forward(const Tensor& a, Red red) {
    if (a.rank() == 1) {
        double acc;
        if (red == Red::Mean) {
            acc = 0.0;
            for (double v : a.data) acc += v;
            acc /= static_cast<double>(a.size());
        } else {
            acc = a.data[0];
            for (double v : a.data) acc = (red == Red::Max) ? std::max(acc, v) : std::min(acc, v);
        }
        return Tensor::scalar(acc);
    }
    std::size_t r = a.rows(), c = a.cols();
    Tensor out({c});
    for (std::size_t j = 0; j < c; ++j) {
        if (red == Red::Mean) {
            double acc = 0.0;
            for (std::size_t i = 0; i < r; ++i) acc += a.at(i, j);
            out.data[j] = acc / static_cast<double>(r);
        } else {
            double acc = a.at(0, j);
            for (std::size_t i = 1; i < r; ++i)
                acc = (red == Red::Max) ? std::max(acc, a.at(i, j)) : std::min(acc, a.at(i, j));
            out.data[j] = acc;
        }
    }
    return out;
}

}  // namespace

Var Graph::reduce_max(Var a) {
    Node& na = at(a);
    require(na.value.rank() <= 2, "reduce_max: rank-1 or rank-2 input required");
    Node n;
    n.op = Op::ReduceMax;
    n.a = a.id;
    n.needs_grad = na.needs_grad;
    n.value = reduce_forward(na.value, Red::Max);
    return Var{this, push(std::move(n))};
}

Var Graph::reduce_min(Var a) {
    Node& na = at(a);
    require(na.value.rank() <= 2, "reduce_min: rank-1 or rank-2 input required");
    Node n;
    n.op = Op::ReduceMin;
    n.a = a.id;
    n.needs_grad = na.needs_grad;
    n.value = reduce_forward(na.value, Red::Min);
    return Var{this, push(std::move(n))};
}

Var Graph::reduce_mean(Var a) {
    Node& na = at(a);
    require(na.value.rank() <= 2, "reduce_mean: rank-1 or rank-2 input required");
    Node n;
    n.op = Op::ReduceMean;
    n.a = a.id;
    n.needs_grad = na.needs_grad;
    n.value = reduce_forward(na.value, Red::Mean);
    return Var{this, push(std::move(n))};
}

Var Graph::sum(Var a) {
    Node& na = at(a);
    Node n;
    n.op = Op::Sum;
    n.a = a.id;
    n.needs_grad = na.needs_grad;
    double acc = 0.0;
    for (double v : na.value.data) acc += v;
    n.value = Tensor::scalar(acc);
    return Var{this, push(std::move(n))};
}

Var Graph::softmax(Var a, int axis) {
    Node& na = at(a);
    require(na.value.rank() <= 2, "softmax: rank-1 or rank-2 input required");
    require(axis == 0 || axis == 1, "softmax: axis must be 0 or 1");
    Node n;
    n.op = Op::Softmax;
    n.a = a.id;
    n.i0 = static_cast<std::size_t>(axis);
    n.needs_grad = na.needs_grad;
    n.value = na.value;
    n.value.requires_grad = false;
    if (na.value.rank() == 1) {
        softmax_slice(na.value.data.data(), n.value.data.data(), na.value.size(), 1);
    } else {
        std::size_t r = na.value.rows(), c = na.value.cols();
        if (axis == 0) {
            for (std::size_t j = 0; j < c; ++j)
                softmax_slice(na.value.data.data() + j, n.value.data.data() + j, r, c);
        } else {
            for (std::size_t i = 0; i < r; ++i)
                softmax_slice(na.value.data.data() + i * c, n.value.data.data() + i * c, c, 1);
        }
    }
    return Var{this, push(std::move(n))};
}

Var Graph::cross_entropy(Var logits, std::size_t label) {
    Node& nl = at(logits);
    require(nl.value.rank() == 1, "cross_entropy: rank-1 logits required");
    require(label < nl.value.size(), "cross_entropy: label out of range");
    Node n;
    n.op = Op::CrossEntropy;
    n.a = logits.id;
    n.i0 = label;
    n.needs_grad = nl.needs_grad;
    double lse = log_sum_exp(nl.value.data.data(), nl.value.size());
    n.value = Tensor::scalar(lse - nl.value.data[label]);
    return Var{this, push(std::move(n))};
}

Var Graph::cross_entropy_rows(Var logits, const std::vector<int>& labels) {
    Node& nl = at(logits);
    require(nl.value.rank() == 2, "cross_entropy_rows: rank-2 logits required");
    require(labels.size() == nl.value.rows(), "cross_entropy_rows: one label per row required");
    std::size_t c = nl.value.cols();
    for (int lab : labels)
        require(lab >= 0 && static_cast<std::size_t>(lab) < c,
                "cross_entropy_rows: label out of range");
    Node n;
    n.op = Op::CrossEntropyRows;
    n.a = logits.id;
    n.labels = labels;
    n.needs_grad = nl.needs_grad;
    double acc = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const double* rowp = nl.value.data.data() + i * c;
        acc += log_sum_exp(rowp, c) - rowp[labels[i]];
    }
    n.value = Tensor::scalar(acc / static_cast<double>(labels.size()));
    return Var{this, push(std::move(n))};
}

Var Graph::normalize_rows(Var a, double eps) {
    Node& na = at(a);
    require(na.value.rank() == 2, "normalize_rows: rank-2 input required");
    require(eps > 0, "normalize_rows: eps must be positive");
    std::size_t r = na.value.rows(), c = na.value.cols();
    Node n;
    n.op = Op::NormalizeRows;
    n.a = a.id;
    n.alpha = eps;
    n.needs_grad = na.needs_grad;
    n.value = na.value;
    n.value.requires_grad = false;
    for (std::size_t i = 0; i < r; ++i) {
        double* rowp = n.value.data.data() + i * c;
        double nrm = 0.0;
        for (std::size_t j = 0; j < c; ++j) nrm += rowp[j] * rowp[j];
        nrm = std::max(std::sqrt(nrm), eps);
        for (std::size_t j = 0; j < c; ++j) rowp[j] /= nrm;
    }
    return Var{this, push(std::move(n))};
}

Var Graph::grad_reverse(Var a, double lambda) {
    Node& na = at(a);
    Node n;
    n.op = Op::GradReverse;
    n.a = a.id;
    n.alpha = lambda;
    n.needs_grad = na.needs_grad;
    n.value = na.value;
    n.value.requires_grad = false;
    return Var{this, push(std::move(n))};
}

Var Graph::masked_fill(Var a, const std::vector<std::uint8_t>& mask, double value) {
    Node& na = at(a);
    require(mask.size() == na.value.size(), "masked_fill: mask length mismatch");
    Node n;
    n.op = Op::MaskedFill;
    n.a = a.id;
    n.alpha = value;
    n.mask = mask;
    n.needs_grad = na.needs_grad;
    n.value = na.value;
    n.value.requires_grad = false;
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (mask[i]) n.value.data[i] = value;
    return Var{this, push(std::move(n))};
}

long double Graph::replay_shifted(Var node, const Tensor* leaf, std::size_t coord,
                                  long double delta) const {
    require(node.g == this && node.id >= 0 && node.id < static_cast<int>(nodes_.size()),
            "replay_shifted: Var does not belong to this graph");
    if (!nodes_[node.id].value.is_scalar())
        throw std::invalid_argument("replay_shifted: target node must be scalar");

    using LD = long double;
    std::vector<std::vector<LD>> vals(static_cast<std::size_t>(node.id) + 1);
    auto lse = [](const std::vector<LD>& x) {
        LD m = x[0];
        for (LD v : x) m = std::max(m, v);
        LD z = 0;
        for (LD v : x) z += std::exp(v - m);
        return m + std::log(z);
    };
    auto soft = [](std::vector<LD>& x, std::size_t base, std::size_t n, std::size_t stride) {
        LD m = x[base];
        for (std::size_t i = 1; i < n; ++i) m = std::max(m, x[base + i * stride]);
        LD z = 0;
        for (std::size_t i = 0; i < n; ++i) {
            x[base + i * stride] = std::exp(x[base + i * stride] - m);
            z += x[base + i * stride];
        }
        for (std::size_t i = 0; i < n; ++i) x[base + i * stride] /= z;
    };

    for (int id = 0; id <= node.id; ++id) {
        const Node& n = nodes_[id];
        const std::size_t sz = n.value.size();
        std::vector<LD>& out = vals[id];
        auto in = [&](int i) -> const std::vector<LD>& { return vals[i]; };
        switch (n.op) {
            case Op::Leaf:
            case Op::Constant: {
                out.assign(n.value.data.begin(), n.value.data.end());
                if (n.op == Op::Leaf && n.leaf == leaf) out[coord] += delta;
                break;
            }
            case Op::Add: {
                out = in(n.a);
                for (std::size_t i = 0; i < sz; ++i) out[i] += in(n.b)[i];
                break;
            }
            case Op::Sub: {
                out = in(n.a);
                for (std::size_t i = 0; i < sz; ++i) out[i] -= in(n.b)[i];
                break;
            }
            case Op::Mul: {
                out = in(n.a);
                for (std::size_t i = 0; i < sz; ++i) out[i] *= in(n.b)[i];
                break;
            }
            case Op::EMax: {
                out = in(n.a);
                for (std::size_t i = 0; i < sz; ++i) out[i] = std::max(out[i], in(n.b)[i]);
                break;
            }
            case Op::Scale: {
                out = in(n.a);
                for (LD& v : out) v *= n.alpha;
                break;
            }
            case Op::Sigmoid: {
                out = in(n.a);
                for (LD& v : out) v = 1.0L / (1.0L + std::exp(-v));
                break;
            }
            case Op::Tanh: {
                out = in(n.a);
                for (LD& v : out) v = std::tanh(v);
                break;
            }
            case Op::MatMul: {
                const Tensor& A = nodes_[n.a].value;
                const Tensor& B = nodes_[n.b].value;
                std::size_t m = A.rows(), k = A.cols(), p = B.cols();
                out.assign(sz, 0);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t l = 0; l < k; ++l) {
                        LD av = in(n.a)[i * k + l];
                        for (std::size_t j = 0; j < p; ++j)
                            out[i * p + j] += av * in(n.b)[l * p + j];
                    }
                break;
            }
            case Op::Linear: {
                const Tensor& W = nodes_[n.a].value;
                std::size_t o = W.rows(), ind = W.cols();
                out.assign(o, 0);
                for (std::size_t j = 0; j < o; ++j) {
                    LD acc = in(n.c)[j];
                    for (std::size_t k = 0; k < ind; ++k)
                        acc += in(n.a)[j * ind + k] * in(n.b)[k];
                    out[j] = acc;
                }
                break;
            }
            case Op::AffineRows: {
                const Tensor& X = nodes_[n.a].value;
                const Tensor& W = nodes_[n.b].value;
                std::size_t N = X.rows(), ind = X.cols(), o = W.rows();
                out.assign(sz, 0);
                for (std::size_t i = 0; i < N; ++i)
                    for (std::size_t j = 0; j < o; ++j) {
                        LD acc = in(n.c)[j];
                        for (std::size_t k = 0; k < ind; ++k)
                            acc += in(n.b)[j * ind + k] * in(n.a)[i * ind + k];
                        out[i * o + j] = acc;
                    }
                break;
            }
            case Op::Transpose: {
                std::size_t r = nodes_[n.a].value.rows(), c = nodes_[n.a].value.cols();
                out.assign(sz, 0);
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = in(n.a)[i * c + j];
                break;
            }
            case Op::Concat:
            case Op::ConcatRows: {
                out.reserve(sz);
                for (int src : n.ins) out.insert(out.end(), in(src).begin(), in(src).end());
                break;
            }
            case Op::HConcat: {
                std::size_t rows = n.value.rows(), total = n.value.cols();
                out.assign(sz, 0);
                std::size_t coff = 0;
                for (int src : n.ins) {
                    std::size_t c = nodes_[src].value.cols();
                    for (std::size_t i = 0; i < rows; ++i)
                        for (std::size_t j = 0; j < c; ++j)
                            out[i * total + coff + j] = in(src)[i * c + j];
                    coff += c;
                }
                break;
            }
            case Op::Slice: {
                out.assign(in(n.a).begin() + n.i0, in(n.a).begin() + n.i1);
                break;
            }
            case Op::SliceRows: {
                std::size_t c = nodes_[n.a].value.cols();
                out.assign(in(n.a).begin() + n.i0 * c, in(n.a).begin() + n.i1 * c);
                break;
            }
            case Op::SliceCols: {
                std::size_t r = n.value.rows(), w = n.value.cols();
                std::size_t c = nodes_[n.a].value.cols();
                out.assign(sz, 0);
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < w; ++j)
                        out[i * w + j] = in(n.a)[i * c + n.i0 + j];
                break;
            }
            case Op::Row: {
                std::size_t c = nodes_[n.a].value.cols();
                out.assign(in(n.a).begin() + n.i0 * c, in(n.a).begin() + (n.i0 + 1) * c);
                break;
            }
            case Op::ReduceMax:
            case Op::ReduceMin:
            case Op::ReduceMean: {
                const Tensor& a = nodes_[n.a].value;
                auto fold = [&](std::size_t base, std::size_t cnt, std::size_t stride) {
                    if (n.op == Op::ReduceMean) {
                        LD acc = 0;
                        for (std::size_t i = 0; i < cnt; ++i) acc += in(n.a)[base + i * stride];
                        return acc / static_cast<LD>(cnt);
                    }
                    LD acc = in(n.a)[base];
                    for (std::size_t i = 1; i < cnt; ++i) {
                        LD v = in(n.a)[base + i * stride];
                        acc = (n.op == Op::ReduceMax) ? std::max(acc, v) : std::min(acc, v);
                    }
                    return acc;
                };
                if (a.rank() == 1) {
                    out.assign(1, fold(0, a.size(), 1));
                } else {
                    out.assign(a.cols(), 0);
                    for (std::size_t j = 0; j < a.cols(); ++j) out[j] = fold(j, a.rows(), a.cols());
                }
                break;
            }
            case Op::Softmax: {
                const Tensor& a = nodes_[n.a].value;
                out = in(n.a);
                if (a.rank() == 1) {
                    soft(out, 0, a.size(), 1);
                } else if (n.i0 == 0) {
                    for (std::size_t j = 0; j < a.cols(); ++j) soft(out, j, a.rows(), a.cols());
                } else {
                    for (std::size_t i = 0; i < a.rows(); ++i)
                        soft(out, i * a.cols(), a.cols(), 1);
                }
                break;
            }
            case Op::CrossEntropy: {
                out.assign(1, lse(in(n.a)) - in(n.a)[n.i0]);
                break;
            }
            case Op::CrossEntropyRows: {
                const Tensor& a = nodes_[n.a].value;
                std::size_t c = a.cols();
                LD acc = 0;
                for (std::size_t i = 0; i < n.labels.size(); ++i) {
                    std::vector<LD> row(in(n.a).begin() + i * c, in(n.a).begin() + (i + 1) * c);
                    acc += lse(row) - row[static_cast<std::size_t>(n.labels[i])];
                }
                out.assign(1, acc / static_cast<LD>(n.labels.size()));
                break;
            }
            case Op::Sum: {
                LD acc = 0;
                for (LD v : in(n.a)) acc += v;
                out.assign(1, acc);
                break;
            }
            case Op::NormalizeRows: {
                const Tensor& a = nodes_[n.a].value;
                std::size_t r = a.rows(), c = a.cols();
                out = in(n.a);
                for (std::size_t i = 0; i < r; ++i) {
                    LD nrm = 0;
                    for (std::size_t j = 0; j < c; ++j) nrm += out[i * c + j] * out[i * c + j];
                    nrm = std::max(std::sqrt(nrm), static_cast<LD>(n.alpha));
                    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= nrm;
                }
                break;
            }
            case Op::GradReverse: {
                out = in(n.a);
                break;
            }
            case Op::MaskedFill: {
                out = in(n.a);
                for (std::size_t i = 0; i < sz; ++i)
                    if (n.mask[i]) out[i] = n.alpha;
                break;
            }
        }
    }
    return vals[static_cast<std::size_t>(node.id)][0];
}

void Graph::backward(Var loss, double seed) {
    Node& nl = at(loss);
    if (!nl.value.is_scalar())
        throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(nl.value));
    if (!std::isfinite(nl.value.data[0]))
        throw numeric_error("backward: loss is not finite");
    if (!nl.needs_grad) return;  // nothing reachable requires gradients
    nl.grad.assign(1, seed);
    for (int id = loss.id; id >= 0; --id) {
        Node& n = nodes_[id];
        if (n.grad.empty() || !n.needs_grad) continue;
        if (n.op == Op::Leaf) {
            n.leaf->ensure_grad();
            bool finite = true;
            for (std::size_t i = 0; i < n.grad.size(); ++i) {
                n.leaf->grad[i] += n.grad[i];
                finite = finite && std::isfinite(n.leaf->grad[i]);
            }
            if (!finite) throw numeric_error("backward: non-finite gradient on a parameter");
            continue;
        }
        backward_node(id);
    }
}

void Graph::backward_node(int id) {
    Node& n = nodes_[id];
    const double* g = n.grad.data();
    const std::size_t sz = n.value.size();
    switch (n.op) {
        case Op::Leaf:
        case Op::Constant:
            break;
        case Op::Add: {
            if (double* da = gbuf(n.a))
                for (std::size_t i = 0; i < sz; ++i) da[i] += g[i];
            if (double* db = gbuf(n.b))
                for (std::size_t i = 0; i < sz; ++i) db[i] += g[i];
            break;
        }
        case Op::Sub: {
            if (double* da = gbuf(n.a))
                for (std::size_t i = 0; i < sz; ++i) da[i] += g[i];
            if (double* db = gbuf(n.b))
                for (std::size_t i = 0; i < sz; ++i) db[i] -= g[i];
            break;
        }
        case Op::Mul: {
            const double* va = val(n.a).data.data();
            const double* vb = val(n.b).data.data();
            if (double* da = gbuf(n.a))
                for (std::size_t i = 0; i < sz; ++i) da[i] += g[i] * vb[i];
            if (double* db = gbuf(n.b))
                for (std::size_t i = 0; i < sz; ++i) db[i] += g[i] * va[i];
            break;
        }
        case Op::EMax: {
            const double* va = val(n.a).data.data();
            const double* vb = val(n.b).data.data();
            double* da = gbuf(n.a);
            double* db = gbuf(n.b);
            for (std::size_t i = 0; i < sz; ++i) {
                if (va[i] >= vb[i]) {
                    if (da) da[i] += g[i];
                } else if (db) {
                    db[i] += g[i];
                }
            }
            break;
        }
        case Op::Scale: {
            if (double* da = gbuf(n.a))
                for (std::size_t i = 0; i < sz; ++i) da[i] += n.alpha * g[i];
            break;
        }
        case Op::Sigmoid: {
            if (double* da = gbuf(n.a)) {
                const double* y = n.value.data.data();
                for (std::size_t i = 0; i < sz; ++i) da[i] += g[i] * y[i] * (1.0 - y[i]);
            }
            break;
        }
        case Op::Tanh: {
            if (double* da = gbuf(n.a)) {
                const double* y = n.value.data.data();
                for (std::size_t i = 0; i < sz; ++i) da[i] += g[i] * (1.0 - y[i] * y[i]);
            }
            break;
        }
        case Op::MatMul: {
            const Tensor& A = val(n.a);
            const Tensor& B = val(n.b);
            std::size_t m = A.rows(), k = A.cols(), p = B.cols();
            if (double* da = gbuf(n.a)) {
                // dA = G B^T
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t l = 0; l < k; ++l) {
                        double acc = 0.0;
                        const double* Gr = g + i * p;
                        const double* Br = B.data.data() + l * p;
                        for (std::size_t j = 0; j < p; ++j) acc += Gr[j] * Br[j];
                        da[i * k + l] += acc;
                    }
            }
            if (double* db = gbuf(n.b)) {
                // dB = A^T G
                for (std::size_t i = 0; i < m; ++i) {
                    const double* Ar = A.data.data() + i * k;
                    const double* Gr = g + i * p;
                    for (std::size_t l = 0; l < k; ++l) {
                        double av = Ar[l];
                        double* dbr = db + l * p;
                        for (std::size_t j = 0; j < p; ++j) dbr[j] += av * Gr[j];
                    }
                }
            }
            break;
        }
        case Op::Linear: {
            const Tensor& W = val(n.a);
            const Tensor& x = val(n.b);
            std::size_t out = W.rows(), in = W.cols();
            double* dw = gbuf(n.a);
            double* dx = gbuf(n.b);
            double* db = gbuf(n.c);
            for (std::size_t j = 0; j < out; ++j) {
                double gj = g[j];
                if (gj == 0.0) continue;
                if (dw) {
                    double* dwr = dw + j * in;
                    const double* xp = x.data.data();
                    for (std::size_t k = 0; k < in; ++k) dwr[k] += gj * xp[k];
                }
                if (dx) {
                    const double* Wr = W.data.data() + j * in;
                    for (std::size_t k = 0; k < in; ++k) dx[k] += gj * Wr[k];
                }
                if (db) db[j] += gj;
            }
            break;
        }
        case Op::AffineRows: {
            const Tensor& X = val(n.a);
            const Tensor& W = val(n.b);
            std::size_t N = X.rows(), in = X.cols(), out = W.rows();
            double* dx = gbuf(n.a);
            double* dw = gbuf(n.b);
            double* db = gbuf(n.c);
            for (std::size_t i = 0; i < N; ++i) {
                const double* Gr = g + i * out;
                const double* xr = X.data.data() + i * in;
                for (std::size_t j = 0; j < out; ++j) {
                    double gj = Gr[j];
                    if (gj == 0.0) continue;
                    const double* Wr = W.data.data() + j * in;
                    if (dx) {
                        double* dxr = dx + i * in;
                        for (std::size_t k = 0; k < in; ++k) dxr[k] += gj * Wr[k];
                    }
                    if (dw) {
                        double* dwr = dw + j * in;
                        for (std::size_t k = 0; k < in; ++k) dwr[k] += gj * xr[k];
                    }
                    if (db) db[j] += gj;
                }
            }
            break;
        }
        case Op::Transpose: {
            if (double* da = gbuf(n.a)) {
                std::size_t r = val(n.a).rows(), c = val(n.a).cols();
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) da[i * c + j] += g[j * r + i];
            }
            break;
        }
        case Op::Concat: {
            std::size_t off = 0;
            for (int in_id : n.ins) {
                std::size_t len = val(in_id).size();
                if (double* di = gbuf(in_id))
                    for (std::size_t i = 0; i < len; ++i) di[i] += g[off + i];
                off += len;
            }
            break;
        }
        case Op::ConcatRows: {
            std::size_t width = n.value.cols();
            for (std::size_t t = 0; t < n.ins.size(); ++t)
                if (double* di = gbuf(n.ins[t]))
                    for (std::size_t j = 0; j < width; ++j) di[j] += g[t * width + j];
            break;
        }
        case Op::HConcat: {
            std::size_t rows = n.value.rows(), total = n.value.cols();
            std::size_t coff = 0;
            for (int in_id : n.ins) {
                std::size_t c = val(in_id).cols();
                if (double* di = gbuf(in_id))
                    for (std::size_t i = 0; i < rows; ++i)
                        for (std::size_t j = 0; j < c; ++j)
                            di[i * c + j] += g[i * total + coff + j];
                coff += c;
            }
            break;
        }
        case Op::Slice: {
            if (double* da = gbuf(n.a))
                for (std::size_t i = 0; i < sz; ++i) da[n.i0 + i] += g[i];
            break;
        }
        case Op::SliceRows: {
            if (double* da = gbuf(n.a)) {
                std::size_t c = val(n.a).cols();
                for (std::size_t i = 0; i < sz; ++i) da[n.i0 * c + i] += g[i];
            }
            break;
        }
        case Op::SliceCols: {
            if (double* da = gbuf(n.a)) {
                std::size_t r = n.value.rows(), w = n.value.cols(), c = val(n.a).cols();
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < w; ++j) da[i * c + n.i0 + j] += g[i * w + j];
            }
            break;
        }
        case Op::Row: {
            if (double* da = gbuf(n.a)) {
                std::size_t c = val(n.a).cols();
                for (std::size_t j = 0; j < c; ++j) da[n.i0 * c + j] += g[j];
            }
            break;
        }
        case Op::ReduceMax:
        case Op::ReduceMin: {
            double* da = gbuf(n.a);
            if (!da) break;
            const Tensor& a = val(n.a);
            if (a.rank() == 1) {
                for (std::size_t i = 0; i < a.size(); ++i)
                    if (a.data[i] == n.value.data[0]) {
                        da[i] += g[0];
                        break;  // first index attaining the extremum
                    }
            } else {
                std::size_t r = a.rows(), c = a.cols();
                for (std::size_t j = 0; j < c; ++j)
                    for (std::size_t i = 0; i < r; ++i)
                        if (a.at(i, j) == n.value.data[j]) {
                            da[i * c + j] += g[j];
                            break;
                        }
            }
            break;
        }
        case Op::ReduceMean: {
            double* da = gbuf(n.a);
            if (!da) break;
            const Tensor& a = val(n.a);
            if (a.rank() == 1) {
                double gi = g[0] / static_cast<double>(a.size());
                for (std::size_t i = 0; i < a.size(); ++i) da[i] += gi;
            } else {
                std::size_t r = a.rows(), c = a.cols();
                for (std::size_t j = 0; j < c; ++j) {
                    double gi = g[j] / static_cast<double>(r);
                    for (std::size_t i = 0; i < r; ++i) da[i * c + j] += gi;
                }
            }
            break;
        }
        case Op::Softmax: {
            double* da = gbuf(n.a);
            if (!da) break;
            const Tensor& y = n.value;
            auto slice_bwd = [&](std::size_t base, std::size_t len, std::size_t stride) {
                double dot = 0.0;
                for (std::size_t i = 0; i < len; ++i)
                    dot += g[base + i * stride] * y.data[base + i * stride];
                for (std::size_t i = 0; i < len; ++i) {
                    std::size_t k = base + i * stride;
                    da[k] += y.data[k] * (g[k] - dot);
                }
            };
            if (y.rank() == 1) {
                slice_bwd(0, y.size(), 1);
            } else if (n.i0 == 0) {
                for (std::size_t j = 0; j < y.cols(); ++j) slice_bwd(j, y.rows(), y.cols());
            } else {
                for (std::size_t i = 0; i < y.rows(); ++i) slice_bwd(i * y.cols(), y.cols(), 1);
            }
            break;
        }
        case Op::CrossEntropy: {
            double* da = gbuf(n.a);
            if (!da) break;
            const Tensor& x = val(n.a);
            std::vector<double> sm(x.size());
            softmax_slice(x.data.data(), sm.data(), x.size(), 1);
            for (std::size_t i = 0; i < x.size(); ++i)
                da[i] += g[0] * (sm[i] - (i == n.i0 ? 1.0 : 0.0));
            break;
        }
        case Op::CrossEntropyRows: {
            double* da = gbuf(n.a);
            if (!da) break;
            const Tensor& x = val(n.a);
            std::size_t c = x.cols();
            double inv = g[0] / static_cast<double>(n.labels.size());
            std::vector<double> sm(c);
            for (std::size_t i = 0; i < x.rows(); ++i) {
                softmax_slice(x.data.data() + i * c, sm.data(), c, 1);
                for (std::size_t j = 0; j < c; ++j)
                    da[i * c + j] +=
                        inv * (sm[j] - (static_cast<int>(j) == n.labels[i] ? 1.0 : 0.0));
            }
            break;
        }
        case Op::Sum: {
            if (double* da = gbuf(n.a))
                for (std::size_t i = 0; i < val(n.a).size(); ++i) da[i] += g[0];
            break;
        }
        case Op::NormalizeRows: {
            double* da = gbuf(n.a);
            if (!da) break;
            const Tensor& a = val(n.a);
            std::size_t r = a.rows(), c = a.cols();
            for (std::size_t i = 0; i < r; ++i) {
                const double* rowp = a.data.data() + i * c;
                const double* gr = g + i * c;
                double nrm2 = 0.0;
                for (std::size_t j = 0; j < c; ++j) nrm2 += rowp[j] * rowp[j];
                double nrm = std::sqrt(nrm2);
                double* dar = da + i * c;
                if (nrm > n.alpha) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < c; ++j) dot += gr[j] * rowp[j];
                    double n3 = nrm * nrm * nrm;
                    for (std::size_t j = 0; j < c; ++j)
                        dar[j] += gr[j] / nrm - rowp[j] * dot / n3;
                } else {
                    for (std::size_t j = 0; j < c; ++j) dar[j] += gr[j] / n.alpha;
                }
            }
            break;
        }
        case Op::GradReverse: {
            if (double* da = gbuf(n.a))
                for (std::size_t i = 0; i < sz; ++i) da[i] -= n.alpha * g[i];
            break;
        }
        case Op::MaskedFill: {
            if (double* da = gbuf(n.a))
                for (std::size_t i = 0; i < sz; ++i)
                    if (!n.mask[i]) da[i] += g[i];
            break;
        }
    }
}

}  // namespace mtlse::ndgrad
