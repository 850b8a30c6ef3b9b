#pragma once

#include <cstdint>
#include <deque>
#include <vector>

#include "mtlse/tensor.hpp"

namespace mtlse::ndgrad {

class Graph;

// Handle to a node in a Graph. Cheap to copy; valid until Graph::clear().
struct Var {
    Graph* g = nullptr;
    int id = -1;
};

enum class Op : std::uint8_t {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    EMax,
    Scale,
    Sigmoid,
    Tanh,
    MatMul,
    Linear,
    AffineRows,
    Transpose,
    Concat,
    ConcatRows,
    HConcat,
    Slice,
    SliceRows,
    SliceCols,
    Row,
    ReduceMax,
    ReduceMin,
    ReduceMean,
    Softmax,
    CrossEntropy,
    CrossEntropyRows,
    Sum,
    NormalizeRows,
    GradReverse,
    MaskedFill,
};

// Define-by-run reverse-mode tape. Forward values are computed eagerly as
// nodes are appended; insertion order is the topological order, and
// backward() sweeps it in exact reverse. One graph per forward pass, freed
// (or clear()ed) after backward.
class Graph {
public:
    // Registers an external parameter tensor. Gradients accumulate into
    // t.grad during backward(). Registering the same tensor twice returns
    // the same node.
    Var leaf(Tensor& t);

    // Copies a value into the graph with no gradient tracking.
    Var constant(Tensor v);
    Var constant_scalar(double v) { return constant(Tensor::scalar(v)); }

    // Elementwise, same shape.
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var emax(Var a, Var b);  // ties route gradient to the first argument
    Var scale(Var a, double c);
    Var sigmoid(Var a);
    Var tanh(Var a);

    // Linear algebra. Tensors are row-major; Linear computes W x + b for a
    // rank-1 x with W of shape (out x in).
    Var matmul(Var a, Var b);
    Var linear(Var W, Var x, Var b);
    // X (N x in) times W^T (in x out) plus row-broadcast bias: (N x out).
    Var affine_rows(Var X, Var W, Var b);
    Var transpose(Var a);

    // Shape surgery.
    Var concat(const std::vector<Var>& parts);       // rank-1 pieces
    Var concat_rows(const std::vector<Var>& rows);   // rank-1 rows -> matrix
    Var hconcat(const std::vector<Var>& mats);       // side-by-side matrices
    Var slice(Var a, std::size_t from, std::size_t to);          // rank-1 [from,to)
    Var slice_rows(Var a, std::size_t from, std::size_t to);
    Var slice_cols(Var a, std::size_t from, std::size_t to);
    Var row(Var a, std::size_t r);                   // rank-1 copy of one row

    // Reductions. Rank-1 input -> scalar; rank-2 input -> per-column
    // reduction over rows. Max/min route gradient to the first index
    // attaining the extremum.
    Var reduce_max(Var a);
    Var reduce_min(Var a);
    Var reduce_mean(Var a);
    Var sum(Var a);  // sum of all entries -> scalar

    // axis 0 normalizes each column over rows; axis 1 each row over columns.
    // Rank-1 input ignores axis. Max-subtraction for stability.
    Var softmax(Var a, int axis = 0);

    // -log softmax(logits)[label] for rank-1 logits.
    Var cross_entropy(Var logits, std::size_t label);
    // Mean of per-row cross-entropies for rank-2 logits (N x C).
    Var cross_entropy_rows(Var logits, const std::vector<int>& labels);

    // Each row divided by max(l2norm, eps).
    Var normalize_rows(Var a, double eps = 1e-8);

    // Identity forward; backward multiplies the gradient by -lambda.
    Var grad_reverse(Var a, double lambda);

    // out[i] = mask[i] ? value : a[i]; gradient flows only where unmasked.
    Var masked_fill(Var a, const std::vector<std::uint8_t>& mask, double value);

    // Seeds d(loss)/d(loss) = seed and sweeps the tape in reverse insertion
    // order, accumulating into every registered leaf's grad. Loss must be
    // scalar and finite.
    void backward(Var loss, double seed = 1.0);

    const Tensor& value(Var v) const { return nodes_[v.id].value; }
    // Gradient of the last backward() w.r.t. any node (empty if unreached).
    const std::vector<double>& grad(Var v) const { return nodes_[v.id].grad; }

    // Re-evaluates the recorded computation up to `node` in extended
    // precision, with one coordinate of one registered leaf shifted by
    // delta. Finite-difference harnesses need this: float64 forward noise
    // (~1e-11 at eps=1e-5) would otherwise swamp near-zero gradients.
    long double replay_shifted(Var node, const Tensor* leaf, std::size_t coord,
                               long double delta) const;

    std::size_t size() const { return nodes_.size(); }
    void clear();

private:
    struct Node {
        Op op;
        int a = -1, b = -1, c = -1;
        std::vector<int> ins;  // n-ary ops only
        Tensor value;
        std::vector<double> grad;
        Tensor* leaf = nullptr;
        bool needs_grad = false;
        double alpha = 0.0;              // scale factor / lambda / eps / fill value
        std::size_t i0 = 0, i1 = 0;      // slice bounds / axis / label / row
        std::vector<int> labels;         // CrossEntropyRows
        std::vector<std::uint8_t> mask;  // MaskedFill
    };

    int push(Node n);
    Node& at(Var v);
    const Tensor& val(int id) const { return nodes_[id].value; }
    bool needs(int id) const { return id >= 0 && nodes_[id].needs_grad; }
    // Returns the grad buffer of node id, allocating it zeroed; nullptr if
    // the node does not require gradients.
    double* gbuf(int id);
    void backward_node(int id);

    // deque keeps value() references stable while new nodes are appended
    std::deque<Node> nodes_;
    std::vector<std::pair<Tensor*, int>> leaf_ids_;
};

// Operator sugar for elementwise arithmetic between nodes of one graph.
inline Var operator+(Var a, Var b) { return a.g->add(a, b); }
inline Var operator-(Var a, Var b) { return a.g->sub(a, b); }
inline Var operator*(Var a, Var b) { return a.g->mul(a, b); }

}  // namespace mtlse::ndgrad
