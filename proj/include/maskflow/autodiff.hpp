#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "maskflow/params.hpp"
#include "maskflow/tensor.hpp"

namespace maskflow::ad {

class Graph;

// Handle to a value recorded on a Graph.
struct Var {
    Graph* graph = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    bool requires_grad() const;
};

// Tape of a single computation. One graph per step; call reset() (or build a
// new graph) between steps. A graph built with record=false only evaluates.
class Graph {
public:
    explicit Graph(bool record = true) : record_(record) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool recording() const { return record_; }

    Var constant(Tensor value);
    // Named leaf that requires grad (when recording).
    Var variable(Tensor value, std::string name);
    // Leaf bound to a stored parameter; requires grad iff the parameter's
    // group is trainable in the store.
    Var parameter(const ParamStore& store, const std::string& name);

    const Tensor& value(Var v) const { return nodes_[v.id].value; }
    bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

    // Gradients of a scalar loss w.r.t. every named leaf that requires grad.
    // Leaves not reachable from the loss get zero tensors.
    GradMap backward(Var loss);

    void reset() { nodes_.clear(); }
    std::size_t size() const { return nodes_.size(); }

    using BackwardFn = std::function<void(Graph&, std::size_t)>;

    // Op construction helpers.
    Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
    Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn);
    const Tensor& grad(std::size_t id) const { return nodes_[id].grad; }
    // Gradient accumulator of an input node, zero-allocated on first use.
    Tensor& grad_slot(std::size_t id);
    bool needs_grad(std::size_t id) const { return nodes_[id].requires_grad; }
    const Tensor& value_at(std::size_t id) const { return nodes_[id].value; }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        std::string name;
        BackwardFn backward;
    };
    bool record_;
    std::vector<Node> nodes_;
};

// ---- operations -----------------------------------------------------------

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
// a + row, where row is 1 x cols(a), broadcast over rows.
Var add_row(Var a, Var row);
// scale * a + shift, elementwise with scalar constants.
Var affine(Var a, double scale, double shift);
Var exp(Var a);
Var log(Var a);
Var tanh(Var a);
Var relu(Var a);
// Row-wise layer normalization with 1 x cols gain and bias.
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var sum(Var a);
Var mean(Var a);
// mean((a - b)^2) as a scalar.
Var mse(Var a, Var b);
Var slice_rows(Var a, std::size_t begin, std::size_t end);
Var concat_rows(const std::vector<Var>& parts);

// Row partition for block-diagonal attention: queries in
// [q_offsets[s], q_offsets[s+1]) attend only to keys in
// [k_offsets[s], k_offsets[s+1]).
struct AttentionLayout {
    std::vector<std::size_t> q_offsets;
    std::vector<std::size_t> k_offsets;

    static AttentionLayout single(std::size_t n_q, std::size_t n_k) { return {{0, n_q}, {0, n_k}}; }
    static AttentionLayout uniform_blocks(std::size_t n_blocks, std::size_t q_per_block, std::size_t k_per_block);
};

// Multi-head scaled dot-product attention, softmax(q k^T / sqrt(d_head)) v per
// head and per block. q: n_q x d, k, v: n_k x d, d divisible by n_heads.
Var attention(Var q, Var k, Var v, std::size_t n_heads, const AttentionLayout& layout);
inline Var attention(Var q, Var k, Var v, std::size_t n_heads = 1) {
    return attention(q, k, v, n_heads, AttentionLayout::single(q.shape()[0], k.shape()[0]));
}

// Composite helpers (built from the primitive set).
Var linear(Var x, Var weight, Var bias);
Var gelu(Var x);
// -log(sigmoid(z)) for a scalar z.
Var neg_log_sigmoid(Var z);

// Plain (non-recorded) kernels shared with tests and samplers.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor softmax_rows(const Tensor& scores);

// ---- finite-difference gradient check -------------------------------------

using LossFn = std::function<Var(Graph&, const ParamStore&)>;

struct GradCheckOptions {
    double epsilon = 3e-3;  // stencil step h
    std::size_t n_coords = 100;
    std::uint64_t seed = 0;
    // Denominator floor; coordinates with gradients far below it are judged
    // on absolute error, where stencil noise (~1e-12) would otherwise dominate.
    double floor = 1e-7;
};

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t n_checked = 0;
    std::string worst_param;
};

// Max over sampled coordinates of trainable parameters of
// |analytic - numeric| / (|numeric| + floor), numeric from the five-point
// central stencil (8 [f(x+h) - f(x-h)] - [f(x+2h) - f(x-2h)]) / 12h.
GradCheckResult grad_check(const LossFn& f, const ParamStore& point, const GradCheckOptions& opts);

}  // namespace maskflow::ad
