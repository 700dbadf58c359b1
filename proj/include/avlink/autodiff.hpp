// SPDX-License-Identifier: Apache-2.0
//
// Minimal tape-based reverse-mode automatic differentiation over row-major
// matrices. A Tape records one forward pass; every op appends a node holding
// its value and a closure that pushes the node's gradient to its inputs.
// Nodes whose inputs are all constants or frozen parameters record no
// closure, so frozen sub-graphs never receive a gradient path.

#pragma once

#include "avlink/common.hpp"

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace avlink::ad {

struct Parameter {
    std::string name;
    Matrix value;
    bool frozen = false;
};

// Owns parameters with stable addresses, in registration order.
class ParamStore {
public:
    Parameter& add(std::string name, Matrix value);
    std::vector<Parameter*> all() const;
    std::vector<Parameter*> trainable() const;
    Parameter* find(const std::string& name) const;
    std::size_t size() const { return params_.size(); }
    std::size_t count_scalars() const;
    void set_frozen(bool frozen);
    bool frozen() const;

private:
    std::vector<std::unique_ptr<Parameter>> params_;
    std::unordered_map<std::string, Parameter*> by_name_;
};

class Tape;

struct Var {
    Tape* tape = nullptr;
    int id = -1;

    const Matrix& value() const;
    Index rows() const { return value().rows(); }
    Index cols() const { return value().cols(); }
    bool requires_grad() const;
};

class Tape {
public:
    using BackwardFn = std::function<void(Tape&, int self)>;

    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Matrix value);
    // Leaf for a parameter. Cached, so repeated use shares one node.
    Var param(const Parameter& p);

    const Matrix& value(int id) const { return nodes_[id].value; }
    bool requires_grad(int id) const { return nodes_[id].requires_grad; }
    bool grad_enabled() const { return grad_enabled_; }

    // Records an op result. The closure is kept only when some input needs a gradient.
    Var push(Matrix value, std::initializer_list<Var> inputs, BackwardFn fn);
    Var push(Matrix value, std::span<const Var> inputs, BackwardFn fn);

    // Adds g into the gradient of node id (no-op if it does not need one).
    void accumulate(int id, const Matrix& g);
    const Matrix& grad(int id) const { return nodes_[id].grad; }

    // Seeds d(out)/d(out) = 1 for a 1x1 output and runs the reverse sweep.
    void backward(Var out);

    // Gradient accumulated into a parameter leaf, or nullptr if it never needed one.
    const Matrix* param_grad(const Parameter& p) const;
    // Number of nodes that registered a backward closure.
    std::size_t recorded_ops() const;
    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        bool requires_grad = false;
        BackwardFn backward;
    };

    bool grad_enabled_;
    std::vector<Node> nodes_;
    std::unordered_map<const Parameter*, int> param_nodes_;
};

// Gradients for an ordered list of parameters; reduction order is the list order.
class Gradients {
public:
    Gradients() = default;
    explicit Gradients(std::vector<Parameter*> params);

    void collect(const Tape& tape, Real weight = 1.0);
    void add(const Gradients& other, Real weight = 1.0);
    void scale(Real s);
    void zero();
    bool all_finite() const;
    Real norm() const;

    std::span<Parameter* const> params() const { return params_; }
    Matrix& operator[](std::size_t i) { return grads_[i]; }
    const Matrix& operator[](std::size_t i) const { return grads_[i]; }
    std::size_t size() const { return grads_.size(); }

private:
    std::vector<Parameter*> params_;
    std::vector<Matrix> grads_;
};

// ---- ops -------------------------------------------------------------------

Var matmul(Var a, Var b);
// x W + b, with b a 1xN row broadcast over rows.
Var linear(Var x, Var w, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, Real s);
Var add_row(Var x, Var row);
Var mul_row(Var x, Var row);
// x * (1 + row)
Var mul_one_plus_row(Var x, Var row);
Var silu(Var x);
Var gelu(Var x);
Var layer_norm(Var x, Real eps = 1e-6);
// Per-row, per-head L2 normalisation of contiguous head segments.
Var head_l2norm(Var x, int heads, Real eps = 1e-6);
// Multiplies head segment h by g(0, h).
Var head_scale(Var x, Var g, int heads);
// Rotates consecutive channel pairs of every head by angles (T x head_dim/2).
Var rope(Var x, const Matrix& angles, int heads);
// Multi-head softmax(q k^T / sqrt(dh)) v.
Var attention(Var q, Var k, Var v, int heads);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice_rows(Var x, Index begin, Index count);
Var slice_cols(Var x, Index begin, Index count);
// out.row(i) = x.row(index[i])
Var gather_rows(Var x, std::vector<Index> index);
// out.row(s) = mean of x rows with segment[i] == s
Var segment_mean(Var x, std::vector<Index> segment, Index n_segments);
// mean((pred - target)^2) as 1x1
Var mse(Var pred, const Matrix& target);
Var sum(Var x);
// sum(x .* w) as 1x1
Var weighted_sum(Var x, const Matrix& w);

// Softmax attention probabilities for inspection (no tape).
std::vector<Matrix> attention_probs(const Matrix& q, const Matrix& k, int heads);
std::vector<Matrix> attention_logits(const Matrix& q, const Matrix& k, int heads);

}  // namespace avlink::ad
