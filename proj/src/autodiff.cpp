// SPDX-License-Identifier: Apache-2.0
#include "avlink/autodiff.hpp"

#include <algorithm>
#include <cmath>

namespace avlink {

std::string shape_str(const Matrix& m) {
    return "[" + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + "]";
}

Modality modality_from_string(const std::string& s) {
    if (s == "audio") return Modality::audio;
    if (s == "video") return Modality::video;
    throw ConfigError("config", "unknown modality '" + s + "' (expected audio|video)");
}

}  // namespace avlink

namespace avlink::ad {

namespace {

constexpr const char* kMod = "autodiff";

void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ContractError(kMod, std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

void check_row(const Matrix& x, const Matrix& row, const char* op) {
    if (row.rows() != 1 || row.cols() != x.cols())
        throw ContractError(kMod, std::string(op) + ": expected 1x" + std::to_string(x.cols()) + " row, got " +
                                      shape_str(row));
}

Real sigmoid(Real x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

// ---- ParamStore --------------------------------------------------------------

Parameter& ParamStore::add(std::string name, Matrix value) {
    if (by_name_.count(name)) throw ContractError(kMod, "duplicate parameter name " + name);
    auto p = std::make_unique<Parameter>();
    p->name = std::move(name);
    p->value = std::move(value);
    Parameter& ref = *p;
    by_name_[ref.name] = &ref;
    params_.push_back(std::move(p));
    return ref;
}

std::vector<Parameter*> ParamStore::all() const {
    std::vector<Parameter*> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(p.get());
    return out;
}

std::vector<Parameter*> ParamStore::trainable() const {
    std::vector<Parameter*> out;
    for (const auto& p : params_)
        if (!p->frozen) out.push_back(p.get());
    return out;
}

Parameter* ParamStore::find(const std::string& name) const {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? nullptr : it->second;
}

std::size_t ParamStore::count_scalars() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
    return n;
}

void ParamStore::set_frozen(bool frozen) {
    for (auto& p : params_) p->frozen = frozen;
}

bool ParamStore::frozen() const {
    return std::all_of(params_.begin(), params_.end(), [](const auto& p) { return p->frozen; });
}

// ---- Tape ----------------------------------------------------------------------

const Matrix& Var::value() const { return tape->value(id); }
bool Var::requires_grad() const { return tape->requires_grad(id); }

Var Tape::constant(Matrix value) {
    nodes_.push_back(Node{std::move(value), {}, false, {}});
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::param(const Parameter& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Var{this, it->second};
    nodes_.push_back(Node{p.value, {}, grad_enabled_ && !p.frozen, {}});
    const int id = static_cast<int>(nodes_.size()) - 1;
    param_nodes_[&p] = id;
    return Var{this, id};
}

Var Tape::push(Matrix value, std::initializer_list<Var> inputs, BackwardFn fn) {
    return push(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
}

Var Tape::push(Matrix value, std::span<const Var> inputs, BackwardFn fn) {
    bool needs = false;
    if (grad_enabled_)
        for (const Var& v : inputs) needs = needs || nodes_[v.id].requires_grad;
    nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(fn) : BackwardFn{}});
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

void Tape::accumulate(int id, const Matrix& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0)
        n.grad = g;
    else
        n.grad += g;
}

void Tape::backward(Var out) {
    if (out.tape != this) throw ContractError(kMod, "backward on a foreign tape");
    const Matrix& v = nodes_[out.id].value;
    if (v.rows() != 1 || v.cols() != 1) throw ContractError(kMod, "backward needs a 1x1 output, got " + shape_str(v));
    if (!nodes_[out.id].requires_grad) return;
    accumulate(out.id, Matrix::Ones(1, 1));
    for (int i = out.id; i >= 0; --i) {
        Node& n = nodes_[i];
        if (!n.backward || n.grad.size() == 0) continue;
        n.backward(*this, i);
    }
}

const Matrix* Tape::param_grad(const Parameter& p) const {
    auto it = param_nodes_.find(&p);
    if (it == param_nodes_.end()) return nullptr;
    const Node& n = nodes_[it->second];
    if (!n.requires_grad || n.grad.size() == 0) return nullptr;
    return &n.grad;
}

std::size_t Tape::recorded_ops() const {
    return static_cast<std::size_t>(
        std::count_if(nodes_.begin(), nodes_.end(), [](const Node& n) { return static_cast<bool>(n.backward); }));
}

// ---- Gradients -----------------------------------------------------------------

Gradients::Gradients(std::vector<Parameter*> params) : params_(std::move(params)) {
    grads_.reserve(params_.size());
    for (const Parameter* p : params_) grads_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
}

void Gradients::collect(const Tape& tape, Real weight) {
    for (std::size_t i = 0; i < params_.size(); ++i)
        if (const Matrix* g = tape.param_grad(*params_[i])) grads_[i] += weight * *g;
}

void Gradients::add(const Gradients& other, Real weight) {
    for (std::size_t i = 0; i < grads_.size(); ++i) grads_[i] += weight * other.grads_[i];
}

void Gradients::scale(Real s) {
    for (auto& g : grads_) g *= s;
}

void Gradients::zero() {
    for (auto& g : grads_) g.setZero();
}

bool Gradients::all_finite() const {
    return std::all_of(grads_.begin(), grads_.end(), [](const Matrix& g) { return g.allFinite(); });
}

Real Gradients::norm() const {
    Real s = 0;
    for (const auto& g : grads_) s += g.squaredNorm();
    return std::sqrt(s);
}

// ---- elementwise / linear ------------------------------------------------------

Var matmul(Var a, Var b) {
    const Matrix& A = a.value();
    const Matrix& B = b.value();
    if (A.cols() != B.rows()) throw ContractError(kMod, "matmul: " + shape_str(A) + " x " + shape_str(B));
    Matrix out = A * B;
    return a.tape->push(std::move(out), {a, b}, [a, b](Tape& t, int self) {
        const Matrix& g = t.grad(self);
        if (t.requires_grad(a.id)) t.accumulate(a.id, g * t.value(b.id).transpose());
        if (t.requires_grad(b.id)) t.accumulate(b.id, t.value(a.id).transpose() * g);
    });
}

Var linear(Var x, Var w, Var b) {
    const Matrix& X = x.value();
    const Matrix& W = w.value();
    if (X.cols() != W.rows()) throw ContractError(kMod, "linear: " + shape_str(X) + " x " + shape_str(W));
    check_row(Matrix::Zero(1, W.cols()), b.value(), "linear bias");
    Matrix out = X * W;
    out.rowwise() += b.value().row(0);
    return x.tape->push(std::move(out), {x, w, b}, [x, w, b](Tape& t, int self) {
        const Matrix& g = t.grad(self);
        if (t.requires_grad(x.id)) t.accumulate(x.id, g * t.value(w.id).transpose());
        if (t.requires_grad(w.id)) t.accumulate(w.id, t.value(x.id).transpose() * g);
        if (t.requires_grad(b.id)) t.accumulate(b.id, g.colwise().sum());
    });
}

Var add(Var a, Var b) {
    check_same_shape(a.value(), b.value(), "add");
    Matrix out = a.value() + b.value();
    return a.tape->push(std::move(out), {a, b}, [a, b](Tape& t, int self) {
        t.accumulate(a.id, t.grad(self));
        t.accumulate(b.id, t.grad(self));
    });
}

Var sub(Var a, Var b) {
    check_same_shape(a.value(), b.value(), "sub");
    Matrix out = a.value() - b.value();
    return a.tape->push(std::move(out), {a, b}, [a, b](Tape& t, int self) {
        t.accumulate(a.id, t.grad(self));
        if (t.requires_grad(b.id)) t.accumulate(b.id, -t.grad(self));
    });
}

Var mul(Var a, Var b) {
    check_same_shape(a.value(), b.value(), "mul");
    Matrix out = a.value().cwiseProduct(b.value());
    return a.tape->push(std::move(out), {a, b}, [a, b](Tape& t, int self) {
        const Matrix& g = t.grad(self);
        if (t.requires_grad(a.id)) t.accumulate(a.id, g.cwiseProduct(t.value(b.id)));
        if (t.requires_grad(b.id)) t.accumulate(b.id, g.cwiseProduct(t.value(a.id)));
    });
}

Var scale(Var x, Real s) {
    Matrix out = s * x.value();
    return x.tape->push(std::move(out), {x}, [x, s](Tape& t, int self) { t.accumulate(x.id, s * t.grad(self)); });
}

Var add_row(Var x, Var row) {
    check_row(x.value(), row.value(), "add_row");
    Matrix out = x.value();
    out.rowwise() += row.value().row(0);
    return x.tape->push(std::move(out), {x, row}, [x, row](Tape& t, int self) {
        const Matrix& g = t.grad(self);
        t.accumulate(x.id, g);
        if (t.requires_grad(row.id)) t.accumulate(row.id, g.colwise().sum());
    });
}

Var mul_row(Var x, Var row) {
    check_row(x.value(), row.value(), "mul_row");
    const auto r = row.value().row(0).array();
    Matrix out = (x.value().array().rowwise() * r).matrix();
    return x.tape->push(std::move(out), {x, row}, [x, row](Tape& t, int self) {
        const Matrix& g = t.grad(self);
        if (t.requires_grad(x.id))
            t.accumulate(x.id, (g.array().rowwise() * t.value(row.id).row(0).array()).matrix());
        if (t.requires_grad(row.id)) t.accumulate(row.id, g.cwiseProduct(t.value(x.id)).colwise().sum());
    });
}

Var mul_one_plus_row(Var x, Var row) {
    check_row(x.value(), row.value(), "mul_one_plus_row");
    const RowVector s = (row.value().row(0).array() + 1.0).matrix();
    Matrix out = (x.value().array().rowwise() * s.array()).matrix();
    return x.tape->push(std::move(out), {x, row}, [x, row, s](Tape& t, int self) {
        const Matrix& g = t.grad(self);
        if (t.requires_grad(x.id)) t.accumulate(x.id, (g.array().rowwise() * s.array()).matrix());
        if (t.requires_grad(row.id)) t.accumulate(row.id, g.cwiseProduct(t.value(x.id)).colwise().sum());
    });
}

Var silu(Var x) {
    const Matrix& X = x.value();
    Matrix out = X.unaryExpr([](Real v) { return v * sigmoid(v); });
    return x.tape->push(std::move(out), {x}, [x](Tape& t, int self) {
        Matrix d = t.value(x.id).unaryExpr([](Real v) {
            const Real s = sigmoid(v);
            return s * (1.0 + v * (1.0 - s));
        });
        t.accumulate(x.id, t.grad(self).cwiseProduct(d));
    });
}

namespace {
constexpr Real kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr Real kGeluA = 0.044715;
}  // namespace

Var gelu(Var x) {
    Matrix out = x.value().unaryExpr([](Real v) { return 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v))); });
    return x.tape->push(std::move(out), {x}, [x](Tape& t, int self) {
        Matrix d = t.value(x.id).unaryExpr([](Real v) {
            const Real u = kGeluC * (v + kGeluA * v * v * v);
            const Real th = std::tanh(u);
            const Real du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
            return 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
        });
        t.accumulate(x.id, t.grad(self).cwiseProduct(d));
    });
}

Var layer_norm(Var x, Real eps) {
    const Matrix& X = x.value();
    const Index n = X.cols();
    Matrix xhat(X.rows(), n);
    Eigen::VectorXd inv_std(X.rows());
    for (Index r = 0; r < X.rows(); ++r) {
        const Real mu = X.row(r).mean();
        const Real var = (X.row(r).array() - mu).square().mean();
        inv_std(r) = 1.0 / std::sqrt(var + eps);
        xhat.row(r) = (X.row(r).array() - mu) * inv_std(r);
    }
    Matrix out = xhat;
    return x.tape->push(std::move(out), {x}, [x, xhat = std::move(xhat), inv_std, n](Tape& t, int self) {
        const Matrix& g = t.grad(self);
        Matrix gx(g.rows(), g.cols());
        for (Index r = 0; r < g.rows(); ++r) {
            const Real gm = g.row(r).mean();
            const Real gxm = g.row(r).dot(xhat.row(r)) / static_cast<Real>(n);
            gx.row(r) = inv_std(r) * (g.row(r).array() - gm - xhat.row(r).array() * gxm);
        }
        t.accumulate(x.id, gx);
    });
}

Var head_l2norm(Var x, int heads, Real eps) {
    const Matrix& X = x.value();
    if (heads <= 0 || X.cols() % heads != 0)
        throw ContractError(kMod, "head_l2norm: width " + std::to_string(X.cols()) + " not divisible by heads");
    const Index dh = X.cols() / heads;
    Matrix y(X.rows(), X.cols());
    Matrix inv(X.rows(), heads);
    for (Index r = 0; r < X.rows(); ++r)
        for (int h = 0; h < heads; ++h) {
            const auto seg = X.row(r).segment(h * dh, dh);
            inv(r, h) = 1.0 / std::sqrt(seg.squaredNorm() + eps);
            y.row(r).segment(h * dh, dh) = seg * inv(r, h);
        }
    Matrix out = y;
    return x.tape->push(std::move(out), {x}, [x, y = std::move(y), inv, heads, dh](Tape& t, int self) {
        const Matrix& g = t.grad(self);
        Matrix gx(g.rows(), g.cols());
        for (Index r = 0; r < g.rows(); ++r)
            for (int h = 0; h < heads; ++h) {
                const auto gs = g.row(r).segment(h * dh, dh);
                const auto ys = y.row(r).segment(h * dh, dh);
                gx.row(r).segment(h * dh, dh) = (gs - ys * ys.dot(gs)) * inv(r, h);
            }
        t.accumulate(x.id, gx);
    });
}

Var head_scale(Var x, Var g, int heads) {
    const Matrix& X = x.value();
    const Matrix& G = g.value();
    if (G.rows() != 1 || G.cols() != heads || X.cols() % heads != 0)
        throw ContractError(kMod, "head_scale: bad shapes " + shape_str(X) + ", " + shape_str(G));
    const Index dh = X.cols() / heads;
    Matrix out(X.rows(), X.cols());
    for (int h = 0; h < heads; ++h) out.middleCols(h * dh, dh) = X.middleCols(h * dh, dh) * G(0, h);
    return x.tape->push(std::move(out), {x, g}, [x, g, heads, dh](Tape& t, int self) {
        const Matrix& gr = t.grad(self);
        if (t.requires_grad(x.id)) {
            Matrix gx(gr.rows(), gr.cols());
            for (int h = 0; h < heads; ++h) gx.middleCols(h * dh, dh) = gr.middleCols(h * dh, dh) * t.value(g.id)(0, h);
            t.accumulate(x.id, gx);
        }
        if (t.requires_grad(g.id)) {
            Matrix gg(1, heads);
            for (int h = 0; h < heads; ++h)
                gg(0, h) = gr.middleCols(h * dh, dh).cwiseProduct(t.value(x.id).middleCols(h * dh, dh)).sum();
            t.accumulate(g.id, gg);
        }
    });
}

namespace {

// Applies the pairwise rotation; sign = -1 applies the inverse rotation.
Matrix rotate_pairs(const Matrix& x, const Matrix& angles, int heads, Real sign) {
    const Index dh = x.cols() / heads;
    const Index pairs = dh / 2;
    Matrix y(x.rows(), x.cols());
    for (Index r = 0; r < x.rows(); ++r)
        for (Index k = 0; k < pairs; ++k) {
            const Real c = std::cos(angles(r, k));
            const Real s = sign * std::sin(angles(r, k));
            for (int h = 0; h < heads; ++h) {
                const Index j = h * dh + 2 * k;
                const Real a = x(r, j);
                const Real b = x(r, j + 1);
                y(r, j) = a * c - b * s;
                y(r, j + 1) = a * s + b * c;
            }
        }
    return y;
}

}  // namespace

Var rope(Var x, const Matrix& angles, int heads) {
    const Matrix& X = x.value();
    if (heads <= 0 || X.cols() % heads != 0) throw ContractError(kMod, "rope: width not divisible by heads");
    const Index dh = X.cols() / heads;
    if (dh % 2 != 0) throw ContractError(kMod, "rope: head dim " + std::to_string(dh) + " is odd");
    if (angles.rows() != X.rows() || angles.cols() != dh / 2)
        throw ContractError(kMod, "rope: angles " + shape_str(angles) + " do not match " + shape_str(X));
    Matrix out = rotate_pairs(X, angles, heads, 1.0);
    return x.tape->push(std::move(out), {x}, [x, angles, heads](Tape& t, int self) {
        t.accumulate(x.id, rotate_pairs(t.grad(self), angles, heads, -1.0));
    });
}

// ---- attention -------------------------------------------------------------------

namespace {

void softmax_rows(Matrix& s) {
    for (Index r = 0; r < s.rows(); ++r) {
        const Real m = s.row(r).maxCoeff();
        s.row(r) = (s.row(r).array() - m).exp();
        s.row(r) /= s.row(r).sum();
    }
}

}  // namespace

std::vector<Matrix> attention_logits(const Matrix& q, const Matrix& k, int heads) {
    if (q.cols() != k.cols() || q.cols() % heads != 0) throw ContractError(kMod, "attention: width mismatch");
    const Index dh = q.cols() / heads;
    const Real inv = 1.0 / std::sqrt(static_cast<Real>(dh));
    std::vector<Matrix> out;
    for (int h = 0; h < heads; ++h)
        out.push_back(inv * (q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose()));
    return out;
}

std::vector<Matrix> attention_probs(const Matrix& q, const Matrix& k, int heads) {
    auto s = attention_logits(q, k, heads);
    for (auto& m : s) softmax_rows(m);
    return s;
}

Var attention(Var q, Var k, Var v, int heads) {
    const Matrix& Q = q.value();
    const Matrix& K = k.value();
    const Matrix& V = v.value();
    if (K.rows() != V.rows()) throw ContractError(kMod, "attention: key/value length mismatch");
    if (V.cols() != Q.cols()) throw ContractError(kMod, "attention: value width mismatch");
    const Index dh = Q.cols() / heads;
    auto probs = std::make_shared<std::vector<Matrix>>(attention_probs(Q, K, heads));
    Matrix out(Q.rows(), V.cols());
    for (int h = 0; h < heads; ++h) out.middleCols(h * dh, dh).noalias() = (*probs)[h] * V.middleCols(h * dh, dh);
    return q.tape->push(std::move(out), {q, k, v}, [q, k, v, heads, dh, probs](Tape& t, int self) {
        const Matrix& g = t.grad(self);
        const Matrix& Qv = t.value(q.id);
        const Matrix& Kv = t.value(k.id);
        const Matrix& Vv = t.value(v.id);
        const Real inv = 1.0 / std::sqrt(static_cast<Real>(dh));
        const bool nq = t.requires_grad(q.id), nk = t.requires_grad(k.id), nv = t.requires_grad(v.id);
        Matrix gq = nq ? Matrix::Zero(Qv.rows(), Qv.cols()) : Matrix();
        Matrix gk = nk ? Matrix::Zero(Kv.rows(), Kv.cols()) : Matrix();
        Matrix gv = nv ? Matrix::Zero(Vv.rows(), Vv.cols()) : Matrix();
        for (int h = 0; h < heads; ++h) {
            const Matrix& P = (*probs)[h];
            const auto go = g.middleCols(h * dh, dh);
            if (nv) gv.middleCols(h * dh, dh).noalias() = P.transpose() * go;
            if (!nq && !nk) continue;
            Matrix gp = go * Vv.middleCols(h * dh, dh).transpose();
            const Eigen::VectorXd rs = gp.cwiseProduct(P).rowwise().sum();
            Matrix gs = P.cwiseProduct(gp.colwise() - rs);
            gs *= inv;
            if (nq) gq.middleCols(h * dh, dh).noalias() = gs * Kv.middleCols(h * dh, dh);
            if (nk) gk.middleCols(h * dh, dh).noalias() = gs.transpose() * Qv.middleCols(h * dh, dh);
        }
        if (nq) t.accumulate(q.id, gq);
        if (nk) t.accumulate(k.id, gk);
        if (nv) t.accumulate(v.id, gv);
    });
}

// ---- structural ------------------------------------------------------------------

Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw ContractError(kMod, "concat_rows: no inputs");
    const Index cols = parts[0].cols();
    Index rows = 0;
    for (const Var& p : parts) {
        if (p.cols() != cols) throw ContractError(kMod, "concat_rows: width mismatch");
        rows += p.rows();
    }
    Matrix out(rows, cols);
    std::vector<Index> offsets;
    Index off = 0;
    for (const Var& p : parts) {
        out.middleRows(off, p.rows()) = p.value();
        offsets.push_back(off);
        off += p.rows();
    }
    std::vector<Var> inputs(parts.begin(), parts.end());
    return parts[0].tape->push(std::move(out), parts, [inputs, offsets](Tape& t, int self) {
        const Matrix& g = t.grad(self);
        for (std::size_t i = 0; i < inputs.size(); ++i)
            if (t.requires_grad(inputs[i].id))
                t.accumulate(inputs[i].id, g.middleRows(offsets[i], t.value(inputs[i].id).rows()));
    });
}

Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw ContractError(kMod, "concat_cols: no inputs");
    const Index rows = parts[0].rows();
    Index cols = 0;
    for (const Var& p : parts) {
        if (p.rows() != rows) throw ContractError(kMod, "concat_cols: height mismatch");
        cols += p.cols();
    }
    Matrix out(rows, cols);
    std::vector<Index> offsets;
    Index off = 0;
    for (const Var& p : parts) {
        out.middleCols(off, p.cols()) = p.value();
        offsets.push_back(off);
        off += p.cols();
    }
    std::vector<Var> inputs(parts.begin(), parts.end());
    return parts[0].tape->push(std::move(out), parts, [inputs, offsets](Tape& t, int self) {
        const Matrix& g = t.grad(self);
        for (std::size_t i = 0; i < inputs.size(); ++i)
            if (t.requires_grad(inputs[i].id))
                t.accumulate(inputs[i].id, g.middleCols(offsets[i], t.value(inputs[i].id).cols()));
    });
}

Var slice_rows(Var x, Index begin, Index count) {
    const Matrix& X = x.value();
    if (begin < 0 || count < 0 || begin + count > X.rows()) throw ContractError(kMod, "slice_rows: out of range");
    Matrix out = X.middleRows(begin, count);
    return x.tape->push(std::move(out), {x}, [x, begin, count](Tape& t, int self) {
        const Matrix& X = t.value(x.id);
        Matrix gx = Matrix::Zero(X.rows(), X.cols());
        gx.middleRows(begin, count) = t.grad(self);
        t.accumulate(x.id, gx);
    });
}

Var slice_cols(Var x, Index begin, Index count) {
    const Matrix& X = x.value();
    if (begin < 0 || count < 0 || begin + count > X.cols()) throw ContractError(kMod, "slice_cols: out of range");
    Matrix out = X.middleCols(begin, count);
    return x.tape->push(std::move(out), {x}, [x, begin, count](Tape& t, int self) {
        const Matrix& X = t.value(x.id);
        Matrix gx = Matrix::Zero(X.rows(), X.cols());
        gx.middleCols(begin, count) = t.grad(self);
        t.accumulate(x.id, gx);
    });
}

Var gather_rows(Var x, std::vector<Index> index) {
    const Matrix& X = x.value();
    Matrix out(static_cast<Index>(index.size()), X.cols());
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] < 0 || index[i] >= X.rows()) throw ContractError(kMod, "gather_rows: index out of range");
        out.row(static_cast<Index>(i)) = X.row(index[i]);
    }
    return x.tape->push(std::move(out), {x}, [x, index = std::move(index)](Tape& t, int self) {
        const Matrix& g = t.grad(self);
        const Matrix& X = t.value(x.id);
        Matrix gx = Matrix::Zero(X.rows(), X.cols());
        for (std::size_t i = 0; i < index.size(); ++i) gx.row(index[i]) += g.row(static_cast<Index>(i));
        t.accumulate(x.id, gx);
    });
}

Var segment_mean(Var x, std::vector<Index> segment, Index n_segments) {
    const Matrix& X = x.value();
    if (static_cast<Index>(segment.size()) != X.rows()) throw ContractError(kMod, "segment_mean: segment size mismatch");
    Matrix out = Matrix::Zero(n_segments, X.cols());
    Eigen::VectorXd count = Eigen::VectorXd::Zero(n_segments);
    for (Index r = 0; r < X.rows(); ++r) {
        const Index s = segment[r];
        if (s < 0 || s >= n_segments) throw ContractError(kMod, "segment_mean: segment out of range");
        out.row(s) += X.row(r);
        count(s) += 1.0;
    }
    for (Index s = 0; s < n_segments; ++s)
        if (count(s) > 0) out.row(s) /= count(s);
    return x.tape->push(std::move(out), {x}, [x, segment = std::move(segment), count](Tape& t, int self) {
        const Matrix& g = t.grad(self);
        Matrix gx(static_cast<Index>(segment.size()), g.cols());
        for (std::size_t r = 0; r < segment.size(); ++r)
            gx.row(static_cast<Index>(r)) = g.row(segment[r]) / count(segment[r]);
        t.accumulate(x.id, gx);
    });
}

Var mse(Var pred, const Matrix& target) {
    check_same_shape(pred.value(), target, "mse");
    Matrix diff = pred.value() - target;
    const Real n = static_cast<Real>(diff.size());
    Matrix out(1, 1);
    out(0, 0) = diff.squaredNorm() / n;
    return pred.tape->push(std::move(out), {pred}, [pred, diff = std::move(diff), n](Tape& t, int self) {
        t.accumulate(pred.id, (2.0 * t.grad(self)(0, 0) / n) * diff);
    });
}

Var sum(Var x) {
    Matrix out(1, 1);
    out(0, 0) = x.value().sum();
    return x.tape->push(std::move(out), {x}, [x](Tape& t, int self) {
        const Matrix& X = t.value(x.id);
        t.accumulate(x.id, Matrix::Constant(X.rows(), X.cols(), t.grad(self)(0, 0)));
    });
}

Var weighted_sum(Var x, const Matrix& w) {
    check_same_shape(x.value(), w, "weighted_sum");
    Matrix out(1, 1);
    out(0, 0) = x.value().cwiseProduct(w).sum();
    return x.tape->push(std::move(out), {x}, [x, w](Tape& t, int self) { t.accumulate(x.id, t.grad(self)(0, 0) * w); });
}

}  // namespace avlink::ad
