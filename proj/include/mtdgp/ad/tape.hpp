#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mtdgp/core/cholesky.hpp"
#include "mtdgp/core/matrix.hpp"
#include "mtdgp/errors.hpp"

namespace mtdgp::ad {

class Tape;

// Handle to a matrix-valued node on a tape. Cheap to copy; the tape owns the
// values and adjoints.
class Var {
  public:
    Var() = default;

    const Matrix& value() const;
    Index rows() const { return value().rows(); }
    Index cols() const { return value().cols(); }
    double scalar() const;

    Tape* tape() const { return tape_; }
    int id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

  private:
    friend class Tape;
    Var(Tape* tape, int id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    int id_ = -1;
};

// Reverse-mode tape over matrix-valued nodes. Built and consumed by a single
// logical thread per objective evaluation; parallel evaluations use disjoint
// tapes.
class Tape {
  public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Matrix value) { return push(std::move(value), false, {}, nullptr); }

    Var scalar_constant(double value) {
        Matrix m(1, 1);
        m(0, 0) = value;
        return constant(std::move(m));
    }

    // Differentiable leaf (a parameter in its unconstrained form).
    Var leaf(Matrix value) { return push(std::move(value), true, {}, nullptr); }

    const Matrix& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }

    bool requires_grad(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }

    // Adjoint of a node after backward(); zeros if the node never received
    // gradient (i.e. it does not influence the objective).
    Matrix grad(Var v) const {
        const Node& n = nodes_[static_cast<size_t>(v.id())];
        if (n.adjoint.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
        return n.adjoint;
    }

    // Reverse sweep from a scalar (1x1) output node.
    void backward(Var output) {
        if (output.tape() != this) throw Error("backward: node belongs to a different tape");
        const Node& out = nodes_[static_cast<size_t>(output.id())];
        if (out.value.size() != 1) throw ShapeMismatch("backward: output must be 1x1");
        for (Node& n : nodes_) n.adjoint.resize(0, 0);
        adjoint_of(output.id()) = Matrix::Ones(1, 1);
        for (int i = output.id(); i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (n.adjoint.size() == 0 || !n.backward) continue;
            n.backward(*this, n.adjoint);
        }
    }

    size_t size() const { return nodes_.size(); }

    // --- used by op implementations ---

    using BackwardFn = std::function<void(Tape&, const Matrix& upstream)>;

    Var push(Matrix value, bool requires_grad, std::vector<int> inputs, BackwardFn backward) {
        if (!value.allFinite())
            throw NonFiniteValue("tape: op produced non-finite values (node " +
                                 std::to_string(nodes_.size()) + ")");
        Node n;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        n.inputs = std::move(inputs);
        n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        return Var(this, static_cast<int>(nodes_.size()) - 1);
    }

    bool any_requires_grad(std::initializer_list<Var> vars) const {
        for (const Var& v : vars)
            if (requires_grad(v.id())) return true;
        return false;
    }

    template <class Expr>
    void accumulate(int id, const Expr& contribution) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.requires_grad) return;
        if (n.adjoint.size() == 0) n.adjoint = Matrix::Zero(n.value.rows(), n.value.cols());
        n.adjoint += contribution;
    }

  private:
    struct Node {
        Matrix value;
        Matrix adjoint;
        bool requires_grad = false;
        std::vector<int> inputs;
        BackwardFn backward;
    };

    Matrix& adjoint_of(int id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.adjoint.size() == 0) n.adjoint = Matrix::Zero(n.value.rows(), n.value.cols());
        return n.adjoint;
    }

    std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }

inline double Var::scalar() const {
    const Matrix& v = value();
    if (v.size() != 1) throw ShapeMismatch("scalar(): node is not 1x1");
    return v(0, 0);
}

namespace detail {

inline void check_same_tape(Var a, Var b, const char* op) {
    if (a.tape() != b.tape()) throw Error(std::string(op) + ": nodes from different tapes");
}

inline void check_same_shape(Var a, Var b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ShapeMismatch(std::string(op) + ": shapes " + std::to_string(a.rows()) + "x" +
                            std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                            std::to_string(b.cols()));
}

inline double softplus_scalar(double x) {
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double sigmoid_scalar(double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace detail

// ---- elementwise binary ----

inline Var add(Var a, Var b) {
    detail::check_same_tape(a, b, "add");
    detail::check_same_shape(a, b, "add");
    Tape& t = *a.tape();
    bool rg = t.any_requires_grad({a, b});
    int ia = a.id(), ib = b.id();
    return t.push(a.value() + b.value(), rg, {ia, ib},
                  rg ? [ia, ib](Tape& t, const Matrix& g) {
                      t.accumulate(ia, g);
                      t.accumulate(ib, g);
                  } : Tape::BackwardFn{});
}

inline Var sub(Var a, Var b) {
    detail::check_same_tape(a, b, "sub");
    detail::check_same_shape(a, b, "sub");
    Tape& t = *a.tape();
    bool rg = t.any_requires_grad({a, b});
    int ia = a.id(), ib = b.id();
    return t.push(a.value() - b.value(), rg, {ia, ib},
                  rg ? [ia, ib](Tape& t, const Matrix& g) {
                      t.accumulate(ia, g);
                      t.accumulate(ib, -g);
                  } : Tape::BackwardFn{});
}

inline Var mul(Var a, Var b) {  // elementwise
    detail::check_same_tape(a, b, "mul");
    detail::check_same_shape(a, b, "mul");
    Tape& t = *a.tape();
    bool rg = t.any_requires_grad({a, b});
    int ia = a.id(), ib = b.id();
    return t.push(a.value().cwiseProduct(b.value()), rg, {ia, ib},
                  rg ? [ia, ib](Tape& t, const Matrix& g) {
                      t.accumulate(ia, g.cwiseProduct(t.value(ib)));
                      t.accumulate(ib, g.cwiseProduct(t.value(ia)));
                  } : Tape::BackwardFn{});
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }

// ---- elementwise unary ----

inline Var neg(Var a) {
    Tape& t = *a.tape();
    bool rg = t.requires_grad(a.id());
    int ia = a.id();
    return t.push(-a.value(), rg, {ia},
                  rg ? [ia](Tape& t, const Matrix& g) { t.accumulate(ia, -g); }
                     : Tape::BackwardFn{});
}

inline Var operator-(Var a) { return neg(a); }

inline Var square(Var a) {
    Tape& t = *a.tape();
    bool rg = t.requires_grad(a.id());
    int ia = a.id();
    return t.push(a.value().cwiseProduct(a.value()), rg, {ia},
                  rg ? [ia](Tape& t, const Matrix& g) {
                      t.accumulate(ia, 2.0 * g.cwiseProduct(t.value(ia)));
                  } : Tape::BackwardFn{});
}

inline Var sqrt(Var a) {
    Tape& t = *a.tape();
    bool rg = t.requires_grad(a.id());
    int ia = a.id();
    Matrix y = a.value().cwiseSqrt();
    return t.push(std::move(y), rg, {ia},
                  rg ? [ia, self = static_cast<int>(t.size())](Tape& t, const Matrix& g) {
                      t.accumulate(ia, (0.5 * g.array() / t.value(self).array()).matrix());
                  } : Tape::BackwardFn{});
}

inline Var log(Var a) {
    Tape& t = *a.tape();
    bool rg = t.requires_grad(a.id());
    int ia = a.id();
    return t.push(a.value().array().log().matrix(), rg, {ia},
                  rg ? [ia](Tape& t, const Matrix& g) {
                      t.accumulate(ia, (g.array() / t.value(ia).array()).matrix());
                  } : Tape::BackwardFn{});
}

inline Var exp(Var a) {
    Tape& t = *a.tape();
    bool rg = t.requires_grad(a.id());
    int ia = a.id();
    return t.push(a.value().array().exp().matrix(), rg, {ia},
                  rg ? [ia, self = static_cast<int>(t.size())](Tape& t, const Matrix& g) {
                      t.accumulate(ia, g.cwiseProduct(t.value(self)));
                  } : Tape::BackwardFn{});
}

inline Var recip(Var a) {
    Tape& t = *a.tape();
    bool rg = t.requires_grad(a.id());
    int ia = a.id();
    return t.push(a.value().cwiseInverse(), rg, {ia},
                  rg ? [ia, self = static_cast<int>(t.size())](Tape& t, const Matrix& g) {
                      const auto& y = t.value(self).array();
                      t.accumulate(ia, (-g.array() * y * y).matrix());
                  } : Tape::BackwardFn{});
}

inline Var softplus(Var a) {
    Tape& t = *a.tape();
    bool rg = t.requires_grad(a.id());
    int ia = a.id();
    Matrix y = a.value().unaryExpr([](double x) { return detail::softplus_scalar(x); });
    return t.push(std::move(y), rg, {ia},
                  rg ? [ia](Tape& t, const Matrix& g) {
                      Matrix s = t.value(ia).unaryExpr(
                          [](double x) { return detail::sigmoid_scalar(x); });
                      t.accumulate(ia, g.cwiseProduct(s));
                  } : Tape::BackwardFn{});
}

inline Var sigmoid(Var a) {
    Tape& t = *a.tape();
    bool rg = t.requires_grad(a.id());
    int ia = a.id();
    Matrix y = a.value().unaryExpr([](double x) { return detail::sigmoid_scalar(x); });
    return t.push(std::move(y), rg, {ia},
                  rg ? [ia, self = static_cast<int>(t.size())](Tape& t, const Matrix& g) {
                      const auto& y = t.value(self).array();
                      t.accumulate(ia, (g.array() * y * (1.0 - y)).matrix());
                  } : Tape::BackwardFn{});
}

// max(a, floor) elementwise; entries at or below the floor pass no gradient.
// Counts clamped entries into *clamp_counter when provided.
inline Var clamp_min(Var a, double floor, long* clamp_counter = nullptr) {
    Tape& t = *a.tape();
    bool rg = t.requires_grad(a.id());
    int ia = a.id();
    if (clamp_counter) *clamp_counter += (a.value().array() < floor).count();
    return t.push(a.value().cwiseMax(floor), rg, {ia},
                  rg ? [ia, floor](Tape& t, const Matrix& g) {
                      Matrix mask = (t.value(ia).array() > floor).cast<double>().matrix();
                      t.accumulate(ia, g.cwiseProduct(mask));
                  } : Tape::BackwardFn{});
}

// ---- scalar broadcasting ----

inline Var scalar_mul(Var a, double c) {
    Tape& t = *a.tape();
    bool rg = t.requires_grad(a.id());
    int ia = a.id();
    return t.push(c * a.value(), rg, {ia},
                  rg ? [ia, c](Tape& t, const Matrix& g) { t.accumulate(ia, c * g); }
                     : Tape::BackwardFn{});
}

inline Var add_const(Var a, double c) {
    Tape& t = *a.tape();
    bool rg = t.requires_grad(a.id());
    int ia = a.id();
    return t.push((a.value().array() + c).matrix(), rg, {ia},
                  rg ? [ia](Tape& t, const Matrix& g) { t.accumulate(ia, g); }
                     : Tape::BackwardFn{});
}

// s * a with s a 1x1 node.
inline Var scale(Var a, Var s) {
    detail::check_same_tape(a, s, "scale");
    if (s.value().size() != 1) throw ShapeMismatch("scale: scale factor must be 1x1");
    Tape& t = *a.tape();
    bool rg = t.any_requires_grad({a, s});
    int ia = a.id(), is = s.id();
    return t.push(s.scalar() * a.value(), rg, {ia, is},
                  rg ? [ia, is](Tape& t, const Matrix& g) {
                      t.accumulate(ia, t.value(is)(0, 0) * g);
                      Matrix gs(1, 1);
                      gs(0, 0) = g.cwiseProduct(t.value(ia)).sum();
                      t.accumulate(is, gs);
                  } : Tape::BackwardFn{});
}

// s broadcast to rows x cols.
inline Var broadcast_scalar(Var s, Index rows, Index cols) {
    if (s.value().size() != 1) throw ShapeMismatch("broadcast_scalar: source must be 1x1");
    Tape& t = *s.tape();
    bool rg = t.requires_grad(s.id());
    int is = s.id();
    return t.push(Matrix::Constant(rows, cols, s.scalar()), rg, {is},
                  rg ? [is](Tape& t, const Matrix& g) {
                      Matrix gs(1, 1);
                      gs(0, 0) = g.sum();
                      t.accumulate(is, gs);
                  } : Tape::BackwardFn{});
}

// ---- structural ----

inline Var transpose(Var a) {
    Tape& t = *a.tape();
    bool rg = t.requires_grad(a.id());
    int ia = a.id();
    return t.push(a.value().transpose(), rg, {ia},
                  rg ? [ia](Tape& t, const Matrix& g) { t.accumulate(ia, g.transpose()); }
                     : Tape::BackwardFn{});
}

inline Var matmul(Var a, Var b) {
    detail::check_same_tape(a, b, "matmul");
    if (a.cols() != b.rows())
        throw ShapeMismatch("matmul: inner dimensions " + std::to_string(a.cols()) + " vs " +
                            std::to_string(b.rows()));
    Tape& t = *a.tape();
    bool rg = t.any_requires_grad({a, b});
    int ia = a.id(), ib = b.id();
    return t.push(a.value() * b.value(), rg, {ia, ib},
                  rg ? [ia, ib](Tape& t, const Matrix& g) {
                      t.accumulate(ia, g * t.value(ib).transpose());
                      t.accumulate(ib, t.value(ia).transpose() * g);
                  } : Tape::BackwardFn{});
}

inline Var sum(Var a) {
    Tape& t = *a.tape();
    bool rg = t.requires_grad(a.id());
    int ia = a.id();
    Matrix s(1, 1);
    s(0, 0) = a.value().sum();
    return t.push(std::move(s), rg, {ia},
                  rg ? [ia](Tape& t, const Matrix& g) {
                      t.accumulate(ia, Matrix::Constant(t.value(ia).rows(), t.value(ia).cols(),
                                                        g(0, 0)));
                  } : Tape::BackwardFn{});
}

inline Var rowsum(Var a) {  // R x C -> R x 1
    Tape& t = *a.tape();
    bool rg = t.requires_grad(a.id());
    int ia = a.id();
    return t.push(a.value().rowwise().sum(), rg, {ia},
                  rg ? [ia](Tape& t, const Matrix& g) {
                      t.accumulate(ia, g * Matrix::Ones(1, t.value(ia).cols()));
                  } : Tape::BackwardFn{});
}

inline Var colsum(Var a) {  // R x C -> 1 x C
    Tape& t = *a.tape();
    bool rg = t.requires_grad(a.id());
    int ia = a.id();
    return t.push(a.value().colwise().sum(), rg, {ia},
                  rg ? [ia](Tape& t, const Matrix& g) {
                      t.accumulate(ia, Matrix::Ones(t.value(ia).rows(), 1) * g);
                  } : Tape::BackwardFn{});
}

inline Var diag_vec(Var a) {  // n x n -> n x 1
    if (a.rows() != a.cols()) throw ShapeMismatch("diag_vec: matrix must be square");
    Tape& t = *a.tape();
    bool rg = t.requires_grad(a.id());
    int ia = a.id();
    return t.push(a.value().diagonal(), rg, {ia},
                  rg ? [ia](Tape& t, const Matrix& g) {
                      Matrix d = Matrix::Zero(t.value(ia).rows(), t.value(ia).cols());
                      d.diagonal() = g.col(0);
                      t.accumulate(ia, d);
                  } : Tape::BackwardFn{});
}

inline Var diag_matrix(Var a) {  // n x 1 -> n x n
    if (a.cols() != 1) throw ShapeMismatch("diag_matrix: input must be a column vector");
    Tape& t = *a.tape();
    bool rg = t.requires_grad(a.id());
    int ia = a.id();
    Matrix y = Matrix::Zero(a.rows(), a.rows());
    y.diagonal() = a.value().col(0);
    return t.push(std::move(y), rg, {ia},
                  rg ? [ia](Tape& t, const Matrix& g) { t.accumulate(ia, g.diagonal()); }
                     : Tape::BackwardFn{});
}

inline Var col_of(Var a, Index j) {  // N x P -> N x 1
    if (j < 0 || j >= a.cols()) throw ShapeMismatch("col_of: column index out of range");
    Tape& t = *a.tape();
    bool rg = t.requires_grad(a.id());
    int ia = a.id();
    return t.push(a.value().col(j), rg, {ia},
                  rg ? [ia, j](Tape& t, const Matrix& g) {
                      Matrix d = Matrix::Zero(t.value(ia).rows(), t.value(ia).cols());
                      d.col(j) = g.col(0);
                      t.accumulate(ia, d);
                  } : Tape::BackwardFn{});
}

// a + s*I with s a 1x1 node.
inline Var add_diag(Var a, Var s) {
    detail::check_same_tape(a, s, "add_diag");
    if (a.rows() != a.cols()) throw ShapeMismatch("add_diag: matrix must be square");
    if (s.value().size() != 1) throw ShapeMismatch("add_diag: shift must be 1x1");
    Tape& t = *a.tape();
    bool rg = t.any_requires_grad({a, s});
    int ia = a.id(), is = s.id();
    Matrix y = a.value();
    y.diagonal().array() += s.scalar();
    return t.push(std::move(y), rg, {ia, is},
                  rg ? [ia, is](Tape& t, const Matrix& g) {
                      t.accumulate(ia, g);
                      Matrix gs(1, 1);
                      gs(0, 0) = g.trace();
                      t.accumulate(is, gs);
                  } : Tape::BackwardFn{});
}

inline Var add_diag_const(Var a, double c) {
    if (a.rows() != a.cols()) throw ShapeMismatch("add_diag_const: matrix must be square");
    Tape& t = *a.tape();
    bool rg = t.requires_grad(a.id());
    int ia = a.id();
    Matrix y = a.value();
    y.diagonal().array() += c;
    return t.push(std::move(y), rg, {ia},
                  rg ? [ia](Tape& t, const Matrix& g) { t.accumulate(ia, g); }
                     : Tape::BackwardFn{});
}

// (a_n + b_m) outer sum: N x 1, M x 1 -> N x M.
inline Var add_outer(Var a, Var b) {
    detail::check_same_tape(a, b, "add_outer");
    if (a.cols() != 1 || b.cols() != 1) throw ShapeMismatch("add_outer: inputs must be column vectors");
    Tape& t = *a.tape();
    bool rg = t.any_requires_grad({a, b});
    int ia = a.id(), ib = b.id();
    Matrix y = a.value() * Matrix::Ones(1, b.rows()) + Matrix::Ones(a.rows(), 1) * b.value().transpose();
    return t.push(std::move(y), rg, {ia, ib},
                  rg ? [ia, ib](Tape& t, const Matrix& g) {
                      t.accumulate(ia, g.rowwise().sum());
                      t.accumulate(ib, g.colwise().sum().transpose());
                  } : Tape::BackwardFn{});
}

// Multiply column j of x by w_j: (N x D, D x 1) -> N x D.
inline Var scale_cols(Var x, Var w) {
    detail::check_same_tape(x, w, "scale_cols");
    if (w.cols() != 1 || w.rows() != x.cols())
        throw ShapeMismatch("scale_cols: weight must be D x 1 matching x columns");
    Tape& t = *x.tape();
    bool rg = t.any_requires_grad({x, w});
    int ix = x.id(), iw = w.id();
    Matrix y = (x.value().array().rowwise() * w.value().col(0).transpose().array()).matrix();
    return t.push(std::move(y), rg, {ix, iw},
                  rg ? [ix, iw](Tape& t, const Matrix& g) {
                      t.accumulate(ix, (g.array().rowwise() *
                                        t.value(iw).col(0).transpose().array()).matrix());
                      t.accumulate(iw, g.cwiseProduct(t.value(ix)).colwise().sum().transpose());
                  } : Tape::BackwardFn{});
}

inline Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeMismatch("concat_cols: no inputs");
    Tape& t = *parts[0].tape();
    Index rows = parts[0].rows();
    Index cols = 0;
    bool rg = false;
    std::vector<int> ids;
    std::vector<Index> widths;
    for (const Var& p : parts) {
        detail::check_same_tape(parts[0], p, "concat_cols");
        if (p.rows() != rows) throw ShapeMismatch("concat_cols: row counts differ");
        cols += p.cols();
        ids.push_back(p.id());
        widths.push_back(p.cols());
        rg = rg || t.requires_grad(p.id());
    }
    Matrix y(rows, cols);
    Index at = 0;
    for (const Var& p : parts) {
        y.middleCols(at, p.cols()) = p.value();
        at += p.cols();
    }
    return t.push(std::move(y), rg, ids,
                  rg ? [ids, widths](Tape& t, const Matrix& g) {
                      Index at = 0;
                      for (size_t k = 0; k < ids.size(); ++k) {
                          t.accumulate(ids[k], g.middleCols(at, widths[k]));
                          at += widths[k];
                      }
                  } : Tape::BackwardFn{});
}

inline Var concat_cols(std::initializer_list<Var> parts) {
    std::vector<Var> v(parts);
    return concat_cols(std::span<const Var>(v));
}

inline Var element(Var a, Index i, Index j) {  // -> 1x1
    Tape& t = *a.tape();
    if (i < 0 || i >= a.rows() || j < 0 || j >= a.cols())
        throw ShapeMismatch("element: index out of range");
    bool rg = t.requires_grad(a.id());
    int ia = a.id();
    Matrix y(1, 1);
    y(0, 0) = a.value()(i, j);
    return t.push(std::move(y), rg, {ia},
                  rg ? [ia, i, j](Tape& t, const Matrix& g) {
                      Matrix d = Matrix::Zero(t.value(ia).rows(), t.value(ia).cols());
                      d(i, j) = g(0, 0);
                      t.accumulate(ia, d);
                  } : Tape::BackwardFn{});
}

// Y(n, m) = B(rows_idx[n], cols_idx[m]); used for task-covariance lookups.
inline Var gather_outer(Var b, std::vector<Index> rows_idx, std::vector<Index> cols_idx) {
    Tape& t = *b.tape();
    for (Index r : rows_idx)
        if (r < 0 || r >= b.rows()) throw TaskIndexOutOfRange("gather_outer: row index out of range");
    for (Index c : cols_idx)
        if (c < 0 || c >= b.cols()) throw TaskIndexOutOfRange("gather_outer: col index out of range");
    bool rg = t.requires_grad(b.id());
    int ib = b.id();
    Matrix y(static_cast<Index>(rows_idx.size()), static_cast<Index>(cols_idx.size()));
    for (size_t n = 0; n < rows_idx.size(); ++n)
        for (size_t m = 0; m < cols_idx.size(); ++m)
            y(static_cast<Index>(n), static_cast<Index>(m)) = b.value()(rows_idx[n], cols_idx[m]);
    return t.push(std::move(y), rg, {ib},
                  rg ? [ib, rows_idx, cols_idx](Tape& t, const Matrix& g) {
                      Matrix d = Matrix::Zero(t.value(ib).rows(), t.value(ib).cols());
                      for (size_t n = 0; n < rows_idx.size(); ++n)
                          for (size_t m = 0; m < cols_idx.size(); ++m)
                              d(rows_idx[n], cols_idx[m]) += g(static_cast<Index>(n),
                                                               static_cast<Index>(m));
                      t.accumulate(ib, d);
                  } : Tape::BackwardFn{});
}

// ---- kernel shape function ----

// Matern-5/2 radial profile as a function of the squared distance d:
// (1 + sqrt(5)r + 5d/3) exp(-sqrt(5)r) with r = sqrt(d). The derivative in d,
// -(5/6)(1 + sqrt(5)r)exp(-sqrt(5)r), is smooth at d = 0, which keeps
// gradients finite on the diagonal where the naive sqrt chain rule blows up.
inline Var matern52_from_sqdist(Var d) {
    Tape& t = *d.tape();
    bool rg = t.requires_grad(d.id());
    int id = d.id();
    const double sqrt5 = std::sqrt(5.0);
    Matrix y = d.value().unaryExpr([sqrt5](double dd) {
        const double r = std::sqrt(std::max(dd, 0.0));
        const double tt = sqrt5 * r;
        return (1.0 + tt + (5.0 / 3.0) * std::max(dd, 0.0)) * std::exp(-tt);
    });
    return t.push(std::move(y), rg, {id},
                  rg ? [id, sqrt5](Tape& t, const Matrix& g) {
                      Matrix df = t.value(id).unaryExpr([sqrt5](double dd) {
                          const double r = std::sqrt(std::max(dd, 0.0));
                          const double tt = sqrt5 * r;
                          return -(5.0 / 6.0) * (1.0 + tt) * std::exp(-tt);
                      });
                      t.accumulate(id, g.cwiseProduct(df));
                  } : Tape::BackwardFn{});
}

// ---- constraint transform ----

// Lower-triangular with softplus-positive diagonal; entries above the
// diagonal are ignored and receive zero gradient.
inline Var tril_softplus_diag(Var u) {
    if (u.rows() != u.cols()) throw ShapeMismatch("tril_softplus_diag: matrix must be square");
    Tape& t = *u.tape();
    bool rg = t.requires_grad(u.id());
    int iu = u.id();
    Matrix y = u.value().triangularView<Eigen::StrictlyLower>();
    for (Index i = 0; i < u.rows(); ++i) y(i, i) = detail::softplus_scalar(u.value()(i, i));
    return t.push(std::move(y), rg, {iu},
                  rg ? [iu](Tape& t, const Matrix& g) {
                      const Matrix& u = t.value(iu);
                      Matrix d = Matrix::Zero(u.rows(), u.cols());
                      d.triangularView<Eigen::StrictlyLower>() = g;
                      for (Index i = 0; i < u.rows(); ++i)
                          d(i, i) = g(i, i) * detail::sigmoid_scalar(u(i, i));
                      t.accumulate(iu, d);
                  } : Tape::BackwardFn{});
}

// ---- linear algebra ----

// Lower Cholesky factor of a + jitter*I (with the shared escalation ladder).
inline Var cholesky(Var a, double jitter = 0.0) {
    Tape& t = *a.tape();
    bool rg = t.requires_grad(a.id());
    int ia = a.id();
    CholeskyResult res = mtdgp::cholesky_ex(a.value(), jitter);
    return t.push(std::move(res.lower), rg, {ia},
                  rg ? [ia, self = static_cast<int>(t.size())](Tape& t, const Matrix& g) {
                      const Matrix& lower = t.value(self);
                      Matrix middle = lower.transpose() * g;
                      middle = Matrix(middle.triangularView<Eigen::Lower>());
                      middle.diagonal() *= 0.5;
                      Matrix left = mtdgp::solve_lower_transpose(lower, middle);
                      Matrix grad_a = mtdgp::solve_lower_transpose(
                                          lower, left.transpose()).transpose();
                      t.accumulate(ia, 0.5 * (grad_a + grad_a.transpose()));
                  } : Tape::BackwardFn{});
}

// L^-1 b for the lower triangle of l; upper entries of l are ignored.
inline Var solve_lower(Var l, Var b) {
    detail::check_same_tape(l, b, "solve_lower");
    if (l.rows() != l.cols() || l.rows() != b.rows())
        throw ShapeMismatch("solve_lower: incompatible shapes");
    Tape& t = *l.tape();
    bool rg = t.any_requires_grad({l, b});
    int il = l.id(), ib = b.id();
    Matrix y = mtdgp::solve_lower(l.value(), b.value());
    return t.push(std::move(y), rg, {il, ib},
                  rg ? [il, ib, self = static_cast<int>(t.size())](Tape& t, const Matrix& g) {
                      Matrix gb = mtdgp::solve_lower_transpose(t.value(il), g);
                      t.accumulate(ib, gb);
                      Matrix gl = -gb * t.value(self).transpose();
                      t.accumulate(il, Matrix(gl.triangularView<Eigen::Lower>()));
                  } : Tape::BackwardFn{});
}

// L^-T b for the lower triangle of l.
inline Var solve_lower_transpose(Var l, Var b) {
    detail::check_same_tape(l, b, "solve_lower_transpose");
    if (l.rows() != l.cols() || l.rows() != b.rows())
        throw ShapeMismatch("solve_lower_transpose: incompatible shapes");
    Tape& t = *l.tape();
    bool rg = t.any_requires_grad({l, b});
    int il = l.id(), ib = b.id();
    Matrix y = mtdgp::solve_lower_transpose(l.value(), b.value());
    return t.push(std::move(y), rg, {il, ib},
                  rg ? [il, ib, self = static_cast<int>(t.size())](Tape& t, const Matrix& g) {
                      Matrix gb = mtdgp::solve_lower(t.value(il), g);
                      t.accumulate(ib, gb);
                      Matrix gl = -gb * t.value(self).transpose();
                      t.accumulate(il, Matrix(gl.transpose().triangularView<Eigen::Lower>()));
                  } : Tape::BackwardFn{});
}

}  // namespace mtdgp::ad
