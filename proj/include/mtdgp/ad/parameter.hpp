#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mtdgp/ad/tape.hpp"
#include "mtdgp/core/matrix.hpp"
#include "mtdgp/errors.hpp"

namespace mtdgp::ad {

enum class Constraint {
    none,       // stored value used as-is
    positive,   // softplus of the stored value
    tril_cov,   // lower triangle, softplus-positive diagonal
};

inline double softplus_inverse_scalar(double y) {
    if (!(y > 0.0)) throw Error("softplus_inverse: value must be positive");
    // log(exp(y) - 1), stable for both tails.
    if (y > 30.0) return y;
    return std::log(std::expm1(y));
}

// Constrained value from the unconstrained storage (plain, no tape).
inline Matrix apply_constraint(const Matrix& u, Constraint c) {
    switch (c) {
        case Constraint::none:
            return u;
        case Constraint::positive:
            return u.unaryExpr([](double x) { return detail::softplus_scalar(x); });
        case Constraint::tril_cov: {
            if (u.rows() != u.cols()) throw ShapeMismatch("tril_cov: matrix must be square");
            Matrix y = u.triangularView<Eigen::StrictlyLower>();
            for (Index i = 0; i < u.rows(); ++i) y(i, i) = detail::softplus_scalar(u(i, i));
            return y;
        }
    }
    throw Error("apply_constraint: unknown constraint");
}

inline Matrix invert_constraint(const Matrix& v, Constraint c) {
    switch (c) {
        case Constraint::none:
            return v;
        case Constraint::positive:
            return v.unaryExpr([](double y) { return softplus_inverse_scalar(y); });
        case Constraint::tril_cov: {
            if (v.rows() != v.cols()) throw ShapeMismatch("tril_cov: matrix must be square");
            Matrix u = v.triangularView<Eigen::StrictlyLower>();
            for (Index i = 0; i < v.rows(); ++i) u(i, i) = softplus_inverse_scalar(v(i, i));
            return u;
        }
    }
    throw Error("invert_constraint: unknown constraint");
}

// A named trainable array. The optimizer sees the unconstrained storage; the
// model sees the constrained value.
class Parameter {
  public:
    Parameter() = default;

    Parameter(std::string name, Matrix constrained_value, Constraint c = Constraint::none)
        : name_(std::move(name)),
          constraint_(c),
          unconstrained_(invert_constraint(constrained_value, c)) {
        require_finite(unconstrained_, name_);
    }

    static Parameter from_unconstrained(std::string name, Matrix u, Constraint c) {
        Parameter p;
        p.name_ = std::move(name);
        p.constraint_ = c;
        p.unconstrained_ = std::move(u);
        require_finite(p.unconstrained_, p.name_);
        return p;
    }

    const std::string& name() const { return name_; }
    Constraint constraint() const { return constraint_; }

    const Matrix& unconstrained() const { return unconstrained_; }
    Matrix& unconstrained() { return unconstrained_; }

    Matrix constrained() const { return apply_constraint(unconstrained_, constraint_); }

    void set_constrained(const Matrix& v) { unconstrained_ = invert_constraint(v, constraint_); }

    Index rows() const { return unconstrained_.rows(); }
    Index cols() const { return unconstrained_.cols(); }
    Index size() const { return unconstrained_.size(); }

  private:
    std::string name_;
    Constraint constraint_ = Constraint::none;
    Matrix unconstrained_;
};

// Places parameters on a tape. Binding the same parameter twice returns the
// same node, so one objective sees one leaf per parameter.
class ParamBinding {
  public:
    explicit ParamBinding(Tape& tape) : tape_(&tape) {}

    // Constrained node for use in the model graph.
    Var bind(const Parameter& p) {
        auto it = bound_.find(&p);
        if (it != bound_.end()) return it->second.constrained;
        Var leaf = tape_->leaf(p.unconstrained());
        Var constrained = leaf;
        switch (p.constraint()) {
            case Constraint::none:
                break;
            case Constraint::positive:
                constrained = softplus(leaf);
                break;
            case Constraint::tril_cov:
                constrained = tril_softplus_diag(leaf);
                break;
        }
        order_.push_back(&p);
        bound_.emplace(&p, Entry{leaf, constrained});
        return constrained;
    }

    bool is_bound(const Parameter& p) const { return bound_.count(&p) != 0; }

    Var leaf_of(const Parameter& p) const {
        auto it = bound_.find(&p);
        if (it == bound_.end()) throw Error("leaf_of: parameter '" + p.name() + "' not bound");
        return it->second.leaf;
    }

    const std::vector<const Parameter*>& bound_order() const { return order_; }

    Tape& tape() const { return *tape_; }

  private:
    struct Entry {
        Var leaf;
        Var constrained;
    };

    Tape* tape_;
    std::unordered_map<const Parameter*, Entry> bound_;
    std::vector<const Parameter*> order_;
};

// Gradient of a scalar objective with respect to every requested parameter's
// unconstrained storage. Parameters that do not influence the objective get
// exact zeros. Throws NonFiniteGradient naming the first offending parameter.
inline std::unordered_map<const Parameter*, Matrix> gradient(
    Var objective, ParamBinding& binding, const std::vector<Parameter*>& params) {
    if (!std::isfinite(objective.scalar()))
        throw NonFiniteGradient("gradient: objective value is not finite");
    binding.tape().backward(objective);
    std::unordered_map<const Parameter*, Matrix> grads;
    grads.reserve(params.size());
    for (Parameter* p : params) {
        Matrix g;
        if (binding.is_bound(*p)) {
            g = binding.tape().grad(binding.leaf_of(*p));
        } else {
            g = Matrix::Zero(p->rows(), p->cols());
        }
        if (!g.allFinite())
            throw NonFiniteGradient("gradient: non-finite gradient for parameter '" + p->name() +
                                    "'");
        grads.emplace(p, std::move(g));
    }
    return grads;
}

}  // namespace mtdgp::ad
