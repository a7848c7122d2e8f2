#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mtdgp/ad/parameter.hpp"
#include "mtdgp/ad/tape.hpp"
#include "mtdgp/core/matrix.hpp"
#include "mtdgp/errors.hpp"

namespace mtdgp {

// ARD weights are inverse squared lengthscales; configs speak in
// lengthscales, the math speaks in weights.
inline double weight_from_lengthscale(double l) {
    if (!(l > 0.0)) throw ConfigError("lengthscale must be positive");
    return 1.0 / (l * l);
}

inline double lengthscale_from_weight(double w) {
    if (!(w > 0.0)) throw ConfigError("ard weight must be positive");
    return 1.0 / std::sqrt(w);
}

// Stationary kernel with per-dimension relevance weights and an optional
// white-noise term (inter-layer noise absorbed into the kernel).
struct KernelParams {
    ad::Parameter signal_variance;              // 1x1, positive
    ad::Parameter ard_weights;                  // D x 1, positive
    std::optional<ad::Parameter> noise_jitter;  // 1x1, positive; absent means exactly zero

    static KernelParams make(const std::string& prefix, Index dims, double variance,
                             double lengthscale, std::optional<double> noise = std::nullopt) {
        if (!(variance > 0.0)) throw ConfigError(prefix + ": signal variance must be positive");
        KernelParams k;
        k.signal_variance = ad::Parameter(prefix + ".variance", Matrix::Constant(1, 1, variance),
                                          ad::Constraint::positive);
        k.ard_weights = ad::Parameter(
            prefix + ".ard_weights",
            Matrix::Constant(dims, 1, weight_from_lengthscale(lengthscale)),
            ad::Constraint::positive);
        if (noise) {
            if (!(*noise > 0.0)) throw ConfigError(prefix + ": noise jitter must be positive");
            k.noise_jitter = ad::Parameter(prefix + ".noise_jitter",
                                           Matrix::Constant(1, 1, *noise),
                                           ad::Constraint::positive);
        }
        return k;
    }

    Index input_dim() const { return ard_weights.rows(); }
};

// Task covariance for the coregionalized baselines: B = W*W^T + diag(kappa).
struct CoregionalParams {
    ad::Parameter mixing;     // T x R, unconstrained
    ad::Parameter task_diag;  // T x 1, positive

    static CoregionalParams make(const std::string& prefix, Index tasks, Index rank,
                                 double mixing_scale, double diag_value) {
        CoregionalParams c;
        Matrix w = Matrix::Constant(tasks, rank, mixing_scale);
        c.mixing = ad::Parameter(prefix + ".mixing", std::move(w));
        c.task_diag = ad::Parameter(prefix + ".task_diag",
                                    Matrix::Constant(tasks, 1, diag_value),
                                    ad::Constraint::positive);
        return c;
    }

    Index num_tasks() const { return mixing.rows(); }
};

// Tape-bound kernel values, produced once per objective evaluation.
struct KernelVars {
    ad::Var signal_variance;
    ad::Var ard_weights;
    ad::Var noise_jitter;  // invalid when the kernel has no white-noise term

    bool has_noise() const { return noise_jitter.valid(); }
};

inline KernelVars bind_kernel(ad::ParamBinding& binding, const KernelParams& k) {
    KernelVars v;
    v.signal_variance = binding.bind(k.signal_variance);
    v.ard_weights = binding.bind(k.ard_weights);
    if (k.noise_jitter) v.noise_jitter = binding.bind(*k.noise_jitter);
    return v;
}

namespace detail {

inline void check_kernel_dims(ad::Var weights, ad::Var x_left, ad::Var x_right) {
    if (x_left.cols() != x_right.cols())
        throw DimensionMismatch("kernel: inputs have " + std::to_string(x_left.cols()) + " and " +
                                std::to_string(x_right.cols()) + " columns");
    if (weights.rows() != x_left.cols())
        throw DimensionMismatch("kernel: " + std::to_string(weights.rows()) +
                                " ard weights for " + std::to_string(x_left.cols()) +
                                " input columns");
}

// Weighted squared distances sum_i w_i (x_i - x'_i)^2, N x M.
inline ad::Var ard_sqdist(ad::Var x_left, ad::Var x_right, ad::Var weights) {
    ad::Var a = ad::rowsum(ad::scale_cols(ad::square(x_left), weights));    // N x 1
    ad::Var b = ad::rowsum(ad::scale_cols(ad::square(x_right), weights));   // M x 1
    ad::Var cross = ad::matmul(ad::scale_cols(x_left, weights), ad::transpose(x_right));
    return ad::sub(ad::add_outer(a, b), ad::scalar_mul(cross, 2.0));
}

// Same-input variant: exactly symmetric with an exactly zero diagonal, so
// Gram matrices pass strict symmetry checks and r = 0 is hit exactly.
inline ad::Var ard_sqdist_sym(ad::Var x, ad::Var weights) {
    ad::Var d = ard_sqdist(x, x, weights);
    ad::Var sym = ad::scalar_mul(ad::add(d, ad::transpose(d)), 0.5);
    return ad::sub(sym, ad::diag_matrix(ad::diag_vec(sym)));
}

}  // namespace detail

// Matern-5/2 with ARD weighting. When same_inputs is set the white-noise
// term (if any) lands on the diagonal and the result is exactly symmetric.
inline ad::Var matern52_ard(const KernelVars& k, ad::Var x_left, ad::Var x_right,
                            bool same_inputs) {
    detail::check_kernel_dims(k.ard_weights, x_left, x_right);
    ad::Var d = same_inputs ? detail::ard_sqdist_sym(x_left, k.ard_weights)
                            : detail::ard_sqdist(x_left, x_right, k.ard_weights);
    ad::Var out = ad::scale(ad::matern52_from_sqdist(d), k.signal_variance);
    if (same_inputs && k.has_noise()) out = ad::add_diag(out, k.noise_jitter);
    return out;
}

// Prior variance at the inputs themselves: sigma^2 + noise, constant per row.
inline ad::Var matern52_ard_diag(const KernelVars& k, Index n) {
    ad::Var v = k.has_noise() ? ad::add(k.signal_variance, k.noise_jitter) : k.signal_variance;
    return ad::broadcast_scalar(v, n, 1);
}

// Weighted linear kernel sigma^2 * sum_i w_i x_i x'_i.
inline ad::Var linear_ard(const KernelVars& k, ad::Var x_left, ad::Var x_right,
                          bool same_inputs) {
    detail::check_kernel_dims(k.ard_weights, x_left, x_right);
    ad::Var cross = ad::matmul(ad::scale_cols(x_left, k.ard_weights), ad::transpose(x_right));
    if (same_inputs) cross = ad::scalar_mul(ad::add(cross, ad::transpose(cross)), 0.5);
    ad::Var out = ad::scale(cross, k.signal_variance);
    if (same_inputs && k.has_noise()) out = ad::add_diag(out, k.noise_jitter);
    return out;
}

struct CoregionalVars {
    ad::Var mixing;     // T x R
    ad::Var task_diag;  // T x 1
};

inline CoregionalVars bind_coregional(ad::ParamBinding& binding, const CoregionalParams& c) {
    return CoregionalVars{binding.bind(c.mixing), binding.bind(c.task_diag)};
}

// Task covariance B = W*W^T + diag(kappa), T x T.
inline ad::Var task_covariance(const CoregionalVars& c) {
    return ad::add(ad::matmul(c.mixing, ad::transpose(c.mixing)),
                   ad::diag_matrix(c.task_diag));
}

// ICM kernel: K[n][m] = B[t_n][t'_m] * base[n][m].
inline ad::Var coregional(const CoregionalVars& c, ad::Var base,
                          const std::vector<Index>& tasks_left,
                          const std::vector<Index>& tasks_right) {
    if (base.rows() != static_cast<Index>(tasks_left.size()) ||
        base.cols() != static_cast<Index>(tasks_right.size()))
        throw ShapeMismatch("coregional: base kernel shape does not match task index counts");
    ad::Var b = task_covariance(c);
    return ad::mul(ad::gather_outer(b, tasks_left, tasks_right), base);
}

// Plain-matrix conveniences for callers outside an objective graph. They run
// on a scratch tape; gradients are not retained.
inline Matrix matern52_ard(const KernelParams& params, const Matrix& x_left,
                           const Matrix& x_right) {
    ad::Tape tape;
    ad::ParamBinding binding(tape);
    KernelVars k = bind_kernel(binding, params);
    bool same = (&x_left == &x_right) ||
                (x_left.rows() == x_right.rows() && x_left.cols() == x_right.cols() &&
                 (x_left.array() == x_right.array()).all());
    return matern52_ard(k, tape.constant(x_left), tape.constant(x_right), same).value();
}

inline Matrix coregional(const CoregionalParams& params, const Matrix& base,
                         const std::vector<Index>& tasks_left,
                         const std::vector<Index>& tasks_right) {
    ad::Tape tape;
    ad::ParamBinding binding(tape);
    CoregionalVars c = bind_coregional(binding, params);
    return coregional(c, tape.constant(base), tasks_left, tasks_right).value();
}

}  // namespace mtdgp
