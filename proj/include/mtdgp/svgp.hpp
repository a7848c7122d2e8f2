#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mtdgp/ad/parameter.hpp"
#include "mtdgp/ad/tape.hpp"
#include "mtdgp/core/cholesky.hpp"
#include "mtdgp/core/matrix.hpp"
#include "mtdgp/core/rng.hpp"
#include "mtdgp/errors.hpp"
#include "mtdgp/kernels.hpp"

namespace mtdgp {

// Conditional variances are clamped at this floor; clamps are counted on the
// unit because silent clamping hides conditioning bugs.
inline constexpr double kVarianceFloor = 1e-12;

enum class MeanFunctionKind { zero, linear };

// Fixed (non-trainable) affine mean: m(X) = X * projection + offset per row.
struct LinearMean {
    Matrix projection;  // D x P
    Matrix offset;      // 1 x P
};

// Free-form Gaussian over inducing outputs: one mean column and one full
// covariance factor per output dimension.
struct VariationalGaussian {
    ad::Parameter mean;                   // M x P
    std::vector<ad::Parameter> chol_cov;  // P factors, each M x M lower triangular

    Index num_inducing() const { return mean.rows(); }
    Index output_dim() const { return mean.cols(); }

    // S = scale * I on every output dimension.
    static VariationalGaussian make_isotropic(const std::string& prefix, Index m, Index p,
                                              double scale) {
        if (!(scale > 0.0)) throw InvalidSpec(prefix + ": covariance scale must be positive");
        Matrix l = std::sqrt(scale) * Matrix::Identity(m, m);
        return make_from_chol(prefix, p, l);
    }

    // Same lower factor L (S = L L^T) on every output dimension.
    static VariationalGaussian make_from_chol(const std::string& prefix, Index p,
                                              const Matrix& l) {
        VariationalGaussian q;
        q.mean = ad::Parameter(prefix + ".q_mean", Matrix::Zero(l.rows(), p));
        q.chol_cov.reserve(static_cast<size_t>(p));
        for (Index d = 0; d < p; ++d)
            q.chol_cov.emplace_back(prefix + ".q_chol[" + std::to_string(d) + "]", l,
                                    ad::Constraint::tril_cov);
        return q;
    }
};

enum class PosteriorInit {
    small_noise,  // S = 1e-5 * I; used for output-layer units
    prior,        // S = K_zz at the initial hyperparameters; used for inner units
};

// One sparse variational GP: kernel, inducing inputs, free-form posterior,
// and a fixed mean function.
struct SparseGPUnit {
    std::string name;
    std::uint64_t uid = 0;  // stable key for per-unit RNG streams
    KernelParams kernel;
    ad::Parameter inducing;  // M x D
    VariationalGaussian posterior;
    MeanFunctionKind mean_kind = MeanFunctionKind::zero;
    LinearMean linear_mean;

    // diagnostics: how many conditional variances hit the floor
    mutable long variance_clamps = 0;

    Index num_inducing() const { return inducing.rows(); }
    Index input_dim() const { return inducing.cols(); }
    Index output_dim() const { return posterior.output_dim(); }

    void validate() const {
        if (posterior.mean.rows() != inducing.rows())
            throw InvalidSpec(name + ": posterior rows != inducing rows");
        if (kernel.input_dim() != inducing.cols())
            throw InvalidSpec(name + ": kernel dimension != inducing columns");
        if (static_cast<Index>(posterior.chol_cov.size()) != posterior.mean.cols())
            throw InvalidSpec(name + ": covariance factor count != output dimensions");
        for (const ad::Parameter& l : posterior.chol_cov)
            if (l.rows() != inducing.rows() || l.cols() != inducing.rows())
                throw InvalidSpec(name + ": covariance factor is not M x M");
        if (mean_kind == MeanFunctionKind::linear) {
            if (linear_mean.projection.rows() != inducing.cols() ||
                linear_mean.projection.cols() != posterior.mean.cols())
                throw InvalidSpec(name + ": linear mean projection is not D x P");
            if (linear_mean.offset.rows() != 1 ||
                linear_mean.offset.cols() != posterior.mean.cols())
                throw InvalidSpec(name + ": linear mean offset is not 1 x P");
        }
    }

    void collect_parameters(std::vector<ad::Parameter*>& out) {
        out.push_back(&inducing);
        out.push_back(&posterior.mean);
        for (ad::Parameter& l : posterior.chol_cov) out.push_back(&l);
        out.push_back(&kernel.signal_variance);
        out.push_back(&kernel.ard_weights);
        if (kernel.noise_jitter) out.push_back(&*kernel.noise_jitter);
    }
};

inline SparseGPUnit make_unit(std::string name, std::uint64_t uid, KernelParams kernel,
                              Matrix inducing, Index output_dim, MeanFunctionKind mean_kind,
                              LinearMean linear_mean, PosteriorInit init) {
    SparseGPUnit u;
    u.name = std::move(name);
    u.uid = uid;
    u.kernel = std::move(kernel);
    u.mean_kind = mean_kind;
    u.linear_mean = std::move(linear_mean);
    if (init == PosteriorInit::small_noise) {
        u.posterior = VariationalGaussian::make_isotropic(u.name, inducing.rows(), output_dim,
                                                          1e-5);
    } else {
        Matrix kzz = matern52_ard(u.kernel, inducing, inducing);
        kzz.diagonal().array() += kGramJitter;
        u.posterior = VariationalGaussian::make_from_chol(u.name, output_dim,
                                                          cholesky(kzz, 0.0));
    }
    u.inducing = ad::Parameter(u.name + ".inducing", std::move(inducing));
    u.validate();
    return u;
}

// Unit bound onto a tape: everything that does not depend on the inputs is
// computed once and reused across samples and minibatch chunks.
struct BoundUnit {
    const SparseGPUnit* unit = nullptr;
    KernelVars kernel;
    ad::Var z;                  // M x D
    ad::Var q_mean;             // M x P
    std::vector<ad::Var> l_s;   // per dim, M x M constrained factor
    ad::Var l_kzz;              // chol(K_zz + gram jitter)
    ad::Var delta;              // q_mean - m(Z), M x P
};

namespace detail {

// m(X) for a unit; returns an invalid Var for the zero mean (callers skip it).
inline ad::Var mean_function(const SparseGPUnit& u, ad::Tape& tape, ad::Var x) {
    if (u.mean_kind == MeanFunctionKind::zero) return {};
    ad::Var proj = ad::matmul(x, tape.constant(u.linear_mean.projection));
    ad::Var ones = tape.constant(Matrix::Ones(x.rows(), 1));
    return ad::add(proj, ad::matmul(ones, tape.constant(u.linear_mean.offset)));
}

}  // namespace detail

inline BoundUnit bind_unit(ad::ParamBinding& binding, const SparseGPUnit& unit) {
    unit.validate();
    BoundUnit b;
    b.unit = &unit;
    b.kernel = bind_kernel(binding, unit.kernel);
    b.z = binding.bind(unit.inducing);
    b.q_mean = binding.bind(unit.posterior.mean);
    b.l_s.reserve(unit.posterior.chol_cov.size());
    for (const ad::Parameter& l : unit.posterior.chol_cov) b.l_s.push_back(binding.bind(l));
    ad::Var kzz = matern52_ard(b.kernel, b.z, b.z, true);
    b.l_kzz = ad::cholesky(kzz, kGramJitter);
    ad::Var mz = detail::mean_function(unit, binding.tape(), b.z);
    b.delta = mz.valid() ? ad::sub(b.q_mean, mz) : b.q_mean;
    return b;
}

struct UnitMarginals {
    ad::Var mean;      // N x P
    ad::Var variance;  // N x P, clamped at kVarianceFloor
};

// The conditioning core, shared by plain units and the coregionalized head:
// given chol(K_zz), K_zx, the prior variance diagonal, delta = m_q - m(Z),
// and the posterior factors, produce per-point marginals. mx (the mean
// function at the inputs) may be an invalid Var for zero means.
inline UnitMarginals conditional_core(ad::Var l_kzz, ad::Var kzx, ad::Var prior_diag,
                                      ad::Var delta, const std::vector<ad::Var>& l_s,
                                      ad::Var mx, long* clamp_counter) {
    const Index p = delta.cols();
    ad::Var v = ad::solve_lower(l_kzz, kzx);                         // M x N
    ad::Var alpha = ad::solve_lower_transpose(l_kzz, v);             // M x N

    ad::Var mean = ad::matmul(ad::transpose(alpha), delta);          // N x P
    if (mx.valid()) mean = ad::add(mean, mx);

    // k(x,x) - alpha^T K_zz alpha, shared across output dimensions
    ad::Var nystrom = ad::transpose(ad::colsum(ad::square(v)));      // N x 1
    ad::Var base_var = ad::sub(prior_diag, nystrom);

    std::vector<ad::Var> var_cols;
    var_cols.reserve(static_cast<size_t>(p));
    for (Index d = 0; d < p; ++d) {
        ad::Var w = ad::matmul(ad::transpose(l_s[static_cast<size_t>(d)]), alpha);  // M x N
        ad::Var s_term = ad::transpose(ad::colsum(ad::square(w)));
        var_cols.push_back(ad::add(base_var, s_term));
    }
    ad::Var variance = p == 1 ? var_cols[0] : ad::concat_cols(std::span<const ad::Var>(var_cols));
    variance = ad::clamp_min(variance, kVarianceFloor, clamp_counter);
    return {mean, variance};
}

// Closed-form KL[q || p] through Cholesky factors, summed over the columns
// of delta; the prior has covariance l_kzz l_kzz^T and mean folded into delta.
inline ad::Var kl_core(ad::Var l_kzz, ad::Var delta, const std::vector<ad::Var>& l_s) {
    const Index m = l_kzz.rows();
    const Index p = delta.cols();
    ad::Tape& tape = *l_kzz.tape();

    ad::Var logdet_k = ad::sum(ad::log(ad::diag_vec(l_kzz)));
    ad::Var total = tape.scalar_constant(0.0);
    for (Index d = 0; d < p; ++d) {
        const ad::Var& l = l_s[static_cast<size_t>(d)];
        ad::Var t_trace = ad::sum(ad::square(ad::solve_lower(l_kzz, l)));
        ad::Var dcol = p == 1 ? delta : ad::col_of(delta, d);
        ad::Var t_mean = ad::sum(ad::square(ad::solve_lower(l_kzz, dcol)));
        ad::Var logdet_s = ad::sum(ad::log(ad::diag_vec(l)));
        ad::Var kl = ad::add(
            ad::scalar_mul(ad::add_const(ad::add(t_trace, t_mean), -static_cast<double>(m)), 0.5),
            ad::sub(logdet_k, logdet_s));
        total = ad::add(total, kl);
    }
    return total;
}

// Per-point conditional marginals of the unit's outputs at the given inputs.
inline UnitMarginals conditional_marginals(const BoundUnit& b, ad::Var inputs) {
    const SparseGPUnit& u = *b.unit;
    ad::Var kzx = matern52_ard(b.kernel, b.z, inputs, false);        // M x N
    ad::Var prior_diag = matern52_ard_diag(b.kernel, inputs.rows());
    ad::Var mx = detail::mean_function(u, *inputs.tape(), inputs);
    return conditional_core(b.l_kzz, kzx, prior_diag, b.delta, b.l_s, mx,
                            &u.variance_clamps);
}

// KL[q(U) || p(U)] summed over output dimensions.
inline ad::Var kl_to_prior(const BoundUnit& b) { return kl_core(b.l_kzz, b.delta, b.l_s); }

// Reparameterized draw: mean + sqrt(variance) * eps, with eps supplied by the
// caller. This is the test hook (eps = 0 gives the means) and the path the
// architecture uses for minibatch-consistent sampling.
inline ad::Var sample_with_eps(const BoundUnit& b, ad::Var inputs, const Matrix& eps) {
    UnitMarginals m = conditional_marginals(b, inputs);
    require_shape(eps, m.mean.rows(), m.mean.cols(), b.unit->name + ": eps");
    ad::Tape& tape = *inputs.tape();
    return ad::add(m.mean, ad::mul(ad::sqrt(m.variance), tape.constant(eps)));
}

inline ad::Var sample_outputs(const BoundUnit& b, ad::Var inputs, RngStream& stream) {
    Matrix eps = draw_standard_normal(stream, inputs.rows(), b.unit->output_dim());
    return sample_with_eps(b, inputs, eps);
}

// Plain-matrix conveniences; they evaluate on a scratch tape.

inline std::pair<Matrix, Matrix> conditional_marginals(const SparseGPUnit& unit,
                                                       const Matrix& inputs) {
    ad::Tape tape;
    ad::ParamBinding binding(tape);
    BoundUnit b = bind_unit(binding, unit);
    UnitMarginals m = conditional_marginals(b, tape.constant(inputs));
    return {m.mean.value(), m.variance.value()};
}

inline double kl_to_prior(const SparseGPUnit& unit) {
    ad::Tape tape;
    ad::ParamBinding binding(tape);
    return kl_to_prior(bind_unit(binding, unit)).scalar();
}

inline Matrix sample_outputs(const SparseGPUnit& unit, const Matrix& inputs, RngStream& stream) {
    ad::Tape tape;
    ad::ParamBinding binding(tape);
    BoundUnit b = bind_unit(binding, unit);
    return sample_outputs(b, tape.constant(inputs), stream).value();
}

}  // namespace mtdgp
