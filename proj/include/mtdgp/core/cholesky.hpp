#pragma once

#include <array>
#include <string>

#include "mtdgp/core/matrix.hpp"
#include "mtdgp/errors.hpp"
#include "mtdgp/log.hpp"

namespace mtdgp {

// Jitter ladder tried (in order) when a factorization fails at the requested
// jitter. Escalations are logged; exhausting the ladder raises
// NotPositiveDefinite.
inline constexpr std::array<double, 3> kJitterLadder = {1e-8, 1e-6, 1e-4};

// Base jitter applied to every inducing-point Gram matrix before
// factorization; keeps near-singular kernels factorizable and is part of the
// documented conditional contract.
inline constexpr double kGramJitter = 1e-8;

struct CholeskyResult {
    Matrix lower;
    double applied_jitter = 0.0;
};

namespace detail {

inline bool try_llt(const Matrix& a, double jitter, Matrix& lower) {
    Matrix shifted = a;
    if (jitter != 0.0) shifted.diagonal().array() += jitter;
    Eigen::LLT<Matrix> llt(shifted);
    if (llt.info() != Eigen::Success) return false;
    lower = llt.matrixL();
    for (Index i = 0; i < lower.rows(); ++i)
        if (!(lower(i, i) > 0.0)) return false;
    return lower.allFinite();
}

}  // namespace detail

// Lower Cholesky factor of a + jitter*I. The matrix must be square and
// symmetric within 1e-10 * max|a|. If the factorization fails at the
// requested jitter, escalates through kJitterLadder (only values above the
// request), logging each step; throws NotPositiveDefinite once exhausted.
inline CholeskyResult cholesky_ex(const Matrix& a, double jitter = 0.0) {
    if (a.rows() != a.cols())
        throw DimensionMismatch("cholesky: matrix is " + std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + ", expected square");
    const double tol = 1e-10 * std::max(1e-300, max_abs(a));
    if (((a - a.transpose()).cwiseAbs().maxCoeff()) > tol)
        throw NotSymmetric("cholesky: matrix is not symmetric within tolerance");
    if (jitter < 0.0) throw Error("cholesky: negative jitter");

    CholeskyResult result;
    if (detail::try_llt(a, jitter, result.lower)) {
        result.applied_jitter = jitter;
        return result;
    }
    for (double step : kJitterLadder) {
        if (step <= jitter) continue;
        log_message("cholesky: escalating jitter to " + std::to_string(step));
        if (detail::try_llt(a, step, result.lower)) {
            result.applied_jitter = step;
            return result;
        }
    }
    throw NotPositiveDefinite("cholesky: factorization failed after jitter escalation");
}

inline Matrix cholesky(const Matrix& a, double jitter = 0.0) {
    return cholesky_ex(a, jitter).lower;
}

// L^-1 b and L^-T b for a lower-triangular L.
inline Matrix solve_lower(const Matrix& lower, const Matrix& b) {
    return lower.triangularView<Eigen::Lower>().solve(b);
}

inline Matrix solve_lower_transpose(const Matrix& lower, const Matrix& b) {
    return lower.triangularView<Eigen::Lower>().transpose().solve(b);
}

}  // namespace mtdgp
