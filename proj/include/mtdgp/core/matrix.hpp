#pragma once

#include <Eigen/Dense>

#include <string>

#include "mtdgp/errors.hpp"

namespace mtdgp {

// Dense double matrix with row-major indexing semantics. Eigen provides the
// arithmetic; everything in this library goes through this alias so storage
// and indexing conventions stay in one place.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

inline void require_finite(const Matrix& m, const std::string& what) {
    if (!m.allFinite()) throw Error(what + ": non-finite values");
}

inline void require_shape(const Matrix& m, Index rows, Index cols, const std::string& what) {
    if (m.rows() != rows || m.cols() != cols) {
        throw ShapeMismatch(what + ": expected " + std::to_string(rows) + "x" +
                            std::to_string(cols) + ", got " + std::to_string(m.rows()) + "x" +
                            std::to_string(m.cols()));
    }
}

inline Matrix identity(Index n) { return Matrix::Identity(n, n); }

inline double max_abs(const Matrix& m) {
    return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff();
}

}  // namespace mtdgp
