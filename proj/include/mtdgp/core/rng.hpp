#pragma once

#include <cmath>
#include <cstdint>

#include "mtdgp/core/matrix.hpp"

namespace mtdgp {

// Counter-based random number stream. Every draw is a pure function of
// (seed, stream_id, counter), so Monte Carlo estimates are reproducible and
// independent streams can be derived by key instead of by sharing state.
struct RngStream {
    std::uint64_t seed = 0;
    std::uint64_t stream_id = 0;
    std::uint64_t counter = 0;

    RngStream() = default;
    RngStream(std::uint64_t seed_, std::uint64_t stream_id_, std::uint64_t counter_ = 0)
        : seed(seed_), stream_id(stream_id_), counter(counter_) {}

    static std::uint64_t mix(std::uint64_t x) {
        x += 0x9e3779b97f4a7c15ULL;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

    static std::uint64_t mix2(std::uint64_t a, std::uint64_t b) { return mix(mix(a) ^ b); }

    // Derive a statistically independent stream keyed by `key`.
    RngStream child(std::uint64_t key) const { return RngStream(seed, mix2(stream_id, key)); }

    // Uniform in (0, 1], keyed by an explicit counter and lane. Pure.
    double uniform_at(std::uint64_t ctr, std::uint64_t lane) const {
        std::uint64_t x = mix2(mix2(mix2(seed, stream_id), ctr), lane);
        return (static_cast<double>(x >> 11) + 1.0) * (1.0 / 9007199254740992.0);
    }

    // Standard normal keyed by an explicit counter. Pure.
    double normal_at(std::uint64_t ctr) const {
        const double u1 = uniform_at(ctr, 0);
        const double u2 = uniform_at(ctr, 1);
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    // Next standard normal; advances the counter by one.
    double normal() { return normal_at(counter++); }

    // Matrix of i.i.d. standard normals; advances the counter by rows*cols.
    Matrix normal_matrix(Index rows, Index cols) {
        Matrix out(rows, cols);
        for (Index i = 0; i < rows; ++i)
            for (Index j = 0; j < cols; ++j) out(i, j) = normal_at(counter++);
        return out;
    }

    // Uniform in (0, 1]; advances the counter by one.
    double uniform() { return uniform_at(counter++, 0); }

    // Uniform integer in [0, n). n must be positive.
    std::uint64_t uniform_index(std::uint64_t n) {
        std::uint64_t x = mix2(mix2(mix2(seed, stream_id), counter++), 2);
        return x % n;
    }
};

// Convenience entry point: i.i.d. standard normal matrix from a stream.
inline Matrix draw_standard_normal(RngStream& stream, Index rows, Index cols) {
    return stream.normal_matrix(rows, cols);
}

}  // namespace mtdgp
