#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <string>
#include <vector>

#include "mtdgp/core/cholesky.hpp"
#include "mtdgp/core/matrix.hpp"
#include "mtdgp/core/rng.hpp"
#include "mtdgp/errors.hpp"
#include "mtdgp/log.hpp"

using namespace mtdgp;

TEST_CASE("rng draws are pure functions of (seed, stream, counter)") {
    RngStream a(42, 7);
    RngStream b(42, 7);
    for (int i = 0; i < 100; ++i) REQUIRE(a.normal() == b.normal());

    RngStream c(42, 7);
    c.counter = 50;
    RngStream d(42, 7);
    for (int i = 0; i < 50; ++i) (void)d.normal();
    REQUIRE(c.normal() == d.normal());
}

TEST_CASE("rng streams with different ids decorrelate") {
    RngStream a(1, 0);
    RngStream b(1, 1);
    int equal = 0;
    for (int i = 0; i < 200; ++i)
        if (a.normal() == b.normal()) ++equal;
    REQUIRE(equal == 0);
}

TEST_CASE("child streams are reproducible and distinct") {
    RngStream root(9, 0);
    RngStream c1 = root.child(3);
    RngStream c2 = root.child(3);
    REQUIRE(c1.normal() == c2.normal());
    RngStream c3 = root.child(4);
    REQUIRE(c1.normal_at(1) != c3.normal_at(1));
}

TEST_CASE("uniform draws live in (0, 1]") {
    RngStream s(123, 5);
    for (int i = 0; i < 10000; ++i) {
        double u = s.uniform();
        REQUIRE(u > 0.0);
        REQUIRE(u <= 1.0);
    }
}

TEST_CASE("normal draws have sane moments") {
    RngStream s(2024, 0);
    const int n = 200000;
    double sum = 0.0, sumsq = 0.0;
    for (int i = 0; i < n; ++i) {
        double x = s.normal();
        sum += x;
        sumsq += x * x;
    }
    double mean = sum / n;
    double var = sumsq / n - mean * mean;
    REQUIRE(std::abs(mean) < 0.01);
    REQUIRE(std::abs(var - 1.0) < 0.02);
}

TEST_CASE("draw_standard_normal fills row-major and advances the counter") {
    RngStream s(5, 1);
    Matrix m = draw_standard_normal(s, 3, 2);
    REQUIRE(m.rows() == 3);
    REQUIRE(m.cols() == 2);
    REQUIRE(s.counter == 6);

    RngStream t(5, 1);
    REQUIRE(m(0, 0) == t.normal());
    REQUIRE(m(0, 1) == t.normal());
    REQUIRE(m(1, 0) == t.normal());

    // same stream, next call continues where the first left off
    Matrix m2 = draw_standard_normal(s, 1, 1);
    RngStream u(5, 1);
    u.counter = 6;
    REQUIRE(m2(0, 0) == u.normal());
}

TEST_CASE("cholesky recovers the factor of a well conditioned matrix") {
    Matrix l(3, 3);
    l << 2.0, 0.0, 0.0,
         0.5, 1.5, 0.0,
        -0.3, 0.2, 1.0;
    Matrix a = l * l.transpose();
    CholeskyResult res = cholesky_ex(a, 0.0);
    REQUIRE(res.applied_jitter == 0.0);
    REQUIRE(max_abs(res.lower - l) < 1e-12);
}

TEST_CASE("cholesky escalates jitter and logs the escalation") {
    // rank-1 matrix: singular, needs jitter
    Matrix v(3, 1);
    v << 1.0, 2.0, 3.0;
    Matrix a = v * v.transpose();

    std::vector<std::string> lines;
    LogSink old = log_sink();
    log_sink() = [&](const std::string& msg) { lines.push_back(msg); };
    CholeskyResult res = cholesky_ex(a, 0.0);
    log_sink() = old;

    REQUIRE(res.applied_jitter > 0.0);
    REQUIRE(!lines.empty());
    Matrix recon = res.lower * res.lower.transpose();
    Matrix target = a + res.applied_jitter * Matrix::Identity(3, 3);
    REQUIRE(max_abs(recon - target) < 1e-8);
}

TEST_CASE("cholesky rejects asymmetric and hopeless matrices") {
    Matrix bad(2, 2);
    bad << 1.0, 0.5,
           0.2, 1.0;
    REQUIRE_THROWS_AS(cholesky_ex(bad, 0.0), NotSymmetric);

    Matrix neg = -Matrix::Identity(2, 2);
    LogSink old = log_sink();
    log_sink() = [](const std::string&) {};
    REQUIRE_THROWS_AS(cholesky_ex(neg, 0.0), NotPositiveDefinite);
    log_sink() = old;
}

TEST_CASE("triangular solves match dense inverses") {
    Matrix l(3, 3);
    l << 1.5, 0.0, 0.0,
         0.3, 2.0, 0.0,
        -0.7, 0.1, 0.9;
    Matrix b(3, 2);
    b << 1.0, -2.0,
         0.5, 0.25,
        -1.0, 3.0;
    Matrix y = solve_lower(l, b);
    REQUIRE(max_abs(l * y - b) < 1e-12);
    Matrix z = solve_lower_transpose(l, b);
    REQUIRE(max_abs(l.transpose() * z - b) < 1e-12);
}
