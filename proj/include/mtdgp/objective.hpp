#pragma once

#include <Eigen/Eigenvalues>

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mtdgp/ad/parameter.hpp"
#include "mtdgp/ad/tape.hpp"
#include "mtdgp/architecture.hpp"
#include "mtdgp/core/matrix.hpp"
#include "mtdgp/core/rng.hpp"
#include "mtdgp/data.hpp"
#include "mtdgp/errors.hpp"
#include "mtdgp/svgp.hpp"

namespace mtdgp {

// Per-term KL scaling of the weighted objective. All 1.0 recovers the plain
// bound; larger weights strengthen the pull toward the prior.
struct KLWeights {
    std::vector<double> head_weights;                    // alpha^t (one entry for a coreg head)
    std::vector<double> shared_weights;                  // beta_i
    std::vector<std::vector<double>> task_unit_weights;  // gamma_j^t

    static KLWeights ones(const ModelSpec& spec) {
        KLWeights w;
        w.head_weights.assign(spec.coregionalized() ? 1 : static_cast<size_t>(spec.tasks),
                              1.0);
        w.shared_weights.assign(spec.shared_units.size(), 1.0);
        if (spec.uses_task_layers())
            for (Index t = 0; t < spec.tasks; ++t)
                w.task_unit_weights.emplace_back(
                    spec.task_units[static_cast<size_t>(t)].size(), 1.0);
        return w;
    }

    void validate(const ModelSpec& spec) const {
        const size_t heads = spec.coregionalized() ? 1 : static_cast<size_t>(spec.tasks);
        if (head_weights.size() != heads)
            throw InvalidSpec("kl weights: expected " + std::to_string(heads) +
                              " head weights");
        if (shared_weights.size() != spec.shared_units.size())
            throw InvalidSpec("kl weights: one weight per shared unit");
        if (spec.uses_task_layers()) {
            if (task_unit_weights.size() != static_cast<size_t>(spec.tasks))
                throw InvalidSpec("kl weights: one weight list per task");
            for (Index t = 0; t < spec.tasks; ++t)
                if (task_unit_weights[static_cast<size_t>(t)].size() !=
                    spec.task_units[static_cast<size_t>(t)].size())
                    throw InvalidSpec("kl weights: task " + std::to_string(t) +
                                      " weight count mismatch");
        } else if (!task_unit_weights.empty()) {
            for (const auto& tw : task_unit_weights)
                if (!tw.empty())
                    throw InvalidSpec("kl weights: variant has no task units");
        }
        auto positive = [](double v) { return v > 0.0 && std::isfinite(v); };
        for (double v : head_weights)
            if (!positive(v)) throw InvalidSpec("kl weights must be positive");
        for (double v : shared_weights)
            if (!positive(v)) throw InvalidSpec("kl weights must be positive");
        for (const auto& tw : task_unit_weights)
            for (double v : tw)
                if (!positive(v)) throw InvalidSpec("kl weights must be positive");
    }
};

struct MonteCarloConfig {
    int train_samples = 5;
    int eval_samples = 100;
    int quadrature_points = 20;

    void validate() const {
        if (train_samples < 1 || eval_samples < 1 || quadrature_points < 1)
            throw InvalidSpec("monte carlo config: all counts must be >= 1");
    }
};

// ---- likelihood expectations ----

// E_{f ~ N(mean, variance)}[log N(y | f, noise)], closed form.
inline double expected_loglik_gaussian(double y, double mean, double variance, double noise) {
    if (noise <= 1e-12) throw InvalidNoise("likelihood noise must exceed 1e-12");
    if (variance < 0.0) throw Error("expected_loglik_gaussian: negative variance");
    const double resid = y - mean;
    return -0.5 * std::log(2.0 * M_PI * noise) - (resid * resid + variance) / (2.0 * noise);
}

// Gauss-Hermite rule for weight e^{-x^2} via the Jacobi matrix eigenproblem.
inline std::pair<std::vector<double>, std::vector<double>> gauss_hermite(int n) {
    if (n < 1) throw InvalidSpec("gauss_hermite: need at least one node");
    if (n == 1) return {{0.0}, {std::sqrt(M_PI)}};
    Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(n, n);
    for (int i = 1; i < n; ++i) {
        double b = std::sqrt(static_cast<double>(i) / 2.0);
        jacobi(i, i - 1) = b;
        jacobi(i - 1, i) = b;
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(jacobi);
    std::vector<double> nodes(static_cast<size_t>(n)), weights(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        nodes[static_cast<size_t>(i)] = eig.eigenvalues()(i);
        double v0 = eig.eigenvectors()(0, i);
        weights[static_cast<size_t>(i)] = std::sqrt(M_PI) * v0 * v0;
    }
    return {nodes, weights};
}

namespace detail {

// log sigma(z) = -softplus(-z), stable in both tails
inline double log_sigmoid(double z) {
    return z > 0.0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z));
}

}  // namespace detail

// E_{f ~ N(mean, variance)}[log p(y | f)] under the logistic link, by
// Gauss-Hermite quadrature: sum_k w_k/sqrt(pi) log sigma((2y-1) f_k) with
// f_k = mean + sqrt(2 variance) x_k.
inline double expected_loglik_bernoulli(double y, double mean, double variance, int nodes) {
    if (y != 0.0 && y != 1.0) throw Error("expected_loglik_bernoulli: labels must be 0 or 1");
    if (variance < 0.0) throw Error("expected_loglik_bernoulli: negative variance");
    auto [xs, ws] = gauss_hermite(nodes);
    const double sgn = 2.0 * y - 1.0;
    const double spread = std::sqrt(2.0 * variance);
    double acc = 0.0;
    for (size_t k = 0; k < xs.size(); ++k)
        acc += ws[k] * detail::log_sigmoid(sgn * (mean + spread * xs[k]));
    return acc / std::sqrt(M_PI);
}

// Tape version of the Gaussian expectation, summed over all entries of one
// batch: -NP/2 log(2 pi sigma^2) - sum[(y - mean)^2 + var] / (2 sigma^2).
inline ad::Var likelihood_term_gaussian(const UnitMarginals& marginals, ad::Var y,
                                        ad::Var noise) {
    if (noise.value()(0, 0) <= 1e-12)
        throw InvalidNoise("likelihood noise must exceed 1e-12");
    const double count = static_cast<double>(y.rows() * y.cols());
    ad::Var norm = ad::scalar_mul(ad::add_const(ad::log(noise), std::log(2.0 * M_PI)),
                                  -0.5 * count);
    ad::Var quad = ad::sum(ad::add(ad::square(ad::sub(y, marginals.mean)),
                                   marginals.variance));
    ad::Var scaled = ad::mul(quad, ad::recip(ad::scalar_mul(noise, 2.0)));
    return ad::sub(norm, scaled);
}

// Tape version of the Bernoulli expectation, summed over the batch.
inline ad::Var likelihood_term_bernoulli(const UnitMarginals& marginals, ad::Var y,
                                         int nodes) {
    const Matrix& labels = y.value();
    for (Index i = 0; i < labels.rows(); ++i)
        for (Index j = 0; j < labels.cols(); ++j)
            if (labels(i, j) != 0.0 && labels(i, j) != 1.0)
                throw Error("bernoulli labels must be 0 or 1");
    auto [xs, ws] = gauss_hermite(nodes);
    ad::Tape& t = *y.tape();
    ad::Var sgn = t.constant(2.0 * labels.array() - 1.0);
    ad::Var spread = ad::sqrt(ad::scalar_mul(marginals.variance, 2.0));
    ad::Var acc;
    const double norm = 1.0 / std::sqrt(M_PI);
    for (size_t k = 0; k < xs.size(); ++k) {
        ad::Var f = ad::add(marginals.mean, ad::scalar_mul(spread, xs[k]));
        ad::Var logp = ad::neg(ad::softplus(ad::neg(ad::mul(sgn, f))));
        ad::Var term = ad::scalar_mul(logp, ws[k] * norm);
        acc = acc.valid() ? ad::add(acc, term) : term;
    }
    return ad::sum(acc);
}

// ---- the multi-task bound ----

using Batch = std::vector<std::optional<std::vector<Index>>>;

namespace detail {

inline void check_objective_inputs(const Model& model, const std::vector<TaskDataset>& data,
                                   const Batch& batch, const std::vector<Index>& full_counts,
                                   const KLWeights& weights, const MonteCarloConfig& mc) {
    const ModelSpec& spec = model.spec;
    weights.validate(spec);
    mc.validate();
    if (static_cast<Index>(data.size()) != spec.tasks)
        throw ShapeMismatch("objective: expected " + std::to_string(spec.tasks) +
                            " task datasets, got " + std::to_string(data.size()));
    if (static_cast<Index>(batch.size()) != spec.tasks)
        throw ShapeMismatch("objective: one batch entry per task");
    if (static_cast<Index>(full_counts.size()) != spec.tasks)
        throw ShapeMismatch("objective: one full count per task");
    for (Index t = 0; t < spec.tasks; ++t) {
        const TaskDataset& d = data[static_cast<size_t>(t)];
        d.validate();
        if (d.inputs.cols() != spec.input_dim)
            throw ShapeMismatch("task " + std::to_string(t) + ": input dim " +
                                std::to_string(d.inputs.cols()) + " vs model " +
                                std::to_string(spec.input_dim));
        if (d.outputs.cols() != spec.output_dim)
            throw ShapeMismatch("task " + std::to_string(t) + ": output dim " +
                                std::to_string(d.outputs.cols()) + " vs model " +
                                std::to_string(spec.output_dim));
        const auto& b = batch[static_cast<size_t>(t)];
        if (!b) continue;
        if (b->empty())
            throw EmptyBatch("task " + std::to_string(t) +
                             ": included task has an empty batch");
        for (Index idx : *b)
            if (idx < 0 || idx >= d.size())
                throw ShapeMismatch("task " + std::to_string(t) + ": batch index " +
                                    std::to_string(idx) + " out of range");
        if (full_counts[static_cast<size_t>(t)] < static_cast<Index>(b->size()))
            throw InvalidSpec("task " + std::to_string(t) +
                              ": full count below batch size");
    }
}

}  // namespace detail

// Doubly stochastic minibatch estimate of the weighted bound. Likelihood
// sums are scaled by N^t/|batch^t|; KL terms are global and unscaled. Noise
// draws are keyed by datapoint id, so disjoint batches average to the
// full-batch value.
inline ad::Var minibatch_elbo_var(ad::ParamBinding& binding, const Model& model,
                                  const std::vector<TaskDataset>& data, const Batch& batch,
                                  const std::vector<Index>& full_counts,
                                  const KLWeights& weights, const MonteCarloConfig& mc,
                                  const RngStream& stream) {
    detail::check_objective_inputs(model, data, batch, full_counts, weights, mc);
    const ModelSpec& spec = model.spec;
    ad::Tape& tape = binding.tape();
    BoundModel bm = bind_model(binding, model);

    ad::Var objective;
    auto accumulate = [&](ad::Var term) {
        objective = objective.valid() ? ad::add(objective, term) : term;
    };

    for (Index t = 0; t < spec.tasks; ++t) {
        const auto& b = batch[static_cast<size_t>(t)];
        if (!b) continue;
        const TaskDataset& d = data[static_cast<size_t>(t)];
        const Index rows = static_cast<Index>(b->size());
        Matrix x(rows, spec.input_dim);
        Matrix yv(rows, spec.output_dim);
        for (Index i = 0; i < rows; ++i) {
            x.row(i) = d.inputs.row((*b)[static_cast<size_t>(i)]);
            yv.row(i) = d.outputs.row((*b)[static_cast<size_t>(i)]);
        }
        ad::Var y = tape.constant(yv);
        auto samples = propagate_samples(bm, t, tape.constant(x), *b, stream,
                                         mc.train_samples);
        ad::Var ll;
        for (const UnitMarginals& m : samples) {
            ad::Var term = spec.likelihood == Likelihood::gaussian
                               ? likelihood_term_gaussian(m, y, bm.lik_noise[static_cast<size_t>(t)])
                               : likelihood_term_bernoulli(m, y, mc.quadrature_points);
            ll = ll.valid() ? ad::add(ll, term) : term;
        }
        ll = ad::scalar_mul(ll, 1.0 / static_cast<double>(samples.size()));
        const double scale = static_cast<double>(full_counts[static_cast<size_t>(t)]) /
                             static_cast<double>(rows);
        accumulate(ad::scalar_mul(ll, scale));
    }

    for (size_t i = 0; i < bm.shared.size(); ++i)
        accumulate(ad::scalar_mul(kl_to_prior(bm.shared[i]), -weights.shared_weights[i]));
    for (size_t t = 0; t < bm.task_units.size(); ++t)
        for (size_t j = 0; j < bm.task_units[t].size(); ++j)
            accumulate(ad::scalar_mul(kl_to_prior(bm.task_units[t][j]),
                                      -weights.task_unit_weights[t][j]));
    for (size_t t = 0; t < bm.heads.size(); ++t)
        accumulate(ad::scalar_mul(kl_to_prior(bm.heads[t]), -weights.head_weights[t]));
    if (bm.coreg)
        accumulate(ad::scalar_mul(kl_core(bm.coreg->l_kzz, bm.coreg->delta, bm.coreg->l_s),
                                  -weights.head_weights[0]));
    return objective;
}

inline Batch full_batch(const std::vector<TaskDataset>& data) {
    Batch batch;
    for (const TaskDataset& d : data) {
        std::vector<Index> ids(static_cast<size_t>(d.size()));
        for (Index i = 0; i < d.size(); ++i) ids[static_cast<size_t>(i)] = i;
        batch.push_back(std::move(ids));
    }
    return batch;
}

inline std::vector<Index> dataset_counts(const std::vector<TaskDataset>& data) {
    std::vector<Index> counts;
    for (const TaskDataset& d : data) counts.push_back(d.size());
    return counts;
}

inline ad::Var elbo_var(ad::ParamBinding& binding, const Model& model,
                        const std::vector<TaskDataset>& data, const KLWeights& weights,
                        const MonteCarloConfig& mc, const RngStream& stream) {
    return minibatch_elbo_var(binding, model, data, full_batch(data), dataset_counts(data),
                              weights, mc, stream);
}

// Scalar conveniences on a scratch tape.
inline double minibatch_elbo(const Model& model, const std::vector<TaskDataset>& data,
                             const Batch& batch, const std::vector<Index>& full_counts,
                             const KLWeights& weights, const MonteCarloConfig& mc,
                             const RngStream& stream) {
    ad::Tape tape;
    ad::ParamBinding binding(tape);
    return minibatch_elbo_var(binding, model, data, batch, full_counts, weights, mc, stream)
        .value()(0, 0);
}

inline double elbo(const Model& model, const std::vector<TaskDataset>& data,
                   const KLWeights& weights, const MonteCarloConfig& mc,
                   const RngStream& stream) {
    return minibatch_elbo(model, data, full_batch(data), dataset_counts(data), weights, mc,
                          stream);
}

}  // namespace mtdgp
