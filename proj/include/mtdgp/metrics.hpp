#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "mtdgp/architecture.hpp"
#include "mtdgp/core/matrix.hpp"
#include "mtdgp/core/rng.hpp"
#include "mtdgp/errors.hpp"
#include "mtdgp/objective.hpp"

namespace mtdgp {

// Equally weighted Gaussian mixture over posterior samples: one (mean,
// variance) pair per component, point, and output dimension.
struct PredictiveMixture {
    std::vector<Matrix> means;      // S entries, each N x P
    std::vector<Matrix> variances;  // S entries, each N x P

    Index components() const { return static_cast<Index>(means.size()); }
    Index points() const { return means.empty() ? 0 : means.front().rows(); }
    Index dims() const { return means.empty() ? 0 : means.front().cols(); }

    void validate() const {
        if (means.empty() || means.size() != variances.size())
            throw InvalidSpec("predictive mixture: needs matching mean/variance components");
        for (size_t s = 0; s < means.size(); ++s) {
            if (means[s].rows() != points() || means[s].cols() != dims() ||
                variances[s].rows() != points() || variances[s].cols() != dims())
                throw ShapeMismatch("predictive mixture: component shapes differ");
            if (variances[s].minCoeff() < 0.0)
                throw InvalidSpec("predictive mixture: negative variance");
        }
    }
};

// Posterior samples at the requested inputs; Gaussian likelihoods fold the
// observation noise into every component variance, so the mixture is over y.
inline PredictiveMixture predict(const Model& model, const Matrix& inputs, Index task,
                                 const MonteCarloConfig& mc, RngStream stream) {
    mc.validate();
    PropagateResult raw = propagate(model, inputs, task, stream, mc.eval_samples);
    PredictiveMixture mix{std::move(raw.means), std::move(raw.variances)};
    if (model.spec.likelihood == Likelihood::gaussian) {
        double noise =
            model.likelihood_noise[static_cast<size_t>(task)].constrained()(0, 0);
        for (Matrix& v : mix.variances) v.array() += noise;
    }
    mix.validate();
    return mix;
}

// Moment mean of the mixture, the point prediction used for RMSE.
inline Matrix mixture_mean(const PredictiveMixture& mix) {
    mix.validate();
    Matrix out = Matrix::Zero(mix.points(), mix.dims());
    for (const Matrix& m : mix.means) out += m;
    return out / static_cast<double>(mix.components());
}

// Average negative log density of y under the per-point mixture, diagonal
// across output dimensions, with a max-shifted log-sum-exp over components.
inline double nlpp(const PredictiveMixture& mix, const Matrix& y) {
    mix.validate();
    if (y.rows() != mix.points() || y.cols() != mix.dims())
        throw ShapeMismatch("nlpp: target shape does not match the mixture");
    const Index n = mix.points();
    const Index s_count = mix.components();
    const double log_s = std::log(static_cast<double>(s_count));
    double total = 0.0;
    std::vector<double> comp(static_cast<size_t>(s_count));
    for (Index i = 0; i < n; ++i) {
        for (Index s = 0; s < s_count; ++s) {
            double lp = 0.0;
            for (Index p = 0; p < mix.dims(); ++p) {
                double v = std::max(mix.variances[static_cast<size_t>(s)](i, p),
                                    kVarianceFloor);
                double r = y(i, p) - mix.means[static_cast<size_t>(s)](i, p);
                lp += -0.5 * std::log(2.0 * M_PI * v) - r * r / (2.0 * v);
            }
            comp[static_cast<size_t>(s)] = lp;
        }
        double peak = *std::max_element(comp.begin(), comp.end());
        double acc = 0.0;
        for (double lp : comp) acc += std::exp(lp - peak);
        total += peak + std::log(acc) - log_s;
    }
    return -total / static_cast<double>(n);
}

inline double rmse(const Matrix& predictions, const Matrix& y) {
    if (predictions.rows() != y.rows() || predictions.cols() != y.cols())
        throw ShapeMismatch("rmse: prediction and target shapes differ");
    if (predictions.size() == 0) throw EmptyBatch("rmse: no points");
    return std::sqrt((predictions - y).squaredNorm() /
                     static_cast<double>(predictions.size()));
}

namespace detail {

inline void check_binary_labels(const std::vector<double>& labels) {
    bool pos = false, neg = false;
    for (double l : labels) {
        if (l == 1.0)
            pos = true;
        else if (l == 0.0)
            neg = true;
        else
            throw InvalidSpec("labels must be 0 or 1");
    }
    if (!pos || !neg) throw DegenerateLabels("need at least one label of each class");
}

}  // namespace detail

// Mann-Whitney form of the ROC area: P(score+ > score-) + 0.5 P(tie),
// computed from average ranks so ties cost one sort, not a pair scan.
inline double roc_auc(const std::vector<double>& scores, const std::vector<double>& labels) {
    if (scores.size() != labels.size() || scores.empty())
        throw ShapeMismatch("roc_auc: scores and labels must align");
    detail::check_binary_labels(labels);

    std::vector<size_t> order(scores.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return scores[a] < scores[b]; });

    double positive_rank_sum = 0.0;
    size_t positives = 0;
    size_t i = 0;
    while (i < order.size()) {
        size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // 1-based average over the tie run
        for (size_t k = i; k < j; ++k) {
            if (labels[order[k]] == 1.0) {
                positive_rank_sum += avg_rank;
                positives += 1;
            }
        }
        i = j;
    }
    size_t negatives = scores.size() - positives;
    double np = static_cast<double>(positives), nn = static_cast<double>(negatives);
    return (positive_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

// Fraction of points whose thresholded probability (> 0.5 means class 1)
// matches the label.
inline double accuracy(const std::vector<double>& probabilities,
                       const std::vector<double>& labels) {
    if (probabilities.size() != labels.size() || probabilities.empty())
        throw ShapeMismatch("accuracy: probabilities and labels must align");
    size_t hits = 0;
    for (size_t k = 0; k < labels.size(); ++k) {
        if (labels[k] != 0.0 && labels[k] != 1.0)
            throw InvalidSpec("labels must be 0 or 1");
        double predicted = probabilities[k] > 0.5 ? 1.0 : 0.0;
        if (predicted == labels[k]) hits += 1;
    }
    return static_cast<double>(hits) / static_cast<double>(labels.size());
}

// Mixture-averaged P(y=1|x) for classification scores: each component's
// E[sigmoid(f)] under its Gaussian via Gauss-Hermite quadrature.
inline std::vector<double> bernoulli_probability(const PredictiveMixture& mix,
                                                 int quadrature_points) {
    mix.validate();
    if (mix.dims() != 1)
        throw InvalidSpec("bernoulli probability: expects one output dimension");
    auto [xs, ws] = gauss_hermite(quadrature_points);
    std::vector<double> out(static_cast<size_t>(mix.points()), 0.0);
    const double inv_sqrt_pi = 1.0 / std::sqrt(M_PI);
    for (Index s = 0; s < mix.components(); ++s) {
        for (Index i = 0; i < mix.points(); ++i) {
            double mu = mix.means[static_cast<size_t>(s)](i, 0);
            double v = std::max(mix.variances[static_cast<size_t>(s)](i, 0), 0.0);
            double scale = std::sqrt(2.0 * v);
            double p = 0.0;
            for (size_t k = 0; k < xs.size(); ++k) {
                double f = mu + scale * xs[k];
                p += ws[k] * inv_sqrt_pi / (1.0 + std::exp(-f));
            }
            out[static_cast<size_t>(i)] += p;
        }
    }
    for (double& p : out) p /= static_cast<double>(mix.components());
    return out;
}

}  // namespace mtdgp
