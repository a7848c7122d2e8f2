#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mtdgp/ad/parameter.hpp"
#include "mtdgp/architecture.hpp"
#include "mtdgp/checkpoint.hpp"
#include "mtdgp/core/matrix.hpp"
#include "mtdgp/core/rng.hpp"
#include "mtdgp/data.hpp"
#include "mtdgp/errors.hpp"
#include "mtdgp/log.hpp"
#include "mtdgp/objective.hpp"

namespace mtdgp {

struct AdamHyper {
    double learning_rate = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    AdamHyper hyper;
    long step_count = 0;
    std::vector<Matrix> first_moment;
    std::vector<Matrix> second_moment;

    static AdamState init(const std::vector<ad::Parameter*>& params, AdamHyper hyper) {
        AdamState state;
        state.hyper = hyper;
        for (const ad::Parameter* p : params) {
            state.first_moment.push_back(Matrix::Zero(p->rows(), p->cols()));
            state.second_moment.push_back(Matrix::Zero(p->rows(), p->cols()));
        }
        return state;
    }
};

// One bias-corrected Adam step in the unconstrained parameterization,
// ascending the objective (gradients point uphill and are added). Validates
// everything before touching any parameter, so a bad step changes nothing.
inline void adam_step(const std::vector<ad::Parameter*>& params,
                      const std::unordered_map<const ad::Parameter*, Matrix>& grads,
                      AdamState& state) {
    if (params.size() != state.first_moment.size())
        throw ShapeMismatch("adam_step: state holds " +
                            std::to_string(state.first_moment.size()) + " moments for " +
                            std::to_string(params.size()) + " parameters");
    for (size_t k = 0; k < params.size(); ++k) {
        auto it = grads.find(params[k]);
        if (it == grads.end())
            throw ShapeMismatch("adam_step: no gradient for '" + params[k]->name() + "'");
        const Matrix& g = it->second;
        if (g.rows() != params[k]->rows() || g.cols() != params[k]->cols())
            throw ShapeMismatch("adam_step: gradient shape mismatch for '" +
                                params[k]->name() + "'");
        if (!all_finite(g))
            throw NonFiniteGradient("adam_step: non-finite gradient for '" +
                                    params[k]->name() + "'");
    }

    const AdamHyper& h = state.hyper;
    state.step_count += 1;
    const double t = static_cast<double>(state.step_count);
    const double bc1 = 1.0 - std::pow(h.beta1, t);
    const double bc2 = 1.0 - std::pow(h.beta2, t);
    for (size_t k = 0; k < params.size(); ++k) {
        const Matrix& g = grads.at(params[k]);
        Matrix& m = state.first_moment[k];
        Matrix& v = state.second_moment[k];
        m = h.beta1 * m + (1.0 - h.beta1) * g;
        v = h.beta2 * v + (1.0 - h.beta2) * g.cwiseProduct(g);
        Matrix m_hat = m / bc1;
        Matrix v_hat = v / bc2;
        params[k]->unconstrained().array() +=
            h.learning_rate * m_hat.array() / (v_hat.array().sqrt() + h.eps);
    }
}

struct TrainConfig {
    int iterations = 1000;
    double learning_rate = 0.01;
    std::optional<Index> batch_size;  // absent = full batch
    std::uint64_t seed = 0;
    int trace_every = 10;
    std::optional<std::string> checkpoint_path;

    void validate() const {
        if (iterations < 1) throw InvalidSpec("train config: iterations must be >= 1");
        if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
            throw InvalidSpec("train config: learning rate must be positive");
        if (batch_size && *batch_size < 1)
            throw InvalidSpec("train config: batch size must be >= 1 when set");
        if (trace_every < 1) throw InvalidSpec("train config: trace_every must be >= 1");
    }
};

struct TraceEntry {
    int iteration = 0;  // 1-based
    double elbo = 0.0;
    double wall_ms = 0.0;
};

struct TrainResult {
    std::vector<TraceEntry> trace;
    int skipped_steps = 0;
};

namespace detail {

// Per-task epoch decks: shuffled indices handed out without replacement; a
// fresh shuffle starts each epoch. Batch sizes are proportional to N^t.
class MinibatchSampler {
  public:
    MinibatchSampler(const std::vector<TaskDataset>& data, Index batch_size,
                     RngStream stream)
        : stream_(stream) {
        Index total = 0;
        for (const TaskDataset& d : data) total += d.size();
        for (const TaskDataset& d : data) {
            double share = static_cast<double>(batch_size) * static_cast<double>(d.size()) /
                           static_cast<double>(total);
            per_task_.push_back(std::min<Index>(
                d.size(), std::max<Index>(1, static_cast<Index>(std::llround(share)))));
            decks_.emplace_back(static_cast<size_t>(d.size()));
            for (Index i = 0; i < d.size(); ++i)
                decks_.back()[static_cast<size_t>(i)] = i;
            cursors_.push_back(d.size());  // forces a shuffle on first use
        }
    }

    Batch next() {
        Batch batch;
        for (size_t t = 0; t < decks_.size(); ++t) {
            auto& deck = decks_[t];
            Index n = static_cast<Index>(deck.size());
            if (cursors_[t] >= n) {
                for (Index i = n - 1; i > 0; --i) {
                    Index j = static_cast<Index>(
                        stream_.uniform_index(static_cast<std::uint64_t>(i + 1)));
                    std::swap(deck[static_cast<size_t>(i)], deck[static_cast<size_t>(j)]);
                }
                cursors_[t] = 0;
            }
            Index take = std::min(per_task_[t], n - cursors_[t]);
            std::vector<Index> ids(deck.begin() + cursors_[t],
                                   deck.begin() + cursors_[t] + take);
            cursors_[t] += take;
            batch.push_back(std::move(ids));
        }
        return batch;
    }

  private:
    RngStream stream_;
    std::vector<Index> per_task_;
    std::vector<std::vector<Index>> decks_;
    std::vector<Index> cursors_;
};

}  // namespace detail

// Adam ascent on the weighted bound. Deterministic given (seed, config,
// data): minibatch order and MC draws both derive from cfg.seed. Numeric
// step failures (indefinite grams, non-finite gradients) skip the step;
// more than 10 consecutive failures abort with a diagnostic dump.
inline TrainResult train(Model& model, const std::vector<TaskDataset>& data,
                         const TrainConfig& cfg, const KLWeights& weights,
                         const MonteCarloConfig& mc) {
    cfg.validate();
    model.validate();
    // surface configuration problems before the loop; in-loop errors are
    // then numeric by construction
    detail::check_objective_inputs(model, data, full_batch(data), dataset_counts(data),
                                   weights, mc);

    std::vector<ad::Parameter*> params = model.parameters();
    AdamHyper hyper;
    hyper.learning_rate = cfg.learning_rate;
    AdamState state = AdamState::init(params, hyper);

    std::optional<detail::MinibatchSampler> sampler;
    if (cfg.batch_size)
        sampler.emplace(data, *cfg.batch_size, RngStream(cfg.seed, 9001));
    RngStream mc_root(cfg.seed, 9002);
    const std::vector<Index> counts = dataset_counts(data);

    log_message("train: Adam ascent on the bound, lr " + std::to_string(cfg.learning_rate) +
                ", " + std::to_string(cfg.iterations) + " iterations");

    TrainResult result;
    const auto start = std::chrono::steady_clock::now();
    auto elapsed_ms = [&]() {
        return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                         start)
            .count();
    };

    int consecutive_failures = 0;
    for (int it = 1; it <= cfg.iterations; ++it) {
        Batch batch = sampler ? sampler->next() : full_batch(data);
        double value = std::numeric_limits<double>::quiet_NaN();
        bool stepped = false;
        std::string failure;
        try {
            ad::Tape tape;
            ad::ParamBinding binding(tape);
            ad::Var objective = minibatch_elbo_var(binding, model, data, batch, counts,
                                                   weights, mc,
                                                   mc_root.child(static_cast<std::uint64_t>(it)));
            value = objective.scalar();
            auto grads = ad::gradient(objective, binding, params);
            adam_step(params, grads, state);
            stepped = true;
        } catch (const Error& e) {
            failure = e.what();
        }

        if (stepped) {
            consecutive_failures = 0;
        } else {
            result.skipped_steps += 1;
            consecutive_failures += 1;
            log_message("train: iteration " + std::to_string(it) + " skipped (" + failure +
                        ")");
            if (consecutive_failures > 10) {
                for (const ad::Parameter* p : params)
                    log_message("train: param " + p->name() + " max|u| = " +
                                std::to_string(max_abs(p->unconstrained())));
                throw TrainingAborted("train: " + std::to_string(consecutive_failures) +
                                      " consecutive failed steps at iteration " +
                                      std::to_string(it) + "; last error: " + failure);
            }
        }

        if (it % cfg.trace_every == 0 || it == cfg.iterations) {
            result.trace.push_back({it, value, elapsed_ms()});
            log_message("train: iteration " + std::to_string(it) + " elbo " +
                        std::to_string(value));
        }
    }
    if (cfg.checkpoint_path) save_checkpoint(model, *cfg.checkpoint_path);
    return result;
}

}  // namespace mtdgp
