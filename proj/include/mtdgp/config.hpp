#pragma once

#include <algorithm>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtdgp/architecture.hpp"
#include "mtdgp/data.hpp"
#include "mtdgp/errors.hpp"
#include "mtdgp/objective.hpp"
#include "mtdgp/training.hpp"

namespace mtdgp {

// Everything an experiment run needs, read from one JSON document. The
// init recipe's task_inputs stay empty here; they come from the dataset
// at build time.
struct ExperimentConfig {
    ModelSpec model;
    InitRecipe init;
    KLWeights weights;
    MonteCarloConfig mc;
    TrainConfig train;
    CsvSchema schema;
};

namespace detail {

inline void check_known_keys(const nlohmann::json& j, const std::string& path,
                             const std::vector<std::string>& allowed) {
    for (const auto& [key, value] : j.items()) {
        (void)value;
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
            throw ConfigError("config: " + path + ": unknown key '" + key + "'");
    }
}

inline const nlohmann::json& require_member(const nlohmann::json& j, const std::string& path,
                                            const std::string& key) {
    auto it = j.find(key);
    if (it == j.end()) throw ConfigError("config: " + path + ": missing key '" + key + "'");
    return *it;
}

template <typename T>
T get_as(const nlohmann::json& j, const std::string& path) {
    try {
        return j.get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError("config: " + path + ": wrong type");
    }
}

template <typename T>
T member_as(const nlohmann::json& j, const std::string& path, const std::string& key) {
    return get_as<T>(require_member(j, path, key), path + "." + key);
}

template <typename T>
T member_or(const nlohmann::json& j, const std::string& path, const std::string& key,
            T fallback) {
    auto it = j.find(key);
    if (it == j.end()) return fallback;
    return get_as<T>(*it, path + "." + key);
}

inline ModelSpec model_from_config(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config: model: must be an object");
    check_known_keys(j, "model",
                     {"variant", "tasks", "input_dim", "output_dim", "shared_units",
                      "task_units", "inducing_count", "coregional_rank", "likelihood"});
    ModelSpec spec;
    spec.variant = variant_from_name(member_as<std::string>(j, "model", "variant"));
    spec.tasks = member_as<int>(j, "model", "tasks");
    spec.input_dim = member_as<Index>(j, "model", "input_dim");
    spec.output_dim = member_or<Index>(j, "model", "output_dim", 1);
    spec.shared_units = member_or<std::vector<Index>>(j, "model", "shared_units", {});
    spec.task_units =
        member_or<std::vector<std::vector<Index>>>(j, "model", "task_units", {});
    spec.inducing_count = member_or<Index>(j, "model", "inducing_count", 100);
    spec.coregional_rank = member_or<Index>(j, "model", "coregional_rank", 1);
    spec.likelihood = likelihood_from_name(
        member_or<std::string>(j, "model", "likelihood", "gaussian"));
    return spec;
}

inline InitRecipe init_from_config(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config: init: must be an object");
    check_known_keys(j, "init",
                     {"inner_lengthscale", "shared_variance", "task_variance",
                      "head_lengthscale", "head_variance", "inner_noise",
                      "likelihood_noise", "kmeans_inducing"});
    InitRecipe r;
    r.inner_lengthscale = member_or(j, "init", "inner_lengthscale", r.inner_lengthscale);
    r.shared_variance = member_or(j, "init", "shared_variance", r.shared_variance);
    r.task_variance = member_or(j, "init", "task_variance", r.task_variance);
    r.head_lengthscale = member_or(j, "init", "head_lengthscale", r.head_lengthscale);
    r.head_variance = member_or(j, "init", "head_variance", r.head_variance);
    r.inner_noise = member_or(j, "init", "inner_noise", r.inner_noise);
    r.likelihood_noise = member_or(j, "init", "likelihood_noise", r.likelihood_noise);
    r.kmeans_inducing = member_or(j, "init", "kmeans_inducing", r.kmeans_inducing);
    return r;
}

inline KLWeights weights_from_config(const nlohmann::json& j, const ModelSpec& spec) {
    if (!j.is_object()) throw ConfigError("config: weights: must be an object");
    check_known_keys(j, "weights", {"head", "shared", "task"});
    KLWeights defaults = KLWeights::ones(spec);
    KLWeights w;
    w.head_weights =
        member_or<std::vector<double>>(j, "weights", "head", defaults.head_weights);
    w.shared_weights =
        member_or<std::vector<double>>(j, "weights", "shared", defaults.shared_weights);
    w.task_unit_weights = member_or<std::vector<std::vector<double>>>(
        j, "weights", "task", defaults.task_unit_weights);
    return w;
}

inline MonteCarloConfig mc_from_config(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config: monte_carlo: must be an object");
    check_known_keys(j, "monte_carlo", {"train_samples", "eval_samples", "quadrature_points"});
    MonteCarloConfig mc;
    mc.train_samples = member_or(j, "monte_carlo", "train_samples", mc.train_samples);
    mc.eval_samples = member_or(j, "monte_carlo", "eval_samples", mc.eval_samples);
    mc.quadrature_points =
        member_or(j, "monte_carlo", "quadrature_points", mc.quadrature_points);
    return mc;
}

inline TrainConfig train_from_config(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config: train: must be an object");
    check_known_keys(j, "train",
                     {"iterations", "learning_rate", "batch_size", "seed", "trace_every"});
    TrainConfig cfg;
    cfg.iterations = member_or(j, "train", "iterations", cfg.iterations);
    cfg.learning_rate = member_or(j, "train", "learning_rate", cfg.learning_rate);
    auto it = j.find("batch_size");
    if (it != j.end() && !it->is_null())
        cfg.batch_size = get_as<Index>(*it, "train.batch_size");
    cfg.seed = member_or<std::uint64_t>(j, "train", "seed", cfg.seed);
    cfg.trace_every = member_or(j, "train", "trace_every", cfg.trace_every);
    return cfg;
}

inline CsvSchema schema_from_config(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config: data: must be an object");
    check_known_keys(j, "data", {"features", "targets", "task_column"});
    CsvSchema schema;
    schema.feature_columns = member_as<std::vector<std::string>>(j, "data", "features");
    schema.target_columns = member_as<std::vector<std::string>>(j, "data", "targets");
    schema.task_column = member_or<std::string>(j, "data", "task_column", "task");
    if (schema.feature_columns.empty())
        throw ConfigError("config: data.features: needs at least one column");
    if (schema.target_columns.empty())
        throw ConfigError("config: data.targets: needs at least one column");
    return schema;
}

}  // namespace detail

inline ExperimentConfig parse_config(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config: top level must be an object");
    detail::check_known_keys(
        j, "top level", {"model", "init", "weights", "monte_carlo", "train", "data"});

    ExperimentConfig cfg;
    cfg.model = detail::model_from_config(detail::require_member(j, "top level", "model"));
    cfg.model.validate();
    cfg.init = j.contains("init") ? detail::init_from_config(j.at("init")) : InitRecipe{};
    cfg.weights = j.contains("weights")
                      ? detail::weights_from_config(j.at("weights"), cfg.model)
                      : KLWeights::ones(cfg.model);
    cfg.weights.validate(cfg.model);
    cfg.mc = j.contains("monte_carlo") ? detail::mc_from_config(j.at("monte_carlo"))
                                       : MonteCarloConfig{};
    cfg.mc.validate();
    cfg.train =
        j.contains("train") ? detail::train_from_config(j.at("train")) : TrainConfig{};
    cfg.train.validate();
    if (j.contains("data")) {
        cfg.schema = detail::schema_from_config(j.at("data"));
    } else {
        cfg.schema.feature_columns = {"x"};
        cfg.schema.target_columns = {"y"};
    }
    if (static_cast<Index>(cfg.schema.feature_columns.size()) != cfg.model.input_dim)
        throw ConfigError("config: data.features: " +
                          std::to_string(cfg.schema.feature_columns.size()) +
                          " columns for input_dim " + std::to_string(cfg.model.input_dim));
    if (static_cast<Index>(cfg.schema.target_columns.size()) != cfg.model.output_dim)
        throw ConfigError("config: data.targets: " +
                          std::to_string(cfg.schema.target_columns.size()) +
                          " columns for output_dim " + std::to_string(cfg.model.output_dim));
    return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config: '" + path + "' is not valid JSON: " + e.what());
    }
    return parse_config(j);
}

}  // namespace mtdgp
