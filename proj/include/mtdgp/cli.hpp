#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mtdgp/architecture.hpp"
#include "mtdgp/checkpoint.hpp"
#include "mtdgp/config.hpp"
#include "mtdgp/data.hpp"
#include "mtdgp/metrics.hpp"
#include "mtdgp/training.hpp"

namespace mtdgp::cli {

namespace fs = std::filesystem;

inline std::string iso_timestamp() {
    std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm_utc{};
    gmtime_r(&now, &tm_utc);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
    return buf;
}

inline std::vector<fs::path> csv_files_in(const std::string& dir) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_regular_file() && entry.path().extension() == ".csv")
            files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw EmptyFile("no .csv files in '" + dir + "'");
    return files;
}

// Accepts a single CSV or a directory of per-task CSVs; a directory is
// merged into one row stream (shared header) before task grouping, so
// files holding single task ids regroup correctly.
inline std::vector<TaskDataset> load_data(const std::string& path, const CsvSchema& schema) {
    if (!fs::is_directory(path)) return load_csv(path, schema);

    std::string merged_header;
    std::ostringstream merged;
    for (const fs::path& file : csv_files_in(path)) {
        std::ifstream in(file);
        if (!in) throw Error("cannot open '" + file.string() + "'");
        std::string line;
        if (!std::getline(in, line)) throw EmptyFile("'" + file.string() + "' is empty");
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (merged_header.empty()) {
            merged_header = line;
            merged << line << "\n";
        } else if (line != merged_header) {
            throw SchemaMismatch("'" + file.string() + "' header differs from the first file");
        }
        while (std::getline(in, line)) merged << line << "\n";
    }
    std::istringstream stream(merged.str());
    return load_csv(stream, schema, path);
}

inline std::vector<std::string> header_of(const std::string& path) {
    fs::path file = fs::is_directory(path) ? csv_files_in(path).front() : fs::path(path);
    std::ifstream in(file);
    if (!in) throw Error("cannot open '" + file.string() + "'");
    std::string line;
    if (!std::getline(in, line)) throw EmptyFile("'" + file.string() + "' is empty");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return detail::split_csv_line(line);
}

// Checkpoint-driven commands have no config document, so the column roles
// come from file order: the task column by name, then the first input_dim
// columns as features and the next output_dim as targets.
inline CsvSchema infer_schema(const std::string& path, const ModelSpec& spec) {
    std::vector<std::string> names = header_of(path);
    CsvSchema schema;
    std::vector<std::string> rest;
    bool has_task = false;
    for (const std::string& n : names) {
        if (n == schema.task_column)
            has_task = true;
        else
            rest.push_back(n);
    }
    if (!has_task)
        throw SchemaMismatch("'" + path + "': no '" + schema.task_column + "' column");
    if (static_cast<Index>(rest.size()) < spec.input_dim + spec.output_dim)
        throw SchemaMismatch("'" + path + "': expected at least " +
                             std::to_string(spec.input_dim + spec.output_dim) +
                             " data columns, found " + std::to_string(rest.size()));
    schema.feature_columns.assign(rest.begin(), rest.begin() + spec.input_dim);
    schema.target_columns.assign(rest.begin() + spec.input_dim,
                                 rest.begin() + spec.input_dim + spec.output_dim);
    return schema;
}

// All-numeric CSV with a header row, order preserved.
inline Matrix read_table(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) throw EmptyFile("'" + path + "' is empty");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const size_t cols = detail::split_csv_line(line).size();

    std::vector<std::vector<double>> rows;
    size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> cells = detail::split_csv_line(line);
        if (cells.size() != cols)
            throw MalformedRow("line " + std::to_string(line_no) + ": expected " +
                               std::to_string(cols) + " cells, got " +
                               std::to_string(cells.size()));
        std::vector<double> row;
        for (const std::string& c : cells) row.push_back(detail::parse_number(c, line_no));
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw EmptyFile("'" + path + "' has no data rows");
    Matrix table(static_cast<Index>(rows.size()), static_cast<Index>(cols));
    for (size_t i = 0; i < rows.size(); ++i)
        for (size_t j = 0; j < cols; ++j)
            table(static_cast<Index>(i), static_cast<Index>(j)) = rows[i][j];
    return table;
}

// Trace CSV: the timestamp lives on exactly one comment line so runs can
// be compared byte-for-byte below it (wall_ms aside, which is recorded
// per row as measured).
inline void write_trace(const std::string& path, const std::vector<TraceEntry>& trace) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write '" + path + "'");
    out << "# generated " << iso_timestamp() << "\n";
    out << "iteration,elbo,wall_ms\n";
    out << std::setprecision(17);
    for (const TraceEntry& e : trace) {
        out << e.iteration << "," << e.elbo << ",";
        out << std::fixed << std::setprecision(3) << e.wall_ms << "\n";
        out << std::defaultfloat << std::setprecision(17);
    }
}

// Labels stay raw for classification: only inputs are standardized.
inline void neutralize_output_scaling(Standardizer& st) {
    for (size_t t = 0; t < st.output_mean.size(); ++t) {
        st.output_mean[t].setZero();
        st.output_sd[t].setOnes();
        std::fill(st.degenerate_outputs[t].begin(), st.degenerate_outputs[t].end(), false);
    }
}

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write '" + path + "'");
    out << text;
    if (!out) throw Error("write to '" + path + "' failed");
}

inline int run_generate_toy(Index n, double noise, std::uint64_t seed, bool grid,
                            const std::string& out_dir) {
    std::vector<TaskDataset> data = generate_toy(n, noise, seed, grid);
    fs::create_directories(out_dir);
    CsvSchema schema;
    schema.feature_columns = {"x"};
    schema.target_columns = {"y"};
    for (const TaskDataset& d : data) {
        std::string file = out_dir + "/task" + std::to_string(d.task_id) + ".csv";
        save_csv({d}, file, schema);
        log_message("generate-toy: wrote " + file + " (" + std::to_string(d.size()) +
                    " rows)");
    }
    return 0;
}

inline int run_train(const std::string& config_path, const std::string& data_path,
                     const std::string& checkpoint_out,
                     const std::optional<std::string>& trace_out) {
    ExperimentConfig cfg = load_config(config_path);
    std::vector<TaskDataset> raw = load_data(data_path, cfg.schema);
    if (static_cast<Index>(raw.size()) != cfg.model.tasks)
        throw ConfigError("data holds " + std::to_string(raw.size()) +
                          " tasks but the config declares " +
                          std::to_string(cfg.model.tasks));

    Standardizer st = fit_standardizer(raw);
    if (cfg.model.likelihood == Likelihood::bernoulli) neutralize_output_scaling(st);
    std::vector<TaskDataset> data = st.apply(raw);

    InitRecipe recipe = cfg.init;
    for (const TaskDataset& d : data) recipe.task_inputs.push_back(d.inputs);
    RngStream build_stream(cfg.train.seed, 8001);
    Model model = build_model(cfg.model, recipe, build_stream);

    TrainResult result = train(model, data, cfg.train, cfg.weights, cfg.mc);
    save_checkpoint(model, checkpoint_out, st);
    log_message("train: checkpoint written to " + checkpoint_out);
    if (trace_out) {
        write_trace(*trace_out, result.trace);
        log_message("train: trace written to " + *trace_out);
    }
    return 0;
}

// Moment-matched standardized variance of the mixture, for reporting.
inline Matrix mixture_moment_variance(const PredictiveMixture& mix) {
    Matrix mean = mixture_mean(mix);
    Matrix second = Matrix::Zero(mix.points(), mix.dims());
    for (Index s = 0; s < mix.components(); ++s) {
        const Matrix& m = mix.means[static_cast<size_t>(s)];
        const Matrix& v = mix.variances[static_cast<size_t>(s)];
        second += v + m.cwiseProduct(m);
    }
    second /= static_cast<double>(mix.components());
    return second - mean.cwiseProduct(mean);
}

inline int run_predict(const std::string& checkpoint_path, const std::string& data_path,
                       Index task, int samples, std::uint64_t seed,
                       const std::string& out_path) {
    LoadedCheckpoint ck = load_checkpoint(checkpoint_path);
    const ModelSpec& spec = ck.model.spec;
    if (task < 0 || task >= spec.tasks)
        throw TaskIndexOutOfRange("task " + std::to_string(task) + " of " +
                                  std::to_string(spec.tasks));
    CsvSchema schema = infer_schema(data_path, spec);
    std::vector<TaskDataset> raw = load_data(data_path, schema);
    if (task >= static_cast<Index>(raw.size()))
        throw TaskIndexOutOfRange("data has no rows for task " + std::to_string(task));
    const Matrix& x = raw[static_cast<size_t>(task)].inputs;
    Matrix xs = ck.standardizer ? ck.standardizer->apply_inputs(x) : x;

    MonteCarloConfig mc;
    mc.eval_samples = samples;
    PredictiveMixture mix = predict(ck.model, xs, task, mc, RngStream(seed, 6001));

    std::ofstream out(out_path);
    if (!out) throw Error("cannot write '" + out_path + "'");
    out << std::setprecision(17);
    for (const std::string& c : schema.feature_columns) out << c << ",";

    if (spec.likelihood == Likelihood::bernoulli) {
        out << "probability,task\n";
        std::vector<double> probs = bernoulli_probability(mix, MonteCarloConfig{}.quadrature_points);
        for (Index i = 0; i < x.rows(); ++i) {
            for (Index j = 0; j < x.cols(); ++j) out << x(i, j) << ",";
            out << probs[static_cast<size_t>(i)] << "," << task << "\n";
        }
        return 0;
    }

    Matrix mean = mixture_mean(mix);
    Matrix var = mixture_moment_variance(mix);
    if (ck.standardizer) {
        for (Index p = 0; p < var.cols(); ++p)
            var.col(p) *= ck.standardizer->output_var_scale(task, p);
        mean = ck.standardizer->invert_outputs(task, mean);
    }
    for (Index p = 0; p < mean.cols(); ++p) out << "mean" << p << ",";
    for (Index p = 0; p < var.cols(); ++p) out << "variance" << p << ",";
    out << "task\n";
    for (Index i = 0; i < x.rows(); ++i) {
        for (Index j = 0; j < x.cols(); ++j) out << x(i, j) << ",";
        for (Index p = 0; p < mean.cols(); ++p) out << mean(i, p) << ",";
        for (Index p = 0; p < var.cols(); ++p) out << var(i, p) << ",";
        out << task << "\n";
    }
    return 0;
}

inline int run_eval(const std::string& checkpoint_path, const std::string& data_path,
                    const std::string& metrics_csv, int samples, std::uint64_t seed,
                    const std::string& out_path) {
    std::set<std::string> requested;
    std::stringstream ss(metrics_csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) requested.insert(item);
    }
    if (requested.empty()) throw ConfigError("eval: no metrics requested");
    for (const std::string& m : requested)
        if (m != "nlpp" && m != "rmse" && m != "auc" && m != "accuracy")
            throw ConfigError("eval: unknown metric '" + m + "'");

    LoadedCheckpoint ck = load_checkpoint(checkpoint_path);
    const ModelSpec& spec = ck.model.spec;
    const bool classification = spec.likelihood == Likelihood::bernoulli;
    if (!classification && (requested.count("auc") || requested.count("accuracy")))
        throw ConfigError("eval: auc/accuracy need a bernoulli-likelihood checkpoint");
    if (classification && (requested.count("nlpp") || requested.count("rmse")))
        throw ConfigError("eval: nlpp/rmse need a gaussian-likelihood checkpoint");

    CsvSchema schema = infer_schema(data_path, spec);
    std::vector<TaskDataset> raw = load_data(data_path, schema);
    if (static_cast<Index>(raw.size()) != spec.tasks)
        throw ConfigError("eval: data holds " + std::to_string(raw.size()) +
                          " tasks but the checkpoint declares " +
                          std::to_string(spec.tasks));

    MonteCarloConfig mc;
    mc.eval_samples = samples;
    nlohmann::json tasks = nlohmann::json::array();
    for (Index t = 0; t < spec.tasks; ++t) {
        const TaskDataset& d = raw[static_cast<size_t>(t)];
        Matrix xs = ck.standardizer ? ck.standardizer->apply_inputs(d.inputs) : d.inputs;
        RngStream stream = RngStream(seed, 6002).child(static_cast<std::uint64_t>(t));
        PredictiveMixture mix = predict(ck.model, xs, t, mc, stream);

        nlohmann::json jt;
        jt["task"] = t;
        jt["points"] = d.size();
        if (requested.count("nlpp")) {
            Matrix y = ck.standardizer ? ck.standardizer->apply_outputs(t, d.outputs)
                                       : d.outputs;
            jt["nlpp"] = nlpp(mix, y);
        }
        if (requested.count("rmse")) {
            Matrix mean = mixture_mean(mix);
            if (ck.standardizer) mean = ck.standardizer->invert_outputs(t, mean);
            jt["rmse"] = rmse(mean, d.outputs);
        }
        if (requested.count("auc") || requested.count("accuracy")) {
            std::vector<double> probs =
                bernoulli_probability(mix, mc.quadrature_points);
            std::vector<double> labels;
            for (Index i = 0; i < d.size(); ++i) labels.push_back(d.outputs(i, 0));
            if (requested.count("auc")) jt["auc"] = roc_auc(probs, labels);
            if (requested.count("accuracy")) jt["accuracy"] = accuracy(probs, labels);
        }
        tasks.push_back(jt);
    }

    nlohmann::json j;
    j["tasks"] = tasks;
    nlohmann::json scales;
    if (requested.count("nlpp"))
        scales["nlpp"] = ck.standardizer ? "standardized" : "original";
    if (requested.count("rmse")) scales["rmse"] = "original";
    if (requested.count("auc")) scales["auc"] = "probability";
    if (requested.count("accuracy")) scales["accuracy"] = "probability";
    j["scales"] = scales;
    j["eval_samples"] = samples;
    j["seed"] = seed;
    write_text(out_path, j.dump(2) + "\n");
    log_message("eval: metrics written to " + out_path);
    return 0;
}

inline int run_export_ard(const std::string& checkpoint_path, const std::string& out_path) {
    LoadedCheckpoint ck = load_checkpoint(checkpoint_path);
    std::vector<std::vector<ArdEntry>> report = ard_report(ck.model);
    nlohmann::json tasks = nlohmann::json::array();
    for (size_t t = 0; t < report.size(); ++t) {
        nlohmann::json entries = nlohmann::json::array();
        for (const ArdEntry& e : report[t]) {
            nlohmann::json je;
            je["unit"] = e.unit;
            je["dim"] = e.dim;
            je["weight"] = e.weight;
            je["shared"] = e.shared;
            entries.push_back(je);
        }
        nlohmann::json jt;
        jt["task"] = t;
        jt["entries"] = entries;
        tasks.push_back(jt);
    }
    nlohmann::json j;
    j["variant"] = variant_name(ck.model.spec.variant);
    j["tasks"] = tasks;
    write_text(out_path, j.dump(2) + "\n");
    return 0;
}

inline int run_sarcos_split(const std::string& in_path, Index n, std::uint64_t seed,
                            const std::string& out_dir) {
    Matrix table = read_table(in_path);
    std::vector<TaskDataset> datasets = sarcos_split(table, n, seed);
    fs::create_directories(out_dir);
    CsvSchema schema;
    for (int f = 0; f < 21; ++f) schema.feature_columns.push_back("f" + std::to_string(f));
    schema.target_columns = {"y"};
    for (const TaskDataset& d : datasets) {
        std::string file = out_dir + "/task" + std::to_string(d.task_id) + ".csv";
        save_csv({d}, file, schema);
        log_message("sarcos-split: wrote " + file + " (" + std::to_string(d.size()) +
                    " rows)");
    }
    return 0;
}

inline int run(int argc, const char* const* argv) {
    CLI::App app{"multi-task deep Gaussian process toolkit"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("generate-toy", "write the synthetic two-task datasets");
    Index gen_n = 100;
    double gen_noise = 0.05;
    std::uint64_t gen_seed = 0;
    bool gen_grid = false;
    std::string gen_out;
    gen->add_option("--n", gen_n, "points per task");
    gen->add_option("--noise", gen_noise, "observation noise standard deviation");
    gen->add_option("--seed", gen_seed, "rng seed");
    gen->add_flag("--grid", gen_grid, "evenly spaced inputs instead of uniform draws");
    gen->add_option("--out", gen_out, "output directory")->required();

    auto* tr = app.add_subcommand("train", "fit a model from a config and data");
    std::string tr_config, tr_data, tr_ckpt, tr_trace;
    tr->add_option("--config", tr_config, "experiment config JSON")->required();
    tr->add_option("--data", tr_data, "data CSV file or directory")->required();
    tr->add_option("--out-checkpoint", tr_ckpt, "checkpoint output path")->required();
    tr->add_option("--trace", tr_trace, "trace CSV output path");

    auto* pr = app.add_subcommand("predict", "predictive means and variances for one task");
    std::string pr_ckpt, pr_data, pr_out;
    Index pr_task = 0;
    int pr_samples = 100;
    std::uint64_t pr_seed = 0;
    pr->add_option("--checkpoint", pr_ckpt, "checkpoint path")->required();
    pr->add_option("--data", pr_data, "data CSV file or directory")->required();
    pr->add_option("--task", pr_task, "task index")->required();
    pr->add_option("--samples", pr_samples, "posterior samples");
    pr->add_option("--seed", pr_seed, "rng seed");
    pr->add_option("--out", pr_out, "prediction CSV output path")->required();

    auto* ev = app.add_subcommand("eval", "metrics for a checkpoint on a dataset");
    std::string ev_ckpt, ev_data, ev_metrics = "nlpp,rmse", ev_out;
    int ev_samples = 100;
    std::uint64_t ev_seed = 0;
    ev->add_option("--checkpoint", ev_ckpt, "checkpoint path")->required();
    ev->add_option("--data", ev_data, "data CSV file or directory")->required();
    ev->add_option("--metrics", ev_metrics, "comma list: nlpp,rmse,auc,accuracy");
    ev->add_option("--samples", ev_samples, "posterior samples");
    ev->add_option("--seed", ev_seed, "rng seed");
    ev->add_option("--out", ev_out, "metrics JSON output path")->required();

    auto* ard = app.add_subcommand("export-ard", "head relevance weights as JSON");
    std::string ard_ckpt, ard_out;
    ard->add_option("--checkpoint", ard_ckpt, "checkpoint path")->required();
    ard->add_option("--out", ard_out, "JSON output path")->required();

    auto* sar = app.add_subcommand("sarcos-split", "sample the 7-task split from a 28-column table");
    std::string sar_in, sar_out;
    Index sar_n = 0;
    std::uint64_t sar_seed = 0;
    sar->add_option("--in", sar_in, "28-column CSV")->required();
    sar->add_option("--n", sar_n, "rows to sample")->required();
    sar->add_option("--seed", sar_seed, "rng seed");
    sar->add_option("--out-dir", sar_out, "output directory")->required();

    try {
        app.parse(argc, argv);
        if (gen->parsed()) return run_generate_toy(gen_n, gen_noise, gen_seed, gen_grid, gen_out);
        if (tr->parsed())
            return run_train(tr_config, tr_data, tr_ckpt,
                             tr_trace.empty() ? std::nullopt
                                              : std::optional<std::string>(tr_trace));
        if (pr->parsed())
            return run_predict(pr_ckpt, pr_data, pr_task, pr_samples, pr_seed, pr_out);
        if (ev->parsed())
            return run_eval(ev_ckpt, ev_data, ev_metrics, ev_samples, ev_seed, ev_out);
        if (ard->parsed()) return run_export_ard(ard_ckpt, ard_out);
        if (sar->parsed()) return run_sarcos_split(sar_in, sar_n, sar_seed, sar_out);
        return 1;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);  // prints help, exits 0
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const NotPositiveDefinite& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 2;
    } catch (const NonFiniteGradient& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 2;
    } catch (const NonFiniteValue& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 2;
    } catch (const TrainingAborted& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace mtdgp::cli
