#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mtdgp/core/matrix.hpp"
#include "mtdgp/core/rng.hpp"
#include "mtdgp/errors.hpp"

namespace mtdgp {

// One task's observations. Tasks never need to share input locations; the
// per-task container is the native representation of asymmetric data.
struct TaskDataset {
    Matrix inputs;   // N^t x D_in
    Matrix outputs;  // N^t x D_out
    Index task_id = 0;

    Index size() const { return inputs.rows(); }

    void validate() const {
        if (inputs.rows() != outputs.rows())
            throw ShapeMismatch("task " + std::to_string(task_id) + ": " +
                                std::to_string(inputs.rows()) + " input rows vs " +
                                std::to_string(outputs.rows()) + " output rows");
        require_finite(inputs, "task inputs");
        require_finite(outputs, "task outputs");
    }
};

// ---- the two-task toy problem ----

// shared process and the two private processes
inline double toy_g(double x) {
    return -std::sin(8.0 * M_PI * (x + 1.0)) / (2.0 * x + 1.0) - std::pow(x, 4.0);
}
inline double toy_h1(double x) { return std::sin(3.0 * x); }
inline double toy_h2(double x) { return 3.0 * x; }

inline double toy_f1(double x) {
    double g = toy_g(x);
    return std::cos(g) * std::cos(g) + toy_h1(x);
}
inline double toy_f2(double x) {
    double g = toy_g(x);
    return std::sin(10.0 * x) * g * g + toy_h2(x);
}

// Two tasks over x in [0,1] built from a shared process and one private
// process each. grid = evenly spaced x for plotting instead of uniform draws.
inline std::vector<TaskDataset> generate_toy(Index n_per_task, double noise_sd,
                                             std::uint64_t seed, bool grid = false) {
    if (n_per_task < 1) throw InvalidSpec("generate_toy: n_per_task must be >= 1");
    if (noise_sd < 0.0) throw InvalidSpec("generate_toy: noise_sd must be >= 0");
    RngStream stream(seed, 7001);
    std::vector<TaskDataset> out;
    for (Index t = 0; t < 2; ++t) {
        TaskDataset d;
        d.task_id = t;
        d.inputs.resize(n_per_task, 1);
        d.outputs.resize(n_per_task, 1);
        for (Index i = 0; i < n_per_task; ++i) {
            double x = grid ? (n_per_task == 1
                                   ? 0.5
                                   : static_cast<double>(i) / static_cast<double>(n_per_task - 1))
                            : stream.uniform();
            d.inputs(i, 0) = x;
            double f = t == 0 ? toy_f1(x) : toy_f2(x);
            d.outputs(i, 0) = f + noise_sd * stream.normal();
        }
        out.push_back(std::move(d));
    }
    return out;
}

// ---- standardization ----

// Column statistics fit on training data only: inputs pooled across tasks
// (one input space), outputs per task (per-task likelihoods). Zero-variance
// columns map to zero and are flagged rather than rejected.
struct Standardizer {
    Matrix input_mean, input_sd;                      // 1 x D_in
    std::vector<Matrix> output_mean, output_sd;       // per task, 1 x D_out
    std::vector<bool> degenerate_inputs;              // per input column
    std::vector<std::vector<bool>> degenerate_outputs;

    bool any_degenerate() const {
        for (bool b : degenerate_inputs)
            if (b) return true;
        for (const auto& task : degenerate_outputs)
            for (bool b : task)
                if (b) return true;
        return false;
    }

    Matrix apply_inputs(const Matrix& x) const {
        if (x.cols() != input_mean.cols())
            throw ShapeMismatch("standardizer: input column count mismatch");
        Matrix out = x;
        for (Index j = 0; j < x.cols(); ++j) {
            if (degenerate_inputs[static_cast<size_t>(j)])
                out.col(j).setZero();
            else
                out.col(j) = (x.col(j).array() - input_mean(0, j)) / input_sd(0, j);
        }
        return out;
    }

    Matrix apply_outputs(Index task, const Matrix& y) const {
        const Matrix& mu = output_mean[static_cast<size_t>(task)];
        const Matrix& sd = output_sd[static_cast<size_t>(task)];
        if (y.cols() != mu.cols()) throw ShapeMismatch("standardizer: output column mismatch");
        Matrix out = y;
        for (Index j = 0; j < y.cols(); ++j) {
            if (degenerate_outputs[static_cast<size_t>(task)][static_cast<size_t>(j)])
                out.col(j).setZero();
            else
                out.col(j) = (y.col(j).array() - mu(0, j)) / sd(0, j);
        }
        return out;
    }

    Matrix invert_outputs(Index task, const Matrix& y) const {
        const Matrix& mu = output_mean[static_cast<size_t>(task)];
        const Matrix& sd = output_sd[static_cast<size_t>(task)];
        if (y.cols() != mu.cols()) throw ShapeMismatch("standardizer: output column mismatch");
        Matrix out = y;
        for (Index j = 0; j < y.cols(); ++j) {
            if (degenerate_outputs[static_cast<size_t>(task)][static_cast<size_t>(j)])
                out.col(j).setConstant(mu(0, j));
            else
                out.col(j) = y.col(j).array() * sd(0, j) + mu(0, j);
        }
        return out;
    }

    // variance scale for de-standardizing predictive variances
    double output_var_scale(Index task, Index col) const {
        if (degenerate_outputs[static_cast<size_t>(task)][static_cast<size_t>(col)]) return 0.0;
        double sd = output_sd[static_cast<size_t>(task)](0, col);
        return sd * sd;
    }

    std::vector<TaskDataset> apply(const std::vector<TaskDataset>& data) const {
        std::vector<TaskDataset> out;
        for (const TaskDataset& d : data) {
            TaskDataset s;
            s.task_id = d.task_id;
            s.inputs = apply_inputs(d.inputs);
            s.outputs = apply_outputs(d.task_id, d.outputs);
            out.push_back(std::move(s));
        }
        return out;
    }
};

namespace detail {

// population mean/sd per column; sd 0 marks the column degenerate
inline void column_stats(const Matrix& m, Matrix& mean, Matrix& sd, std::vector<bool>& flags) {
    const Index n = m.rows(), c = m.cols();
    mean.resize(1, c);
    sd.resize(1, c);
    flags.assign(static_cast<size_t>(c), false);
    for (Index j = 0; j < c; ++j) {
        double mu = m.col(j).mean();
        double var = (m.col(j).array() - mu).square().sum() / static_cast<double>(n);
        mean(0, j) = mu;
        double s = std::sqrt(var);
        // relative threshold: summing identical values still leaves rounding
        // residue in the variance, so exact zero is too strict
        if (s <= 1e-12 * std::max(1.0, std::abs(mu))) {
            flags[static_cast<size_t>(j)] = true;
            s = 1.0;  // placeholder; flagged columns never divide by it
        }
        sd(0, j) = s;
    }
}

}  // namespace detail

inline Standardizer fit_standardizer(const std::vector<TaskDataset>& train) {
    if (train.empty()) throw EmptyBatch("fit_standardizer: no datasets");
    Index total = 0;
    for (const TaskDataset& d : train) {
        d.validate();
        total += d.size();
    }
    if (total < 2) throw InvalidSpec("fit_standardizer: need at least 2 rows");

    Matrix pooled(total, train[0].inputs.cols());
    Index at = 0;
    for (const TaskDataset& d : train) {
        pooled.middleRows(at, d.size()) = d.inputs;
        at += d.size();
    }
    Standardizer st;
    detail::column_stats(pooled, st.input_mean, st.input_sd, st.degenerate_inputs);
    for (const TaskDataset& d : train) {
        if (d.size() < 2)
            throw InvalidSpec("fit_standardizer: task " + std::to_string(d.task_id) +
                              " needs at least 2 rows");
        Matrix mean, sd;
        std::vector<bool> flags;
        detail::column_stats(d.outputs, mean, sd, flags);
        st.output_mean.push_back(std::move(mean));
        st.output_sd.push_back(std::move(sd));
        st.degenerate_outputs.push_back(std::move(flags));
    }
    return st;
}

// ---- CSV ingestion ----

// Column roles for a flat observation table: one row per single-task
// observation, so asymmetric designs need no placeholder values.
struct CsvSchema {
    std::vector<std::string> feature_columns;
    std::vector<std::string> target_columns;
    std::string task_column = "task";
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::stringstream ss(line);
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.push_back("");
    return cells;
}

inline double parse_number(const std::string& cell, size_t line_no) {
    try {
        size_t used = 0;
        double v = std::stod(cell, &used);
        while (used < cell.size() &&
               (cell[used] == ' ' || cell[used] == '\t' || cell[used] == '\r'))
            ++used;
        if (used != cell.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw MalformedRow("line " + std::to_string(line_no) + ": cannot parse '" + cell +
                           "' as a number");
    }
}

}  // namespace detail

inline std::vector<TaskDataset> load_csv(std::istream& in, const CsvSchema& schema,
                                         const std::string& source) {
    std::string header;
    if (!std::getline(in, header)) throw EmptyFile("'" + source + "' is empty");
    if (!header.empty() && header.back() == '\r') header.pop_back();
    std::vector<std::string> names = detail::split_csv_line(header);
    auto find_col = [&](const std::string& name) -> size_t {
        for (size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return i;
        throw SchemaMismatch("column '" + name + "' missing from '" + source + "'");
    };
    std::vector<size_t> feat_idx, targ_idx;
    for (const std::string& c : schema.feature_columns) feat_idx.push_back(find_col(c));
    for (const std::string& c : schema.target_columns) targ_idx.push_back(find_col(c));
    size_t task_idx = find_col(schema.task_column);

    std::vector<std::vector<double>> feat_rows, targ_rows;
    std::vector<Index> task_of_row;
    Index max_task = -1;
    std::string line;
    size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> cells = detail::split_csv_line(line);
        if (cells.size() != names.size())
            throw MalformedRow("line " + std::to_string(line_no) + ": expected " +
                               std::to_string(names.size()) + " cells, got " +
                               std::to_string(cells.size()));
        double task_raw = detail::parse_number(cells[task_idx], line_no);
        if (task_raw < 0.0 || task_raw != std::floor(task_raw))
            throw UnknownTaskId("line " + std::to_string(line_no) + ": task id '" +
                                cells[task_idx] + "' is not a nonnegative integer");
        Index task = static_cast<Index>(task_raw);
        std::vector<double> f, t;
        for (size_t i : feat_idx) f.push_back(detail::parse_number(cells[i], line_no));
        for (size_t i : targ_idx) t.push_back(detail::parse_number(cells[i], line_no));
        feat_rows.push_back(std::move(f));
        targ_rows.push_back(std::move(t));
        task_of_row.push_back(task);
        max_task = std::max(max_task, task);
    }
    if (feat_rows.empty()) throw EmptyFile("'" + source + "' has no data rows");

    std::vector<TaskDataset> out(static_cast<size_t>(max_task + 1));
    std::vector<Index> counts(static_cast<size_t>(max_task + 1), 0);
    for (Index t : task_of_row) counts[static_cast<size_t>(t)] += 1;
    for (Index t = 0; t <= max_task; ++t) {
        if (counts[static_cast<size_t>(t)] == 0)
            throw UnknownTaskId("task ids must be consecutive from 0; task " +
                                std::to_string(t) + " has no rows");
        out[static_cast<size_t>(t)].task_id = t;
        out[static_cast<size_t>(t)].inputs.resize(counts[static_cast<size_t>(t)],
                                                  static_cast<Index>(feat_idx.size()));
        out[static_cast<size_t>(t)].outputs.resize(counts[static_cast<size_t>(t)],
                                                   static_cast<Index>(targ_idx.size()));
    }
    std::vector<Index> fill(static_cast<size_t>(max_task + 1), 0);
    for (size_t r = 0; r < feat_rows.size(); ++r) {
        Index t = task_of_row[r];
        Index i = fill[static_cast<size_t>(t)]++;
        for (size_t j = 0; j < feat_idx.size(); ++j)
            out[static_cast<size_t>(t)].inputs(i, static_cast<Index>(j)) = feat_rows[r][j];
        for (size_t j = 0; j < targ_idx.size(); ++j)
            out[static_cast<size_t>(t)].outputs(i, static_cast<Index>(j)) = targ_rows[r][j];
    }
    for (const TaskDataset& d : out) d.validate();
    return out;
}

inline std::vector<TaskDataset> load_csv(const std::string& path, const CsvSchema& schema) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open '" + path + "'");
    return load_csv(in, schema, path);
}

inline void save_csv(const std::vector<TaskDataset>& data, const std::string& path,
                     const CsvSchema& schema) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write '" + path + "'");
    for (const std::string& c : schema.feature_columns) out << c << ",";
    for (const std::string& c : schema.target_columns) out << c << ",";
    out << schema.task_column << "\n";
    out.precision(17);
    for (const TaskDataset& d : data) {
        if (d.inputs.cols() != static_cast<Index>(schema.feature_columns.size()) ||
            d.outputs.cols() != static_cast<Index>(schema.target_columns.size()))
            throw SchemaMismatch("save_csv: dataset shape does not match schema");
        for (Index i = 0; i < d.size(); ++i) {
            for (Index j = 0; j < d.inputs.cols(); ++j) out << d.inputs(i, j) << ",";
            for (Index j = 0; j < d.outputs.cols(); ++j) out << d.outputs(i, j) << ",";
            out << d.task_id << "\n";
        }
    }
}

// ---- SARCOS protocol ----

// 21 features + 7 torque targets; each sampled row is assigned exactly one
// target uniformly at random, yielding 7 asymmetric single-output tasks.
inline std::vector<TaskDataset> sarcos_split(const Matrix& table, Index n,
                                             std::uint64_t seed) {
    if (table.cols() != 28)
        throw SchemaMismatch("sarcos table must have 28 columns (21 features + 7 targets), got " +
                             std::to_string(table.cols()));
    if (n < 1 || n > table.rows())
        throw InvalidSpec("sarcos_split: n must be in [1, " + std::to_string(table.rows()) +
                          "]");
    RngStream stream(seed, 7002);

    // sample n distinct rows: Fisher-Yates prefix of the row index vector
    std::vector<Index> rows(static_cast<size_t>(table.rows()));
    for (Index i = 0; i < table.rows(); ++i) rows[static_cast<size_t>(i)] = i;
    for (Index i = 0; i < n; ++i) {
        Index j = i + static_cast<Index>(stream.uniform_index(
                          static_cast<std::uint64_t>(table.rows() - i)));
        std::swap(rows[static_cast<size_t>(i)], rows[static_cast<size_t>(j)]);
    }

    std::vector<std::vector<Index>> members(7);
    for (Index i = 0; i < n; ++i)
        members[stream.uniform_index(7)].push_back(rows[static_cast<size_t>(i)]);

    std::vector<TaskDataset> out(7);
    for (Index t = 0; t < 7; ++t) {
        TaskDataset& d = out[static_cast<size_t>(t)];
        d.task_id = t;
        const auto& idx = members[static_cast<size_t>(t)];
        d.inputs.resize(static_cast<Index>(idx.size()), 21);
        d.outputs.resize(static_cast<Index>(idx.size()), 1);
        for (size_t i = 0; i < idx.size(); ++i) {
            d.inputs.row(static_cast<Index>(i)) = table.row(idx[i]).leftCols(21);
            d.outputs(static_cast<Index>(i), 0) = table(idx[i], 21 + t);
        }
    }
    return out;
}

}  // namespace mtdgp
