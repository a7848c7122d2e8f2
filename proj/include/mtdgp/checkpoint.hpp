#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtdgp/architecture.hpp"
#include "mtdgp/core/matrix.hpp"
#include "mtdgp/core/rng.hpp"
#include "mtdgp/data.hpp"
#include "mtdgp/errors.hpp"

namespace mtdgp {

namespace detail {

constexpr const char* kCheckpointFormat = "mtdgp-checkpoint";
constexpr int kCheckpointVersion = 1;
// Matrices are serialized as hex so the round trip is bitwise exact; the
// layout string below travels inside every file.
constexpr const char* kCheckpointLayout = "float64 little-endian hex, row-major";

inline std::string encode_matrix(const Matrix& m) {
    static const char* digits = "0123456789abcdef";
    std::string out;
    out.reserve(static_cast<size_t>(m.size()) * 16);
    for (Index i = 0; i < m.rows(); ++i) {
        for (Index j = 0; j < m.cols(); ++j) {
            double d = m(i, j);
            std::uint64_t bits;
            std::memcpy(&bits, &d, sizeof(bits));
            for (int b = 0; b < 8; ++b) {  // least significant byte first
                std::uint8_t byte = static_cast<std::uint8_t>(bits >> (8 * b));
                out.push_back(digits[byte >> 4]);
                out.push_back(digits[byte & 0xf]);
            }
        }
    }
    return out;
}

inline Matrix decode_matrix(const std::string& hex, Index rows, Index cols) {
    if (rows < 0 || cols < 0 ||
        hex.size() != static_cast<size_t>(rows) * static_cast<size_t>(cols) * 16)
        throw CorruptCheckpoint("checkpoint: matrix data length does not match shape");
    auto nibble = [](char c) -> std::uint64_t {
        if (c >= '0' && c <= '9') return static_cast<std::uint64_t>(c - '0');
        if (c >= 'a' && c <= 'f') return static_cast<std::uint64_t>(c - 'a' + 10);
        throw CorruptCheckpoint("checkpoint: invalid hex digit in matrix data");
    };
    Matrix m(rows, cols);
    size_t pos = 0;
    for (Index i = 0; i < rows; ++i) {
        for (Index j = 0; j < cols; ++j) {
            std::uint64_t bits = 0;
            for (int b = 0; b < 8; ++b) {
                std::uint64_t byte = (nibble(hex[pos]) << 4) | nibble(hex[pos + 1]);
                bits |= byte << (8 * b);
                pos += 2;
            }
            double d;
            std::memcpy(&d, &bits, sizeof(d));
            m(i, j) = d;
        }
    }
    return m;
}

inline nlohmann::json spec_to_json(const ModelSpec& spec) {
    nlohmann::json j;
    j["variant"] = variant_name(spec.variant);
    j["tasks"] = spec.tasks;
    j["input_dim"] = spec.input_dim;
    j["output_dim"] = spec.output_dim;
    j["shared_units"] = spec.shared_units;
    j["task_units"] = spec.task_units;
    j["inducing_count"] = spec.inducing_count;
    j["coregional_rank"] = spec.coregional_rank;
    j["likelihood"] = likelihood_name(spec.likelihood);
    return j;
}

inline ModelSpec spec_from_json(const nlohmann::json& j) {
    ModelSpec spec;
    spec.variant = variant_from_name(j.at("variant").get<std::string>());
    spec.tasks = j.at("tasks").get<int>();
    spec.input_dim = j.at("input_dim").get<Index>();
    spec.output_dim = j.at("output_dim").get<Index>();
    spec.shared_units = j.at("shared_units").get<std::vector<Index>>();
    spec.task_units = j.at("task_units").get<std::vector<std::vector<Index>>>();
    spec.inducing_count = j.at("inducing_count").get<Index>();
    spec.coregional_rank = j.at("coregional_rank").get<Index>();
    spec.likelihood = likelihood_from_name(j.at("likelihood").get<std::string>());
    return spec;
}

inline nlohmann::json standardizer_to_json(const Standardizer& st) {
    nlohmann::json j;
    j["input_mean"] = encode_matrix(st.input_mean);
    j["input_sd"] = encode_matrix(st.input_sd);
    j["input_dim"] = st.input_mean.cols();
    j["degenerate_inputs"] = st.degenerate_inputs;
    nlohmann::json tasks = nlohmann::json::array();
    for (size_t t = 0; t < st.output_mean.size(); ++t) {
        nlohmann::json jt;
        jt["output_mean"] = encode_matrix(st.output_mean[t]);
        jt["output_sd"] = encode_matrix(st.output_sd[t]);
        jt["output_dim"] = st.output_mean[t].cols();
        jt["degenerate_outputs"] = st.degenerate_outputs[t];
        tasks.push_back(jt);
    }
    j["tasks"] = tasks;
    return j;
}

inline Standardizer standardizer_from_json(const nlohmann::json& j) {
    Standardizer st;
    Index d = j.at("input_dim").get<Index>();
    st.input_mean = decode_matrix(j.at("input_mean").get<std::string>(), 1, d);
    st.input_sd = decode_matrix(j.at("input_sd").get<std::string>(), 1, d);
    st.degenerate_inputs = j.at("degenerate_inputs").get<std::vector<bool>>();
    for (const auto& jt : j.at("tasks")) {
        Index p = jt.at("output_dim").get<Index>();
        st.output_mean.push_back(decode_matrix(jt.at("output_mean").get<std::string>(), 1, p));
        st.output_sd.push_back(decode_matrix(jt.at("output_sd").get<std::string>(), 1, p));
        st.degenerate_outputs.push_back(jt.at("degenerate_outputs").get<std::vector<bool>>());
    }
    return st;
}

}  // namespace detail

// Self-describing model snapshot: the spec travels with the parameters, so a
// reader needs nothing but the file to rebuild and predict. An embedded
// standardizer (when present) lets prediction undo training-time scaling.
inline void save_checkpoint(Model& model, const std::string& path,
                            const std::optional<Standardizer>& standardizer = std::nullopt) {
    nlohmann::json j;
    j["format"] = detail::kCheckpointFormat;
    j["version"] = detail::kCheckpointVersion;
    j["layout"] = detail::kCheckpointLayout;
    j["spec"] = detail::spec_to_json(model.spec);
    nlohmann::json params = nlohmann::json::array();
    for (const ad::Parameter* p : model.parameters()) {
        nlohmann::json jp;
        jp["name"] = p->name();
        jp["rows"] = p->rows();
        jp["cols"] = p->cols();
        jp["data"] = detail::encode_matrix(p->unconstrained());
        params.push_back(jp);
    }
    j["parameters"] = params;
    if (standardizer) j["standardizer"] = detail::standardizer_to_json(*standardizer);

    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("checkpoint: cannot open '" + path + "' for writing");
    out << j.dump(2) << "\n";
    if (!out) throw Error("checkpoint: write to '" + path + "' failed");
}

struct LoadedCheckpoint {
    Model model;
    std::optional<Standardizer> standardizer;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("checkpoint: cannot open '" + path + "' for reading");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw CorruptCheckpoint("checkpoint: parse failure: " + std::string(e.what()));
    }

    try {
        if (j.at("format").get<std::string>() != detail::kCheckpointFormat)
            throw CorruptCheckpoint("checkpoint: unrecognized format tag");
        int version = j.at("version").get<int>();
        if (version != detail::kCheckpointVersion)
            throw VersionMismatch("checkpoint: version " + std::to_string(version) +
                                  " is not supported (expected " +
                                  std::to_string(detail::kCheckpointVersion) + ")");
        if (j.at("layout").get<std::string>() != detail::kCheckpointLayout)
            throw CorruptCheckpoint("checkpoint: unrecognized layout declaration");

        ModelSpec spec = detail::spec_from_json(j.at("spec"));
        // the recipe and stream only shape the skeleton; every parameter is
        // overwritten from the file below
        RngStream skeleton_stream(0, 0);
        LoadedCheckpoint loaded{build_model(spec, InitRecipe{}, skeleton_stream),
                                std::nullopt};

        std::unordered_map<std::string, ad::Parameter*> by_name;
        for (ad::Parameter* p : loaded.model.parameters()) by_name[p->name()] = p;
        size_t restored = 0;
        for (const auto& jp : j.at("parameters")) {
            std::string name = jp.at("name").get<std::string>();
            auto it = by_name.find(name);
            if (it == by_name.end())
                throw CorruptCheckpoint("checkpoint: unknown parameter '" + name + "'");
            Matrix u = detail::decode_matrix(jp.at("data").get<std::string>(),
                                             jp.at("rows").get<Index>(),
                                             jp.at("cols").get<Index>());
            if (u.rows() != it->second->rows() || u.cols() != it->second->cols())
                throw CorruptCheckpoint("checkpoint: shape mismatch for parameter '" + name +
                                        "'");
            it->second->unconstrained() = u;
            restored += 1;
        }
        if (restored != by_name.size())
            throw CorruptCheckpoint("checkpoint: file holds " + std::to_string(restored) +
                                    " of " + std::to_string(by_name.size()) +
                                    " model parameters");

        if (j.contains("standardizer"))
            loaded.standardizer = detail::standardizer_from_json(j.at("standardizer"));
        return loaded;
    } catch (const nlohmann::json::exception& e) {
        throw CorruptCheckpoint("checkpoint: malformed document: " + std::string(e.what()));
    }
}

}  // namespace mtdgp
