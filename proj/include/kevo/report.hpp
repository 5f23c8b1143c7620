#pragma once

#include <algorithm>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "kevo/analysis.hpp"
#include "kevo/tsne.hpp"

// JSON and CSV encodings of analysis results. JSON documents follow
// schemas/kevo-report.schema.json (schema_version 1).

namespace kevo::report {

inline constexpr int kSchemaVersion = 1;

/// Layer-index convention for detectors, stated in every stages/flips report.
inline constexpr const char* kBoundaryConvention =
    "profile index j compares lens states j and j+1; critical and mutation layers are profile indices; "
    "skip1 omits blocks strictly between the critical layer and the first mutation layer; "
    "skip2 omits the blocks numbered by the mutation layers";

inline nlohmann::json optional_index(const std::optional<std::size_t>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline nlohmann::json to_json(const DetectorParams& p) {
    return {{"epsilon", p.epsilon}, {"window", p.window}, {"mu_abs", p.mu_abs}, {"k", p.k}};
}

inline nlohmann::json to_json(const TokenTrajectory& t) {
    return {{"position", t.position}, {"token_id", t.token_id}, {"probs", t.probs}};
}

inline nlohmann::json to_json(const DivergenceProfile& p) {
    return {{"position", p.position}, {"values", p.values}};
}

inline nlohmann::json to_json(const LayerInterval& i) { return {{"begin", i.begin}, {"end", i.end}}; }

inline nlohmann::json to_json(const StageSegmentation& s) {
    return {{"position", s.position},
            {"num_layers", s.num_layers},
            {"critical_layer", optional_index(s.critical_layer)},
            {"mutation_layers", s.mutation_layers},
            {"no_critical_warning", s.no_critical_warning},
            {"stages",
             {{"rapid_evolution", to_json(s.rapid_evolution)},
              {"stabilization", to_json(s.stabilization)},
              {"mutation", to_json(s.mutation)}}}};
}

inline nlohmann::json to_json(const FlipEvent& e) {
    return {{"position", e.position}, {"layer", e.layer},       {"pre_token", e.pre_token},
            {"post_token", e.post_token}, {"pre_prob", e.pre_prob}, {"post_prob", e.post_prob}};
}

inline nlohmann::json to_json(const ProfileSetSummary& s) {
    return {{"count", s.count},
            {"mean", s.mean},
            {"variance", s.variance},
            {"mean_critical_layer", optional_index(s.mean_critical_layer)},
            {"mean_mutation_layers", s.mean_mutation_layers},
            {"has_critical_layer", s.mean_critical_layer.has_value()},
            {"has_mutation_layers", !s.mean_mutation_layers.empty()},
            {"profiles_with_critical", s.profiles_with_critical},
            {"profiles_with_mutation", s.profiles_with_mutation}};
}

inline nlohmann::json to_json(const ProfileComparison& c) {
    return {{"num_layers", c.num_layers},
            {"detector", to_json(c.params)},
            {"a", to_json(c.a)},
            {"b", to_json(c.b)},
            {"difference", c.difference}};
}

inline nlohmann::json to_json(const ClusterSpread& s) {
    return {{"layers", s.layers},
            {"dispersion", s.dispersion},
            {"quartile", s.quartile},
            {"neck_body_ratio", s.neck_body_ratio ? nlohmann::json(*s.neck_body_ratio) : nlohmann::json(nullptr)}};
}

/// Shortest round-trip decimal form.
inline std::string number(double v) { return fmt::format("{}", v); }

/// CSV matrix with one row per layer and one column per position:
/// `layer,p<pos>,...`.
inline std::string layer_position_csv(const std::vector<std::size_t>& positions,
                                      const std::vector<std::vector<double>>& columns) {
    std::string out = "layer";
    for (std::size_t p : positions) out += fmt::format(",p{}", p);
    out += '\n';
    const std::size_t rows = columns.empty() ? 0 : columns.front().size();
    for (std::size_t j = 0; j < rows; ++j) {
        out += std::to_string(j);
        for (const auto& col : columns) {
            out += ',';
            out += number(col[j]);
        }
        out += '\n';
    }
    return out;
}

/// `entity,layer,x[,y]` rows in layer-major order.
inline std::string embedding_csv(const EmbeddingResult& e, const std::vector<FeatureLabel>& labels) {
    std::vector<std::size_t> order(labels.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&labels](std::size_t a, std::size_t b) {
        if (labels[a].layer != labels[b].layer) return labels[a].layer < labels[b].layer;
        return labels[a].entity < labels[b].entity;
    });
    std::string out = e.out_dim == 2 ? "entity,layer,x,y\n" : "entity,layer,x\n";
    for (std::size_t i : order) {
        out += fmt::format("{},{},{}", labels[i].entity, labels[i].layer, number(e.coordinates[i * e.out_dim]));
        if (e.out_dim == 2) out += "," + number(e.coordinates[i * e.out_dim + 1]);
        out += '\n';
    }
    return out;
}

}  // namespace kevo::report
