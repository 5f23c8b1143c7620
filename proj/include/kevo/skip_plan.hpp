#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "kevo/analysis.hpp"
#include "kevo/engine.hpp"
#include "kevo/error.hpp"

namespace kevo {

enum class SkipKind { none, skip1, skip2, skip3, custom };

inline std::string to_string(SkipKind kind) {
    switch (kind) {
        case SkipKind::none: return "none";
        case SkipKind::skip1: return "skip1";
        case SkipKind::skip2: return "skip2";
        case SkipKind::skip3: return "skip3";
        case SkipKind::custom: return "custom";
    }
    return "none";
}

/// Builds a skip plan from a stage segmentation of an L-block model.
///
///   skip1  blocks strictly between the critical layer and the first mutation layer
///   skip2  exactly the mutation-layer blocks
///   skip3  blocks critical+1 .. L - keep_last
///   custom `custom_blocks` as given
///
/// Ranges that come out empty give an empty plan.
[[nodiscard]] inline SkipPlan make_skip_plan(SkipKind kind, const StageSegmentation& segmentation,
                                             std::uint32_t keep_last = 5,
                                             const std::vector<std::uint32_t>& custom_blocks = {}) {
    const auto L = static_cast<std::uint32_t>(segmentation.num_layers);
    if (kind == SkipKind::none) return {};
    if (kind == SkipKind::custom) return SkipPlan(custom_blocks, L);
    if (!segmentation.critical_layer) {
        throw UnsatisfiablePlanError(to_string(kind) + " needs a critical layer, none was detected");
    }
    const auto c = static_cast<std::uint32_t>(*segmentation.critical_layer);
    std::vector<std::uint32_t> blocks;
    switch (kind) {
        case SkipKind::skip1: {
            if (segmentation.mutation_layers.empty()) {
                throw UnsatisfiablePlanError("skip1 needs at least one mutation layer");
            }
            const auto first = static_cast<std::uint32_t>(segmentation.mutation_layers.front());
            for (std::uint32_t b = c + 1; b < first; ++b) blocks.push_back(b);
            break;
        }
        case SkipKind::skip2:
            if (segmentation.mutation_layers.empty()) {
                throw UnsatisfiablePlanError("skip2 needs at least one mutation layer");
            }
            for (std::size_t m : segmentation.mutation_layers) blocks.push_back(static_cast<std::uint32_t>(m));
            break;
        case SkipKind::skip3:
            if (keep_last < L) {
                for (std::uint32_t b = c + 1; b <= L - keep_last; ++b) blocks.push_back(b);
            }
            break;
        default: break;
    }
    return SkipPlan(std::move(blocks), L);
}

/// Segmentation with the given critical and mutation layers, as a
/// detector would report it, for building plans from known layer indices.
[[nodiscard]] inline StageSegmentation known_segmentation(std::size_t num_layers, std::optional<std::size_t> critical,
                                                          std::vector<std::size_t> mutations) {
    StageSegmentation seg;
    seg.num_layers = num_layers;
    seg.critical_layer = critical;
    std::sort(mutations.begin(), mutations.end());
    mutations.erase(std::unique(mutations.begin(), mutations.end()), mutations.end());
    const std::size_t end = num_layers + 1;
    if (!critical) {
        if (!mutations.empty()) throw InvalidInputError("mutation layers given without a critical layer");
        seg.no_critical_warning = true;
        seg.rapid_evolution = {0, end};
        seg.stabilization = seg.mutation = {end, end};
        return seg;
    }
    if (*critical >= num_layers) throw InvalidInputError("critical layer outside [0, L)");
    for (std::size_t m : mutations) {
        if (m <= *critical || m >= num_layers) {
            throw InvalidInputError("mutation layer " + std::to_string(m) + " must lie in (critical, L)");
        }
    }
    seg.mutation_layers = std::move(mutations);
    const std::size_t first = seg.mutation_layers.empty() ? end : seg.mutation_layers.front();
    seg.rapid_evolution = {0, *critical};
    seg.stabilization = {*critical, first};
    seg.mutation = {first, end};
    return seg;
}

}  // namespace kevo
