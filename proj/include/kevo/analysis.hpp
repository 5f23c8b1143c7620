#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kevo/error.hpp"
#include "kevo/numerics.hpp"
#include "kevo/trace.hpp"

namespace kevo {

/// Lens probability of one token at every state 0..L of a position.
struct TokenTrajectory {
    std::uint32_t token_id = 0;
    std::size_t position = 0;
    std::vector<double> probs;
};

/// values[j] = JSD(lens state j, lens state j+1) in nats, j = 0..L-1.
struct DivergenceProfile {
    std::size_t position = 0;
    std::vector<double> values;

    [[nodiscard]] std::size_t num_layers() const noexcept { return values.size(); }
};

/// Thresholds for the divergence-based detectors, all in nats.
struct DetectorParams {
    double epsilon = 0.05;
    std::size_t window = 3;
    double mu_abs = 0.05;
    double k = 5.0;
};

/// Half-open range of lens-state indices [begin, end).
struct LayerInterval {
    std::size_t begin = 0;
    std::size_t end = 0;

    [[nodiscard]] bool empty() const noexcept { return begin >= end; }
    [[nodiscard]] std::size_t size() const noexcept { return empty() ? 0 : end - begin; }
    friend bool operator==(const LayerInterval&, const LayerInterval&) = default;
};

/// Split of the L+1 lens states into rapid evolution, stabilization and
/// mutation. The three intervals are contiguous and cover [0, L+1); the last
/// non-empty one includes state L.
struct StageSegmentation {
    std::size_t position = 0;
    std::size_t num_layers = 0;
    std::optional<std::size_t> critical_layer;
    std::vector<std::size_t> mutation_layers;
    LayerInterval rapid_evolution;
    LayerInterval stabilization;
    LayerInterval mutation;
    bool no_critical_warning = false;
};

struct MutationDetection {
    std::vector<std::size_t> layers;  // sorted
    double baseline = 0.0;            // median of post-critical values
    double threshold = 0.0;           // max(mu_abs, k * baseline)
    bool no_critical_warning = false;
};

/// Change of the dominant (argmax) token between lens states `layer` and
/// `layer + 1`. `pre_prob` is read at `layer`, `post_prob` at `layer + 1`.
struct FlipEvent {
    std::size_t position = 0;
    std::size_t layer = 0;
    std::uint32_t pre_token = 0;
    std::uint32_t post_token = 0;
    double pre_prob = 0.0;
    double post_prob = 0.0;

    friend bool operator==(const FlipEvent&, const FlipEvent&) = default;
};

namespace detail {

inline const LensHead& require_head(const LensHead* head) {
    if (head == nullptr) {
        throw MissingHeadError("trace has no lens head; re-export with the head section or supply one");
    }
    return *head;
}

inline void require_position(const GenerationTrace& trace, std::size_t position) {
    if (position >= trace.header.num_positions) {
        throw BoundsError("position " + std::to_string(position) + " out of range [0, " +
                          std::to_string(trace.header.num_positions) + ")");
    }
}

inline double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Token level

[[nodiscard]] inline TokenTrajectory token_trajectory(std::span<const ProbabilityDistribution> stack,
                                                      std::size_t position, std::uint32_t token_id) {
    TokenTrajectory out{token_id, position, {}};
    out.probs.reserve(stack.size());
    for (const auto& dist : stack) {
        if (token_id >= dist.size()) throw BoundsError("token id " + std::to_string(token_id) + " outside the vocabulary");
        out.probs.push_back(dist[token_id]);
    }
    return out;
}

[[nodiscard]] inline TokenTrajectory token_trajectory(const GenerationTrace& trace, const LensHead* head,
                                                      std::size_t position, std::uint32_t token_id,
                                                      bool apply_norm = true) {
    const LensHead& h = detail::require_head(head);
    detail::require_position(trace, position);
    if (token_id >= trace.header.vocab_size) {
        throw BoundsError("token id " + std::to_string(token_id) + " outside the vocabulary");
    }
    return token_trajectory(lens_stack(trace, h, position, apply_norm), position, token_id);
}

/// Probability-view diagnostic: first state whose probability exceeds `tau`.
[[nodiscard]] inline std::optional<std::size_t> probability_critical_layer(const TokenTrajectory& trajectory,
                                                                           double tau = 0.2) {
    for (std::size_t j = 0; j < trajectory.probs.size(); ++j) {
        if (trajectory.probs[j] > tau) return j;
    }
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Distribution level

[[nodiscard]] inline DivergenceProfile divergence_profile(std::span<const ProbabilityDistribution> stack,
                                                          std::size_t position) {
    DivergenceProfile out{position, {}};
    if (stack.size() < 2) return out;
    out.values.reserve(stack.size() - 1);
    for (std::size_t j = 0; j + 1 < stack.size(); ++j) {
        out.values.push_back(js_divergence(stack[j], stack[j + 1]));
    }
    return out;
}

[[nodiscard]] inline DivergenceProfile divergence_profile(const GenerationTrace& trace, const LensHead* head,
                                                          std::size_t position, bool apply_norm = true) {
    const LensHead& h = detail::require_head(head);
    detail::require_position(trace, position);
    return divergence_profile(lens_stack(trace, h, position, apply_norm), position);
}

/// Smallest c with values[c .. c+window-1] all below epsilon, or nullopt.
[[nodiscard]] inline std::optional<std::size_t> detect_critical_layer(const DivergenceProfile& profile,
                                                                      double epsilon = 0.05,
                                                                      std::size_t window = 3) {
    if (window < 1) throw ParameterError("critical-layer window must be >= 1");
    const auto& v = profile.values;
    if (v.size() < window) throw ParameterError("profile shorter than the critical-layer window");
    std::size_t run = 0;
    for (std::size_t j = 0; j < v.size(); ++j) {
        run = v[j] < epsilon ? run + 1 : 0;
        if (run == window) return j + 1 - window;
    }
    return std::nullopt;
}

[[nodiscard]] inline std::optional<std::size_t> detect_critical_layer(const DivergenceProfile& profile,
                                                                      const DetectorParams& params) {
    return detect_critical_layer(profile, params.epsilon, params.window);
}

/// Post-critical spikes: values[j] >= max(mu_abs, k * median of values after c).
[[nodiscard]] inline MutationDetection detect_mutation_layers(const DivergenceProfile& profile,
                                                              std::optional<std::size_t> critical,
                                                              double mu_abs = 0.05, double k = 5.0) {
    MutationDetection out;
    if (!critical) {
        out.no_critical_warning = true;
        return out;
    }
    const auto& v = profile.values;
    const std::size_t c = *critical;
    if (c + 1 >= v.size()) {
        out.threshold = mu_abs;
        return out;
    }
    out.baseline = detail::median(std::vector<double>(v.begin() + static_cast<std::ptrdiff_t>(c + 1), v.end()));
    out.threshold = std::max(mu_abs, k * out.baseline);
    for (std::size_t j = c + 1; j < v.size(); ++j) {
        if (v[j] >= out.threshold) out.layers.push_back(j);
    }
    return out;
}

[[nodiscard]] inline MutationDetection detect_mutation_layers(const DivergenceProfile& profile,
                                                              std::optional<std::size_t> critical,
                                                              const DetectorParams& params) {
    return detect_mutation_layers(profile, critical, params.mu_abs, params.k);
}

[[nodiscard]] inline StageSegmentation segment_stages(const DivergenceProfile& profile,
                                                      const DetectorParams& params = {}) {
    StageSegmentation seg;
    seg.position = profile.position;
    seg.num_layers = profile.values.size();
    const std::size_t end = seg.num_layers + 1;
    seg.critical_layer = detect_critical_layer(profile, params);
    if (!seg.critical_layer) {
        seg.no_critical_warning = true;
        seg.rapid_evolution = {0, end};
        seg.stabilization = {end, end};
        seg.mutation = {end, end};
        return seg;
    }
    const std::size_t c = *seg.critical_layer;
    seg.mutation_layers = detect_mutation_layers(profile, seg.critical_layer, params).layers;
    const std::size_t first_mutation = seg.mutation_layers.empty() ? end : seg.mutation_layers.front();
    seg.rapid_evolution = {0, c};
    seg.stabilization = {c, first_mutation};
    seg.mutation = {first_mutation, end};
    return seg;
}

/// Dominant-token changes between adjacent lens states. Unless
/// `include_pre_critical` is set, only boundaries at or after the detected
/// critical layer are reported; with no critical layer nothing is reported.
[[nodiscard]] inline std::vector<FlipEvent> dominant_flip_report(std::span<const ProbabilityDistribution> stack,
                                                                 std::size_t position,
                                                                 const DetectorParams& params = {},
                                                                 bool include_pre_critical = false) {
    std::vector<FlipEvent> events;
    if (stack.size() < 2) return events;
    std::size_t first = 0;
    if (!include_pre_critical) {
        const auto critical = detect_critical_layer(divergence_profile(stack, position), params);
        if (!critical) return events;
        first = *critical;
    }
    for (std::size_t j = first; j + 1 < stack.size(); ++j) {
        const auto pre = static_cast<std::uint32_t>(stack[j].argmax());
        const auto post = static_cast<std::uint32_t>(stack[j + 1].argmax());
        if (pre != post) events.push_back({position, j, pre, post, stack[j][pre], stack[j + 1][post]});
    }
    return events;
}

[[nodiscard]] inline std::vector<FlipEvent> dominant_flip_report(const GenerationTrace& trace, const LensHead* head,
                                                                 std::size_t position,
                                                                 const DetectorParams& params = {},
                                                                 bool include_pre_critical = false,
                                                                 bool apply_norm = true) {
    const LensHead& h = detail::require_head(head);
    detail::require_position(trace, position);
    return dominant_flip_report(lens_stack(trace, h, position, apply_norm), position, params, include_pre_critical);
}

[[nodiscard]] inline std::vector<DivergenceProfile> all_profiles(const GenerationTrace& trace, const LensHead* head,
                                                                 bool apply_norm = true) {
    std::vector<DivergenceProfile> out;
    out.reserve(trace.header.num_positions);
    for (std::size_t p = 0; p < trace.header.num_positions; ++p) {
        out.push_back(divergence_profile(trace, head, p, apply_norm));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Cross-trace comparison

struct ProfileSetSummary {
    std::size_t count = 0;
    std::vector<double> mean;      // per layer pair
    std::vector<double> variance;  // population variance per layer pair
    std::optional<std::size_t> mean_critical_layer;
    std::vector<std::size_t> mean_mutation_layers;
    std::size_t profiles_with_critical = 0;
    std::size_t profiles_with_mutation = 0;
};

struct ProfileComparison {
    std::size_t num_layers = 0;
    DetectorParams params;
    ProfileSetSummary a;
    ProfileSetSummary b;
    std::vector<double> difference;  // a.mean - b.mean
};

namespace detail {

inline ProfileSetSummary summarize(std::span<const DivergenceProfile> set, std::size_t L, const DetectorParams& params) {
    ProfileSetSummary s;
    s.count = set.size();
    s.mean.assign(L, 0.0);
    s.variance.assign(L, 0.0);
    for (const auto& p : set) {
        for (std::size_t j = 0; j < L; ++j) s.mean[j] += p.values[j];
        const auto c = detect_critical_layer(p, params);
        if (c) {
            ++s.profiles_with_critical;
            if (!detect_mutation_layers(p, c, params).layers.empty()) ++s.profiles_with_mutation;
        }
    }
    const double n = static_cast<double>(set.size());
    for (double& m : s.mean) m /= n;
    for (const auto& p : set) {
        for (std::size_t j = 0; j < L; ++j) {
            const double dev = p.values[j] - s.mean[j];
            s.variance[j] += dev * dev;
        }
    }
    for (double& v : s.variance) v /= n;
    const DivergenceProfile mean_profile{0, s.mean};
    s.mean_critical_layer = detect_critical_layer(mean_profile, params);
    s.mean_mutation_layers = detect_mutation_layers(mean_profile, s.mean_critical_layer, params).layers;
    return s;
}

}  // namespace detail

[[nodiscard]] inline ProfileComparison compare_profiles(std::span<const DivergenceProfile> a,
                                                        std::span<const DivergenceProfile> b,
                                                        const DetectorParams& params = {}) {
    if (a.empty() || b.empty()) throw InvalidInputError("compare_profiles needs two non-empty profile sets");
    const std::size_t L = a.front().values.size();
    for (auto set : {a, b}) {
        for (const auto& p : set) {
            if (p.values.size() != L) {
                throw DimensionError("profile layer counts differ: " + std::to_string(p.values.size()) + " vs " +
                                     std::to_string(L));
            }
        }
    }
    ProfileComparison out;
    out.num_layers = L;
    out.params = params;
    out.a = detail::summarize(a, L, params);
    out.b = detail::summarize(b, L, params);
    out.difference.resize(L);
    for (std::size_t j = 0; j < L; ++j) out.difference[j] = out.a.mean[j] - out.b.mean[j];
    return out;
}

}  // namespace kevo
