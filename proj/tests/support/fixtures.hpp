#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "kevo/analysis.hpp"
#include "kevo/trace.hpp"

namespace fixture {

struct PlantedProfile {
    kevo::DivergenceProfile profile;
    std::size_t critical = 0;
    std::vector<std::size_t> mutations;
};

/// High plateau (~0.4) before `critical`, low plateau (~0.01) after, sigma
/// 0.005 noise, and 1-3 spikes >= 0.25 placed at or beyond critical + window.
inline PlantedProfile planted_profile(std::mt19937_64& rng, std::size_t L = 32, std::size_t window = 3) {
    PlantedProfile out;
    std::normal_distribution<double> noise(0.0, 0.005);
    // Leave at least 8 post-critical entries so the median stays on the low plateau.
    out.critical = std::uniform_int_distribution<std::size_t>(1, L - 9)(rng);
    const std::size_t spikes = std::uniform_int_distribution<std::size_t>(1, 3)(rng);
    std::vector<std::size_t> slots;
    for (std::size_t j = out.critical + window; j < L; ++j) slots.push_back(j);
    std::shuffle(slots.begin(), slots.end(), rng);
    out.mutations.assign(slots.begin(), slots.begin() + static_cast<std::ptrdiff_t>(spikes));
    std::sort(out.mutations.begin(), out.mutations.end());

    out.profile.values.resize(L);
    for (std::size_t j = 0; j < L; ++j) {
        const double base = j < out.critical ? 0.4 : 0.01;
        out.profile.values[j] = std::clamp(base + noise(rng), 0.0, kevo::kLn2);
    }
    std::uniform_real_distribution<double> spike(0.25, 0.6);
    for (std::size_t m : out.mutations) out.profile.values[m] = spike(rng);
    return out;
}

/// Trace over `vocab` tokens whose lens head is the identity: d = vocab,
/// no normalization, unembed = I, so each state's lens output is the
/// softmax of the state itself. `states[p][j]` is the logit vector of state j.
inline kevo::TraceFile logit_trace(const std::vector<std::vector<std::vector<float>>>& states,
                                   const std::string& name = "fixture/identity-head") {
    kevo::TraceFile f;
    auto& h = f.trace.header;
    const std::size_t K = states.size();
    const std::size_t L = states.front().size() - 1;
    const std::size_t V = states.front().front().size();
    h.model_name = name;
    h.num_layers = static_cast<std::uint32_t>(L);
    h.hidden_dim = static_cast<std::uint32_t>(V);
    h.vocab_size = static_cast<std::uint32_t>(V);
    h.num_positions = static_cast<std::uint32_t>(K);
    h.has_head = true;
    h.norm_kind = kevo::NormKind::none;
    for (const auto& pos : states) {
        const auto& last = pos.back();
        h.token_ids.push_back(static_cast<std::uint32_t>(std::max_element(last.begin(), last.end()) - last.begin()));
        for (const auto& s : pos) f.trace.hidden.insert(f.trace.hidden.end(), s.begin(), s.end());
    }
    kevo::LensHead head;
    head.norm_kind = kevo::NormKind::none;
    head.norm_scale.assign(V, 1.0f);
    head.unembed.assign(V * V, 0.0f);
    for (std::size_t t = 0; t < V; ++t) head.unembed[t * V + t] = 1.0f;
    f.head = head;
    return f;
}

inline std::vector<float> peaked(std::size_t vocab, std::size_t token, float height) {
    std::vector<float> v(vocab, 0.0f);
    v[token] = height;
    return v;
}

/// Positions whose lens output churns across the first `critical` states and
/// is frozen afterwards: a hierarchical profile with critical layer `critical`.
inline kevo::TraceFile hierarchical_trace(std::size_t K = 3, std::size_t L = 12, std::size_t critical = 4,
                                          std::size_t vocab = 8) {
    std::vector<std::vector<std::vector<float>>> states(K);
    for (std::size_t p = 0; p < K; ++p) {
        for (std::size_t j = 0; j <= L; ++j) {
            const std::size_t token = j < critical ? (p + j) % vocab : (p + critical) % vocab;
            states[p].push_back(peaked(vocab, token, 8.0f));
        }
    }
    return logit_trace(states, "fixture/hierarchical");
}

/// Lens output moves to a new dominant token at every state: no critical layer.
inline kevo::TraceFile flat_trace(std::size_t K = 3, std::size_t L = 12, std::size_t vocab = 8) {
    std::vector<std::vector<std::vector<float>>> states(K);
    for (std::size_t p = 0; p < K; ++p) {
        for (std::size_t j = 0; j <= L; ++j) states[p].push_back(peaked(vocab, (p + j) % vocab, 8.0f));
    }
    return logit_trace(states, "fixture/flat");
}

/// One position, L = 32: token `a` dominates states 0..29, token `b` states 30..32.
inline kevo::TraceFile flip_trace(std::uint32_t a = 1, std::uint32_t b = 2, std::size_t vocab = 4) {
    std::vector<std::vector<std::vector<float>>> states(1);
    for (std::size_t j = 0; j <= 32; ++j) states[0].push_back(peaked(vocab, j <= 29 ? a : b, 6.0f));
    return logit_trace(states, "fixture/flip");
}

/// Random trace with a random rms head for format and lens tests.
inline kevo::TraceFile random_trace(std::mt19937_64& rng, std::size_t K, std::size_t L, std::size_t d,
                                    std::size_t vocab, bool with_head, bool with_bias = false,
                                    kevo::NormKind norm = kevo::NormKind::rms) {
    std::normal_distribution<float> g(0.0f, 1.0f);
    kevo::TraceFile f;
    auto& h = f.trace.header;
    h.model_name = "fixture/random";
    h.num_layers = static_cast<std::uint32_t>(L);
    h.hidden_dim = static_cast<std::uint32_t>(d);
    h.vocab_size = static_cast<std::uint32_t>(vocab);
    h.num_positions = static_cast<std::uint32_t>(K);
    std::uniform_int_distribution<std::uint32_t> tok(0, static_cast<std::uint32_t>(vocab - 1));
    for (std::size_t p = 0; p < K; ++p) {
        h.token_ids.push_back(tok(rng));
        h.token_strings.push_back("t" + std::to_string(h.token_ids.back()));
    }
    f.trace.hidden.resize(K * (L + 1) * d);
    for (float& x : f.trace.hidden) x = g(rng);
    h.has_head = with_head;
    h.norm_kind = norm;
    h.norm_eps = 1e-5;
    h.has_norm_bias = with_head && with_bias;
    if (with_head) {
        kevo::LensHead head;
        head.norm_kind = norm;
        head.norm_eps = 1e-5;
        head.norm_scale.resize(d);
        for (float& x : head.norm_scale) x = 1.0f + 0.1f * g(rng);
        if (with_bias) {
            head.norm_bias.resize(d);
            for (float& x : head.norm_bias) x = 0.1f * g(rng);
        }
        head.unembed.resize(vocab * d);
        for (float& x : head.unembed) x = g(rng);
        f.head = head;
    }
    return f;
}

}  // namespace fixture
