#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "kevo/error.hpp"
#include "kevo/numerics.hpp"
#include "kevo/trace.hpp"

namespace kevo {

struct MiniModelConfig {
    std::uint32_t num_layers = 16;
    std::uint32_t hidden_dim = 64;
    std::uint32_t num_heads = 4;
    std::uint32_t vocab_size = 256;
    std::uint32_t max_seq_len = 128;
    NormKind norm_kind = NormKind::rms;
    std::uint64_t seed = 0;
    std::uint32_t mlp_ratio = 4;
    double norm_eps = 1e-5;
    std::optional<std::uint32_t> eos_token;
};

inline void validate(const MiniModelConfig& c) {
    if (c.num_layers < 1 || c.hidden_dim < 1 || c.num_heads < 1 || c.max_seq_len < 1 || c.mlp_ratio < 1) {
        throw ConfigError("model dimensions must all be >= 1");
    }
    if (c.vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
    if (c.hidden_dim % c.num_heads != 0) {
        throw ConfigError("hidden_dim " + std::to_string(c.hidden_dim) + " is not divisible by num_heads " +
                          std::to_string(c.num_heads));
    }
    if (!(c.norm_eps > 0.0) || !std::isfinite(c.norm_eps)) throw ConfigError("norm_eps must be positive");
    if (c.eos_token && *c.eos_token >= c.vocab_size) throw ConfigError("eos_token outside the vocabulary");
}

/// Blocks (1-based, in [1, L]) that a forward pass treats as identity.
class SkipPlan {
public:
    SkipPlan() = default;

    /// Sorts and deduplicates; every index must lie in [1, num_layers].
    SkipPlan(std::vector<std::uint32_t> blocks, std::uint32_t num_layers) : blocks_(std::move(blocks)) {
        std::sort(blocks_.begin(), blocks_.end());
        blocks_.erase(std::unique(blocks_.begin(), blocks_.end()), blocks_.end());
        for (std::uint32_t b : blocks_) {
            if (b < 1 || b > num_layers) {
                throw InvalidInputError("skip plan block " + std::to_string(b) + " outside [1, " +
                                        std::to_string(num_layers) + "]");
            }
        }
    }

    [[nodiscard]] const std::vector<std::uint32_t>& blocks() const noexcept { return blocks_; }
    [[nodiscard]] bool empty() const noexcept { return blocks_.empty(); }
    [[nodiscard]] bool skips(std::uint32_t block) const {
        return std::binary_search(blocks_.begin(), blocks_.end(), block);
    }

    friend bool operator==(const SkipPlan&, const SkipPlan&) = default;

private:
    std::vector<std::uint32_t> blocks_;
};

struct BlockWeights {
    std::vector<float> attn_norm_scale, attn_norm_bias;  // [d]
    std::vector<float> wq, wk, wv, wo;                   // [d][d], out-major
    std::vector<float> mlp_norm_scale, mlp_norm_bias;    // [d]
    std::vector<float> w_up, b_up;                       // [m][d], [m]
    std::vector<float> w_down, b_down;                   // [d][m], [d]
};

struct ModelWeights {
    std::vector<float> token_embedding;     // [vocab][d]
    std::vector<float> position_embedding;  // [max_seq_len][d]
    std::vector<BlockWeights> blocks;       // L entries, blocks[b-1] is block b
    LensHead head;
};

struct GenerationResult {
    std::vector<std::uint32_t> token_ids;
    GenerationTrace trace;
    std::vector<ProbabilityDistribution> final_distributions;  // one per generated step
    SkipPlan plan;
};

namespace detail {

class UniformSource {
public:
    explicit UniformSource(std::uint64_t seed) : rng_(seed) {}
    // Bit-level construction keeps the stream identical across standard libraries.
    float symmetric(double bound) {
        const double u = static_cast<double>(rng_() >> 11) * 0x1.0p-53;
        return static_cast<float>((2.0 * u - 1.0) * bound);
    }
    std::vector<float> fill(std::size_t n, double bound) {
        std::vector<float> v(n);
        for (float& x : v) x = symmetric(bound);
        return v;
    }

private:
    std::mt19937_64 rng_;
};

inline void matvec(std::span<const float> w, std::span<const double> x, std::span<double> out) {
    const std::size_t in = x.size();
    for (std::size_t o = 0; o < out.size(); ++o) {
        const float* row = w.data() + o * in;
        double acc = 0.0;
        for (std::size_t i = 0; i < in; ++i) acc += static_cast<double>(row[i]) * x[i];
        out[o] = acc;
    }
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * 0.70710678118654752440)); }

}  // namespace detail

/// Desk-scale decoder-only transformer: learned token and position
/// embeddings, L pre-norm blocks (causal multi-head attention, then a GELU
/// MLP, each added to the residual stream) and a final norm + unembedding
/// head. The residual stream is stored in float32 between blocks; block
/// arithmetic accumulates in double. Read-only after construction.
class Model {
public:
    explicit Model(const MiniModelConfig& config) : config_(config) {
        validate(config_);
        const std::size_t d = config_.hidden_dim;
        const std::size_t m = d * config_.mlp_ratio;
        const bool with_bias = config_.norm_kind == NormKind::layernorm;
        detail::UniformSource src(config_.seed);

        const double in_bound = 1.0 / std::sqrt(static_cast<double>(d));
        const double mlp_bound = 1.0 / std::sqrt(static_cast<double>(m));
        weights_.token_embedding = src.fill(std::size_t{config_.vocab_size} * d, 1.0);
        weights_.position_embedding = src.fill(std::size_t{config_.max_seq_len} * d, 0.5);
        weights_.blocks.resize(config_.num_layers);
        for (auto& b : weights_.blocks) {
            b.attn_norm_scale.assign(d, 1.0f);
            b.mlp_norm_scale.assign(d, 1.0f);
            if (with_bias) {
                b.attn_norm_bias.assign(d, 0.0f);
                b.mlp_norm_bias.assign(d, 0.0f);
            }
            b.wq = src.fill(d * d, in_bound);
            b.wk = src.fill(d * d, in_bound);
            b.wv = src.fill(d * d, in_bound);
            b.wo = src.fill(d * d, in_bound);
            b.w_up = src.fill(m * d, in_bound);
            b.b_up = src.fill(m, 0.1);
            b.w_down = src.fill(d * m, mlp_bound);
            b.b_down = src.fill(d, 0.1);
        }
        weights_.head.norm_kind = config_.norm_kind;
        weights_.head.norm_eps = config_.norm_eps;
        weights_.head.norm_scale.assign(d, 1.0f);
        if (with_bias) weights_.head.norm_bias.assign(d, 0.0f);
        weights_.head.unembed = src.fill(std::size_t{config_.vocab_size} * d, 5.0 * in_bound);
    }

    [[nodiscard]] const MiniModelConfig& config() const noexcept { return config_; }
    [[nodiscard]] const ModelWeights& weights() const noexcept { return weights_; }
    [[nodiscard]] const LensHead& head() const noexcept { return weights_.head; }

    [[nodiscard]] std::string model_name() const {
        return "kevo-mini/prenorm-" + to_string(config_.norm_kind) + "-mha-gelu-learnedpos";
    }

    /// FNV-1a over every weight in a fixed order.
    [[nodiscard]] std::uint64_t weight_checksum() const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        auto mix = [&h](const std::vector<float>& v) {
            const auto* p = reinterpret_cast<const unsigned char*>(v.data());
            for (std::size_t i = 0; i < v.size() * sizeof(float); ++i) {
                h ^= p[i];
                h *= 0x100000001b3ull;
            }
        };
        mix(weights_.token_embedding);
        mix(weights_.position_embedding);
        for (const auto& b : weights_.blocks) {
            for (const auto* v : {&b.attn_norm_scale, &b.attn_norm_bias, &b.wq, &b.wk, &b.wv, &b.wo,
                                  &b.mlp_norm_scale, &b.mlp_norm_bias, &b.w_up, &b.b_up, &b.w_down, &b.b_down}) {
                mix(*v);
            }
        }
        mix(weights_.head.norm_scale);
        mix(weights_.head.norm_bias);
        mix(weights_.head.unembed);
        return h;
    }

    /// Full forward pass over `tokens`; returns the L+1 residual states of
    /// the last position, laid out [L+1][d]. Skipped blocks are identity.
    [[nodiscard]] std::vector<float> forward_last(std::span<const std::uint32_t> tokens, const SkipPlan& plan) const {
        const std::size_t T = tokens.size();
        const std::size_t d = config_.hidden_dim;
        const std::size_t L = config_.num_layers;
        if (T == 0) throw InvalidInputError("forward pass over an empty sequence");
        if (T > config_.max_seq_len) {
            throw CapacityError("sequence length " + std::to_string(T) + " exceeds max_seq_len " +
                                std::to_string(config_.max_seq_len));
        }
        std::vector<float> stream(T * d);
        for (std::size_t t = 0; t < T; ++t) {
            if (tokens[t] >= config_.vocab_size) throw InvalidInputError("token id outside the vocabulary");
            for (std::size_t i = 0; i < d; ++i) {
                stream[t * d + i] = weights_.token_embedding[tokens[t] * d + i] + weights_.position_embedding[t * d + i];
            }
        }
        std::vector<float> states((L + 1) * d);
        std::copy_n(stream.begin() + static_cast<std::ptrdiff_t>((T - 1) * d), d, states.begin());
        for (std::uint32_t block = 1; block <= L; ++block) {
            if (!plan.skips(block)) apply_block(weights_.blocks[block - 1], stream, T);
            std::copy_n(stream.begin() + static_cast<std::ptrdiff_t>((T - 1) * d), d,
                        states.begin() + static_cast<std::ptrdiff_t>(block * d));
        }
        return states;
    }

    /// Greedy decoding (ties to the lowest token id) for `steps` tokens, or
    /// until the configured end-of-sequence token is emitted.
    [[nodiscard]] GenerationResult generate(std::span<const std::uint32_t> prompt, std::uint32_t steps,
                                            const SkipPlan& plan = {}) const {
        if (prompt.empty()) throw InvalidInputError("prompt must not be empty");
        if (steps < 1) throw InvalidInputError("steps must be >= 1");
        if (prompt.size() + steps > config_.max_seq_len) {
            throw CapacityError("prompt length " + std::to_string(prompt.size()) + " + steps " +
                                std::to_string(steps) + " exceeds max_seq_len " + std::to_string(config_.max_seq_len));
        }
        for (std::uint32_t b : plan.blocks()) {
            if (b < 1 || b > config_.num_layers) throw InvalidInputError("skip plan does not fit this model");
        }
        const std::size_t d = config_.hidden_dim;

        GenerationResult result;
        result.plan = plan;
        std::vector<std::uint32_t> sequence(prompt.begin(), prompt.end());
        for (std::uint32_t step = 0; step < steps; ++step) {
            std::vector<float> last = forward_last(sequence, plan);
            const std::span<const float> final_state = std::span<const float>(last).subspan(config_.num_layers * d, d);
            ProbabilityDistribution dist = lens_distribution(weights_.head, final_state, true);
            const auto token = static_cast<std::uint32_t>(dist.argmax());
            result.trace.hidden.insert(result.trace.hidden.end(), last.begin(), last.end());
            result.final_distributions.push_back(std::move(dist));
            result.token_ids.push_back(token);
            sequence.push_back(token);
            if (config_.eos_token && token == *config_.eos_token) break;
        }

        TraceHeader& h = result.trace.header;
        h.model_name = model_name();
        h.num_layers = config_.num_layers;
        h.hidden_dim = config_.hidden_dim;
        h.vocab_size = config_.vocab_size;
        h.num_positions = static_cast<std::uint32_t>(result.token_ids.size());
        h.token_ids = result.token_ids;
        for (std::uint32_t t : result.token_ids) h.token_strings.push_back("<" + std::to_string(t) + ">");
        h.has_head = true;
        h.norm_kind = config_.norm_kind;
        h.norm_eps = config_.norm_eps;
        h.has_norm_bias = !weights_.head.norm_bias.empty();
        return result;
    }

private:
    void normalize_rows(const std::vector<float>& scale, const std::vector<float>& bias,
                        std::span<const float> x, std::span<double> out) const {
        const std::size_t d = x.size();
        for (std::size_t i = 0; i < d; ++i) out[i] = x[i];
        if (config_.norm_kind == NormKind::none) return;
        if (config_.norm_kind == NormKind::rms) {
            double ms = 0.0;
            for (std::size_t i = 0; i < d; ++i) ms += out[i] * out[i];
            const double inv = 1.0 / std::sqrt(ms / static_cast<double>(d) + config_.norm_eps);
            for (std::size_t i = 0; i < d; ++i) out[i] *= inv * scale[i];
        } else {
            double mean = 0.0;
            for (std::size_t i = 0; i < d; ++i) mean += out[i];
            mean /= static_cast<double>(d);
            double var = 0.0;
            for (std::size_t i = 0; i < d; ++i) var += (out[i] - mean) * (out[i] - mean);
            const double inv = 1.0 / std::sqrt(var / static_cast<double>(d) + config_.norm_eps);
            for (std::size_t i = 0; i < d; ++i) out[i] = (out[i] - mean) * inv * scale[i] + bias[i];
        }
    }

    void apply_block(const BlockWeights& w, std::vector<float>& stream, std::size_t T) const {
        const std::size_t d = config_.hidden_dim;
        const std::size_t heads = config_.num_heads;
        const std::size_t hd = d / heads;
        const std::size_t m = d * config_.mlp_ratio;
        const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

        std::vector<double> normed(d);
        std::vector<double> q(T * d), k(T * d), v(T * d);
        for (std::size_t t = 0; t < T; ++t) {
            normalize_rows(w.attn_norm_scale, w.attn_norm_bias, std::span<const float>(stream).subspan(t * d, d), normed);
            detail::matvec(w.wq, normed, std::span<double>(q).subspan(t * d, d));
            detail::matvec(w.wk, normed, std::span<double>(k).subspan(t * d, d));
            detail::matvec(w.wv, normed, std::span<double>(v).subspan(t * d, d));
        }
        std::vector<double> mixed(d), projected(d), scores(T);
        std::vector<float> attn_out(T * d);
        for (std::size_t t = 0; t < T; ++t) {
            for (std::size_t h = 0; h < heads; ++h) {
                double peak = -INFINITY;
                for (std::size_t s = 0; s <= t; ++s) {
                    double dot = 0.0;
                    for (std::size_t i = 0; i < hd; ++i) dot += q[t * d + h * hd + i] * k[s * d + h * hd + i];
                    scores[s] = dot * scale;
                    peak = std::max(peak, scores[s]);
                }
                double total = 0.0;
                for (std::size_t s = 0; s <= t; ++s) {
                    scores[s] = std::exp(scores[s] - peak);
                    total += scores[s];
                }
                for (std::size_t i = 0; i < hd; ++i) {
                    double acc = 0.0;
                    for (std::size_t s = 0; s <= t; ++s) acc += scores[s] * v[s * d + h * hd + i];
                    mixed[h * hd + i] = acc / total;
                }
            }
            detail::matvec(w.wo, mixed, projected);
            for (std::size_t i = 0; i < d; ++i) {
                attn_out[t * d + i] = static_cast<float>(static_cast<double>(stream[t * d + i]) + projected[i]);
            }
        }
        // Attention for every position reads the pre-block stream, so the
        // residual update is applied only after all positions are mixed.
        stream = std::move(attn_out);

        std::vector<double> hidden(m), down(d);
        for (std::size_t t = 0; t < T; ++t) {
            normalize_rows(w.mlp_norm_scale, w.mlp_norm_bias, std::span<const float>(stream).subspan(t * d, d), normed);
            detail::matvec(w.w_up, normed, hidden);
            for (std::size_t i = 0; i < m; ++i) hidden[i] = detail::gelu(hidden[i] + w.b_up[i]);
            detail::matvec(w.w_down, hidden, down);
            for (std::size_t i = 0; i < d; ++i) {
                stream[t * d + i] = static_cast<float>(static_cast<double>(stream[t * d + i]) + down[i] + w.b_down[i]);
            }
        }
    }

    MiniModelConfig config_;
    ModelWeights weights_;
};

[[nodiscard]] inline Model init_model(const MiniModelConfig& config) { return Model(config); }

}  // namespace kevo
