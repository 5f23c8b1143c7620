#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kevo/error.hpp"

namespace kevo {

inline constexpr double kLn2 = 0.69314718055994530942;

/// A probability vector over the vocabulary. Construction validates that every
/// entry is finite and non-negative and that the entries sum to one within
/// `kSumTolerance`.
class ProbabilityDistribution {
public:
    static constexpr double kSumTolerance = 1e-9;

    ProbabilityDistribution() = default;

    explicit ProbabilityDistribution(std::vector<double> values) : values_(std::move(values)) {
        if (values_.empty()) throw InvalidInputError("probability distribution is empty");
        double sum = 0.0;
        for (std::size_t k = 0; k < values_.size(); ++k) {
            const double v = values_[k];
            if (!std::isfinite(v) || v < 0.0) {
                throw InvalidInputError("probability entry " + std::to_string(k) +
                                        " is negative or non-finite");
            }
            sum += v;
        }
        if (std::abs(sum - 1.0) > kSumTolerance) {
            throw InvalidInputError("probability entries sum to " + std::to_string(sum));
        }
    }

    [[nodiscard]] std::span<const double> values() const noexcept { return values_; }
    [[nodiscard]] std::size_t size() const noexcept { return values_.size(); }
    [[nodiscard]] double operator[](std::size_t k) const { return values_[k]; }

    /// Index of the largest entry; ties resolve to the lowest index.
    [[nodiscard]] std::size_t argmax() const noexcept {
        return static_cast<std::size_t>(std::max_element(values_.begin(), values_.end()) - values_.begin());
    }

    operator std::span<const double>() const noexcept { return values_; }  // NOLINT(implicit)

    friend bool operator==(const ProbabilityDistribution&, const ProbabilityDistribution&) = default;

private:
    std::vector<double> values_;
};

/// Max-subtracted softmax accumulated in double precision.
template <typename T>
[[nodiscard]] ProbabilityDistribution softmax(std::span<const T> logits) {
    if (logits.empty()) throw InvalidInputError("softmax of an empty logit vector");
    double peak = -INFINITY;
    for (std::size_t k = 0; k < logits.size(); ++k) {
        const double v = static_cast<double>(logits[k]);
        if (!std::isfinite(v)) {
            throw InvalidInputError("logit " + std::to_string(k) + " is not finite");
        }
        peak = std::max(peak, v);
    }
    std::vector<double> out(logits.size());
    double sum = 0.0;
    for (std::size_t k = 0; k < logits.size(); ++k) {
        out[k] = std::exp(static_cast<double>(logits[k]) - peak);
        sum += out[k];
    }
    const double inv = 1.0 / sum;
    for (double& v : out) v *= inv;
    return ProbabilityDistribution(std::move(out));
}

[[nodiscard]] inline ProbabilityDistribution softmax(const std::vector<double>& logits) {
    return softmax(std::span<const double>(logits));
}

/// KL(p || a) in nats. Bins with p(k) = 0 contribute nothing.
[[nodiscard]] inline double kl_divergence(std::span<const double> p, std::span<const double> a) {
    if (p.size() != a.size()) {
        throw DimensionError("kl_divergence: lengths " + std::to_string(p.size()) + " and " +
                             std::to_string(a.size()) + " differ");
    }
    double total = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
        if (p[k] <= 0.0) continue;
        if (a[k] <= 0.0) {
            throw DivergenceUndefinedError("kl_divergence: reference has zero mass at bin " +
                                           std::to_string(k) + " where p is positive");
        }
        total += p[k] * std::log(p[k] / a[k]);
    }
    return std::max(total, 0.0);
}

/// Jensen-Shannon divergence in nats, ½(KL(p‖A) + KL(q‖A)) with A = (p+q)/2.
/// Bounded by ln 2 and symmetric bit-for-bit in its arguments.
[[nodiscard]] inline double js_divergence(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) {
        throw DimensionError("js_divergence: lengths " + std::to_string(p.size()) + " and " +
                             std::to_string(q.size()) + " differ");
    }
    // Per-bin accumulation keeps the mixture out of memory and makes the
    // result independent of argument order (every operation commutes).
    double kl_p = 0.0;
    double kl_q = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
        const double mix = 0.5 * (p[k] + q[k]);
        if (p[k] > 0.0) kl_p += p[k] * std::log(p[k] / mix);
        if (q[k] > 0.0) kl_q += q[k] * std::log(q[k] / mix);
    }
    return std::clamp(0.5 * (kl_p + kl_q), 0.0, kLn2);
}

}  // namespace kevo
