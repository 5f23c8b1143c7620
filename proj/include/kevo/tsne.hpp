#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "kevo/error.hpp"

namespace kevo {

/// Which entity (token position or image) and lens state a feature row came from.
struct FeatureLabel {
    std::size_t entity = 0;
    std::size_t layer = 0;
    friend bool operator==(const FeatureLabel&, const FeatureLabel&) = default;
};

/// Row-major N x d matrix of feature encodings with per-row labels.
class FeatureMatrix {
public:
    FeatureMatrix() = default;
    explicit FeatureMatrix(std::size_t cols) : cols_(cols) {}

    template <typename T>
    void add_row(std::span<const T> values, FeatureLabel label) {
        if (cols_ == 0) cols_ = values.size();
        if (values.size() != cols_) {
            throw DimensionError("feature row has " + std::to_string(values.size()) + " columns, expected " +
                                 std::to_string(cols_));
        }
        for (const T& v : values) {
            if (!std::isfinite(static_cast<double>(v))) throw InvalidInputError("feature matrix entry is not finite");
            data_.push_back(static_cast<double>(v));
        }
        labels_.push_back(label);
    }
    void add_row(const std::vector<double>& values, FeatureLabel label) {
        add_row(std::span<const double>(values), label);
    }

    [[nodiscard]] std::size_t rows() const noexcept { return labels_.size(); }
    [[nodiscard]] std::size_t cols() const noexcept { return cols_; }
    [[nodiscard]] std::span<const double> row(std::size_t i) const {
        return std::span<const double>(data_).subspan(i * cols_, cols_);
    }
    [[nodiscard]] const std::vector<FeatureLabel>& labels() const noexcept { return labels_; }
    [[nodiscard]] const std::vector<double>& data() const noexcept { return data_; }

private:
    std::size_t cols_ = 0;
    std::vector<double> data_;
    std::vector<FeatureLabel> labels_;
};

/// Input-space affinities: per-row conditionals (row i is p_{j|i}) and the
/// symmetrized joint matrix, both N x N row-major.
struct Affinities {
    std::size_t n = 0;
    std::vector<double> conditional;
    std::vector<double> joint;
    std::vector<double> beta;  // Gaussian precision 1 / (2 sigma_i^2) per row
};

struct TsneParams {
    std::size_t out_dim = 2;
    double perplexity = 30.0;
    std::size_t iterations = 1000;
    std::uint64_t seed = 0;
    double learning_rate = 200.0;
    double exaggeration = 12.0;
    std::size_t exaggeration_iterations = 250;
    double initial_momentum = 0.5;
    double final_momentum = 0.8;
    std::size_t momentum_switch = 250;
    double init_sigma = 1e-4;
};

struct EmbeddingResult {
    std::size_t n = 0;
    std::size_t out_dim = 0;
    std::vector<double> coordinates;  // N x out_dim row-major
    double initial_kl = 0.0;          // KL(P||Q) when exaggeration ends
    double final_kl = 0.0;
    std::size_t iterations = 0;
    std::uint64_t seed = 0;
};

namespace detail {

inline constexpr double kPerplexityTolerance = 1e-6;
inline constexpr int kMaxBisectionSteps = 200;

inline std::vector<double> squared_distances(const FeatureMatrix& x) {
    const std::size_t n = x.rows();
    std::vector<double> d2(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const auto a = x.row(i);
        for (std::size_t j = i + 1; j < n; ++j) {
            const auto b = x.row(j);
            double s = 0.0;
            for (std::size_t k = 0; k < a.size(); ++k) {
                const double diff = a[k] - b[k];
                s += diff * diff;
            }
            d2[i * n + j] = d2[j * n + i] = s;
        }
    }
    return d2;
}

/// Fills `row` with exp(-beta * shifted) normalized and returns its entropy in nats.
inline double gaussian_row(std::span<const double> shifted, double beta, std::span<double> row) {
    double sum = 0.0;
    for (std::size_t j = 0; j < shifted.size(); ++j) {
        row[j] = std::exp(-beta * shifted[j]);
        sum += row[j];
    }
    double weighted = 0.0;
    for (std::size_t j = 0; j < shifted.size(); ++j) {
        row[j] /= sum;
        weighted += row[j] * shifted[j];
    }
    return std::log(sum) + beta * weighted;
}

inline double gaussian_standard(std::mt19937_64& rng) {
    // Box-Muller on raw 53-bit draws for cross-library reproducibility.
    const double u1 = (static_cast<double>(rng() >> 11) + 1.0) * 0x1.0p-53;
    const double u2 = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
}

}  // namespace detail

/// Gaussian input affinities with per-row bandwidths calibrated by bisection
/// so each conditional's perplexity matches `perplexity`. Accepts
/// 1 <= perplexity <= N-1; a row whose neighbors are all equidistant
/// (including all-duplicate rows) is uniform.
[[nodiscard]] inline Affinities pairwise_affinities(const FeatureMatrix& x, double perplexity) {
    const std::size_t n = x.rows();
    if (n < 2) throw ParameterError("pairwise affinities need at least 2 points");
    if (!std::isfinite(perplexity) || perplexity < 1.0 || perplexity > static_cast<double>(n - 1)) {
        throw ParameterError("perplexity " + std::to_string(perplexity) + " infeasible for " + std::to_string(n) +
                             " points (must lie in [1, N-1])");
    }
    const std::vector<double> d2 = detail::squared_distances(x);

    Affinities out;
    out.n = n;
    out.conditional.assign(n * n, 0.0);
    out.beta.assign(n, 0.0);
    std::vector<double> shifted(n - 1), row(n - 1);
    for (std::size_t i = 0; i < n; ++i) {
        double lo_d = std::numeric_limits<double>::infinity();
        double mean_d = 0.0;
        for (std::size_t j = 0, c = 0; j < n; ++j) {
            if (j == i) continue;
            shifted[c++] = d2[i * n + j];
            lo_d = std::min(lo_d, d2[i * n + j]);
        }
        for (double& v : shifted) {
            v -= lo_d;
            mean_d += v;
        }
        mean_d /= static_cast<double>(n - 1);

        double beta = 0.0;
        if (mean_d > 0.0) {
            auto perp_at = [&](double b) { return std::exp(detail::gaussian_row(shifted, b, row)); };
            if (std::abs(perp_at(0.0) - perplexity) > detail::kPerplexityTolerance) {
                double lo = 0.0;
                double hi = 1.0 / mean_d;
                for (int grow = 0; grow < 2000 && hi < 1e300 && perp_at(hi) > perplexity; ++grow) {
                    lo = hi;
                    hi *= 2.0;
                }
                beta = hi;
                for (int step = 0; step < detail::kMaxBisectionSteps; ++step) {
                    beta = 0.5 * (lo + hi);
                    const double p = perp_at(beta);
                    if (std::abs(p - perplexity) <= detail::kPerplexityTolerance) break;
                    (p > perplexity ? lo : hi) = beta;
                }
            }
        }
        detail::gaussian_row(shifted, beta, row);
        out.beta[i] = beta;
        for (std::size_t j = 0, c = 0; j < n; ++j) {
            if (j == i) continue;
            out.conditional[i * n + j] = row[c++];
        }
    }

    out.joint.assign(n * n, 0.0);
    const double inv = 1.0 / (2.0 * static_cast<double>(n));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out.joint[i * n + j] = (out.conditional[i * n + j] + out.conditional[j * n + i]) * inv;
        }
    }
    return out;
}

/// Perplexity exp(H) of one conditional row, excluding the diagonal entry.
[[nodiscard]] inline double row_perplexity(const Affinities& a, std::size_t i) {
    double h = 0.0;
    for (std::size_t j = 0; j < a.n; ++j) {
        const double p = a.conditional[i * a.n + j];
        if (j != i && p > 0.0) h -= p * std::log(p);
    }
    return std::exp(h);
}

/// Student-t (one degree of freedom) output affinities Q for an N x dim layout.
[[nodiscard]] inline std::vector<double> student_t_affinities(std::span<const double> y, std::size_t dim) {
    const std::size_t n = y.size() / dim;
    std::vector<double> q(n * n, 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < dim; ++k) {
                const double diff = y[i * dim + k] - y[j * dim + k];
                s += diff * diff;
            }
            const double w = 1.0 / (1.0 + s);
            q[i * n + j] = q[j * n + i] = w;
            total += 2.0 * w;
        }
    }
    for (double& v : q) v /= total;
    return q;
}

/// KL(P || Q) for the layout `y`.
[[nodiscard]] inline double tsne_objective(std::span<const double> p, std::span<const double> y, std::size_t dim) {
    const std::vector<double> q = student_t_affinities(y, dim);
    double kl = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) {
        if (p[i] > 0.0) kl += p[i] * std::log(p[i] / q[i]);
    }
    return kl;
}

/// Analytic gradient of KL(P || Q) with respect to the layout:
/// dC/dy_i = 4 sum_j (p_ij - q_ij) (y_i - y_j) / (1 + |y_i - y_j|^2).
[[nodiscard]] inline std::vector<double> tsne_gradient(std::span<const double> p, std::span<const double> y,
                                                       std::size_t dim) {
    const std::size_t n = y.size() / dim;
    std::vector<double> w(n * n, 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < dim; ++k) {
                const double diff = y[i * dim + k] - y[j * dim + k];
                s += diff * diff;
            }
            w[i * n + j] = w[j * n + i] = 1.0 / (1.0 + s);
            total += 2.0 * w[i * n + j];
        }
    }
    std::vector<double> grad(n * dim, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            const double wij = w[i * n + j];
            const double coeff = 4.0 * (p[i * n + j] - wij / total) * wij;
            for (std::size_t k = 0; k < dim; ++k) grad[i * dim + k] += coeff * (y[i * dim + k] - y[j * dim + k]);
        }
    }
    return grad;
}

/// Exact O(N^2) t-SNE with early exaggeration, a two-phase momentum schedule
/// and per-coordinate adaptive gains. Deterministic for a given seed.
[[nodiscard]] inline EmbeddingResult tsne_embed(const FeatureMatrix& x, const TsneParams& params = {}) {
    if (params.out_dim != 1 && params.out_dim != 2) throw ParameterError("t-SNE out_dim must be 1 or 2");
    if (params.iterations < 1) throw ParameterError("t-SNE needs at least one iteration");
    if (x.rows() < 4) throw ParameterError("t-SNE embedding needs at least 4 points");
    const Affinities aff = pairwise_affinities(x, params.perplexity);
    const std::size_t n = x.rows();
    const std::size_t dim = params.out_dim;

    std::mt19937_64 rng(params.seed);
    std::vector<double> y(n * dim);
    for (double& v : y) v = params.init_sigma * detail::gaussian_standard(rng);
    std::vector<double> update(n * dim, 0.0), gains(n * dim, 1.0);

    std::vector<double> exaggerated = aff.joint;
    for (double& v : exaggerated) v *= params.exaggeration;

    EmbeddingResult out;
    out.n = n;
    out.out_dim = dim;
    out.seed = params.seed;
    out.iterations = params.iterations;
    out.initial_kl = tsne_objective(aff.joint, y, dim);
    for (std::size_t iter = 0; iter < params.iterations; ++iter) {
        const bool lying = iter < params.exaggeration_iterations;
        if (iter == params.exaggeration_iterations) out.initial_kl = tsne_objective(aff.joint, y, dim);
        const double momentum = iter < params.momentum_switch ? params.initial_momentum : params.final_momentum;
        const std::vector<double> grad = tsne_gradient(lying ? exaggerated : aff.joint, y, dim);
        for (std::size_t i = 0; i < y.size(); ++i) {
            const bool same_sign = (grad[i] > 0.0) == (update[i] > 0.0);
            gains[i] = same_sign ? std::max(gains[i] * 0.8, 0.01) : gains[i] + 0.2;
            update[i] = momentum * update[i] - params.learning_rate * gains[i] * grad[i];
            y[i] += update[i];
        }
        for (std::size_t k = 0; k < dim; ++k) {
            double mean = 0.0;
            for (std::size_t i = 0; i < n; ++i) mean += y[i * dim + k];
            mean /= static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) y[i * dim + k] -= mean;
        }
    }
    out.final_kl = tsne_objective(aff.joint, y, dim);
    out.coordinates = std::move(y);
    return out;
}

// ---------------------------------------------------------------------------
// Feature-geometry metrics

/// Fraction of total variance along the first principal direction of the
/// rows of `x` (one row per lens state of a single entity). Points that all
/// coincide score 1.0.
[[nodiscard]] inline double trajectory_linearity(const FeatureMatrix& x, double tolerance = 1e-9) {
    const std::size_t n = x.rows();
    const std::size_t d = x.cols();
    if (n < 3) throw ParameterError("trajectory linearity needs at least 3 layers");
    std::vector<double> centered(x.data());
    for (std::size_t k = 0; k < d; ++k) {
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i) mean += centered[i * d + k];
        mean /= static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) centered[i * d + k] -= mean;
    }
    // The Gram matrix and the scatter matrix share their non-zero spectrum;
    // iterate on whichever is smaller.
    const bool gram = n <= d;
    const std::size_t m = gram ? n : d;
    std::vector<double> s(m * m, 0.0);
    for (std::size_t a = 0; a < m; ++a) {
        for (std::size_t b = a; b < m; ++b) {
            double acc = 0.0;
            if (gram) {
                for (std::size_t k = 0; k < d; ++k) acc += centered[a * d + k] * centered[b * d + k];
            } else {
                for (std::size_t i = 0; i < n; ++i) acc += centered[i * d + a] * centered[i * d + b];
            }
            s[a * m + b] = s[b * m + a] = acc;
        }
    }
    double total = 0.0;
    for (std::size_t a = 0; a < m; ++a) total += s[a * m + a];
    if (total <= 0.0) return 1.0;

    std::mt19937_64 rng(0x5eed);
    std::vector<double> v(m), w(m);
    for (double& e : v) e = detail::gaussian_standard(rng);
    double lambda = 0.0;
    for (int iter = 0; iter < 100000; ++iter) {
        double norm = 0.0;
        for (double e : v) norm += e * e;
        norm = std::sqrt(norm);
        for (double& e : v) e /= norm;
        for (std::size_t a = 0; a < m; ++a) {
            double acc = 0.0;
            for (std::size_t b = 0; b < m; ++b) acc += s[a * m + b] * v[b];
            w[a] = acc;
        }
        double next = 0.0;
        for (std::size_t a = 0; a < m; ++a) next += v[a] * w[a];
        const bool done = std::abs(next - lambda) <= tolerance * total;
        lambda = next;
        v.swap(w);
        if (done) break;
    }
    return std::clamp(lambda / total, 0.0, 1.0);
}

struct ClusterSpread {
    std::vector<std::size_t> layers;
    std::vector<double> dispersion;  // mean pairwise distance per layer
    std::size_t quartile = 0;        // layers averaged at each end
    std::optional<double> neck_body_ratio;  // absent when the deep mean is 0
};

/// Per-layer dispersion of entities (mean pairwise Euclidean distance) and
/// the ratio of mean dispersion over the shallowest quarter of layers to the
/// deepest quarter.
[[nodiscard]] inline ClusterSpread cluster_spread(const FeatureMatrix& x) {
    std::vector<std::size_t> layers;
    for (const auto& l : x.labels()) layers.push_back(l.layer);
    std::sort(layers.begin(), layers.end());
    layers.erase(std::unique(layers.begin(), layers.end()), layers.end());

    ClusterSpread out;
    out.layers = layers;
    for (std::size_t layer : layers) {
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < x.rows(); ++i) {
            if (x.labels()[i].layer == layer) members.push_back(i);
        }
        if (members.size() < 2) {
            throw InvalidInputError("dispersion undefined at layer " + std::to_string(layer) +
                                    ": needs at least 2 entities");
        }
        double sum = 0.0;
        std::size_t pairs = 0;
        for (std::size_t a = 0; a < members.size(); ++a) {
            const auto ra = x.row(members[a]);
            for (std::size_t b = a + 1; b < members.size(); ++b) {
                const auto rb = x.row(members[b]);
                double s = 0.0;
                for (std::size_t k = 0; k < ra.size(); ++k) s += (ra[k] - rb[k]) * (ra[k] - rb[k]);
                sum += std::sqrt(s);
                ++pairs;
            }
        }
        out.dispersion.push_back(sum / static_cast<double>(pairs));
    }
    if (out.dispersion.empty()) throw InvalidInputError("cluster spread of an empty feature matrix");
    out.quartile = std::max<std::size_t>(1, out.dispersion.size() / 4);
    double neck = 0.0, body = 0.0;
    for (std::size_t i = 0; i < out.quartile; ++i) {
        neck += out.dispersion[i];
        body += out.dispersion[out.dispersion.size() - 1 - i];
    }
    if (body > 0.0) out.neck_body_ratio = neck / body;
    return out;
}

}  // namespace kevo
