#include <cmath>
#include <cstring>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "kevo/tsne.hpp"
#include "oracles.hpp"

using namespace kevo;

namespace {

FeatureMatrix random_matrix(std::mt19937_64& rng, std::size_t n, std::size_t d, double scale = 1.0) {
    std::normal_distribution<double> g(0.0, scale);
    FeatureMatrix x(d);
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> row(d);
        for (auto& v : row) v = g(rng);
        x.add_row(row, {i, 0});
    }
    return x;
}

void expect_valid_joint(const std::vector<double>& p, std::size_t n) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        EXPECT_EQ(p[i * n + i], 0.0);
        for (std::size_t j = 0; j < n; ++j) {
            EXPECT_GE(p[i * n + j], 0.0);
            EXPECT_EQ(p[i * n + j], p[j * n + i]);
            total += p[i * n + j];
        }
    }
    EXPECT_NEAR(total, 1.0, 1e-9);
}

double norm(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

}  // namespace

TEST(FeatureMatrixType, RejectsRaggedAndNonFinite) {
    FeatureMatrix x(3);
    x.add_row(std::vector<double>{1, 2, 3}, {0, 0});
    EXPECT_THROW(x.add_row(std::vector<double>{1, 2}, {0, 1}), DimensionError);
    EXPECT_THROW(x.add_row(std::vector<double>{1, NAN, 2}, {0, 1}), InvalidInputError);
    EXPECT_EQ(x.rows(), 1u);
}

TEST(Affinities, TwoPoints) {
    FeatureMatrix x(2);
    x.add_row(std::vector<double>{0, 0}, {0, 0});
    x.add_row(std::vector<double>{1, 3}, {1, 0});
    const auto a = pairwise_affinities(x, 1.0);
    EXPECT_DOUBLE_EQ(a.joint[1], 0.5);
    EXPECT_DOUBLE_EQ(a.joint[2], 0.5);
    EXPECT_EQ(a.joint[0], 0.0);
}

TEST(Affinities, EquidistantTriangleIsUniform) {
    FeatureMatrix x(2);
    x.add_row(std::vector<double>{0, 0}, {0, 0});
    x.add_row(std::vector<double>{1, 0}, {1, 0});
    x.add_row(std::vector<double>{0.5, std::sqrt(3.0) / 2}, {2, 0});
    const auto a = pairwise_affinities(x, 2.0);
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 3; ++j) {
            if (i != j) {
                EXPECT_NEAR(a.conditional[i * 3 + j], 0.5, 1e-12);
            }
        }
    }
}

TEST(Affinities, PerplexityCalibratedPerRow) {
    std::mt19937_64 rng(51);
    for (double perp : {2.0, 5.0, 10.0}) {
        const auto x = random_matrix(rng, 20, 7);
        const auto a = pairwise_affinities(x, perp);
        for (std::size_t i = 0; i < 20; ++i) {
            EXPECT_NEAR(oracle::perplexity_of_row(a.conditional, 20, i), perp, 1e-3) << "row " << i;
            EXPECT_NEAR(row_perplexity(a, i), perp, 1e-3);
        }
        expect_valid_joint(a.joint, 20);
    }
}

TEST(Affinities, LargeScaleAndTinyScaleInputs) {
    std::mt19937_64 rng(52);
    for (double scale : {1e-6, 1e4}) {
        const auto x = random_matrix(rng, 15, 5, scale);
        const auto a = pairwise_affinities(x, 4.0);
        for (std::size_t i = 0; i < 15; ++i) EXPECT_NEAR(row_perplexity(a, i), 4.0, 1e-3);
        expect_valid_joint(a.joint, 15);
    }
}

TEST(Affinities, DuplicatePoints) {
    FeatureMatrix all_same(3);
    for (std::size_t i = 0; i < 5; ++i) all_same.add_row(std::vector<double>{1, 2, 3}, {i, 0});
    const auto u = pairwise_affinities(all_same, 3.0);
    for (std::size_t i = 0; i < 5; ++i) {
        for (std::size_t j = 0; j < 5; ++j) {
            if (i != j) {
                EXPECT_NEAR(u.conditional[i * 5 + j], 0.25, 1e-15);
            }
        }
    }
    std::mt19937_64 rng(53);
    auto x = random_matrix(rng, 12, 4);
    const auto r0 = x.row(0);
    x.add_row(std::vector<double>(r0.begin(), r0.end()), {12, 0});
    const auto a = pairwise_affinities(x, 3.0);
    for (std::size_t i = 0; i < 13; ++i) EXPECT_NEAR(row_perplexity(a, i), 3.0, 1e-3);
    expect_valid_joint(a.joint, 13);
    // The duplicate pair is each other's nearest neighbour.
    EXPECT_GT(a.conditional[0 * 13 + 12], 0.2);
}

TEST(Affinities, InfeasiblePerplexity) {
    std::mt19937_64 rng(54);
    const auto x = random_matrix(rng, 6, 3);
    EXPECT_THROW((void)pairwise_affinities(x, 0.5), ParameterError);
    EXPECT_THROW((void)pairwise_affinities(x, 5.5), ParameterError);
    EXPECT_THROW((void)pairwise_affinities(x, NAN), ParameterError);
    FeatureMatrix one(2);
    one.add_row(std::vector<double>{0, 0}, {0, 0});
    EXPECT_THROW((void)pairwise_affinities(one, 1.0), ParameterError);
}

TEST(StudentT, ValidAtRandomLayouts) {
    std::mt19937_64 rng(55);
    std::normal_distribution<double> g(0.0, 3.0);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> y(2 * 11);
        for (auto& v : y) v = g(rng);
        expect_valid_joint(student_t_affinities(y, 2), 11);
    }
}

TEST(Objective, MatchesDirectKl) {
    std::mt19937_64 rng(56);
    const auto x = random_matrix(rng, 10, 4);
    const auto a = pairwise_affinities(x, 3.0);
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<double> y(20);
    for (auto& v : y) v = g(rng);
    EXPECT_NEAR(tsne_objective(a.joint, y, 2), oracle::tsne_kl(a.joint, y, 2), 1e-12);
}

TEST(Gradient, MatchesCentralDifferences) {
    std::mt19937_64 rng(57);
    std::uniform_int_distribution<std::size_t> size(4, 30);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = size(rng);
        const std::size_t dim = trial % 2 + 1;
        const auto x = random_matrix(rng, n, 5);
        const auto a = pairwise_affinities(x, std::min(5.0, static_cast<double>(n - 1)));
        std::normal_distribution<double> g(0.0, 1.0);
        std::vector<double> y(n * dim);
        for (auto& v : y) v = g(rng);
        const auto analytic = tsne_gradient(a.joint, y, dim);
        const auto fd = oracle::central_gradient([&](const std::vector<double>& yy) {
            return oracle::tsne_kl(a.joint, yy, dim);
        }, y, 1e-5);
        std::vector<double> diff(analytic.size());
        for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = analytic[i] - fd[i];
        EXPECT_LT(norm(diff) / std::max(norm(analytic), norm(fd)), 1e-4) << "trial " << trial << " n=" << n;
    }
}

TEST(Embed, SeparatesTwoClusters) {
    std::mt19937_64 rng(58);
    std::normal_distribution<double> g(0.0, 1.0);
    FeatureMatrix x(4096);
    std::vector<double> centers[2] = {std::vector<double>(4096, 0.0), std::vector<double>(4096, 0.0)};
    for (std::size_t k = 0; k < 4096; ++k) centers[1][k] = 3.0;
    for (std::size_t c = 0; c < 2; ++c) {
        for (std::size_t i = 0; i < 3; ++i) {
            std::vector<double> row(4096);
            for (std::size_t k = 0; k < 4096; ++k) row[k] = centers[c][k] + 0.1 * g(rng);
            x.add_row(row, {c * 3 + i, 0});
        }
    }
    TsneParams p;
    p.perplexity = 2.0;
    p.seed = 3;
    const auto e = tsne_embed(x, p);
    auto dist = [&](std::size_t i, std::size_t j) {
        return oracle::distance(&e.coordinates[i * 2], &e.coordinates[j * 2], 2);
    };
    double max_intra = 0.0, min_inter = INFINITY;
    for (std::size_t i = 0; i < 6; ++i) {
        for (std::size_t j = i + 1; j < 6; ++j) {
            if (i / 3 == j / 3) max_intra = std::max(max_intra, dist(i, j));
            else min_inter = std::min(min_inter, dist(i, j));
        }
    }
    EXPECT_LT(max_intra, min_inter);
}

TEST(Embed, DeterministicBitIdentical) {
    std::mt19937_64 rng(59);
    const auto x = random_matrix(rng, 25, 6);
    TsneParams p;
    p.perplexity = 5.0;
    p.iterations = 400;
    p.seed = 17;
    const auto a = tsne_embed(x, p);
    const auto b = tsne_embed(x, p);
    ASSERT_EQ(a.coordinates.size(), b.coordinates.size());
    EXPECT_EQ(std::memcmp(a.coordinates.data(), b.coordinates.data(), a.coordinates.size() * sizeof(double)), 0);
    p.seed = 18;
    const auto c = tsne_embed(x, p);
    EXPECT_NE(a.coordinates, c.coordinates);
}

TEST(Embed, FinalKlBelowPostExaggerationKl) {
    std::mt19937_64 rng(60);
    for (std::size_t dim : {std::size_t{1}, std::size_t{2}}) {
        const auto x = random_matrix(rng, 30, 8);
        TsneParams p;
        p.out_dim = dim;
        p.perplexity = 6.0;
        const auto e = tsne_embed(x, p);
        EXPECT_EQ(e.out_dim, dim);
        EXPECT_EQ(e.coordinates.size(), 30 * dim);
        EXPECT_EQ(e.iterations, 1000u);
        EXPECT_LE(e.final_kl, e.initial_kl);
        for (double v : e.coordinates) EXPECT_TRUE(std::isfinite(v));
    }
}

TEST(Embed, ParameterErrors) {
    std::mt19937_64 rng(61);
    const auto x = random_matrix(rng, 8, 3);
    TsneParams p;
    p.perplexity = 3.0;
    p.out_dim = 3;
    EXPECT_THROW((void)tsne_embed(x, p), ParameterError);
    p.out_dim = 2;
    p.iterations = 0;
    EXPECT_THROW((void)tsne_embed(x, p), ParameterError);
    p.iterations = 10;
    p.perplexity = 30.0;
    EXPECT_THROW((void)tsne_embed(x, p), ParameterError);
    const auto small = random_matrix(rng, 3, 3);
    p.perplexity = 1.5;
    EXPECT_THROW((void)tsne_embed(small, p), ParameterError);
}
