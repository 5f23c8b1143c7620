#include <cmath>
#include <cstring>
#include <limits>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "kevo/trace.hpp"
#include "oracles.hpp"

using namespace kevo;

namespace {

std::uint64_t read_u64(const std::string& bytes, std::size_t at) {
    std::uint64_t v = 0;
    std::memcpy(&v, bytes.data() + at, 8);
    return v;
}

nlohmann::json header_of(const std::string& bytes) {
    return nlohmann::json::parse(bytes.substr(16, read_u64(bytes, 8)));
}

bool bitwise_equal(const std::vector<float>& a, const std::vector<float>& b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

void expect_same_content(const TraceFile& a, const TraceFile& b) {
    const auto& ha = a.trace.header;
    const auto& hb = b.trace.header;
    EXPECT_EQ(ha.model_name, hb.model_name);
    EXPECT_EQ(ha.num_layers, hb.num_layers);
    EXPECT_EQ(ha.hidden_dim, hb.hidden_dim);
    EXPECT_EQ(ha.vocab_size, hb.vocab_size);
    EXPECT_EQ(ha.num_positions, hb.num_positions);
    EXPECT_EQ(ha.token_ids, hb.token_ids);
    EXPECT_EQ(ha.token_strings, hb.token_strings);
    EXPECT_TRUE(bitwise_equal(a.trace.hidden, b.trace.hidden));
    ASSERT_EQ(a.head.has_value(), b.head.has_value());
    if (a.head) {
        EXPECT_EQ(a.head->norm_kind, b.head->norm_kind);
        EXPECT_EQ(a.head->norm_eps, b.head->norm_eps);
        EXPECT_TRUE(bitwise_equal(a.head->norm_scale, b.head->norm_scale));
        EXPECT_TRUE(bitwise_equal(a.head->norm_bias, b.head->norm_bias));
        EXPECT_TRUE(bitwise_equal(a.head->unembed, b.head->unembed));
    }
}

std::string encode(const TraceFile& f) { return encode_trace(f.trace, f.head ? &*f.head : nullptr); }

}  // namespace

TEST(KevtFormat, PreambleLayout) {
    std::mt19937_64 rng(1);
    const auto f = fixture::random_trace(rng, 2, 3, 4, 5, true);
    const std::string bytes = encode(f);
    ASSERT_GE(bytes.size(), 16u);
    EXPECT_EQ(bytes.substr(0, 4), "KEVT");
    std::uint32_t version = 0;
    std::memcpy(&version, bytes.data() + 4, 4);
    EXPECT_EQ(version, 1u);
    const auto h = header_of(bytes);
    EXPECT_EQ(h["num_layers"], 3);
    EXPECT_EQ(h["hidden_dim"], 4);
    EXPECT_EQ(h["vocab_size"], 5);
    EXPECT_EQ(h["num_positions"], 2);
    EXPECT_EQ(h["norm_kind"], "rms");
    EXPECT_TRUE(h["has_head"].get<bool>());
}

TEST(KevtFormat, SectionsFollowHeaderInOrder) {
    std::mt19937_64 rng(2);
    const auto f = fixture::random_trace(rng, 3, 2, 6, 7, true, true, NormKind::layernorm);
    const std::string bytes = encode(f);
    const auto h = header_of(bytes);
    const auto& s = h["sections"];
    const std::uint64_t header_end = 16 + read_u64(bytes, 8);
    EXPECT_EQ(s["hidden"]["offset"].get<std::uint64_t>(), header_end);
    EXPECT_EQ(s["hidden"]["bytes"].get<std::uint64_t>(), 3u * 3 * 6 * 4);
    EXPECT_EQ(s["norm_scale"]["offset"].get<std::uint64_t>(), header_end + 3 * 3 * 6 * 4);
    EXPECT_EQ(s["norm_bias"]["offset"].get<std::uint64_t>(), s["norm_scale"]["offset"].get<std::uint64_t>() + 24);
    EXPECT_EQ(s["unembed"]["offset"].get<std::uint64_t>(), s["norm_bias"]["offset"].get<std::uint64_t>() + 24);
    EXPECT_EQ(bytes.size(), s["unembed"]["offset"].get<std::uint64_t>() + 7 * 6 * 4);
    EXPECT_EQ(header_end % 64, 0u);

    // The tensors really sit at the declared offsets.
    float first = 0.0f;
    std::memcpy(&first, bytes.data() + header_end, 4);
    EXPECT_EQ(first, f.trace.hidden[0]);
    float unembed0 = 0.0f;
    std::memcpy(&unembed0, bytes.data() + s["unembed"]["offset"].get<std::uint64_t>(), 4);
    EXPECT_EQ(unembed0, f.head->unembed[0]);
}

TEST(KevtRoundTrip, SmallTraceBitwise) {
    std::mt19937_64 rng(3);
    const auto f = fixture::random_trace(rng, 2, 3, 4, 6, false);
    std::stringstream buf;
    const auto n = write_trace(f.trace, nullptr, buf);
    const std::string bytes = buf.str();
    EXPECT_EQ(n, bytes.size());
    std::istringstream in(bytes);
    const TraceFile back = read_trace(in);
    expect_same_content(f, back);
    EXPECT_FALSE(back.head.has_value());
    EXPECT_EQ(encode(back), bytes);
}

TEST(KevtRoundTrip, RandomizedWithHeads) {
    std::mt19937_64 rng(4);
    std::uniform_int_distribution<std::size_t> dim(1, 9);
    for (int trial = 0; trial < 40; ++trial) {
        const auto norm = static_cast<NormKind>(trial % 3);
        const auto f = fixture::random_trace(rng, dim(rng), dim(rng), dim(rng), dim(rng) + 1, trial % 4 != 0,
                                             trial % 2 == 0, norm);
        const std::string bytes = encode(f);
        const TraceFile back = decode_trace(bytes);
        expect_same_content(f, back);
        EXPECT_EQ(encode(back), bytes) << "trial " << trial;
    }
}

TEST(KevtRoundTrip, SpecialFloatValuesSurvive) {
    std::mt19937_64 rng(5);
    auto f = fixture::random_trace(rng, 1, 1, 4, 2, false);
    f.trace.hidden = {-0.0f, std::numeric_limits<float>::denorm_min(), std::numeric_limits<float>::max(), 1e-30f,
                      0.0f, -1.0f, 3.5f, std::numeric_limits<float>::lowest()};
    const TraceFile back = decode_trace(encode(f));
    EXPECT_TRUE(bitwise_equal(f.trace.hidden, back.trace.hidden));
    EXPECT_TRUE(std::signbit(back.trace.hidden[0]));
}

TEST(KevtWrite, MegabyteTraceSizeMatchesDeclaredSections) {
    std::mt19937_64 rng(6);
    // 16 * 33 * 512 floats = 1.08 MB of hidden state.
    const auto f = fixture::random_trace(rng, 16, 32, 512, 64, true);
    const std::string bytes = encode(f);
    const auto s = header_of(bytes)["sections"];
    const std::uint64_t predicted = 16 + read_u64(bytes, 8) + 16ull * 33 * 512 * 4 + 512 * 4 + 64ull * 512 * 4;
    EXPECT_EQ(bytes.size(), predicted);
    EXPECT_EQ(bytes.size(), s["unembed"]["offset"].get<std::uint64_t>() + s["unembed"]["bytes"].get<std::uint64_t>());
}

TEST(KevtWrite, RejectsInvalidHeaders) {
    std::mt19937_64 rng(7);
    auto f = fixture::random_trace(rng, 2, 3, 4, 5, false);
    auto bad = f.trace;
    bad.header.vocab_size = 0;
    std::ostringstream sink;
    EXPECT_THROW((void)write_trace(bad, nullptr, sink), InvalidInputError);
    EXPECT_TRUE(sink.str().empty());

    bad = f.trace;
    bad.header.token_ids[0] = 5;
    EXPECT_THROW((void)encode_trace(bad), InvalidInputError);

    bad = f.trace;
    bad.hidden.pop_back();
    EXPECT_THROW((void)encode_trace(bad), InvalidInputError);

    bad = f.trace;
    bad.hidden[3] = std::numeric_limits<float>::quiet_NaN();
    EXPECT_THROW((void)encode_trace(bad), Error);

    bad = f.trace;
    bad.header.num_layers = 0;
    EXPECT_THROW((void)encode_trace(bad), InvalidInputError);
}

TEST(KevtWrite, RejectsMismatchedHead) {
    std::mt19937_64 rng(8);
    auto f = fixture::random_trace(rng, 2, 3, 4, 5, true);
    auto head = *f.head;
    head.unembed.pop_back();
    EXPECT_THROW((void)encode_trace(f.trace, &head), InvalidInputError);
}

TEST(KevtWrite, FailingSinkIsIoError) {
    std::mt19937_64 rng(9);
    const auto f = fixture::random_trace(rng, 1, 1, 2, 2, false);
    std::ostringstream sink;
    sink.setstate(std::ios::badbit);
    EXPECT_THROW((void)write_trace(f.trace, nullptr, sink), IoError);
}

TEST(KevtRead, BadMagicIsFormatError) {
    std::mt19937_64 rng(10);
    std::string bytes = encode(fixture::random_trace(rng, 1, 2, 3, 4, true));
    bytes.replace(0, 4, "XXXX");
    EXPECT_THROW((void)decode_trace(bytes), FormatError);
    EXPECT_THROW((void)decode_trace(std::string("XXXX")), FormatError);
}

TEST(KevtRead, BadVersionAndJsonAreFormatErrors) {
    std::mt19937_64 rng(11);
    const std::string good = encode(fixture::random_trace(rng, 1, 2, 3, 4, true));
    std::string bytes = good;
    const std::uint32_t v2 = 2;
    std::memcpy(bytes.data() + 4, &v2, 4);
    EXPECT_THROW((void)decode_trace(bytes), FormatError);

    bytes = good;
    bytes[16] = '#';
    EXPECT_THROW((void)decode_trace(bytes), FormatError);
}

TEST(KevtRead, TruncationIsCorruptionWithByteCounts) {
    std::mt19937_64 rng(12);
    const std::string good = encode(fixture::random_trace(rng, 3, 4, 5, 6, true));
    const std::uint64_t header_end = 16 + read_u64(good, 8);
    for (std::size_t cut : {std::size_t{8}, std::size_t{40}, static_cast<std::size_t>(header_end + 10),
                            good.size() - 1}) {
        try {
            (void)decode_trace(std::string_view(good).substr(0, cut));
            FAIL() << "no error at cut " << cut;
        } catch (const CorruptionError& e) {
            const std::string msg = e.what();
            EXPECT_NE(msg.find("expected"), std::string::npos) << msg;
            EXPECT_NE(msg.find(std::to_string(cut)), std::string::npos) << msg;
        }
    }
}

TEST(KevtRead, NanReportsFirstOffendingIndex) {
    std::mt19937_64 rng(13);
    const auto f = fixture::random_trace(rng, 2, 3, 4, 5, false);
    std::string bytes = encode(f);
    const std::uint64_t header_end = 16 + read_u64(bytes, 8);
    const float nan = std::numeric_limits<float>::quiet_NaN();
    // Flat index 21 = position 1, state 1, dim 1 for L+1 = 4, d = 4.
    std::memcpy(bytes.data() + header_end + 21 * 4, &nan, 4);
    std::memcpy(bytes.data() + header_end + 30 * 4, &nan, 4);
    try {
        (void)decode_trace(bytes);
        FAIL() << "NaN not detected";
    } catch (const DataError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("index 21"), std::string::npos) << msg;
        EXPECT_NE(msg.find("position 1, state 1, dim 1"), std::string::npos) << msg;
    }
}

TEST(KevtRead, SectionSizeMismatchIsFormatError) {
    std::mt19937_64 rng(14);
    auto f = fixture::random_trace(rng, 1, 1, 2, 3, false);
    std::string bytes = encode(f);
    auto h = header_of(bytes);
    h["sections"]["hidden"]["bytes"] = 4;
    std::string text = h.dump();
    const std::uint64_t len = read_u64(bytes, 8);
    ASSERT_LE(text.size(), len);
    text.append(len - text.size(), ' ');
    bytes.replace(16, len, text);
    EXPECT_THROW((void)decode_trace(bytes), FormatError);
}

TEST(LensProject, SymmetricToyCase) {
    std::vector<std::vector<std::vector<float>>> states = {{{0.0f, 0.0f}, {0.0f, 0.0f}}};
    const auto f = fixture::logit_trace(states);
    const auto p = lens_project(f, 0, 0);
    EXPECT_DOUBLE_EQ(p[0], 0.5);
    EXPECT_DOUBLE_EQ(p[1], 0.5);
}

TEST(LensProject, MatchesMatmulSoftmaxOracle) {
    std::mt19937_64 rng(15);
    for (auto norm : {NormKind::rms, NormKind::layernorm, NormKind::none}) {
        const auto f = fixture::random_trace(rng, 3, 5, 4, 6, true, norm == NormKind::layernorm, norm);
        for (std::size_t p = 0; p < 3; ++p) {
            for (std::size_t j = 0; j <= 5; ++j) {
                for (bool apply : {true, false}) {
                    const auto got = lens_project(f.trace, &*f.head, j, p, apply);
                    const auto want = oracle::lens(*f.head, f.trace.state(p, j).data(), 4, apply);
                    for (std::size_t t = 0; t < 6; ++t) EXPECT_NEAR(got[t], want[t], 1e-10);
                }
            }
        }
    }
}

TEST(LensProject, Errors) {
    std::mt19937_64 rng(16);
    const auto f = fixture::random_trace(rng, 2, 3, 4, 5, true);
    EXPECT_THROW((void)lens_project(f.trace, nullptr, 0, 0), MissingHeadError);
    EXPECT_THROW((void)lens_project(f.trace, &*f.head, 4, 0), BoundsError);
    EXPECT_THROW((void)lens_project(f.trace, &*f.head, 0, 2), BoundsError);
    auto other = fixture::random_trace(rng, 1, 1, 3, 5, true);
    EXPECT_THROW((void)lens_project(f.trace, &*other.head, 0, 0), DimensionError);
}

TEST(LensProjectProperty, EveryStateIsAValidDistribution) {
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 10; ++trial) {
        auto f = fixture::random_trace(rng, 2, 6, 8, 30, true);
        for (float& x : f.trace.hidden) x *= 50.0f;
        for (std::size_t p = 0; p < 2; ++p) {
            const auto stack = lens_stack(f.trace, *f.head, p, trial % 2 == 0);
            ASSERT_EQ(stack.size(), 7u);
            for (const auto& dist : stack) {
                double s = 0.0;
                for (double v : dist.values()) {
                    ASSERT_TRUE(std::isfinite(v));
                    ASSERT_GE(v, 0.0);
                    s += v;
                }
                EXPECT_NEAR(s, 1.0, 1e-9);
            }
        }
        EXPECT_THROW((void)lens_project(f.trace, &*f.head, 7, 0), BoundsError);
    }
}
