#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <iterator>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "kevo/error.hpp"
#include "kevo/numerics.hpp"

static_assert(std::endian::native == std::endian::little,
              "KEVT tensors are copied verbatim and assume a little-endian host");
static_assert(sizeof(float) == 4 && std::numeric_limits<float>::is_iec559);

namespace kevo {

enum class NormKind { rms, layernorm, none };

inline std::string to_string(NormKind kind) {
    switch (kind) {
        case NormKind::rms: return "rms";
        case NormKind::layernorm: return "layernorm";
        case NormKind::none: return "none";
    }
    return "none";
}

inline NormKind parse_norm_kind(const std::string& text) {
    if (text == "rms") return NormKind::rms;
    if (text == "layernorm") return NormKind::layernorm;
    if (text == "none") return NormKind::none;
    throw FormatError("unknown norm_kind '" + text + "'");
}

/// Absolute byte range of one tensor section inside a KEVT file.
struct Section {
    std::uint64_t offset = 0;
    std::uint64_t bytes = 0;
    friend bool operator==(const Section&, const Section&) = default;
};

struct TraceHeader {
    std::uint32_t format_version = 1;
    std::string model_name;
    std::uint32_t num_layers = 0;     // L
    std::uint32_t hidden_dim = 0;     // d
    std::uint32_t vocab_size = 0;
    std::uint32_t num_positions = 0;  // K
    std::vector<std::uint32_t> token_ids;
    std::vector<std::string> token_strings;  // empty when absent
    bool has_head = false;
    NormKind norm_kind = NormKind::rms;
    double norm_eps = 1e-5;
    bool has_norm_bias = false;

    // Filled in by write_trace / read_trace.
    Section hidden_section;
    Section norm_scale_section;
    Section norm_bias_section;
    Section unembed_section;

    [[nodiscard]] std::size_t lens_states() const noexcept { return std::size_t{num_layers} + 1; }

    friend bool operator==(const TraceHeader&, const TraceHeader&) = default;
};

/// Final normalization plus unembedding: the lens head applied to any
/// residual-stream state.
struct LensHead {
    NormKind norm_kind = NormKind::rms;
    double norm_eps = 1e-5;
    std::vector<float> norm_scale;  // [d]
    std::vector<float> norm_bias;   // [d] or empty
    std::vector<float> unembed;     // [vocab][d], row-major

    [[nodiscard]] std::size_t dim() const noexcept { return norm_scale.size(); }
    [[nodiscard]] std::size_t vocab_size() const noexcept {
        return norm_scale.empty() ? 0 : unembed.size() / norm_scale.size();
    }
    [[nodiscard]] std::span<const float> unembed_row(std::size_t token) const {
        return std::span<const float>(unembed).subspan(token * dim(), dim());
    }

    friend bool operator==(const LensHead&, const LensHead&) = default;
};

/// Per-position, per-state residual stream of one generated sequence.
/// `hidden` is laid out [K][L+1][d]; state 0 is the embedding output and
/// state j is the stream after block j.
struct GenerationTrace {
    TraceHeader header;
    std::vector<float> hidden;

    [[nodiscard]] std::span<const float> state(std::size_t position, std::size_t layer) const {
        const std::size_t d = header.hidden_dim;
        return std::span<const float>(hidden).subspan((position * header.lens_states() + layer) * d, d);
    }
    [[nodiscard]] std::span<float> state(std::size_t position, std::size_t layer) {
        const std::size_t d = header.hidden_dim;
        return std::span<float>(hidden).subspan((position * header.lens_states() + layer) * d, d);
    }

    friend bool operator==(const GenerationTrace&, const GenerationTrace&) = default;
};

/// Trace plus the head section, as stored in a KEVT file.
struct TraceFile {
    GenerationTrace trace;
    std::optional<LensHead> head;
};

namespace detail {

inline constexpr std::array<char, 4> kMagic = {'K', 'E', 'V', 'T'};
inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::uint64_t kPreambleBytes = 16;
inline constexpr std::uint64_t kSectionAlignment = 64;

inline void check_finite(std::span<const float> values, const char* section) {
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) {
            throw DataError(std::string("non-finite value in ") + section + " at flat index " +
                            std::to_string(i));
        }
    }
}

inline void check_header(const TraceHeader& h) {
    if (h.num_layers < 1) throw InvalidInputError("trace header: num_layers must be >= 1");
    if (h.hidden_dim < 1) throw InvalidInputError("trace header: hidden_dim must be >= 1");
    if (h.vocab_size < 2) throw InvalidInputError("trace header: vocab_size must be >= 2");
    if (h.num_positions < 1) throw InvalidInputError("trace header: num_positions must be >= 1");
    if (h.token_ids.size() != h.num_positions) {
        throw InvalidInputError("trace header: token_ids has " + std::to_string(h.token_ids.size()) +
                                " entries for " + std::to_string(h.num_positions) + " positions");
    }
    for (std::size_t p = 0; p < h.token_ids.size(); ++p) {
        if (h.token_ids[p] >= h.vocab_size) {
            throw InvalidInputError("trace header: token_ids[" + std::to_string(p) + "] = " +
                                    std::to_string(h.token_ids[p]) + " is outside the vocabulary");
        }
    }
    if (!h.token_strings.empty() && h.token_strings.size() != h.num_positions) {
        throw InvalidInputError("trace header: token_strings length does not match num_positions");
    }
}

inline void check_head(const LensHead& head, const TraceHeader& h) {
    if (head.norm_scale.size() != h.hidden_dim) {
        throw InvalidInputError("lens head: norm scale has " + std::to_string(head.norm_scale.size()) +
                                " entries, expected " + std::to_string(h.hidden_dim));
    }
    if (!head.norm_bias.empty() && head.norm_bias.size() != h.hidden_dim) {
        throw InvalidInputError("lens head: norm bias length does not match hidden_dim");
    }
    if (head.unembed.size() != std::size_t{h.vocab_size} * h.hidden_dim) {
        throw InvalidInputError("lens head: unembed is not [vocab_size][hidden_dim]");
    }
    check_finite(head.norm_scale, "norm_scale");
    check_finite(head.norm_bias, "norm_bias");
    check_finite(head.unembed, "unembed");
}

inline nlohmann::json section_json(const Section& s) { return {{"offset", s.offset}, {"bytes", s.bytes}}; }

inline nlohmann::json header_json(const TraceHeader& h) {
    nlohmann::json j;
    j["format_version"] = h.format_version;
    j["model_name"] = h.model_name;
    j["num_layers"] = h.num_layers;
    j["hidden_dim"] = h.hidden_dim;
    j["vocab_size"] = h.vocab_size;
    j["num_positions"] = h.num_positions;
    j["token_ids"] = h.token_ids;
    j["token_strings"] = h.token_strings.empty() ? nlohmann::json(nullptr) : nlohmann::json(h.token_strings);
    j["has_head"] = h.has_head;
    j["norm_kind"] = to_string(h.norm_kind);
    j["norm_eps"] = h.norm_eps;
    j["has_norm_bias"] = h.has_norm_bias;
    nlohmann::json sections;
    sections["hidden"] = section_json(h.hidden_section);
    if (h.has_head) {
        sections["norm_scale"] = section_json(h.norm_scale_section);
        if (h.has_norm_bias) sections["norm_bias"] = section_json(h.norm_bias_section);
        sections["unembed"] = section_json(h.unembed_section);
    }
    j["sections"] = std::move(sections);
    return j;
}

inline Section parse_section(const nlohmann::json& sections, const char* name) {
    if (!sections.contains(name)) throw FormatError(std::string("header lacks section '") + name + "'");
    const auto& s = sections.at(name);
    return Section{s.at("offset").get<std::uint64_t>(), s.at("bytes").get<std::uint64_t>()};
}

inline TraceHeader parse_header(const nlohmann::json& j) {
    TraceHeader h;
    try {
        h.format_version = j.at("format_version").get<std::uint32_t>();
        h.model_name = j.at("model_name").get<std::string>();
        h.num_layers = j.at("num_layers").get<std::uint32_t>();
        h.hidden_dim = j.at("hidden_dim").get<std::uint32_t>();
        h.vocab_size = j.at("vocab_size").get<std::uint32_t>();
        h.num_positions = j.at("num_positions").get<std::uint32_t>();
        h.token_ids = j.at("token_ids").get<std::vector<std::uint32_t>>();
        if (j.contains("token_strings") && !j.at("token_strings").is_null()) {
            h.token_strings = j.at("token_strings").get<std::vector<std::string>>();
        }
        h.has_head = j.at("has_head").get<bool>();
        h.norm_kind = parse_norm_kind(j.at("norm_kind").get<std::string>());
        h.norm_eps = j.at("norm_eps").get<double>();
        h.has_norm_bias = j.at("has_norm_bias").get<bool>();
        const auto& sections = j.at("sections");
        h.hidden_section = parse_section(sections, "hidden");
        if (h.has_head) {
            h.norm_scale_section = parse_section(sections, "norm_scale");
            if (h.has_norm_bias) h.norm_bias_section = parse_section(sections, "norm_bias");
            h.unembed_section = parse_section(sections, "unembed");
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed KEVT header: ") + e.what());
    }
    return h;
}

inline std::uint64_t align_up(std::uint64_t n, std::uint64_t a) { return (n + a - 1) / a * a; }

/// Assigns contiguous tensor sections starting at `start`; returns the end.
inline std::uint64_t layout_sections(TraceHeader& h, std::uint64_t start) {
    const std::uint64_t d = h.hidden_dim;
    std::uint64_t cursor = start;
    auto place = [&cursor](Section& s, std::uint64_t floats) {
        s = Section{cursor, floats * 4};
        cursor += s.bytes;
    };
    place(h.hidden_section, std::uint64_t{h.num_positions} * h.lens_states() * d);
    h.norm_scale_section = {};
    h.norm_bias_section = {};
    h.unembed_section = {};
    if (h.has_head) {
        place(h.norm_scale_section, d);
        if (h.has_norm_bias) place(h.norm_bias_section, d);
        place(h.unembed_section, std::uint64_t{h.vocab_size} * d);
    }
    return cursor;
}

/// Header JSON padded with spaces so the first tensor section starts on a
/// 64-byte boundary. Offsets inside the JSON depend on its own length, so the
/// layout is iterated until it is self-consistent.
inline std::string encode_header(TraceHeader& h) {
    std::uint64_t start = align_up(kPreambleBytes, kSectionAlignment);
    for (int attempt = 0; attempt < 8; ++attempt) {
        layout_sections(h, start);
        std::string text = header_json(h).dump();
        const std::uint64_t needed = align_up(kPreambleBytes + text.size(), kSectionAlignment);
        if (needed == start) {
            text.append(start - kPreambleBytes - text.size(), ' ');
            return text;
        }
        start = needed;
    }
    throw Error("KEVT header layout did not converge");
}

template <typename T>
void put_le(std::string& out, T value) {
    char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    out.append(bytes, sizeof(T));
}

inline void append_floats(std::string& out, std::span<const float> values) {
    out.append(reinterpret_cast<const char*>(values.data()), values.size_bytes());
}

}  // namespace detail

/// Serializes a trace (and optionally its head) as KEVT v1. The header's
/// head-related fields and section offsets are derived from the arguments.
/// Returns the encoded bytes.
[[nodiscard]] inline std::string encode_trace(const GenerationTrace& trace, const LensHead* head = nullptr) {
    TraceHeader h = trace.header;
    h.format_version = detail::kVersion;
    detail::check_header(h);
    h.has_head = head != nullptr;
    if (head) {
        detail::check_head(*head, h);
        h.norm_kind = head->norm_kind;
        h.norm_eps = head->norm_eps;
        h.has_norm_bias = !head->norm_bias.empty();
    } else {
        h.has_norm_bias = false;
    }
    const std::size_t expected = std::size_t{h.num_positions} * h.lens_states() * h.hidden_dim;
    if (trace.hidden.size() != expected) {
        throw InvalidInputError("trace hidden tensor has " + std::to_string(trace.hidden.size()) +
                                " values, header implies " + std::to_string(expected));
    }
    detail::check_finite(trace.hidden, "hidden");

    const std::string header_text = detail::encode_header(h);
    std::string out;
    out.reserve(h.has_head ? h.unembed_section.offset + h.unembed_section.bytes
                           : h.hidden_section.offset + h.hidden_section.bytes);
    out.append(detail::kMagic.data(), detail::kMagic.size());
    detail::put_le<std::uint32_t>(out, detail::kVersion);
    detail::put_le<std::uint64_t>(out, header_text.size());
    out += header_text;
    detail::append_floats(out, trace.hidden);
    if (head) {
        detail::append_floats(out, head->norm_scale);
        detail::append_floats(out, head->norm_bias);
        detail::append_floats(out, head->unembed);
    }
    return out;
}

/// Writes the KEVT encoding to `sink` and returns the byte count.
inline std::uint64_t write_trace(const GenerationTrace& trace, const LensHead* head, std::ostream& sink) {
    const std::string bytes = encode_trace(trace, head);
    sink.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    sink.flush();
    if (!sink) throw IoError("failed to write KEVT trace to sink");
    return bytes.size();
}

inline std::uint64_t write_trace(const GenerationTrace& trace, const std::optional<LensHead>& head,
                                 std::ostream& sink) {
    return write_trace(trace, head ? &*head : nullptr, sink);
}

/// Parses and validates a complete KEVT byte image. Either a fully valid
/// trace is returned or an error is thrown.
[[nodiscard]] inline TraceFile decode_trace(std::span<const char> bytes) {
    if (bytes.size() < detail::kPreambleBytes) {
        if (bytes.size() >= 4 && !std::equal(detail::kMagic.begin(), detail::kMagic.end(), bytes.begin())) {
            throw FormatError("bad magic: not a KEVT file");
        }
        throw CorruptionError("truncated preamble: expected " + std::to_string(detail::kPreambleBytes) +
                              " bytes, got " + std::to_string(bytes.size()));
    }
    if (!std::equal(detail::kMagic.begin(), detail::kMagic.end(), bytes.begin())) {
        throw FormatError("bad magic: not a KEVT file");
    }
    std::uint32_t version = 0;
    std::uint64_t header_len = 0;
    std::memcpy(&version, bytes.data() + 4, 4);
    std::memcpy(&header_len, bytes.data() + 8, 8);
    if (version != detail::kVersion) {
        throw FormatError("unsupported KEVT version " + std::to_string(version));
    }
    if (header_len > bytes.size() - detail::kPreambleBytes) {
        throw CorruptionError("truncated header: expected " + std::to_string(detail::kPreambleBytes + header_len) +
                              " bytes in file, got " + std::to_string(bytes.size()));
    }
    nlohmann::json json;
    try {
        json = nlohmann::json::parse(bytes.begin() + detail::kPreambleBytes,
                                     bytes.begin() + static_cast<std::ptrdiff_t>(detail::kPreambleBytes + header_len));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("KEVT header is not valid JSON: ") + e.what());
    }
    TraceHeader h = detail::parse_header(json);
    if (h.format_version != detail::kVersion) {
        throw FormatError("header format_version " + std::to_string(h.format_version) + " is not 1");
    }
    try {
        detail::check_header(h);
    } catch (const InvalidInputError& e) {
        throw FormatError(e.what());
    }

    // Sections must sit in order after the header and match the declared shapes.
    const std::uint64_t d = h.hidden_dim;
    struct Expected {
        const char* name;
        const Section* section;
        std::uint64_t floats;
    };
    std::vector<Expected> layout = {{"hidden", &h.hidden_section, std::uint64_t{h.num_positions} * h.lens_states() * d}};
    if (h.has_head) {
        layout.push_back({"norm_scale", &h.norm_scale_section, d});
        if (h.has_norm_bias) layout.push_back({"norm_bias", &h.norm_bias_section, d});
        layout.push_back({"unembed", &h.unembed_section, std::uint64_t{h.vocab_size} * d});
    }
    std::uint64_t cursor = detail::kPreambleBytes + header_len;
    for (const auto& e : layout) {
        if (e.section->bytes != e.floats * 4) {
            throw FormatError(std::string("section ") + e.name + " declares " + std::to_string(e.section->bytes) +
                              " bytes, shape implies " + std::to_string(e.floats * 4));
        }
        if (e.section->offset < cursor) {
            throw FormatError(std::string("section ") + e.name + " overlaps the preceding data");
        }
        cursor = e.section->offset + e.section->bytes;
        if (cursor > bytes.size()) {
            throw CorruptionError(std::string("truncated ") + e.name + " section: expected " +
                                  std::to_string(cursor) + " bytes in file, got " + std::to_string(bytes.size()));
        }
    }

    auto read_floats = [&bytes](const Section& s) {
        std::vector<float> v(s.bytes / 4);
        std::memcpy(v.data(), bytes.data() + s.offset, s.bytes);
        return v;
    };

    TraceFile file;
    file.trace.header = h;
    file.trace.hidden = read_floats(h.hidden_section);
    {
        const std::size_t states = h.lens_states();
        for (std::size_t i = 0; i < file.trace.hidden.size(); ++i) {
            if (!std::isfinite(file.trace.hidden[i])) {
                const std::size_t k = i % d;
                const std::size_t j = (i / d) % states;
                const std::size_t p = i / (d * states);
                throw DataError("non-finite hidden value at flat index " + std::to_string(i) + " (position " +
                                std::to_string(p) + ", state " + std::to_string(j) + ", dim " +
                                std::to_string(k) + ")");
            }
        }
    }
    if (h.has_head) {
        LensHead head;
        head.norm_kind = h.norm_kind;
        head.norm_eps = h.norm_eps;
        head.norm_scale = read_floats(h.norm_scale_section);
        if (h.has_norm_bias) head.norm_bias = read_floats(h.norm_bias_section);
        head.unembed = read_floats(h.unembed_section);
        detail::check_finite(head.norm_scale, "norm_scale");
        detail::check_finite(head.norm_bias, "norm_bias");
        detail::check_finite(head.unembed, "unembed");
        file.head = std::move(head);
    }
    return file;
}

[[nodiscard]] inline TraceFile read_trace(std::istream& source) {
    std::string bytes((std::istreambuf_iterator<char>(source)), std::istreambuf_iterator<char>());
    if (source.bad()) throw IoError("failed to read KEVT trace from stream");
    return decode_trace(bytes);
}

namespace detail {

/// Applies the head's final normalization to `x` in double precision.
inline std::vector<double> normalize(const LensHead& head, std::span<const float> x) {
    const std::size_t d = x.size();
    std::vector<double> out(x.begin(), x.end());
    if (head.norm_kind == NormKind::none) return out;
    if (head.norm_kind == NormKind::rms) {
        double ms = 0.0;
        for (double v : out) ms += v * v;
        ms /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(ms + head.norm_eps);
        for (std::size_t i = 0; i < d; ++i) out[i] = out[i] * inv * head.norm_scale[i];
    } else {
        double mean = 0.0;
        for (double v : out) mean += v;
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (double v : out) var += (v - mean) * (v - mean);
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + head.norm_eps);
        for (std::size_t i = 0; i < d; ++i) out[i] = (out[i] - mean) * inv * head.norm_scale[i];
    }
    if (!head.norm_bias.empty()) {
        for (std::size_t i = 0; i < d; ++i) out[i] += head.norm_bias[i];
    }
    return out;
}

}  // namespace detail

/// Lens logits for one residual-stream state. With `apply_norm` the head's
/// final normalization runs first.
[[nodiscard]] inline std::vector<double> lens_logits(const LensHead& head, std::span<const float> state,
                                                     bool apply_norm = true) {
    if (state.size() != head.dim()) {
        throw DimensionError("lens head expects states of dimension " + std::to_string(head.dim()) + ", got " +
                             std::to_string(state.size()));
    }
    const std::vector<double> x =
        apply_norm ? detail::normalize(head, state) : std::vector<double>(state.begin(), state.end());
    const std::size_t vocab = head.vocab_size();
    std::vector<double> logits(vocab);
    for (std::size_t t = 0; t < vocab; ++t) {
        const float* row = head.unembed.data() + t * x.size();
        double acc = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) acc += static_cast<double>(row[i]) * x[i];
        logits[t] = acc;
    }
    return logits;
}

[[nodiscard]] inline ProbabilityDistribution lens_distribution(const LensHead& head, std::span<const float> state,
                                                               bool apply_norm = true) {
    return softmax(lens_logits(head, state, apply_norm));
}

/// Vocabulary distribution read out of state `layer` (0..L) at `position`.
[[nodiscard]] inline ProbabilityDistribution lens_project(const GenerationTrace& trace, const LensHead* head,
                                                          std::size_t layer, std::size_t position,
                                                          bool apply_norm = true) {
    if (head == nullptr) {
        throw MissingHeadError("trace has no lens head; re-export with the head section or supply one");
    }
    if (layer > trace.header.num_layers) {
        throw BoundsError("lens state " + std::to_string(layer) + " out of range [0, " +
                          std::to_string(trace.header.num_layers) + "]");
    }
    if (position >= trace.header.num_positions) {
        throw BoundsError("position " + std::to_string(position) + " out of range [0, " +
                          std::to_string(trace.header.num_positions) + ")");
    }
    if (head->vocab_size() != trace.header.vocab_size || head->dim() != trace.header.hidden_dim) {
        throw DimensionError("lens head shape does not match the trace header");
    }
    return lens_distribution(*head, trace.state(position, layer), apply_norm);
}

[[nodiscard]] inline ProbabilityDistribution lens_project(const GenerationTrace& trace, const LensHead& head,
                                                          std::size_t layer, std::size_t position,
                                                          bool apply_norm = true) {
    return lens_project(trace, &head, layer, position, apply_norm);
}

[[nodiscard]] inline ProbabilityDistribution lens_project(const TraceFile& file, std::size_t layer,
                                                          std::size_t position, bool apply_norm = true) {
    return lens_project(file.trace, file.head ? &*file.head : nullptr, layer, position, apply_norm);
}

/// All L+1 lens distributions at one position.
[[nodiscard]] inline std::vector<ProbabilityDistribution> lens_stack(const GenerationTrace& trace,
                                                                     const LensHead& head, std::size_t position,
                                                                     bool apply_norm = true) {
    std::vector<ProbabilityDistribution> out;
    out.reserve(trace.header.lens_states());
    for (std::size_t j = 0; j <= trace.header.num_layers; ++j) {
        out.push_back(lens_project(trace, head, j, position, apply_norm));
    }
    return out;
}

}  // namespace kevo
