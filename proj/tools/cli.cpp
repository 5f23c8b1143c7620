#include "cli.hpp"

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "kevo/kevo.hpp"

#ifndef KEVO_VERSION
#define KEVO_VERSION "0.0.0"
#endif

namespace kevo::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Small utilities

std::string fmt_double(double v) { return fmt::format("{}", v); }

std::vector<std::string> split(const std::string& text, char sep) {
    std::vector<std::string> parts;
    std::string cur;
    for (char c : text) {
        if (c == sep) {
            parts.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    parts.push_back(cur);
    return parts;
}

std::uint32_t parse_uint(const std::string& text, const std::string& what) {
    if (text.empty() || !std::all_of(text.begin(), text.end(), [](unsigned char c) { return std::isdigit(c); })) {
        throw UsageError("invalid " + what + " '" + text + "': expected a non-negative integer");
    }
    try {
        const unsigned long v = std::stoul(text);
        if (v > 0xffffffffu) throw std::out_of_range("too large");
        return static_cast<std::uint32_t>(v);
    } catch (const std::exception&) {
        throw UsageError("invalid " + what + " '" + text + "'");
    }
}

std::vector<std::uint32_t> parse_uint_list(const std::string& text, const std::string& what) {
    std::vector<std::uint32_t> out;
    if (text.empty()) return out;
    for (const auto& part : split(text, ',')) out.push_back(parse_uint(part, what));
    return out;
}

std::string join(const std::vector<std::uint32_t>& values) {
    std::string out;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (i) out += ',';
        out += std::to_string(values[i]);
    }
    return out;
}

struct PlanSpec {
    SkipKind kind = SkipKind::none;
    std::vector<std::uint32_t> custom;
};

PlanSpec parse_plan_spec(const std::string& text) {
    if (text == "none") return {SkipKind::none, {}};
    if (text == "skip1") return {SkipKind::skip1, {}};
    if (text == "skip2") return {SkipKind::skip2, {}};
    if (text == "skip3") return {SkipKind::skip3, {}};
    if (text.rfind("custom:", 0) == 0) {
        const std::string list = text.substr(7);
        if (list.empty()) throw UsageError("plan 'custom:' needs a block list, e.g. custom:3,4,5");
        return {SkipKind::custom, parse_uint_list(list, "plan block")};
    }
    throw UsageError("invalid --plan value '" + text + "': expected none, skip1, skip2, skip3 or custom:<blocks>");
}

std::set<std::string> parse_formats(const std::string& text, const std::set<std::string>& allowed) {
    std::set<std::string> out;
    for (const auto& f : split(text, ',')) {
        if (!allowed.count(f)) throw UsageError("unsupported --format '" + f + "'");
        out.insert(f);
    }
    return out;
}

std::string format_list(const std::set<std::string>& formats) {
    std::string out;
    for (const auto& f : formats) {
        if (!out.empty()) out += ',';
        out += f;
    }
    return out;
}

std::string read_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_bytes(const fs::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("cannot write '" + path.string() + "'");
}

TraceFile load_trace(const std::string& path) {
    const std::string bytes = read_bytes(path);
    try {
        return decode_trace(bytes);
    } catch (const Error& e) {
        throw DataError(path + ": " + e.what());
    }
}

/// Outputs of one command plus the manifest that reproduces them.
class RunWriter {
public:
    RunWriter(std::string command, std::string out_dir) : command_(std::move(command)), out_dir_(std::move(out_dir)) {
        if (out_dir_.empty()) throw UsageError("--out-dir is required");
        fs::create_directories(out_dir_);
    }

    void arg(const std::string& flag, const std::string& value) {
        args_.push_back(flag);
        args_.push_back(value);
    }
    void flag(const std::string& flag) { args_.push_back(flag); }
    void positional(const std::string& value) { args_.push_back(value); }
    void input(const std::string& path) { inputs_.push_back({{"path", path}, {"sha256", sha256_file(path)}}); }
    json& parameters() { return parameters_; }

    void emit(const std::string& name, const std::string& bytes) {
        write_bytes(fs::path(out_dir_) / name, bytes);
        outputs_.push_back(name);
    }

    void finish() {
        json m;
        m["manifest_version"] = 1;
        m["tool"] = "kevo";
        m["tool_version"] = KEVO_VERSION;
        m["command"] = command_;
        m["args"] = args_;
        m["parameters"] = parameters_;
        m["inputs"] = inputs_;
        m["outputs"] = outputs_;
        write_bytes(fs::path(out_dir_) / kManifestName, m.dump(2) + "\n");
    }

private:
    std::string command_;
    std::string out_dir_;
    std::vector<std::string> args_;
    json parameters_ = json::object();
    json inputs_ = json::array();
    std::vector<std::string> outputs_;
};

json report_envelope(const std::string& kind) {
    return {{"schema_version", report::kSchemaVersion}, {"kind", kind}, {"tool_version", KEVO_VERSION}};
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

void add_detector_options(CLI::App* app, DetectorParams& p) {
    app->add_option("--epsilon", p.epsilon, "critical-layer JSD threshold (nats)")->capture_default_str();
    app->add_option("--window", p.window, "consecutive low-divergence entries required")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    app->add_option("--mu-abs", p.mu_abs, "absolute mutation threshold (nats)")->capture_default_str();
    app->add_option("--k", p.k, "mutation threshold as a multiple of the post-critical median")->capture_default_str();
}

void record_detector(RunWriter& w, const DetectorParams& p) {
    w.arg("--epsilon", fmt_double(p.epsilon));
    w.arg("--window", std::to_string(p.window));
    w.arg("--mu-abs", fmt_double(p.mu_abs));
    w.arg("--k", fmt_double(p.k));
    w.parameters()["detector"] = report::to_json(p);
}

// ---------------------------------------------------------------------------
// trace-run

struct TraceRunOptions {
    std::uint32_t layers = 16;
    std::uint32_t dim = 64;
    std::uint32_t heads = 4;
    std::uint32_t vocab = 256;
    std::uint32_t max_seq_len = 128;
    std::string norm = "rms";
    std::uint64_t seed = 0;
    std::optional<std::uint32_t> eos;
    std::string prompt;
    std::uint32_t steps = 8;
    std::string plan = "none";
    std::uint32_t keep_last = 5;
    std::optional<std::uint32_t> critical;
    std::string mutations;
    std::uint32_t position = 0;
    bool no_final_norm = false;
    DetectorParams detector;
    std::string out_dir;
    std::string out_name = "trace.kevt";
};

void register_trace_run(CLI::App& app, TraceRunOptions& o) {
    auto* cmd = app.add_subcommand("trace-run", "generate with the built-in engine and write a KEVT trace");
    cmd->add_option("--layers", o.layers, "transformer blocks L")->capture_default_str();
    cmd->add_option("--dim", o.dim, "hidden size d")->capture_default_str();
    cmd->add_option("--heads", o.heads, "attention heads")->capture_default_str();
    cmd->add_option("--vocab", o.vocab, "vocabulary size")->capture_default_str();
    cmd->add_option("--max-seq-len", o.max_seq_len, "maximum sequence length")->capture_default_str();
    cmd->add_option("--norm", o.norm, "normalization")->check(CLI::IsMember({"rms", "layernorm", "none"}))->capture_default_str();
    cmd->add_option("--seed", o.seed, "weight seed")->capture_default_str();
    cmd->add_option("--eos", o.eos, "end-of-sequence token id");
    cmd->add_option("--prompt", o.prompt, "comma-separated prompt token ids")->required();
    cmd->add_option("--steps", o.steps, "tokens to generate")->capture_default_str();
    cmd->add_option("--plan", o.plan, "none | skip1 | skip2 | skip3 | custom:<blocks>")->capture_default_str();
    cmd->add_option("--keep-last", o.keep_last, "final blocks retained by skip3")->capture_default_str();
    cmd->add_option("--critical", o.critical, "critical layer (otherwise detected on a baseline run)");
    cmd->add_option("--mutations", o.mutations, "comma-separated mutation layers (with --critical)");
    cmd->add_option("--position", o.position, "baseline position used for detection")->capture_default_str();
    cmd->add_flag("--no-final-norm", o.no_final_norm, "lens without the final normalization during detection");
    add_detector_options(cmd, o.detector);
    cmd->add_option("--out-dir", o.out_dir, "output directory")->required();
    cmd->add_option("--out-name", o.out_name, "trace file name")->capture_default_str();
}

int run_trace_run(const TraceRunOptions& o, std::ostream& out) {
    const PlanSpec spec = parse_plan_spec(o.plan);
    const std::vector<std::uint32_t> prompt = parse_uint_list(o.prompt, "prompt token");
    if (prompt.empty()) throw UsageError("--prompt must list at least one token id");
    const std::vector<std::uint32_t> mutation_list = parse_uint_list(o.mutations, "mutation layer");
    if (!o.critical && !mutation_list.empty()) throw UsageError("--mutations requires --critical");
    if (o.out_name.empty() || o.out_name.find('/') != std::string::npos) throw UsageError("--out-name must be a plain file name");

    MiniModelConfig config;
    config.num_layers = o.layers;
    config.hidden_dim = o.dim;
    config.num_heads = o.heads;
    config.vocab_size = o.vocab;
    config.max_seq_len = o.max_seq_len;
    config.norm_kind = parse_norm_kind(o.norm);
    config.seed = o.seed;
    config.eos_token = o.eos;
    const Model model(config);

    RunWriter w("trace-run", o.out_dir);
    w.positional("trace-run");
    w.arg("--layers", std::to_string(o.layers));
    w.arg("--dim", std::to_string(o.dim));
    w.arg("--heads", std::to_string(o.heads));
    w.arg("--vocab", std::to_string(o.vocab));
    w.arg("--max-seq-len", std::to_string(o.max_seq_len));
    w.arg("--norm", o.norm);
    w.arg("--seed", std::to_string(o.seed));
    if (o.eos) w.arg("--eos", std::to_string(*o.eos));
    w.arg("--prompt", join(prompt));
    w.arg("--steps", std::to_string(o.steps));
    w.arg("--plan", o.plan);
    w.arg("--keep-last", std::to_string(o.keep_last));
    if (o.critical) w.arg("--critical", std::to_string(*o.critical));
    if (!mutation_list.empty()) w.arg("--mutations", join(mutation_list));
    w.arg("--position", std::to_string(o.position));
    if (o.no_final_norm) w.flag("--no-final-norm");
    record_detector(w, o.detector);
    w.arg("--out-name", o.out_name);

    json& params = w.parameters();
    params["model"] = {{"num_layers", o.layers},      {"hidden_dim", o.dim},   {"num_heads", o.heads},
                       {"vocab_size", o.vocab},        {"max_seq_len", o.max_seq_len},
                       {"norm_kind", o.norm},          {"seed", o.seed},        {"model_name", model.model_name()},
                       {"weight_checksum", fmt::format("{:016x}", model.weight_checksum())},
                       {"eos_token", o.eos ? json(*o.eos) : json(nullptr)}};
    params["prompt"] = prompt;
    params["steps"] = o.steps;
    params["lens"] = {{"apply_norm", !o.no_final_norm}};

    SkipPlan plan;
    json plan_json = {{"requested", o.plan}, {"kind", to_string(spec.kind)}, {"keep_last", o.keep_last},
                      {"boundary_convention", report::kBoundaryConvention}};
    if (spec.kind == SkipKind::custom) {
        plan = make_skip_plan(SkipKind::custom, known_segmentation(o.layers, std::nullopt, {}), o.keep_last, spec.custom);
    } else if (spec.kind != SkipKind::none) {
        StageSegmentation seg;
        if (o.critical) {
            std::vector<std::size_t> muts(mutation_list.begin(), mutation_list.end());
            seg = known_segmentation(o.layers, *o.critical, muts);
            plan_json["segmentation_source"] = "flags";
        } else {
            const GenerationResult baseline = model.generate(prompt, o.steps);
            if (o.position >= baseline.trace.header.num_positions) {
                throw BoundsError("--position " + std::to_string(o.position) + " beyond the baseline's " +
                                  std::to_string(baseline.trace.header.num_positions) + " generated tokens");
            }
            seg = segment_stages(divergence_profile(baseline.trace, &model.head(), o.position, !o.no_final_norm), o.detector);
            plan_json["segmentation_source"] = "baseline";
        }
        plan_json["segmentation"] = report::to_json(seg);
        plan = make_skip_plan(spec.kind, seg, o.keep_last);
    }
    plan_json["blocks"] = plan.blocks();
    params["plan"] = plan_json;

    const GenerationResult result = model.generate(prompt, o.steps, plan);
    params["generated_tokens"] = result.token_ids;
    w.emit(o.out_name, encode_trace(result.trace, &model.head()));
    w.finish();
    out << "wrote " << (fs::path(o.out_dir) / o.out_name).string() << " (" << result.token_ids.size()
        << " positions, plan " << o.plan << " -> [" << join(plan.blocks()) << "])\n";
    return kSuccess;
}

// ---------------------------------------------------------------------------
// lens

struct LensOptions {
    std::string view;
    std::string trace;
    std::string head;
    bool no_final_norm = false;
    std::string position = "all";
    DetectorParams detector;
    double tau = 0.2;
    std::string tokens;
    bool include_pre_critical = false;
    std::string format = "csv,json,svg";
    std::string out_dir;
};

void register_lens(CLI::App& app, LensOptions& o) {
    auto* lens = app.add_subcommand("lens", "per-layer lens analyses of a trace");
    lens->require_subcommand(1);
    for (const char* view : {"trajectory", "profile", "stages", "flips"}) {
        auto* cmd = lens->add_subcommand(view);
        cmd->callback([&o, view] { o.view = view; });
        cmd->add_option("--trace", o.trace, "KEVT trace")->required();
        cmd->add_option("--head", o.head, "KEVT file whose head section supplies the lens head");
        cmd->add_flag("--no-final-norm", o.no_final_norm, "project without the final normalization");
        cmd->add_option("--position", o.position, "all, or comma-separated positions")->capture_default_str();
        add_detector_options(cmd, o.detector);
        cmd->add_option("--tau", o.tau, "probability-view critical threshold")->capture_default_str();
        cmd->add_option("--token", o.tokens, "extra token ids to track (trajectory)");
        cmd->add_flag("--include-pre-critical", o.include_pre_critical, "report flips before the critical layer");
        cmd->add_option("--format", o.format, "comma-separated subset of json,csv,svg")->capture_default_str();
        cmd->add_option("--out-dir", o.out_dir, "output directory")->required();
    }
}

std::vector<std::size_t> select_positions(const std::string& selector, std::size_t K) {
    std::vector<std::size_t> out;
    if (selector == "all") {
        for (std::size_t p = 0; p < K; ++p) out.push_back(p);
        return out;
    }
    for (std::uint32_t p : parse_uint_list(selector, "position")) {
        if (p >= K) throw BoundsError("position " + std::to_string(p) + " out of range [0, " + std::to_string(K) + ")");
        out.push_back(p);
    }
    if (out.empty()) throw UsageError("--position selects nothing");
    return out;
}

LensHead resolve_head(const TraceFile& file, const std::string& trace_path, const std::string& head_path) {
    std::optional<LensHead> head = file.head;
    if (!head_path.empty()) head = load_trace(head_path).head;
    if (!head) {
        throw MissingHeadError(
            (head_path.empty() ? trace_path : head_path) +
            " has no lens head section. Re-export the trace with its head (omit --no-head) or pass --head <kevt file with a head>.");
    }
    if (head->dim() != file.trace.header.hidden_dim || head->vocab_size() != file.trace.header.vocab_size) {
        throw DimensionError("lens head shape does not match " + trace_path);
    }
    return *head;
}

std::string trajectory_svg(const std::vector<TokenTrajectory>& trajs, std::size_t L, const std::string& title) {
    svg::Chart chart(title, "layer", "lens probability", 760, 380);
    chart.set_x_range(0, static_cast<double>(L));
    chart.set_y_range(0, 1);
    chart.set_x_ticks(0, L, L > 40 ? 4 : (L > 20 ? 2 : 1));
    for (std::size_t i = 0; i < trajs.size(); ++i) {
        std::vector<svg::Point> pts;
        for (std::size_t j = 0; j < trajs[i].probs.size(); ++j) pts.push_back({static_cast<double>(j), trajs[i].probs[j]});
        const std::string label = fmt::format("p{} tok {}", trajs[i].position, trajs[i].token_id);
        chart.polyline(pts, svg::series_color(i), "trajectory");
        if (trajs.size() <= 12) chart.legend_entry(label, svg::series_color(i));
    }
    return chart.render();
}

std::string profile_panel(const DivergenceProfile& prof, const StageSegmentation* seg, const std::string& title) {
    const std::size_t L = prof.values.size();
    svg::Chart chart(title, "layer pair (j, j+1)", "JSD (nats)", 760, 240);
    chart.set_x_range(0, static_cast<double>(L));
    double top = 0.0;
    for (double v : prof.values) top = std::max(top, v);
    chart.set_y_range(0, top > 0 ? top * 1.1 : kLn2);
    chart.set_x_ticks(0, L > 0 ? L - 1 : 0, L > 40 ? 4 : (L > 20 ? 2 : 1));
    for (std::size_t j = 0; j < L; ++j) {
        std::string color = "#4c72b0";
        if (seg) {
            if (j < seg->stabilization.begin || !seg->critical_layer) color = "#55a868";
            else if (!seg->mutation.empty() && j >= seg->mutation.begin) color = "#c44e52";
            else color = "#4c72b0";
        }
        chart.bar(static_cast<double>(j) - 0.4 + 0.5, static_cast<double>(j) + 0.4 + 0.5, prof.values[j], color, "jsd");
    }
    if (seg && seg->critical_layer) chart.vertical_rule(static_cast<double>(*seg->critical_layer) + 0.5, "#333333", "critical");
    if (seg) {
        for (std::size_t m : seg->mutation_layers) chart.vertical_rule(static_cast<double>(m) + 0.5, "#c44e52", "mutation");
        chart.legend_entry("rapid evolution", "#55a868");
        chart.legend_entry("stabilization", "#4c72b0");
        chart.legend_entry("mutation", "#c44e52");
    }
    return chart.render();
}

int run_lens(const LensOptions& o, std::ostream& out) {
    const auto formats = parse_formats(o.format, {"json", "csv", "svg"});
    const TraceFile file = load_trace(o.trace);
    const LensHead head = resolve_head(file, o.trace, o.head);
    const GenerationTrace& trace = file.trace;
    const std::size_t L = trace.header.num_layers;
    const std::vector<std::size_t> positions = select_positions(o.position, trace.header.num_positions);
    const std::vector<std::uint32_t> extra_tokens = parse_uint_list(o.tokens, "token id");
    for (std::uint32_t t : extra_tokens) {
        if (t >= trace.header.vocab_size) throw BoundsError("token id " + std::to_string(t) + " outside the vocabulary");
    }
    const bool apply_norm = !o.no_final_norm;

    RunWriter w("lens " + o.view, o.out_dir);
    w.positional("lens");
    w.positional(o.view);
    w.arg("--trace", o.trace);
    w.input(o.trace);
    if (!o.head.empty()) {
        w.arg("--head", o.head);
        w.input(o.head);
    }
    if (o.no_final_norm) w.flag("--no-final-norm");
    w.arg("--position", o.position);
    record_detector(w, o.detector);
    w.arg("--tau", fmt_double(o.tau));
    if (!extra_tokens.empty()) w.arg("--token", join(extra_tokens));
    if (o.include_pre_critical) w.flag("--include-pre-critical");
    w.arg("--format", format_list(formats));
    w.parameters()["lens"] = {{"apply_norm", apply_norm}};
    w.parameters()["tau"] = o.tau;
    w.parameters()["include_pre_critical"] = o.include_pre_critical;
    w.parameters()["positions"] = positions;

    json doc = report_envelope(o.view);
    doc["model_name"] = trace.header.model_name;
    doc["num_layers"] = L;
    doc["lens"] = {{"apply_norm", apply_norm}};

    std::vector<std::vector<double>> columns;
    std::vector<std::string> panels;
    std::vector<TokenTrajectory> emitted;

    for (std::size_t p : positions) {
        const std::vector<ProbabilityDistribution> stack = lens_stack(trace, head, p, apply_norm);
        const std::uint32_t token = trace.header.token_ids[p];
        const std::string title = trace.header.token_strings.empty()
                                      ? fmt::format("position {} (token {})", p, token)
                                      : fmt::format("position {} ({})", p, trace.header.token_strings[p]);
        if (o.view == "trajectory") {
            TokenTrajectory t = token_trajectory(stack, p, token);
            json entry = report::to_json(t);
            entry["emitted"] = true;
            entry["probability_critical_layer"] = report::optional_index(probability_critical_layer(t, o.tau));
            doc["trajectories"].push_back(entry);
            for (std::uint32_t extra : extra_tokens) {
                json e = report::to_json(token_trajectory(stack, p, extra));
                e["emitted"] = extra == token;
                e["probability_critical_layer"] =
                    report::optional_index(probability_critical_layer(token_trajectory(stack, p, extra), o.tau));
                doc["trajectories"].push_back(e);
            }
            columns.push_back(t.probs);
            emitted.push_back(std::move(t));
        } else if (o.view == "profile") {
            const DivergenceProfile prof = divergence_profile(stack, p);
            doc["profiles"].push_back(report::to_json(prof));
            columns.push_back(prof.values);
            panels.push_back(profile_panel(prof, nullptr, title));
        } else if (o.view == "stages") {
            const DivergenceProfile prof = divergence_profile(stack, p);
            const StageSegmentation seg = segment_stages(prof, o.detector);
            json entry = report::to_json(seg);
            entry["probability_critical_layer"] =
                report::optional_index(probability_critical_layer(token_trajectory(stack, p, token), o.tau));
            doc["segmentations"].push_back(entry);
            std::vector<double> codes(L + 1);
            for (std::size_t j = 0; j <= L; ++j) {
                codes[j] = j < seg.rapid_evolution.end ? 0.0 : (j < seg.stabilization.end ? 1.0 : 2.0);
            }
            columns.push_back(codes);
            panels.push_back(profile_panel(prof, &seg, title));
        } else {
            const auto events = dominant_flip_report(stack, p, o.detector, o.include_pre_critical);
            const auto critical = detect_critical_layer(divergence_profile(stack, p), o.detector);
            json entry = {{"position", p}, {"critical_layer", report::optional_index(critical)}, {"events", json::array()}};
            for (const auto& e : events) entry["events"].push_back(report::to_json(e));
            doc["positions"].push_back(entry);
            std::vector<double> dominant(L + 1), top(L + 1);
            for (std::size_t j = 0; j <= L; ++j) {
                dominant[j] = static_cast<double>(stack[j].argmax());
                top[j] = stack[j][stack[j].argmax()];
            }
            columns.push_back(dominant);
            svg::Chart chart(title, "layer", "dominant-token probability", 760, 240);
            chart.set_x_range(0, static_cast<double>(L));
            chart.set_y_range(0, 1);
            chart.set_x_ticks(0, L, L > 40 ? 4 : (L > 20 ? 2 : 1));
            std::vector<svg::Point> pts;
            for (std::size_t j = 0; j <= L; ++j) pts.push_back({static_cast<double>(j), top[j]});
            chart.polyline(pts, "#4c72b0", "dominant");
            for (const auto& e : events) {
                chart.marker({static_cast<double>(e.layer) + 1.0, e.post_prob}, "#c44e52", "flip", 4.0);
            }
            if (critical) chart.vertical_rule(static_cast<double>(*critical), "#333333", "critical");
            panels.push_back(chart.render());
        }
    }
    if (o.view == "stages" || o.view == "flips") {
        doc["detector"] = report::to_json(o.detector);
        doc["boundary_convention"] = report::kBoundaryConvention;
    }
    if (o.view == "stages") doc["tau"] = o.tau;
    if (o.view == "flips") doc["include_pre_critical"] = o.include_pre_critical;
    for (const char* key : {"trajectories", "profiles", "segmentations", "positions"}) {
        if (!doc.contains(key)) {
            const bool owns = (o.view == "trajectory" && std::string(key) == "trajectories") ||
                              (o.view == "profile" && std::string(key) == "profiles") ||
                              (o.view == "stages" && std::string(key) == "segmentations") ||
                              (o.view == "flips" && std::string(key) == "positions");
            if (owns) doc[key] = json::array();
        }
    }

    if (formats.count("json")) w.emit(o.view + ".json", dump(doc));
    if (formats.count("csv")) w.emit(o.view + ".csv", report::layer_position_csv(positions, columns));
    if (formats.count("svg")) {
        const std::string svg_doc = o.view == "trajectory"
                                        ? trajectory_svg(emitted, L, "lens probability of emitted tokens")
                                        : svg::stack(panels, 760, 240);
        w.emit(o.view + ".svg", svg_doc);
    }
    w.finish();
    out << "lens " << o.view << ": " << positions.size() << " positions -> " << o.out_dir << "\n";
    return kSuccess;
}

// ---------------------------------------------------------------------------
// tsne

struct TsneOptions {
    std::vector<std::string> traces;
    std::string mode = "single-image";
    std::size_t out_dim = 2;
    double perplexity = 30.0;
    std::size_t iterations = 1000;
    std::uint64_t seed = 0;
    std::string format = "csv,json,svg";
    std::string out_dir;
};

void register_tsne(CLI::App& app, TsneOptions& o) {
    auto* cmd = app.add_subcommand("tsne", "t-SNE of per-layer feature encodings");
    cmd->add_option("--trace", o.traces, "KEVT trace(s)")->required();
    cmd->add_option("--mode", o.mode, "single-image | cross-image")
        ->check(CLI::IsMember({"single-image", "cross-image"}))
        ->capture_default_str();
    cmd->add_option("--out-dim", o.out_dim, "embedding dimension (1 or 2)")->check(CLI::IsMember({1, 2}))->capture_default_str();
    cmd->add_option("--perplexity", o.perplexity, "target perplexity")->capture_default_str();
    cmd->add_option("--iterations", o.iterations, "gradient-descent iterations")->check(CLI::PositiveNumber)->capture_default_str();
    cmd->add_option("--seed", o.seed, "initialization seed")->capture_default_str();
    cmd->add_option("--format", o.format, "comma-separated subset of json,csv,svg")->capture_default_str();
    cmd->add_option("--out-dir", o.out_dir, "output directory")->required();
}

int run_tsne(const TsneOptions& o, std::ostream& out) {
    const auto formats = parse_formats(o.format, {"json", "csv", "svg"});
    const bool cross = o.mode == "cross-image";
    if (!cross && o.traces.size() != 1) throw UsageError("single-image mode takes exactly one --trace");
    if (cross && o.traces.size() < 2) throw UsageError("cross-image mode needs at least two --trace files");

    std::vector<TraceFile> files;
    for (const auto& path : o.traces) files.push_back(load_trace(path));
    const TraceHeader& ref = files.front().trace.header;
    std::vector<std::string> mismatched, multi_token;
    for (std::size_t i = 0; i < files.size(); ++i) {
        const auto& h = files[i].trace.header;
        if (h.hidden_dim != ref.hidden_dim || h.num_layers != ref.num_layers) mismatched.push_back(o.traces[i]);
        if (h.num_positions != 1) multi_token.push_back(o.traces[i]);
    }
    if (!mismatched.empty()) {
        std::string list;
        for (const auto& m : mismatched) list += (list.empty() ? "" : ", ") + m;
        throw InvalidInputError(fmt::format("traces disagree with {} (L={}, d={}): {}", o.traces.front(), ref.num_layers,
                                            ref.hidden_dim, list));
    }

    // Single image: every generated position x lens state. Cross image: the
    // first generated position of each trace x lens state.
    FeatureMatrix features(ref.hidden_dim);
    const std::size_t states = ref.lens_states();
    if (!cross) {
        const auto& trace = files.front().trace;
        for (std::size_t p = 0; p < trace.header.num_positions; ++p) {
            for (std::size_t j = 0; j < states; ++j) features.add_row(std::span<const float>(trace.state(p, j)), {p, j});
        }
    } else {
        for (std::size_t i = 0; i < files.size(); ++i) {
            for (std::size_t j = 0; j < states; ++j) features.add_row(std::span<const float>(files[i].trace.state(0, j)), {i, j});
        }
    }
    const std::size_t entities = cross ? files.size() : ref.num_positions;

    TsneParams params;
    params.out_dim = o.out_dim;
    params.perplexity = o.perplexity;
    params.iterations = o.iterations;
    params.seed = o.seed;
    const EmbeddingResult emb = tsne_embed(features, params);

    RunWriter w("tsne", o.out_dir);
    w.positional("tsne");
    for (const auto& path : o.traces) {
        w.arg("--trace", path);
        w.input(path);
    }
    w.arg("--mode", o.mode);
    w.arg("--out-dim", std::to_string(o.out_dim));
    w.arg("--perplexity", fmt_double(o.perplexity));
    w.arg("--iterations", std::to_string(o.iterations));
    w.arg("--seed", std::to_string(o.seed));
    w.arg("--format", format_list(formats));
    json tsne_params = {{"out_dim", params.out_dim},
                        {"perplexity", params.perplexity},
                        {"iterations", params.iterations},
                        {"seed", params.seed},
                        {"learning_rate", params.learning_rate},
                        {"exaggeration", params.exaggeration},
                        {"exaggeration_iterations", params.exaggeration_iterations},
                        {"initial_momentum", params.initial_momentum},
                        {"final_momentum", params.final_momentum},
                        {"momentum_switch", params.momentum_switch},
                        {"init_sigma", params.init_sigma}};
    w.parameters()["mode"] = o.mode;
    w.parameters()["tsne"] = tsne_params;

    json doc = report_envelope("tsne");
    doc["mode"] = o.mode;
    doc["params"] = tsne_params;
    doc["rows"] = features.rows();
    doc["entities"] = entities;
    doc["lens_states"] = states;
    doc["initial_kl"] = emb.initial_kl;
    doc["final_kl"] = emb.final_kl;
    doc["multi_token_traces"] = cross ? json(multi_token) : json::array();
    json linearity = json::array();
    for (std::size_t e = 0; e < entities; ++e) {
        FeatureMatrix traj(ref.hidden_dim);
        for (std::size_t j = 0; j < states; ++j) traj.add_row(features.row(e * states + j), {e, j});
        linearity.push_back({{"entity", e}, {"linearity", trajectory_linearity(traj)}});
    }
    doc["trajectory_linearity"] = linearity;
    doc["cluster_spread"] = entities >= 2 ? report::to_json(cluster_spread(features)) : json(nullptr);

    if (formats.count("csv")) w.emit("tsne.csv", report::embedding_csv(emb, features.labels()));
    if (formats.count("json")) w.emit("tsne.json", dump(doc));
    if (formats.count("svg")) {
        double xlo = 0, xhi = 0, ylo = 0, yhi = 0;
        for (std::size_t i = 0; i < emb.n; ++i) {
            const double x = emb.coordinates[i * emb.out_dim];
            const double y = emb.out_dim == 2 ? emb.coordinates[i * emb.out_dim + 1] : 0.0;
            if (i == 0) { xlo = xhi = x; ylo = yhi = y; }
            xlo = std::min(xlo, x); xhi = std::max(xhi, x);
            ylo = std::min(ylo, y); yhi = std::max(yhi, y);
        }
        const bool one_d = emb.out_dim == 1;
        svg::Chart chart(fmt::format("t-SNE of feature encodings ({})", o.mode), one_d ? "layer" : "t-SNE 1",
                         one_d ? "t-SNE 1" : "t-SNE 2", 640, 560);
        const auto pad = [](double lo, double hi) { return hi > lo ? 0.05 * (hi - lo) : 1.0; };
        if (one_d) {
            chart.set_x_range(0, static_cast<double>(states - 1));
            chart.set_y_range(xlo - pad(xlo, xhi), xhi + pad(xlo, xhi));
            chart.set_x_ticks(0, states - 1, states > 40 ? 4 : 2);
        } else {
            chart.set_x_range(xlo - pad(xlo, xhi), xhi + pad(xlo, xhi));
            chart.set_y_range(ylo - pad(ylo, yhi), yhi + pad(ylo, yhi));
        }
        for (std::size_t e = 0; e < entities; ++e) {
            std::vector<svg::Point> pts;
            for (std::size_t j = 0; j < states; ++j) {
                const std::size_t i = e * states + j;
                pts.push_back(one_d ? svg::Point{static_cast<double>(j), emb.coordinates[i]}
                                    : svg::Point{emb.coordinates[i * 2], emb.coordinates[i * 2 + 1]});
            }
            chart.polyline(pts, "#d0d0d0", "path");
        }
        for (std::size_t i = 0; i < emb.n; ++i) {
            const auto& label = features.labels()[i];
            const svg::Point pt = one_d ? svg::Point{static_cast<double>(label.layer), emb.coordinates[i]}
                                        : svg::Point{emb.coordinates[i * 2], emb.coordinates[i * 2 + 1]};
            chart.marker(pt, svg::layer_color(label.layer, states - 1), fmt::format("layer-{}", label.layer), 2.5);
        }
        chart.legend_entry("layer 0", svg::layer_color(0, states - 1));
        chart.legend_entry(fmt::format("layer {}", states - 1), svg::layer_color(states - 1, states - 1));
        w.emit("tsne.svg", chart.render());
    }
    w.finish();
    out << "tsne " << o.mode << ": " << features.rows() << " rows -> " << o.out_dir << "\n";
    return kSuccess;
}

// ---------------------------------------------------------------------------
// compare

struct CompareOptions {
    std::vector<std::string> a;
    std::vector<std::string> b;
    bool no_final_norm = false;
    DetectorParams detector;
    std::string format = "json,svg";
    std::string out_dir;
};

void register_compare(CLI::App& app, CompareOptions& o) {
    auto* cmd = app.add_subcommand("compare", "compare divergence profiles of two trace sets");
    cmd->add_option("--a", o.a, "traces in set A")->required();
    cmd->add_option("--b", o.b, "traces in set B")->required();
    cmd->add_flag("--no-final-norm", o.no_final_norm, "project without the final normalization");
    add_detector_options(cmd, o.detector);
    cmd->add_option("--format", o.format, "comma-separated subset of json,svg")->capture_default_str();
    cmd->add_option("--out-dir", o.out_dir, "output directory")->required();
}

int run_compare(const CompareOptions& o, std::ostream& out) {
    const auto formats = parse_formats(o.format, {"json", "svg"});
    const bool apply_norm = !o.no_final_norm;
    auto profiles_of = [apply_norm](const std::vector<std::string>& paths) {
        std::vector<DivergenceProfile> set;
        for (const auto& path : paths) {
            const TraceFile file = load_trace(path);
            const LensHead head = resolve_head(file, path, "");
            for (auto& p : all_profiles(file.trace, &head, apply_norm)) set.push_back(std::move(p));
        }
        return set;
    };
    const auto set_a = profiles_of(o.a);
    const auto set_b = profiles_of(o.b);
    const ProfileComparison cmp = compare_profiles(set_a, set_b, o.detector);

    RunWriter w("compare", o.out_dir);
    w.positional("compare");
    for (const auto& p : o.a) {
        w.arg("--a", p);
        w.input(p);
    }
    for (const auto& p : o.b) {
        w.arg("--b", p);
        w.input(p);
    }
    if (o.no_final_norm) w.flag("--no-final-norm");
    record_detector(w, o.detector);
    w.arg("--format", format_list(formats));
    w.parameters()["lens"] = {{"apply_norm", apply_norm}};

    json doc = report_envelope("comparison");
    doc["lens"] = {{"apply_norm", apply_norm}};
    doc["comparison"] = report::to_json(cmp);
    doc["sets"] = {{"a", o.a}, {"b", o.b}};
    if (formats.count("json")) w.emit("compare.json", dump(doc));
    if (formats.count("svg")) {
        const std::size_t L = cmp.num_layers;
        svg::Chart chart("mean adjacent-layer JSD: A vs B", "layer pair (j, j+1)", "mean JSD (nats)", 760, 360);
        double top = 0.0;
        for (std::size_t j = 0; j < L; ++j) top = std::max({top, cmp.a.mean[j], cmp.b.mean[j]});
        chart.set_x_range(0, static_cast<double>(L));
        chart.set_y_range(0, top > 0 ? top * 1.1 : kLn2);
        chart.set_x_ticks(0, L > 0 ? L - 1 : 0, L > 40 ? 4 : (L > 20 ? 2 : 1));
        for (std::size_t j = 0; j < L; ++j) {
            const double x = static_cast<double>(j);
            chart.bar(x + 0.1, x + 0.5, cmp.a.mean[j], svg::series_color(0), "series-a");
            chart.bar(x + 0.5, x + 0.9, cmp.b.mean[j], svg::series_color(1), "series-b");
        }
        chart.legend_entry("A", svg::series_color(0));
        chart.legend_entry("B", svg::series_color(1));
        w.emit("compare.svg", chart.render());
    }
    w.finish();
    out << "compare: " << set_a.size() << " vs " << set_b.size() << " profiles -> " << o.out_dir << "\n";
    return kSuccess;
}

// ---------------------------------------------------------------------------

struct RerunOptions {
    std::string manifest;
    std::string out_dir;
};

}  // namespace

std::string sha256_file(const std::string& path) {
    const std::string bytes = read_bytes(path);
    std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest.data(), &len, EVP_sha256(), nullptr) != 1) {
        throw Error("SHA-256 failed for '" + path + "'");
    }
    std::string hex;
    for (unsigned int i = 0; i < len; ++i) hex += fmt::format("{:02x}", digest[i]);
    return hex;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app("kevo: layer-wise knowledge-evolution analysis for transformer traces", "kevo");
    app.set_version_flag("--version", KEVO_VERSION);
    app.require_subcommand(1);

    TraceRunOptions trace_run;
    LensOptions lens;
    TsneOptions tsne;
    CompareOptions compare;
    RerunOptions rerun;
    register_trace_run(app, trace_run);
    register_lens(app, lens);
    register_tsne(app, tsne);
    register_compare(app, compare);
    auto* rerun_cmd = app.add_subcommand("rerun", "re-run the command recorded in a manifest");
    rerun_cmd->add_option("--manifest", rerun.manifest, "manifest.json of an earlier run")->required();
    rerun_cmd->add_option("--out-dir", rerun.out_dir, "output directory")->required();

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kSuccess : kUsageError;
    }

    try {
        if (app.got_subcommand("trace-run")) return run_trace_run(trace_run, out);
        if (app.got_subcommand("lens")) return run_lens(lens, out);
        if (app.got_subcommand("tsne")) return run_tsne(tsne, out);
        if (app.got_subcommand("compare")) return run_compare(compare, out);
        if (app.got_subcommand("rerun")) {
            json m;
            try {
                m = json::parse(read_bytes(rerun.manifest));
            } catch (const json::exception& e) {
                throw DataError("manifest '" + rerun.manifest + "' is not valid JSON: " + e.what());
            }
            for (const auto& input : m.at("inputs")) {
                const std::string path = input.at("path").get<std::string>();
                if (sha256_file(path) != input.at("sha256").get<std::string>()) {
                    throw DataError("input '" + path + "' changed since the manifest was written");
                }
            }
            std::vector<std::string> replay = m.at("args").get<std::vector<std::string>>();
            replay.push_back("--out-dir");
            replay.push_back(rerun.out_dir);
            return run(replay, out, err);
        }
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << "\n";
        return kUsageError;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return kDataError;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kDataError;
    }
    return kUsageError;
}

}  // namespace kevo::cli
