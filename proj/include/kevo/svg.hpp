#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include <fmt/format.h>

namespace kevo::svg {

struct Point {
    double x = 0.0;
    double y = 0.0;
};

/// Escapes the five XML special characters.
inline std::string escape(const std::string& text) {
    std::string out;
    out.reserve(text.size());
    for (char c : text) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            case '\'': out += "&apos;"; break;
            default: out += c;
        }
    }
    return out;
}

/// Categorical palette indexed cyclically.
inline std::string series_color(std::size_t i) {
    static constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                               "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
    return kPalette[i % std::size(kPalette)];
}

/// Shallow layers green, deep layers blue.
inline std::string layer_color(std::size_t layer, std::size_t max_layer) {
    const double t = max_layer == 0 ? 0.0 : static_cast<double>(layer) / static_cast<double>(max_layer);
    const auto lerp = [t](int a, int b) { return static_cast<int>(std::lround(a + (b - a) * t)); };
    return fmt::format("#{:02x}{:02x}{:02x}", lerp(0x4c, 0x1f), lerp(0xaf, 0x3a), lerp(0x50, 0x93));
}

/// A single chart panel with linear axes. Elements are emitted in insertion
/// order and all coordinates are printed with fixed precision so output is
/// byte-stable.
class Chart {
public:
    Chart(std::string title, std::string x_label, std::string y_label, double width = 720, double height = 360)
        : title_(std::move(title)), x_label_(std::move(x_label)), y_label_(std::move(y_label)),
          width_(width), height_(height) {}

    void set_x_range(double lo, double hi) { x_lo_ = lo; x_hi_ = hi; }
    void set_y_range(double lo, double hi) { y_lo_ = lo; y_hi_ = hi; }

    /// Integer ticks on the x axis, labeled with the tick value (layer indices).
    void set_x_ticks(std::size_t first, std::size_t last, std::size_t step = 1) {
        x_ticks_.clear();
        for (std::size_t t = first; t <= last; t += std::max<std::size_t>(step, 1)) x_ticks_.push_back(t);
    }

    void polyline(const std::vector<Point>& points, const std::string& color, const std::string& css_class) {
        std::string pts;
        for (const auto& p : points) {
            if (!pts.empty()) pts += ' ';
            pts += fmt::format("{:.2f},{:.2f}", px(p.x), py(p.y));
        }
        body_ += fmt::format(R"(<polyline class="{}" fill="none" stroke="{}" stroke-width="1.5" points="{}"/>)",
                             escape(css_class), color, pts);
        body_ += '\n';
    }

    void bar(double x0, double x1, double value, const std::string& color, const std::string& css_class) {
        const double top = py(std::max(value, y_lo_));
        const double base = py(y_lo_);
        body_ += fmt::format(R"(<rect class="{}" x="{:.2f}" y="{:.2f}" width="{:.2f}" height="{:.2f}" fill="{}"/>)",
                             escape(css_class), px(x0), top, std::max(px(x1) - px(x0), 0.0), base - top, color);
        body_ += '\n';
    }

    void marker(Point p, const std::string& color, const std::string& css_class, double radius = 3.0) {
        body_ += fmt::format(R"(<circle class="{}" cx="{:.2f}" cy="{:.2f}" r="{:.2f}" fill="{}"/>)",
                             escape(css_class), px(p.x), py(p.y), radius, color);
        body_ += '\n';
    }

    void vertical_rule(double x, const std::string& color, const std::string& css_class) {
        body_ += fmt::format(R"(<line class="{}" x1="{:.2f}" y1="{:.2f}" x2="{:.2f}" y2="{:.2f}" stroke="{}" stroke-dasharray="4 3"/>)",
                             escape(css_class), px(x), py(y_lo_), px(x), py(y_hi_), color);
        body_ += '\n';
    }

    void legend_entry(const std::string& label, const std::string& color) { legend_.emplace_back(label, color); }

    [[nodiscard]] std::string render() const {
        std::string out = fmt::format(
            R"(<svg xmlns="http://www.w3.org/2000/svg" width="{:.0f}" height="{:.0f}" viewBox="0 0 {:.0f} {:.0f}">)",
            width_, height_, width_, height_);
        out += '\n';
        out += fmt::format(R"(<rect x="0" y="0" width="{:.0f}" height="{:.0f}" fill="white"/>)", width_, height_);
        out += '\n';
        out += fmt::format(R"(<text x="{:.2f}" y="20" text-anchor="middle" font-size="14">{}</text>)", width_ / 2,
                           escape(title_));
        out += '\n';
        // axes
        out += fmt::format(R"(<line class="axis" x1="{:.2f}" y1="{:.2f}" x2="{:.2f}" y2="{:.2f}" stroke="black"/>)",
                           left(), bottom(), right(), bottom());
        out += '\n';
        out += fmt::format(R"(<line class="axis" x1="{:.2f}" y1="{:.2f}" x2="{:.2f}" y2="{:.2f}" stroke="black"/>)",
                           left(), top(), left(), bottom());
        out += '\n';
        for (std::size_t t : x_ticks_) {
            const double x = px(static_cast<double>(t));
            out += fmt::format(R"(<text class="xtick" x="{:.2f}" y="{:.2f}" text-anchor="middle" font-size="9">{}</text>)",
                               x, bottom() + 14, t);
            out += '\n';
        }
        for (int i = 0; i <= 4; ++i) {
            const double v = y_lo_ + (y_hi_ - y_lo_) * i / 4.0;
            out += fmt::format(R"(<text class="ytick" x="{:.2f}" y="{:.2f}" text-anchor="end" font-size="9">{:.3g}</text>)",
                               left() - 6, py(v) + 3, v);
            out += '\n';
        }
        out += fmt::format(R"(<text x="{:.2f}" y="{:.2f}" text-anchor="middle" font-size="11">{}</text>)",
                           (left() + right()) / 2, height_ - 8, escape(x_label_));
        out += '\n';
        out += fmt::format(R"svg(<text x="14" y="{:.2f}" text-anchor="middle" font-size="11" transform="rotate(-90 14 {:.2f})">{}</text>)svg",
                           (top() + bottom()) / 2, (top() + bottom()) / 2, escape(y_label_));
        out += '\n';
        out += body_;
        double ly = top() + 4;
        for (const auto& [label, color] : legend_) {
            out += fmt::format(R"(<rect x="{:.2f}" y="{:.2f}" width="10" height="10" fill="{}"/>)", right() + 8, ly, color);
            out += fmt::format(R"(<text x="{:.2f}" y="{:.2f}" font-size="9">{}</text>)", right() + 22, ly + 9,
                               escape(label));
            out += '\n';
            ly += 14;
        }
        out += "</svg>\n";
        return out;
    }

private:
    [[nodiscard]] double left() const { return 56; }
    [[nodiscard]] double right() const { return width_ - (legend_.empty() ? 20 : 110); }
    [[nodiscard]] double top() const { return 32; }
    [[nodiscard]] double bottom() const { return height_ - 36; }
    [[nodiscard]] double px(double x) const {
        const double span = x_hi_ - x_lo_;
        return left() + (span == 0 ? 0.5 : (x - x_lo_) / span) * (right() - left());
    }
    [[nodiscard]] double py(double y) const {
        const double span = y_hi_ - y_lo_;
        return bottom() - (span == 0 ? 0.5 : (y - y_lo_) / span) * (bottom() - top());
    }

    std::string title_, x_label_, y_label_;
    double width_, height_;
    double x_lo_ = 0.0, x_hi_ = 1.0, y_lo_ = 0.0, y_hi_ = 1.0;
    std::vector<std::size_t> x_ticks_;
    std::vector<std::pair<std::string, std::string>> legend_;
    std::string body_;
};

/// Stacks panels vertically into one document.
inline std::string stack(const std::vector<std::string>& panels, double width, double panel_height) {
    std::string out = fmt::format(
        R"(<svg xmlns="http://www.w3.org/2000/svg" width="{:.0f}" height="{:.0f}" viewBox="0 0 {:.0f} {:.0f}">)",
        width, panel_height * static_cast<double>(panels.size()), width,
        panel_height * static_cast<double>(panels.size()));
    out += '\n';
    for (std::size_t i = 0; i < panels.size(); ++i) {
        out += fmt::format(R"svg(<g transform="translate(0 {:.0f})">)svg", panel_height * static_cast<double>(i));
        out += '\n';
        out += panels[i];
        out += "</g>\n";
    }
    out += "</svg>\n";
    return out;
}

}  // namespace kevo::svg
