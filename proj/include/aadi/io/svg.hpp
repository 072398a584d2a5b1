/*
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

/// @file svg.hpp
/// @brief Side-by-side SVG panels of boxes over a scene.
///
/// Each panel is a <g> holding one <rect> per ground truth (class "gt")
/// followed by one <rect> per box (class "box"), in input order. The panel
/// frame is a <path>, so rect counts are exactly gts + boxes.

#include <algorithm>
#include <cstdio>
#include <span>
#include <string>
#include <vector>

#include "aadi/geometry.hpp"

namespace aadi {

struct SvgPanel {
    std::string title;
    std::vector<Box> boxes;
    std::string stroke = "#1f77b4";
};

namespace detail {

inline std::string fmt_num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

inline std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

inline void append_rect(std::string& out, const Box& b, const char* cls, const std::string& stroke) {
    out += "    <rect class=\"";
    out += cls;
    out += "\" x=\"" + fmt_num(b.x1) + "\" y=\"" + fmt_num(b.y1) + "\" width=\"" + fmt_num(std::max(0.0, b.width())) +
           "\" height=\"" + fmt_num(std::max(0.0, b.height())) + "\" fill=\"none\" stroke=\"" + stroke +
           "\" stroke-width=\"1\"/>\n";
}

}  // namespace detail

inline std::string render_svg(int image_width, int image_height, std::span<const Box> gts, std::span<const SvgPanel> panels) {
    constexpr double kGap = 16.0;
    constexpr double kTitle = 20.0;
    const double w = image_width;
    const double h = image_height;
    const double total_w = panels.empty() ? w : panels.size() * w + (panels.size() - 1) * kGap;
    std::string out;
    out += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + detail::fmt_num(total_w) + "\" height=\"" +
           detail::fmt_num(h + kTitle) + "\" viewBox=\"0 0 " + detail::fmt_num(total_w) + " " + detail::fmt_num(h + kTitle) +
           "\">\n";
    for (std::size_t p = 0; p < panels.size(); ++p) {
        const double x0 = p * (w + kGap);
        out += "  <g class=\"panel\" transform=\"translate(" + detail::fmt_num(x0) + "," + detail::fmt_num(kTitle) + ")\">\n";
        out += "    <text x=\"0\" y=\"-6\" font-family=\"sans-serif\" font-size=\"12\">" +
               detail::xml_escape(panels[p].title) + "</text>\n";
        out += "    <path d=\"M0 0 H" + detail::fmt_num(w) + " V" + detail::fmt_num(h) +
               " H0 Z\" fill=\"#f7f7f7\" stroke=\"#888\"/>\n";
        for (const auto& g : gts) detail::append_rect(out, g, "gt", "#2ca02c");
        for (const auto& b : panels[p].boxes) detail::append_rect(out, b, "box", panels[p].stroke);
        out += "  </g>\n";
    }
    out += "</svg>\n";
    return out;
}

}  // namespace aadi
