/*
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

/// @file config.hpp
/// @brief Experiment configuration in a line-oriented `key = value` format.
///
/// Blank lines and text after '#' are ignored. Lists are comma separated
/// (`dilations = 2, 4`), booleans are `true` / `false`. Every key is
/// optional; see dump_config() for the full list with defaults.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "aadi/head.hpp"
#include "aadi/io/synthetic.hpp"
#include "aadi/pipeline.hpp"

namespace aadi {

struct ExperimentConfig {
    std::uint64_t seed = 1;
    PipelineConfig pipeline;
    LossConfig loss;
    SceneConfig scenes;
    int mid_channels = 64;
    double init_std = 0.01;
    double learning_rate = 0.05;
    double momentum = 0.0;
    int iterations = 500;
    int train_scenes = 64;
    int eval_scenes = 16;
    int em_every = 50;
    int render_max_boxes = 50;
    std::string output_dir = "out";
};

/// Raised for any problem in a config file; the message starts with
/// "<source>:<line>: ".
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

inline double parse_double(const std::string& v) {
    double out = 0.0;
    const auto* end = v.data() + v.size();
    const auto [ptr, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || ptr != end) throw std::invalid_argument("expected a number, got '" + v + "'");
    return out;
}

template <typename Int>
Int parse_int(const std::string& v) {
    Int out = 0;
    const auto* end = v.data() + v.size();
    const auto [ptr, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || ptr != end) throw std::invalid_argument("expected an integer, got '" + v + "'");
    return out;
}

inline bool parse_bool(const std::string& v) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw std::invalid_argument("expected true or false, got '" + v + "'");
}

inline std::vector<int> parse_int_list(const std::string& v) {
    std::vector<int> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_int<int>(trim(item)));
    if (out.empty()) throw std::invalid_argument("expected a non-empty list");
    return out;
}

inline std::string format_double(double v) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

inline std::string format_int_list(const std::vector<int>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(v[i]);
    }
    return out;
}

struct ConfigField {
    std::string_view key;
    std::function<void(ExperimentConfig&, const std::string&)> set;
    std::function<std::string(const ExperimentConfig&)> get;
};

inline void require(bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(what);
}

// clang-format off
inline const std::vector<ConfigField>& config_fields() {
    using C = ExperimentConfig;
    static const std::vector<ConfigField> fields = {
        {"seed", [](C& c, const std::string& v) { c.seed = parse_int<std::uint64_t>(v); },
                 [](const C& c) { return std::to_string(c.seed); }},
        // pipeline
        {"kernel_h", [](C& c, const std::string& v) { c.pipeline.kernel_h = parse_int<int>(v); require(c.pipeline.kernel_h >= 1 && c.pipeline.kernel_h % 2 == 1, "kernel_h must be odd and >= 1"); },
                     [](const C& c) { return std::to_string(c.pipeline.kernel_h); }},
        {"kernel_w", [](C& c, const std::string& v) { c.pipeline.kernel_w = parse_int<int>(v); require(c.pipeline.kernel_w >= 1 && c.pipeline.kernel_w % 2 == 1, "kernel_w must be odd and >= 1"); },
                     [](const C& c) { return std::to_string(c.pipeline.kernel_w); }},
        {"dilations", [](C& c, const std::string& v) { c.pipeline.dilations = parse_int_list(v); for (int d : c.pipeline.dilations) require(d >= 1, "dilations must be >= 1"); },
                      [](const C& c) { return format_int_list(c.pipeline.dilations); }},
        {"pre_nms_top_k", [](C& c, const std::string& v) { c.pipeline.pre_nms_top_k = parse_int<std::size_t>(v); require(c.pipeline.pre_nms_top_k > 0, "pre_nms_top_k must be > 0"); },
                          [](const C& c) { return std::to_string(c.pipeline.pre_nms_top_k); }},
        {"augment_nms_iou", [](C& c, const std::string& v) { c.pipeline.augment_nms_iou = parse_double(v); require(c.pipeline.augment_nms_iou >= 0 && c.pipeline.augment_nms_iou <= 1, "augment_nms_iou must be in [0, 1]"); },
                            [](const C& c) { return format_double(c.pipeline.augment_nms_iou); }},
        {"post_nms_keep", [](C& c, const std::string& v) { c.pipeline.post_nms_keep = parse_int<std::size_t>(v); require(c.pipeline.post_nms_keep > 0, "post_nms_keep must be > 0"); },
                          [](const C& c) { return std::to_string(c.pipeline.post_nms_keep); }},
        {"single_stage_selection", [](C& c, const std::string& v) { c.pipeline.single_stage_selection = parse_bool(v); },
                                   [](const C& c) { return std::string(c.pipeline.single_stage_selection ? "true" : "false"); }},
        {"final_nms_iou", [](C& c, const std::string& v) { c.pipeline.final_nms_iou = parse_double(v); require(c.pipeline.final_nms_iou >= 0 && c.pipeline.final_nms_iou <= 1, "final_nms_iou must be in [0, 1]"); },
                          [](const C& c) { return format_double(c.pipeline.final_nms_iou); }},
        {"single_stage_final_nms_iou", [](C& c, const std::string& v) { c.pipeline.single_stage_final_nms_iou = parse_double(v); require(c.pipeline.single_stage_final_nms_iou >= 0 && c.pipeline.single_stage_final_nms_iou <= 1, "single_stage_final_nms_iou must be in [0, 1]"); },
                                       [](const C& c) { return format_double(c.pipeline.single_stage_final_nms_iou); }},
        {"final_keep", [](C& c, const std::string& v) { c.pipeline.final_keep = parse_int<std::size_t>(v); require(c.pipeline.final_keep > 0, "final_keep must be > 0"); },
                       [](const C& c) { return std::to_string(c.pipeline.final_keep); }},
        {"pos_iou", [](C& c, const std::string& v) { c.pipeline.pos_iou = parse_double(v); require(c.pipeline.pos_iou > 0 && c.pipeline.pos_iou <= 1, "pos_iou must be in (0, 1]"); },
                    [](const C& c) { return format_double(c.pipeline.pos_iou); }},
        {"neg_iou", [](C& c, const std::string& v) { c.pipeline.neg_iou = parse_double(v); require(c.pipeline.neg_iou > 0 && c.pipeline.neg_iou < 1, "neg_iou must be in (0, 1)"); },
                    [](const C& c) { return format_double(c.pipeline.neg_iou); }},
        {"batch_size", [](C& c, const std::string& v) { c.pipeline.batch_size = parse_int<std::size_t>(v); require(c.pipeline.batch_size > 0, "batch_size must be > 0"); },
                       [](const C& c) { return std::to_string(c.pipeline.batch_size); }},
        {"positive_fraction", [](C& c, const std::string& v) { c.pipeline.positive_fraction = parse_double(v); require(c.pipeline.positive_fraction > 0 && c.pipeline.positive_fraction <= 1, "positive_fraction must be in (0, 1]"); },
                              [](const C& c) { return format_double(c.pipeline.positive_fraction); }},
        {"positive_filter_nms_iou", [](C& c, const std::string& v) { c.pipeline.positive_filter_nms_iou = parse_double(v); require(c.pipeline.positive_filter_nms_iou >= 0 && c.pipeline.positive_filter_nms_iou <= 1, "positive_filter_nms_iou must be in [0, 1]"); },
                                    [](const C& c) { return format_double(c.pipeline.positive_filter_nms_iou); }},
        {"anchor_guided", [](C& c, const std::string& v) { c.pipeline.anchor_guided = parse_bool(v); },
                          [](const C& c) { return std::string(c.pipeline.anchor_guided ? "true" : "false"); }},
        // head and loss
        {"mid_channels", [](C& c, const std::string& v) { c.mid_channels = parse_int<int>(v); require(c.mid_channels >= 1, "mid_channels must be >= 1"); },
                         [](const C& c) { return std::to_string(c.mid_channels); }},
        {"init_std", [](C& c, const std::string& v) { c.init_std = parse_double(v); require(c.init_std >= 0, "init_std must be >= 0"); },
                     [](const C& c) { return format_double(c.init_std); }},
        {"lambda", [](C& c, const std::string& v) { c.loss.lambda = parse_double(v); require(c.loss.lambda > 0, "lambda must be > 0"); },
                   [](const C& c) { return format_double(c.loss.lambda); }},
        {"smooth_l1_beta", [](C& c, const std::string& v) { c.loss.smooth_l1_beta = parse_double(v); require(c.loss.smooth_l1_beta >= 0, "smooth_l1_beta must be >= 0"); },
                           [](const C& c) { return format_double(c.loss.smooth_l1_beta); }},
        // training
        {"learning_rate", [](C& c, const std::string& v) { c.learning_rate = parse_double(v); require(c.learning_rate >= 0, "learning_rate must be >= 0"); },
                          [](const C& c) { return format_double(c.learning_rate); }},
        {"momentum", [](C& c, const std::string& v) { c.momentum = parse_double(v); require(c.momentum >= 0 && c.momentum < 1, "momentum must be in [0, 1)"); },
                     [](const C& c) { return format_double(c.momentum); }},
        {"iterations", [](C& c, const std::string& v) { c.iterations = parse_int<int>(v); require(c.iterations >= 0, "iterations must be >= 0"); },
                       [](const C& c) { return std::to_string(c.iterations); }},
        {"train_scenes", [](C& c, const std::string& v) { c.train_scenes = parse_int<int>(v); require(c.train_scenes >= 1, "train_scenes must be >= 1"); },
                         [](const C& c) { return std::to_string(c.train_scenes); }},
        {"eval_scenes", [](C& c, const std::string& v) { c.eval_scenes = parse_int<int>(v); require(c.eval_scenes >= 1, "eval_scenes must be >= 1"); },
                        [](const C& c) { return std::to_string(c.eval_scenes); }},
        {"em_every", [](C& c, const std::string& v) { c.em_every = parse_int<int>(v); require(c.em_every >= 1, "em_every must be >= 1"); },
                     [](const C& c) { return std::to_string(c.em_every); }},
        // synthetic scenes
        {"image_width", [](C& c, const std::string& v) { c.scenes.image_width = parse_int<int>(v); require(c.scenes.image_width >= 1, "image_width must be >= 1"); },
                        [](const C& c) { return std::to_string(c.scenes.image_width); }},
        {"image_height", [](C& c, const std::string& v) { c.scenes.image_height = parse_int<int>(v); require(c.scenes.image_height >= 1, "image_height must be >= 1"); },
                         [](const C& c) { return std::to_string(c.scenes.image_height); }},
        {"strides", [](C& c, const std::string& v) { c.scenes.strides = parse_int_list(v); },
                    [](const C& c) { return format_int_list(c.scenes.strides); }},
        {"in_channels", [](C& c, const std::string& v) { c.scenes.in_channels = parse_int<int>(v); require(c.scenes.in_channels >= kBaseFeatureChannels, "in_channels must be >= 5"); },
                        [](const C& c) { return std::to_string(c.scenes.in_channels); }},
        {"min_boxes", [](C& c, const std::string& v) { c.scenes.min_boxes = parse_int<int>(v); require(c.scenes.min_boxes >= 0, "min_boxes must be >= 0"); },
                      [](const C& c) { return std::to_string(c.scenes.min_boxes); }},
        {"max_boxes", [](C& c, const std::string& v) { c.scenes.max_boxes = parse_int<int>(v); require(c.scenes.max_boxes >= 0, "max_boxes must be >= 0"); },
                      [](const C& c) { return std::to_string(c.scenes.max_boxes); }},
        {"min_box_size", [](C& c, const std::string& v) { c.scenes.min_box_size = parse_double(v); require(c.scenes.min_box_size > 0, "min_box_size must be > 0"); },
                         [](const C& c) { return format_double(c.scenes.min_box_size); }},
        {"max_box_size", [](C& c, const std::string& v) { c.scenes.max_box_size = parse_double(v); require(c.scenes.max_box_size > 0, "max_box_size must be > 0"); },
                         [](const C& c) { return format_double(c.scenes.max_box_size); }},
        {"max_aspect", [](C& c, const std::string& v) { c.scenes.max_aspect = parse_double(v); require(c.scenes.max_aspect >= 1, "max_aspect must be >= 1"); },
                       [](const C& c) { return format_double(c.scenes.max_aspect); }},
        {"projection_seed", [](C& c, const std::string& v) { c.scenes.projection_seed = parse_int<std::uint64_t>(v); },
                            [](const C& c) { return std::to_string(c.scenes.projection_seed); }},
        // output
        {"render_max_boxes", [](C& c, const std::string& v) { c.render_max_boxes = parse_int<int>(v); require(c.render_max_boxes >= 0, "render_max_boxes must be >= 0"); },
                             [](const C& c) { return std::to_string(c.render_max_boxes); }},
        {"output_dir", [](C& c, const std::string& v) { c.output_dir = v; },
                       [](const C& c) { return c.output_dir; }},
    };
    return fields;
}
// clang-format on

}  // namespace detail

/// Parses config text. `source` names the input in error messages.
inline ExperimentConfig parse_config(std::string_view text, const std::string& source = "<config>") {
    ExperimentConfig cfg;
    std::map<std::string, int, std::less<>> seen;
    std::istringstream in{std::string(text)};
    std::string raw;
    int line_no = 0;
    auto fail = [&](int line, const std::string& msg) -> ConfigError {
        return ConfigError(source + ":" + std::to_string(line) + ": " + msg);
    };
    while (std::getline(in, raw)) {
        ++line_no;
        std::string_view line = raw;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        const std::string body = detail::trim(line);
        if (body.empty()) continue;
        const auto eq = body.find('=');
        if (eq == std::string::npos) throw fail(line_no, "expected 'key = value'");
        const std::string key = detail::trim(std::string_view(body).substr(0, eq));
        const std::string value = detail::trim(std::string_view(body).substr(eq + 1));
        const auto& fields = detail::config_fields();
        const auto it = std::find_if(fields.begin(), fields.end(), [&](const auto& f) { return f.key == key; });
        if (it == fields.end()) throw fail(line_no, "unknown key '" + key + "'");
        if (seen.contains(key)) throw fail(line_no, "duplicate key '" + key + "' (first set on line " + std::to_string(seen[key]) + ")");
        seen[key] = line_no;
        try {
            it->set(cfg, value);
        } catch (const std::exception& e) {
            throw fail(line_no, key + ": " + e.what());
        }
    }
    // Cross-field constraints, reported at the line of the key that completes the violation.
    auto line_of = [&](std::initializer_list<std::string_view> keys) {
        int best = 0;
        for (auto k : keys) {
            if (auto it = seen.find(k); it != seen.end()) best = std::max(best, it->second);
        }
        return best;
    };
    try {
        cfg.pipeline.validate();
    } catch (const std::exception& e) {
        throw fail(line_of({"pos_iou", "neg_iou", "kernel_h", "kernel_w", "dilations"}), e.what());
    }
    try {
        cfg.scenes.validate();
    } catch (const std::exception& e) {
        throw fail(line_of({"strides", "min_boxes", "max_boxes", "min_box_size", "max_box_size", "in_channels"}), e.what());
    }
    return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(path.string() + ":0: cannot open file");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), path.string());
}

/// Every key with its current value, in a fixed order; parse_config of the
/// result reproduces cfg exactly.
inline std::string dump_config(const ExperimentConfig& cfg) {
    std::string out;
    for (const auto& f : detail::config_fields()) {
        out += f.key;
        out += " = ";
        out += f.get(cfg);
        out += '\n';
    }
    return out;
}

/// FNV-1a 64 of the dumped config, as 16 hex digits.
inline std::string config_digest(const ExperimentConfig& cfg) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char ch : dump_config(cfg)) {
        h ^= ch;
        h *= 0x100000001b3ull;
    }
    static const char* hex = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = hex[h & 0xF];
        h >>= 4;
    }
    return out;
}

inline bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) { return dump_config(a) == dump_config(b); }

}  // namespace aadi
