/*
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

/// @file synthetic.hpp
/// @brief Seeded synthetic scenes whose feature pyramid is rendered from the
/// ground truth, standing in for a learned backbone.
///
/// Per cell centre (px, py) on a level of stride s, with g the gt whose box
/// the point is "most inside" (smallest max(|px-cx|/w, |py-cy|/h)):
///   ch0  1 if the point lies inside any gt, else 0
///   ch1  clamp((cx - px) / s, -8, 8) / 4
///   ch2  clamp((cy - py) / s, -8, 8) / 4
///   ch3  ln(w / s) / 2
///   ch4  ln(h / s) / 2
///   ch5+ fixed random linear combinations of ch0..ch4
/// Offsets and sizes are in units of the level's cells, so one set of head
/// weights sees the same signal on every level.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "aadi/geometry.hpp"
#include "aadi/pipeline.hpp"
#include "aadi/random.hpp"
#include "aadi/tensor.hpp"

namespace aadi {

inline constexpr int kBaseFeatureChannels = 5;

struct SceneConfig {
    int image_width = 256;
    int image_height = 256;
    std::vector<int> strides{4, 8, 16, 32};
    int in_channels = 8;
    int min_boxes = 2;
    int max_boxes = 6;
    double min_box_size = 16.0;   // sqrt(area), pixels
    double max_box_size = 160.0;
    double max_aspect = 3.0;      // aspect drawn log-uniformly from [1/max, max]
    std::uint64_t projection_seed = 7;

    void validate() const {
        if (image_width < 1 || image_height < 1) throw std::invalid_argument("image size must be positive");
        if (strides.empty()) throw std::invalid_argument("at least one stride is required");
        for (std::size_t i = 0; i < strides.size(); ++i) {
            if (strides[i] < 1) throw std::invalid_argument("strides must be positive");
            if (i > 0 && strides[i] <= strides[i - 1]) throw std::invalid_argument("strides must strictly increase");
        }
        if (in_channels < kBaseFeatureChannels) throw std::invalid_argument("in_channels must be >= 5");
        if (min_boxes < 0 || max_boxes < min_boxes) throw std::invalid_argument("need 0 <= min_boxes <= max_boxes");
        if (!(min_box_size > 0.0 && max_box_size >= min_box_size)) {
            throw std::invalid_argument("need 0 < min_box_size <= max_box_size");
        }
        if (!(max_aspect >= 1.0)) throw std::invalid_argument("max_aspect must be >= 1");
    }
};

/// Rows of the fixed projection for channels 5 .. in_channels-1.
inline std::vector<double> projection_matrix(const SceneConfig& cfg) {
    Rng rng(cfg.projection_seed);
    const int extra = cfg.in_channels - kBaseFeatureChannels;
    std::vector<double> p(static_cast<std::size_t>(extra) * kBaseFeatureChannels);
    for (auto& v : p) v = rng.normal() / std::sqrt(static_cast<double>(kBaseFeatureChannels));
    return p;
}

inline FeaturePyramid render_features(std::span<const Box> gts, const SceneConfig& cfg) {
    const auto proj = projection_matrix(cfg);
    FeaturePyramid pyr;
    pyr.image_width = cfg.image_width;
    pyr.image_height = cfg.image_height;
    for (int s : cfg.strides) {
        const int H = (cfg.image_height + s - 1) / s;
        const int W = (cfg.image_width + s - 1) / s;
        FeatureMap map(cfg.in_channels, H, W);
        const double sd = s;
        for (int r = 0; r < H; ++r) {
            for (int c = 0; c < W; ++c) {
                if (gts.empty()) continue;
                const double px = (c + 0.5) * sd;
                const double py = (r + 0.5) * sd;
                bool inside = false;
                std::size_t nearest = 0;
                double nearest_d = 0.0;
                for (std::size_t j = 0; j < gts.size(); ++j) {
                    const auto& g = gts[j];
                    if (px >= g.x1 && px <= g.x2 && py >= g.y1 && py <= g.y2) inside = true;
                    const double d = std::max(std::abs(px - g.center_x()) / g.width(), std::abs(py - g.center_y()) / g.height());
                    if (j == 0 || d < nearest_d) {
                        nearest_d = d;
                        nearest = j;
                    }
                }
                const Box& g = gts[nearest];
                std::array<double, kBaseFeatureChannels> base{
                    inside ? 1.0 : 0.0,
                    std::clamp((g.center_x() - px) / sd, -8.0, 8.0) / 4.0,
                    std::clamp((g.center_y() - py) / sd, -8.0, 8.0) / 4.0,
                    std::log(g.width() / sd) / 2.0,
                    std::log(g.height() / sd) / 2.0,
                };
                for (int ch = 0; ch < kBaseFeatureChannels; ++ch) map.at(ch, r, c) = base[static_cast<std::size_t>(ch)];
                for (int k = 0; k < cfg.in_channels - kBaseFeatureChannels; ++k) {
                    double v = 0.0;
                    for (int j = 0; j < kBaseFeatureChannels; ++j) {
                        v += proj[static_cast<std::size_t>(k) * kBaseFeatureChannels + j] * base[static_cast<std::size_t>(j)];
                    }
                    map.at(kBaseFeatureChannels + k, r, c) = v;
                }
            }
        }
        pyr.levels.push_back({std::move(map), s});
    }
    return pyr;
}

inline Scene generate_synthetic_scene(Rng& rng, const SceneConfig& cfg) {
    cfg.validate();
    Scene scene;
    scene.image_width = cfg.image_width;
    scene.image_height = cfg.image_height;
    const auto n = cfg.min_boxes + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.max_boxes - cfg.min_boxes + 1)));
    const double W = cfg.image_width;
    const double H = cfg.image_height;
    for (int i = 0; i < n; ++i) {
        const double size = std::exp(rng.uniform(std::log(cfg.min_box_size), std::log(cfg.max_box_size)));
        const double log_ar = std::log(cfg.max_aspect);
        const double aspect = std::exp(rng.uniform(-log_ar, log_ar));
        const double w = std::min(size * std::sqrt(aspect), W);
        const double h = std::min(size / std::sqrt(aspect), H);
        const double cx = rng.uniform(0.5 * w, W - 0.5 * w);
        const double cy = rng.uniform(0.5 * h, H - 0.5 * h);
        scene.gt_boxes.push_back(clip_to_image(Box::from_center(cx, cy, w, h), cfg.image_width, cfg.image_height));
    }
    scene.crowd.assign(scene.gt_boxes.size(), 0);
    scene.features = render_features(scene.gt_boxes, cfg);
    return scene;
}

/// count scenes from one stream, in order.
inline std::vector<Scene> generate_scenes(Rng& rng, const SceneConfig& cfg, int count) {
    std::vector<Scene> out;
    out.reserve(static_cast<std::size_t>(std::max(count, 0)));
    for (int i = 0; i < count; ++i) out.push_back(generate_synthetic_scene(rng, cfg));
    return out;
}

}  // namespace aadi
