/*
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

/// @file geometry.hpp
/// @brief Boxes, IoU, discrete anchor families, box deltas and greedy NMS.
///
/// Coordinates are continuous corners (x1, y1, x2, y2) in image pixels with
/// area (x2 - x1) * (y2 - y1); there is no "+1" pixel convention.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace aadi {

struct Box {
    double x1 = 0.0;
    double y1 = 0.0;
    double x2 = 0.0;
    double y2 = 0.0;

    double width() const { return x2 - x1; }
    double height() const { return y2 - y1; }
    double center_x() const { return 0.5 * (x1 + x2); }
    double center_y() const { return 0.5 * (y1 + y2); }
    double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
    bool has_positive_area() const { return x2 > x1 && y2 > y1; }

    static Box from_center(double cx, double cy, double w, double h) {
        return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
    }

    friend bool operator==(const Box&, const Box&) = default;
};

/// Intersection over union; zero for disjoint or degenerate input.
inline double iou(const Box& a, const Box& b) {
    const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    if (iw <= 0.0 || ih <= 0.0) return 0.0;
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

/// A discrete anchor family: an m x n kernel with dilation d on a level of
/// stride s. Scale (in feature cells) and aspect ratio follow directly from
/// the kernel, which is what lets RoI features line up with conv taps.
struct AnchorSpec {
    int kernel_h = 3;
    int kernel_w = 3;
    int dilation = 1;
    int stride = 1;

    void validate() const {
        if (kernel_h < 1 || kernel_w < 1 || dilation < 1 || stride < 1) {
            throw std::invalid_argument("AnchorSpec: kernel, dilation and stride must be >= 1");
        }
    }

    friend bool operator==(const AnchorSpec&, const AnchorSpec&) = default;
};

/// d * sqrt(m * n), in feature cells.
inline double anchor_scale(const AnchorSpec& spec) {
    return spec.dilation * std::sqrt(static_cast<double>(spec.kernel_h) * spec.kernel_w);
}

/// n / m.
inline double anchor_aspect_ratio(const AnchorSpec& spec) {
    return static_cast<double>(spec.kernel_w) / static_cast<double>(spec.kernel_h);
}

struct Anchor {
    Box box;
    int level_index = 0;
    int head_index = 0;
    int cell_row = 0;
    int cell_col = 0;
    AnchorSpec spec;
    bool on_grid = false;
};

/// One anchor per feature cell, row-major. The anchor at (r, c) is centred on
/// the cell centre ((c + 0.5) s, (r + 0.5) s) and spans n*d*s by m*d*s pixels.
inline std::vector<Anchor> generate_anchor_grid(const AnchorSpec& spec, int feature_h, int feature_w,
                                                int level_index = 0, int head_index = 0) {
    spec.validate();
    if (feature_h < 1 || feature_w < 1) {
        throw std::invalid_argument("generate_anchor_grid: feature map must be at least 1x1");
    }
    const double s = spec.stride;
    const double w = static_cast<double>(spec.kernel_w) * spec.dilation * s;
    const double h = static_cast<double>(spec.kernel_h) * spec.dilation * s;
    std::vector<Anchor> anchors;
    anchors.reserve(static_cast<std::size_t>(feature_h) * feature_w);
    for (int r = 0; r < feature_h; ++r) {
        for (int c = 0; c < feature_w; ++c) {
            Anchor a;
            a.box = Box::from_center((c + 0.5) * s, (r + 0.5) * s, w, h);
            a.level_index = level_index;
            a.head_index = head_index;
            a.cell_row = r;
            a.cell_col = c;
            a.spec = spec;
            a.on_grid = true;
            anchors.push_back(a);
        }
    }
    return anchors;
}

struct Delta4 {
    double dx = 0.0;
    double dy = 0.0;
    double dw = 0.0;
    double dh = 0.0;

    friend bool operator==(const Delta4&, const Delta4&) = default;
};

/// Bound on |dw|, |dh| applied before exponentiation in decode_deltas.
inline const double kDeltaClamp = std::log(1000.0 / 16.0);

inline Delta4 encode_deltas(const Box& anchor, const Box& target) {
    if (!anchor.has_positive_area()) throw std::invalid_argument("encode_deltas: anchor has zero area");
    if (!target.has_positive_area()) throw std::invalid_argument("encode_deltas: target has zero area");
    const double aw = anchor.width();
    const double ah = anchor.height();
    return {(target.center_x() - anchor.center_x()) / aw, (target.center_y() - anchor.center_y()) / ah,
            std::log(target.width() / aw), std::log(target.height() / ah)};
}

inline Box decode_deltas(const Box& anchor, const Delta4& delta) {
    const double aw = anchor.width();
    const double ah = anchor.height();
    const double dw = std::clamp(delta.dw, -kDeltaClamp, kDeltaClamp);
    const double dh = std::clamp(delta.dh, -kDeltaClamp, kDeltaClamp);
    const double cx = anchor.center_x() + delta.dx * aw;
    const double cy = anchor.center_y() + delta.dy * ah;
    return Box::from_center(cx, cy, aw * std::exp(dw), ah * std::exp(dh));
}

inline Box clip_to_image(const Box& box, int width, int height) {
    const double w = width;
    const double h = height;
    return {std::clamp(box.x1, 0.0, w), std::clamp(box.y1, 0.0, h), std::clamp(box.x2, 0.0, w),
            std::clamp(box.y2, 0.0, h)};
}

/// Indices sorted by descending score; equal scores keep ascending index.
inline std::vector<std::size_t> order_by_score(std::span<const double> scores) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    return order;
}

/// Greedy NMS. Returns kept indices in descending-score order, at most
/// max_keep of them. A box is suppressed when its IoU with an already kept
/// box is strictly greater than iou_threshold.
inline std::vector<std::size_t> nms(std::span<const Box> boxes, std::span<const double> scores,
                                    double iou_threshold, std::size_t max_keep) {
    if (boxes.size() != scores.size()) throw std::invalid_argument("nms: boxes and scores differ in length");
    const auto order = order_by_score(scores);
    std::vector<char> suppressed(boxes.size(), 0);
    std::vector<std::size_t> keep;
    for (std::size_t oi = 0; oi < order.size() && keep.size() < max_keep; ++oi) {
        const std::size_t i = order[oi];
        if (suppressed[i]) continue;
        keep.push_back(i);
        for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
            const std::size_t j = order[oj];
            if (!suppressed[j] && iou(boxes[i], boxes[j]) > iou_threshold) suppressed[j] = 1;
        }
    }
    return keep;
}

/// Dense IoU matrix, row i = anchor i, column j = ground truth j.
class IouMatrix {
public:
    IouMatrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), values_(rows * cols, 0.0) {}

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    double& at(std::size_t i, std::size_t j) { return values_[i * cols_ + j]; }
    double at(std::size_t i, std::size_t j) const { return values_[i * cols_ + j]; }

private:
    std::size_t rows_;
    std::size_t cols_;
    std::vector<double> values_;
};

inline IouMatrix match_quality_matrix(std::span<const Box> anchors, std::span<const Box> gts) {
    IouMatrix m(anchors.size(), gts.size());
    for (std::size_t i = 0; i < anchors.size(); ++i) {
        for (std::size_t j = 0; j < gts.size(); ++j) m.at(i, j) = iou(anchors[i], gts[j]);
    }
    return m;
}

inline std::vector<Box> boxes_of(std::span<const Anchor> anchors) {
    std::vector<Box> out;
    out.reserve(anchors.size());
    for (const auto& a : anchors) out.push_back(a.box);
    return out;
}

}  // namespace aadi
