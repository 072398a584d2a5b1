/*
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

/// @file tensor.hpp
/// @brief Dense feature maps, dilated convolution, single-sample RoI Align,
/// and the convolution <-> fully-connected weight correspondence.
///
/// Cell (r, c) of a map has its centre at (c + 0.5, r + 0.5) in feature-cell
/// coordinates. Everything outside the map reads as zero, both for conv
/// padding and for bilinear sampling, so an on-grid RoI with the right size
/// gathers exactly the taps the convolution sees, borders included.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "aadi/geometry.hpp"

namespace aadi {

/// C x H x W values, channel-major then row-major.
class FeatureMap {
public:
    FeatureMap() = default;
    FeatureMap(int channels, int height, int width, double fill = 0.0)
        : channels_(channels), height_(height), width_(width) {
        if (channels < 1 || height < 1 || width < 1) {
            throw std::invalid_argument("FeatureMap: dimensions must be positive");
        }
        values_.assign(static_cast<std::size_t>(channels) * height * width, fill);
    }

    int channels() const { return channels_; }
    int height() const { return height_; }
    int width() const { return width_; }
    std::size_t size() const { return values_.size(); }

    double& at(int ch, int row, int col) { return values_[index(ch, row, col)]; }
    double at(int ch, int row, int col) const { return values_[index(ch, row, col)]; }

    std::span<double> channel(int ch) {
        return {values_.data() + static_cast<std::size_t>(ch) * height_ * width_,
                static_cast<std::size_t>(height_) * width_};
    }
    std::span<const double> channel(int ch) const {
        return {values_.data() + static_cast<std::size_t>(ch) * height_ * width_,
                static_cast<std::size_t>(height_) * width_};
    }

    std::span<double> values() { return values_; }
    std::span<const double> values() const { return values_; }

    bool in_bounds(int row, int col) const { return row >= 0 && row < height_ && col >= 0 && col < width_; }

    friend bool operator==(const FeatureMap&, const FeatureMap&) = default;

private:
    std::size_t index(int ch, int row, int col) const {
        return (static_cast<std::size_t>(ch) * height_ + row) * width_ + col;
    }

    int channels_ = 0;
    int height_ = 0;
    int width_ = 0;
    std::vector<double> values_;
};

struct PyramidLevel {
    FeatureMap map;
    int stride = 1;
};

struct FeaturePyramid {
    std::vector<PyramidLevel> levels;
    int image_width = 0;
    int image_height = 0;

    /// Strides strictly increase and each level is ceil(image / stride) in size.
    void validate() const {
        for (std::size_t i = 0; i < levels.size(); ++i) {
            const auto& lv = levels[i];
            if (lv.stride < 1) throw std::invalid_argument("FeaturePyramid: stride must be positive");
            if (i > 0 && lv.stride <= levels[i - 1].stride) {
                throw std::invalid_argument("FeaturePyramid: strides must strictly increase");
            }
            const int h = (image_height + lv.stride - 1) / lv.stride;
            const int w = (image_width + lv.stride - 1) / lv.stride;
            if (lv.map.height() != h || lv.map.width() != w) {
                throw std::invalid_argument("FeaturePyramid: level " + std::to_string(i) +
                                            " dims inconsistent with image size");
            }
        }
    }
};

/// out_channels x in_channels x kernel_h x kernel_w taps plus one bias per
/// output channel. The flat tap order is also the FC column order.
struct ConvWeights {
    int out_channels = 0;
    int in_channels = 0;
    int kernel_h = 0;
    int kernel_w = 0;
    std::vector<double> weights;
    std::vector<double> bias;

    ConvWeights() = default;
    ConvWeights(int out_ch, int in_ch, int kh, int kw)
        : out_channels(out_ch),
          in_channels(in_ch),
          kernel_h(kh),
          kernel_w(kw),
          weights(static_cast<std::size_t>(out_ch) * in_ch * kh * kw, 0.0),
          bias(static_cast<std::size_t>(out_ch), 0.0) {}

    std::size_t taps_per_output() const { return static_cast<std::size_t>(in_channels) * kernel_h * kernel_w; }

    double& at(int o, int i, int ki, int kj) {
        return weights[((static_cast<std::size_t>(o) * in_channels + i) * kernel_h + ki) * kernel_w + kj];
    }
    double at(int o, int i, int ki, int kj) const {
        return weights[((static_cast<std::size_t>(o) * in_channels + i) * kernel_h + ki) * kernel_w + kj];
    }

    friend bool operator==(const ConvWeights&, const ConvWeights&) = default;
};

/// SAME-padded dilated convolution, stride 1, zero padding.
///
/// Per output cell the accumulation starts at the bias and adds taps in
/// (in_channel, kernel_row, kernel_col) order, which is the same order
/// fc_apply uses, so on-grid equivalence is exact rather than approximate.
inline FeatureMap conv2d_dilated(const FeatureMap& input, const ConvWeights& w, int dilation) {
    if (dilation < 1) throw std::invalid_argument("conv2d_dilated: dilation must be >= 1");
    if (w.kernel_h % 2 == 0 || w.kernel_w % 2 == 0) {
        throw std::invalid_argument("conv2d_dilated: kernel dims must be odd");
    }
    if (w.in_channels != input.channels()) {
        throw std::invalid_argument("conv2d_dilated: input has " + std::to_string(input.channels()) +
                                    " channels, weights expect " + std::to_string(w.in_channels));
    }
    const int H = input.height();
    const int W = input.width();
    const int ch = (w.kernel_h - 1) / 2;
    const int cw = (w.kernel_w - 1) / 2;
    FeatureMap out(w.out_channels, H, W);
    for (int o = 0; o < w.out_channels; ++o) {
        auto dst = out.channel(o);
        std::fill(dst.begin(), dst.end(), w.bias[static_cast<std::size_t>(o)]);
        for (int i = 0; i < w.in_channels; ++i) {
            const auto src = input.channel(i);
            for (int ki = 0; ki < w.kernel_h; ++ki) {
                const int dr = dilation * (ki - ch);
                const int r_lo = std::max(0, -dr);
                const int r_hi = std::min(H, H - dr);
                for (int kj = 0; kj < w.kernel_w; ++kj) {
                    const double tap = w.at(o, i, ki, kj);
                    const int dc = dilation * (kj - cw);
                    const int c_lo = std::max(0, -dc);
                    const int c_hi = std::min(W, W - dc);
                    for (int r = r_lo; r < r_hi; ++r) {
                        double* drow = dst.data() + static_cast<std::size_t>(r) * W;
                        const double* srow = src.data() + static_cast<std::size_t>(r + dr) * W + dc;
                        for (int c = c_lo; c < c_hi; ++c) drow[c] += tap * srow[c];
                    }
                }
            }
        }
    }
    return out;
}

/// Bilinear interpolation over cell-centre values, writing one value per
/// channel into out. Neighbours outside the map contribute zero.
inline void bilinear_sample_into(const FeatureMap& input, double x, double y, std::span<double> out) {
    const double u = x - 0.5;
    const double v = y - 0.5;
    const double c0f = std::floor(u);
    const double r0f = std::floor(v);
    const double fx = u - c0f;
    const double fy = v - r0f;
    const int H = input.height();
    const int W = input.width();
    // Far outside: avoid int overflow on the cast and return zeros.
    if (c0f < -2.0 || r0f < -2.0 || c0f > W + 1.0 || r0f > H + 1.0) {
        std::fill(out.begin(), out.end(), 0.0);
        return;
    }
    const int c0 = static_cast<int>(c0f);
    const int r0 = static_cast<int>(r0f);
    const double w00 = (1.0 - fx) * (1.0 - fy);
    const double w01 = fx * (1.0 - fy);
    const double w10 = (1.0 - fx) * fy;
    const double w11 = fx * fy;
    const bool in00 = input.in_bounds(r0, c0);
    const bool in01 = input.in_bounds(r0, c0 + 1);
    const bool in10 = input.in_bounds(r0 + 1, c0);
    const bool in11 = input.in_bounds(r0 + 1, c0 + 1);
    for (int ch = 0; ch < input.channels(); ++ch) {
        const double v00 = in00 ? input.at(ch, r0, c0) : 0.0;
        const double v01 = in01 ? input.at(ch, r0, c0 + 1) : 0.0;
        const double v10 = in10 ? input.at(ch, r0 + 1, c0) : 0.0;
        const double v11 = in11 ? input.at(ch, r0 + 1, c0 + 1) : 0.0;
        out[static_cast<std::size_t>(ch)] = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11;
    }
}

inline std::vector<double> bilinear_sample(const FeatureMap& input, double x, double y) {
    std::vector<double> out(static_cast<std::size_t>(input.channels()));
    bilinear_sample_into(input, x, y, out);
    return out;
}

/// RoI Align with exactly one sample at the centre of each bin. The RoI is
/// in feature-cell coordinates. Output is C x out_h x out_w.
inline FeatureMap roi_align(const FeatureMap& input, const Box& roi, int out_h, int out_w) {
    if (!roi.has_positive_area()) throw std::invalid_argument("roi_align: RoI must have positive width and height");
    if (out_h < 1 || out_w < 1) throw std::invalid_argument("roi_align: output size must be positive");
    const double bin_w = roi.width() / out_w;
    const double bin_h = roi.height() / out_h;
    FeatureMap patch(input.channels(), out_h, out_w);
    std::vector<double> sample(static_cast<std::size_t>(input.channels()));
    for (int bi = 0; bi < out_h; ++bi) {
        const double y = roi.y1 + (bi + 0.5) * bin_h;
        for (int bj = 0; bj < out_w; ++bj) {
            const double x = roi.x1 + (bj + 0.5) * bin_w;
            bilinear_sample_into(input, x, y, sample);
            for (int ch = 0; ch < input.channels(); ++ch) patch.at(ch, bi, bj) = sample[static_cast<std::size_t>(ch)];
        }
    }
    return patch;
}

/// Non-owning fully-connected view: rows x cols weights (row-major) + bias.
struct FcWeightsView {
    int rows = 0;
    int cols = 0;
    std::span<const double> weights;
    std::span<const double> bias;
};

/// The FC form of a conv layer reuses the conv storage directly: row o is
/// output channel o, column (i * m + ki) * n + kj is the tap (i, ki, kj),
/// matching the channel-major flatten of a C x m x n RoI patch.
inline FcWeightsView fc_from_conv(const ConvWeights& w) {
    return {w.out_channels, static_cast<int>(w.taps_per_output()), w.weights, w.bias};
}

/// Inverse of fc_from_conv.
inline ConvWeights conv_from_fc(const FcWeightsView& fc, int in_channels, int kernel_h, int kernel_w) {
    if (static_cast<std::size_t>(fc.cols) != static_cast<std::size_t>(in_channels) * kernel_h * kernel_w) {
        throw std::invalid_argument("conv_from_fc: column count does not match in_channels * kernel size");
    }
    ConvWeights w(fc.rows, in_channels, kernel_h, kernel_w);
    std::copy(fc.weights.begin(), fc.weights.end(), w.weights.begin());
    std::copy(fc.bias.begin(), fc.bias.end(), w.bias.begin());
    return w;
}

/// W * input + bias into out.
inline void fc_apply_into(std::span<const double> input, const FcWeightsView& fc, std::span<double> out) {
    if (input.size() != static_cast<std::size_t>(fc.cols)) {
        throw std::invalid_argument("fc_apply: input has " + std::to_string(input.size()) + " values, weights expect " +
                                    std::to_string(fc.cols));
    }
    if (fc.weights.size() != static_cast<std::size_t>(fc.rows) * fc.cols || fc.bias.size() != static_cast<std::size_t>(fc.rows) ||
        out.size() != static_cast<std::size_t>(fc.rows)) {
        throw std::invalid_argument("fc_apply: weight/bias/output shape mismatch");
    }
    const std::size_t cols = static_cast<std::size_t>(fc.cols);
    for (std::size_t o = 0; o < static_cast<std::size_t>(fc.rows); ++o) {
        const double* row = fc.weights.data() + o * cols;
        double acc = fc.bias[o];
        for (std::size_t k = 0; k < cols; ++k) acc += row[k] * input[k];
        out[o] = acc;
    }
}

inline std::vector<double> fc_apply(std::span<const double> input, const FcWeightsView& fc) {
    std::vector<double> out(static_cast<std::size_t>(fc.rows));
    fc_apply_into(input, fc, out);
    return out;
}

inline std::vector<double> fc_apply(const FeatureMap& patch, const FcWeightsView& fc) {
    return fc_apply(patch.values(), fc);
}

/// Image-pixel box to feature-cell coordinates of a level with the given stride.
inline Box to_feature_coords(const Box& image_box, int stride) {
    const double s = stride;
    return {image_box.x1 / s, image_box.y1 / s, image_box.x2 / s, image_box.y2 / s};
}

}  // namespace aadi
