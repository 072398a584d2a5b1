/*
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

/// @file head.hpp
/// @brief RPN head with one parameter set usable as a dilated convolution
/// (dense, over a whole level) or as a fully-connected layer (over RoI
/// patches), plus the multi-task loss, its analytic gradient and SGD.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "aadi/geometry.hpp"
#include "aadi/random.hpp"
#include "aadi/tensor.hpp"

namespace aadi {

template <typename T>
struct NamedTensor {
    std::string_view name;
    std::span<T> values;
};

/// 3x3 (by default) hidden conv with C_mid channels and ReLU, then two 1x1
/// sibling layers: objectness (1 output) and box regression (4 outputs).
struct RpnHeadParams {
    ConvWeights hidden;
    std::vector<double> objectness_weights;  // C_mid
    std::vector<double> objectness_bias;     // 1
    std::vector<double> regression_weights;  // 4 x C_mid, row-major (dx, dy, dw, dh)
    std::vector<double> regression_bias;     // 4

    RpnHeadParams() = default;
    RpnHeadParams(int in_channels, int mid_channels, int kernel_h = 3, int kernel_w = 3)
        : hidden(mid_channels, in_channels, kernel_h, kernel_w),
          objectness_weights(static_cast<std::size_t>(mid_channels), 0.0),
          objectness_bias(1, 0.0),
          regression_weights(4 * static_cast<std::size_t>(mid_channels), 0.0),
          regression_bias(4, 0.0) {}

    int in_channels() const { return hidden.in_channels; }
    int mid_channels() const { return hidden.out_channels; }
    int kernel_h() const { return hidden.kernel_h; }
    int kernel_w() const { return hidden.kernel_w; }

    /// Zero-valued parameters with the same shape.
    RpnHeadParams zeros_like() const { return RpnHeadParams(in_channels(), mid_channels(), kernel_h(), kernel_w()); }

    std::array<NamedTensor<double>, 6> tensors() {
        return {{{"hidden.weight", hidden.weights},
                 {"hidden.bias", hidden.bias},
                 {"objectness.weight", objectness_weights},
                 {"objectness.bias", objectness_bias},
                 {"regression.weight", regression_weights},
                 {"regression.bias", regression_bias}}};
    }
    std::array<NamedTensor<const double>, 6> tensors() const {
        return {{{"hidden.weight", hidden.weights},
                 {"hidden.bias", hidden.bias},
                 {"objectness.weight", objectness_weights},
                 {"objectness.bias", objectness_bias},
                 {"regression.weight", regression_weights},
                 {"regression.bias", regression_bias}}};
    }

    friend bool operator==(const RpnHeadParams&, const RpnHeadParams&) = default;
};

/// A head bound to the dilation it runs at in the dense (augmentation) pass.
struct RpnHead {
    int dilation = 1;
    RpnHeadParams params;

    friend bool operator==(const RpnHead&, const RpnHead&) = default;
};

/// Standard RPN initialisation: weights ~ N(0, init_std), biases 0.
inline RpnHeadParams make_head_params(int in_channels, int mid_channels, int kernel_h, int kernel_w, double init_std,
                                      Rng& rng) {
    RpnHeadParams p(in_channels, mid_channels, kernel_h, kernel_w);
    for (auto& w : p.hidden.weights) w = rng.normal(0.0, init_std);
    for (auto& w : p.objectness_weights) w = rng.normal(0.0, init_std);
    for (auto& w : p.regression_weights) w = rng.normal(0.0, init_std);
    return p;
}

struct HeadOutput {
    double logit = 0.0;
    Delta4 delta;
};

struct HeadGrid {
    int height = 0;
    int width = 0;
    std::vector<HeadOutput> cells;  // row-major

    const HeadOutput& at(int row, int col) const { return cells[static_cast<std::size_t>(row) * width + col]; }
};

namespace detail {

/// 1x1 sibling layers applied to one post-ReLU hidden vector.
inline HeadOutput apply_sibling_layers(std::span<const double> hidden, const RpnHeadParams& p) {
    const std::size_t mid = hidden.size();
    HeadOutput out;
    double logit = p.objectness_bias[0];
    for (std::size_t k = 0; k < mid; ++k) logit += p.objectness_weights[k] * hidden[k];
    out.logit = logit;
    std::array<double, 4> d{};
    for (std::size_t j = 0; j < 4; ++j) {
        double acc = p.regression_bias[j];
        const double* row = p.regression_weights.data() + j * mid;
        for (std::size_t k = 0; k < mid; ++k) acc += row[k] * hidden[k];
        d[j] = acc;
    }
    out.delta = {d[0], d[1], d[2], d[3]};
    return out;
}

}  // namespace detail

/// Dense (convolutional) form of the head over one feature level.
inline HeadGrid forward_conv(const FeatureMap& features, const RpnHeadParams& params, int dilation) {
    if (features.channels() != params.in_channels()) {
        throw std::invalid_argument("forward_conv: feature map has " + std::to_string(features.channels()) +
                                    " channels, head expects " + std::to_string(params.in_channels()));
    }
    const FeatureMap hidden = conv2d_dilated(features, params.hidden, dilation);
    const int mid = params.mid_channels();
    HeadGrid grid{features.height(), features.width(), {}};
    grid.cells.resize(static_cast<std::size_t>(grid.height) * grid.width);
    std::vector<double> h(static_cast<std::size_t>(mid));
    for (int r = 0; r < grid.height; ++r) {
        for (int c = 0; c < grid.width; ++c) {
            for (int k = 0; k < mid; ++k) h[static_cast<std::size_t>(k)] = std::max(0.0, hidden.at(k, r, c));
            grid.cells[static_cast<std::size_t>(r) * grid.width + c] = detail::apply_sibling_layers(h, params);
        }
    }
    return grid;
}

/// Everything backward needs from one fully-connected forward pass.
struct FcTrace {
    std::vector<double> input;       // flattened patch
    std::vector<double> hidden_pre;  // before ReLU
    std::vector<double> hidden;      // after ReLU
    HeadOutput output;
};

inline FcTrace forward_fc_traced(const FeatureMap& patch, const RpnHeadParams& params) {
    if (patch.channels() != params.in_channels() || patch.height() != params.kernel_h() ||
        patch.width() != params.kernel_w()) {
        throw std::invalid_argument("forward_fc: patch shape does not match head kernel/channels");
    }
    FcTrace t;
    t.input.assign(patch.values().begin(), patch.values().end());
    t.hidden_pre = fc_apply(t.input, fc_from_conv(params.hidden));
    t.hidden.resize(t.hidden_pre.size());
    std::transform(t.hidden_pre.begin(), t.hidden_pre.end(), t.hidden.begin(), [](double v) { return std::max(0.0, v); });
    t.output = detail::apply_sibling_layers(t.hidden, params);
    return t;
}

/// Fully-connected form of the head over one m x n RoI patch.
inline HeadOutput forward_fc(const FeatureMap& patch, const RpnHeadParams& params) {
    return forward_fc_traced(patch, params).output;
}

struct LossConfig {
    double lambda = 5.0;
    double smooth_l1_beta = 1.0;

    void validate() const {
        if (!(lambda > 0.0)) throw std::invalid_argument("LossConfig: lambda must be > 0");
        if (!(smooth_l1_beta >= 0.0)) throw std::invalid_argument("LossConfig: smooth_l1_beta must be >= 0");
    }
};

struct LossBreakdown {
    double total = 0.0;
    double cls = 0.0;
    double reg = 0.0;
};

/// Binary cross entropy on a logit, in the overflow-free form.
inline double bce_with_logit(double logit, double target) {
    return std::max(logit, 0.0) - logit * target + std::log1p(std::exp(-std::abs(logit)));
}

inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double smooth_l1(double x, double beta) {
    const double ax = std::abs(x);
    if (ax < beta) return 0.5 * x * x / beta;
    return ax - 0.5 * beta;
}

inline double smooth_l1_grad(double x, double beta) {
    if (std::abs(x) < beta) return x / beta;
    return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
}

/// total = lambda * L_reg + L_cls, where L_cls is the mean BCE over the
/// sampled examples and L_reg is the smooth-L1 sum over positives divided by
/// the number of sampled examples.
inline LossBreakdown loss(std::span<const HeadOutput> outputs, std::span<const char> positive,
                          std::span<const Delta4> targets, const LossConfig& cfg) {
    if (outputs.empty()) throw std::invalid_argument("loss: no sampled examples");
    if (positive.size() != outputs.size() || targets.size() != outputs.size()) {
        throw std::invalid_argument("loss: outputs, labels and targets differ in length");
    }
    const double n = static_cast<double>(outputs.size());
    double cls = 0.0;
    double reg = 0.0;
    for (std::size_t i = 0; i < outputs.size(); ++i) {
        cls += bce_with_logit(outputs[i].logit, positive[i] ? 1.0 : 0.0);
        if (positive[i]) {
            const auto& d = outputs[i].delta;
            const auto& t = targets[i];
            reg += smooth_l1(d.dx - t.dx, cfg.smooth_l1_beta) + smooth_l1(d.dy - t.dy, cfg.smooth_l1_beta) +
                   smooth_l1(d.dw - t.dw, cfg.smooth_l1_beta) + smooth_l1(d.dh - t.dh, cfg.smooth_l1_beta);
        }
    }
    LossBreakdown out;
    out.cls = cls / n;
    out.reg = reg / n;
    out.total = cfg.lambda * out.reg + out.cls;
    return out;
}

/// One sampled refinement example: a frozen RoI patch and its label.
struct TrainingExample {
    std::size_t head_index = 0;
    FeatureMap patch;
    bool positive = false;
    Delta4 target;  // meaningful for positives only
};

struct BatchGradients {
    LossBreakdown loss;
    std::vector<RpnHeadParams> grads;  // one per head, same shapes as the params
};

/// Loss and exact gradients for a batch, with patches treated as constants.
inline BatchGradients backward(std::span<const TrainingExample> batch, std::span<const RpnHead> heads,
                               const LossConfig& cfg) {
    if (batch.empty()) throw std::invalid_argument("backward: no sampled examples");
    BatchGradients result;
    result.grads.reserve(heads.size());
    for (const auto& h : heads) result.grads.push_back(h.params.zeros_like());

    std::vector<HeadOutput> outputs;
    std::vector<char> positive;
    std::vector<Delta4> targets;
    outputs.reserve(batch.size());
    positive.reserve(batch.size());
    targets.reserve(batch.size());

    const double inv_n = 1.0 / static_cast<double>(batch.size());
    for (const auto& ex : batch) {
        if (ex.head_index >= heads.size()) throw std::invalid_argument("backward: example refers to unknown head");
        const RpnHeadParams& p = heads[ex.head_index].params;
        RpnHeadParams& g = result.grads[ex.head_index];
        const FcTrace t = forward_fc_traced(ex.patch, p);
        outputs.push_back(t.output);
        positive.push_back(ex.positive ? 1 : 0);
        targets.push_back(ex.target);

        const double g_logit = (sigmoid(t.output.logit) - (ex.positive ? 1.0 : 0.0)) * inv_n;
        std::array<double, 4> g_delta{};
        if (ex.positive) {
            const auto& d = t.output.delta;
            const auto& tg = ex.target;
            const double scale = cfg.lambda * inv_n;
            g_delta = {scale * smooth_l1_grad(d.dx - tg.dx, cfg.smooth_l1_beta),
                       scale * smooth_l1_grad(d.dy - tg.dy, cfg.smooth_l1_beta),
                       scale * smooth_l1_grad(d.dw - tg.dw, cfg.smooth_l1_beta),
                       scale * smooth_l1_grad(d.dh - tg.dh, cfg.smooth_l1_beta)};
        }

        const std::size_t mid = t.hidden.size();
        std::vector<double> g_hidden(mid, 0.0);
        g.objectness_bias[0] += g_logit;
        for (std::size_t k = 0; k < mid; ++k) {
            g.objectness_weights[k] += g_logit * t.hidden[k];
            g_hidden[k] += g_logit * p.objectness_weights[k];
        }
        for (std::size_t j = 0; j < 4; ++j) {
            g.regression_bias[j] += g_delta[j];
            for (std::size_t k = 0; k < mid; ++k) {
                g.regression_weights[j * mid + k] += g_delta[j] * t.hidden[k];
                g_hidden[k] += g_delta[j] * p.regression_weights[j * mid + k];
            }
        }
        const std::size_t cols = t.input.size();
        for (std::size_t k = 0; k < mid; ++k) {
            if (!(t.hidden_pre[k] > 0.0)) continue;
            const double gk = g_hidden[k];
            g.hidden.bias[k] += gk;
            double* row = g.hidden.weights.data() + k * cols;
            for (std::size_t c = 0; c < cols; ++c) row[c] += gk * t.input[c];
        }
    }
    result.loss = loss(outputs, positive, targets, cfg);
    return result;
}

/// theta <- theta - epsilon * grad.
inline void sgd_step(RpnHeadParams& params, const RpnHeadParams& grads, double epsilon) {
    auto pt = params.tensors();
    const auto gt = grads.tensors();
    for (std::size_t t = 0; t < pt.size(); ++t) {
        if (pt[t].values.size() != gt[t].values.size()) throw std::invalid_argument("sgd_step: shape mismatch");
        for (std::size_t i = 0; i < pt[t].values.size(); ++i) pt[t].values[i] -= epsilon * gt[t].values[i];
    }
}

/// Plain SGD by default; heavy-ball momentum when momentum > 0.
class Optimizer {
public:
    Optimizer(double learning_rate, double momentum) : learning_rate_(learning_rate), momentum_(momentum) {}

    double learning_rate() const { return learning_rate_; }

    void step(std::span<RpnHead> heads, std::span<const RpnHeadParams> grads) {
        if (heads.size() != grads.size()) throw std::invalid_argument("Optimizer::step: head/grad count mismatch");
        if (momentum_ <= 0.0) {
            for (std::size_t h = 0; h < heads.size(); ++h) sgd_step(heads[h].params, grads[h], learning_rate_);
            return;
        }
        if (velocity_.empty()) {
            for (const auto& h : heads) velocity_.push_back(h.params.zeros_like());
        }
        for (std::size_t h = 0; h < heads.size(); ++h) {
            auto vt = velocity_[h].tensors();
            const auto gt = grads[h].tensors();
            for (std::size_t t = 0; t < vt.size(); ++t) {
                for (std::size_t i = 0; i < vt[t].values.size(); ++i) {
                    vt[t].values[i] = momentum_ * vt[t].values[i] + gt[t].values[i];
                }
            }
            sgd_step(heads[h].params, velocity_[h], learning_rate_);
        }
    }

private:
    double learning_rate_;
    double momentum_;
    std::vector<RpnHeadParams> velocity_;
};

// ---------------------------------------------------------------------------
// Checkpoint format (version 1), all integers little-endian:
//
//   bytes 0..7   magic "AADIHEAD"
//   u32          format version (1)
//   u32          head count H
//   H times:
//     u32 dilation, u32 kernel_h, u32 kernel_w, u32 in_channels, u32 mid_channels
//     f64 values of each tensor in RpnHeadParams::tensors() order:
//       hidden.weight (mid*in*kh*kw), hidden.bias (mid), objectness.weight (mid),
//       objectness.bias (1), regression.weight (4*mid), regression.bias (4)
//
// Values are IEEE-754 binary64 bit patterns, so a round trip is bit-exact.
// ---------------------------------------------------------------------------

inline constexpr std::string_view kCheckpointMagic = "AADIHEAD";
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline void put_f64(std::string& out, double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFFu));
}

class ByteReader {
public:
    explicit ByteReader(std::string_view data) : data_(data) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }

    double f64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        pos_ += 8;
        return std::bit_cast<double>(v);
    }

    std::string_view bytes(std::size_t n) {
        need(n);
        auto s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    bool done() const { return pos_ == data_.size(); }

private:
    void need(std::size_t n) const {
        if (data_.size() - pos_ < n) throw std::runtime_error("checkpoint: truncated file");
    }

    std::string_view data_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(std::span<const RpnHead> heads) {
    std::string out(kCheckpointMagic);
    detail::put_u32(out, kCheckpointVersion);
    detail::put_u32(out, static_cast<std::uint32_t>(heads.size()));
    for (const auto& h : heads) {
        detail::put_u32(out, static_cast<std::uint32_t>(h.dilation));
        detail::put_u32(out, static_cast<std::uint32_t>(h.params.kernel_h()));
        detail::put_u32(out, static_cast<std::uint32_t>(h.params.kernel_w()));
        detail::put_u32(out, static_cast<std::uint32_t>(h.params.in_channels()));
        detail::put_u32(out, static_cast<std::uint32_t>(h.params.mid_channels()));
        for (const auto& t : h.params.tensors()) {
            for (double v : t.values) detail::put_f64(out, v);
        }
    }
    return out;
}

inline std::vector<RpnHead> decode_checkpoint(std::string_view data) {
    detail::ByteReader in(data);
    if (in.bytes(kCheckpointMagic.size()) != kCheckpointMagic) throw std::runtime_error("checkpoint: bad magic");
    const auto version = in.u32();
    if (version != kCheckpointVersion) {
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    }
    const auto count = in.u32();
    std::vector<RpnHead> heads;
    for (std::uint32_t i = 0; i < count; ++i) {
        RpnHead h;
        h.dilation = static_cast<int>(in.u32());
        const int kh = static_cast<int>(in.u32());
        const int kw = static_cast<int>(in.u32());
        const int cin = static_cast<int>(in.u32());
        const int cmid = static_cast<int>(in.u32());
        if (h.dilation < 1 || kh < 1 || kw < 1 || cin < 1 || cmid < 1 || kh > 64 || kw > 64 || cin > 65536 ||
            cmid > 65536) {
            throw std::runtime_error("checkpoint: invalid head shape");
        }
        h.params = RpnHeadParams(cin, cmid, kh, kw);
        for (auto& t : h.params.tensors()) {
            for (double& v : t.values) v = in.f64();
        }
        heads.push_back(std::move(h));
    }
    if (!in.done()) throw std::runtime_error("checkpoint: trailing bytes");
    return heads;
}

/// Writes to a sibling temporary file and renames it into place.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view content) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!out) throw std::runtime_error("write failed: " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp);
        throw std::runtime_error("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
    }
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void save_checkpoint(const std::filesystem::path& path, std::span<const RpnHead> heads) {
    write_file_atomic(path, encode_checkpoint(heads));
}

inline std::vector<RpnHead> load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(read_file(path));
}

}  // namespace aadi
