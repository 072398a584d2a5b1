/*
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

/// @file metrics.hpp
/// @brief Average recall of proposals and anchor-quality statistics.

#include <algorithm>
#include <array>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "aadi/geometry.hpp"

namespace aadi {

/// IoU thresholds 0.50, 0.55, ..., 0.95.
inline constexpr std::array<double, 10> kRecallThresholds{0.50, 0.55, 0.60, 0.65, 0.70,
                                                          0.75, 0.80, 0.85, 0.90, 0.95};

/// Area breakpoints (image pixels) for small / medium / large objects.
inline constexpr double kSmallArea = 32.0 * 32.0;
inline constexpr double kMediumArea = 96.0 * 96.0;

enum class SizeBucket { small, medium, large };

inline SizeBucket size_bucket(const Box& gt) {
    const double a = gt.area();
    if (a < kSmallArea) return SizeBucket::small;
    if (a < kMediumArea) return SizeBucket::medium;
    return SizeBucket::large;
}

/// Fields are absent when there were no ground-truth boxes to recall.
struct RecallReport {
    std::size_t num_gts = 0;
    std::optional<double> ar;
    std::optional<double> ar_small;
    std::optional<double> ar_medium;
    std::optional<double> ar_large;
    std::optional<std::array<double, 10>> recall_at;  // per kRecallThresholds
};

/// For each threshold, gts in order each take their best still-unmatched
/// proposal with IoU >= t (ties to the lower proposal index). Returns one
/// matched flag per gt.
inline std::vector<char> greedy_match(std::span<const Box> proposals, std::span<const Box> gts, double threshold) {
    std::vector<char> used(proposals.size(), 0);
    std::vector<char> matched(gts.size(), 0);
    for (std::size_t g = 0; g < gts.size(); ++g) {
        double best = -1.0;
        std::size_t best_p = 0;
        for (std::size_t p = 0; p < proposals.size(); ++p) {
            if (used[p]) continue;
            const double v = iou(proposals[p], gts[g]);
            if (v >= threshold && v > best) {
                best = v;
                best_p = p;
            }
        }
        if (best >= 0.0) {
            used[best_p] = 1;
            matched[g] = 1;
        }
    }
    return matched;
}

/// Accumulates recall over many scenes; each scene's gts are matched only
/// against that scene's proposals, and counts are pooled over all gts.
class RecallAccumulator {
public:
    explicit RecallAccumulator(std::size_t k) : k_(k) {}

    /// proposals must already be sorted by descending score.
    void add(std::span<const Box> proposals, std::span<const Box> gts) {
        const auto top = proposals.subspan(0, std::min(k_, proposals.size()));
        for (std::size_t t = 0; t < kRecallThresholds.size(); ++t) {
            const auto matched = greedy_match(top, gts, kRecallThresholds[t]);
            for (std::size_t g = 0; g < gts.size(); ++g) {
                const auto b = static_cast<std::size_t>(size_bucket(gts[g]));
                if (matched[g]) {
                    ++matched_[t];
                    ++bucket_matched_[b][t];
                }
            }
        }
        for (const auto& gt : gts) ++bucket_total_[static_cast<std::size_t>(size_bucket(gt))];
        total_ += gts.size();
    }

    RecallReport report() const {
        RecallReport r;
        r.num_gts = total_;
        if (total_ == 0) return r;
        std::array<double, 10> recall{};
        for (std::size_t t = 0; t < recall.size(); ++t) recall[t] = static_cast<double>(matched_[t]) / static_cast<double>(total_);
        r.recall_at = recall;
        r.ar = mean(recall);
        auto bucket_ar = [&](SizeBucket b) -> std::optional<double> {
            const auto bi = static_cast<std::size_t>(b);
            if (bucket_total_[bi] == 0) return std::nullopt;
            std::array<double, 10> rb{};
            for (std::size_t t = 0; t < rb.size(); ++t) {
                rb[t] = static_cast<double>(bucket_matched_[bi][t]) / static_cast<double>(bucket_total_[bi]);
            }
            return mean(rb);
        };
        r.ar_small = bucket_ar(SizeBucket::small);
        r.ar_medium = bucket_ar(SizeBucket::medium);
        r.ar_large = bucket_ar(SizeBucket::large);
        return r;
    }

private:
    static double mean(const std::array<double, 10>& v) {
        return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    }

    std::size_t k_;
    std::size_t total_ = 0;
    std::array<std::size_t, 10> matched_{};
    std::array<std::size_t, 3> bucket_total_{};
    std::array<std::array<std::size_t, 10>, 3> bucket_matched_{};
};

/// AR over the top-K proposals (already score-sorted) of one scene.
inline RecallReport average_recall(std::span<const Box> proposals, std::span<const Box> gts, std::size_t k) {
    RecallAccumulator acc(k);
    acc.add(proposals, gts);
    return acc.report();
}

/// Plain recall at a single IoU threshold.
inline double recall_at(std::span<const Box> proposals, std::span<const Box> gts, std::size_t k, double threshold) {
    if (gts.empty()) throw std::invalid_argument("recall_at: no ground truth");
    const auto top = proposals.subspan(0, std::min(k, proposals.size()));
    const auto m = greedy_match(top, gts, threshold);
    return static_cast<double>(std::count(m.begin(), m.end(), 1)) / static_cast<double>(gts.size());
}

/// Best IoU against the anchor set, per gt.
inline std::vector<double> best_iou_per_gt(std::span<const Box> anchors, std::span<const Box> gts) {
    std::vector<double> best(gts.size(), 0.0);
    for (std::size_t j = 0; j < gts.size(); ++j) {
        for (const auto& a : anchors) best[j] = std::max(best[j], iou(a, gts[j]));
    }
    return best;
}

/// Mean over gts of the highest IoU any anchor reaches with it.
inline double mean_best_iou(std::span<const Box> anchors, std::span<const Box> gts) {
    if (gts.empty()) throw std::invalid_argument("mean_best_iou: no ground truth");
    const auto best = best_iou_per_gt(anchors, gts);
    return std::accumulate(best.begin(), best.end(), 0.0) / static_cast<double>(gts.size());
}

/// Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie), from midranks.
inline double auc_roc(std::span<const double> scores, std::span<const char> labels) {
    if (scores.size() != labels.size()) throw std::invalid_argument("auc_roc: scores and labels differ in length");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double pos_rank_sum = 0.0;
    std::size_t n_pos = 0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        const double midrank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1 .. j
        for (std::size_t k = i; k < j; ++k) {
            if (labels[order[k]]) {
                pos_rank_sum += midrank;
                ++n_pos;
            }
        }
        i = j;
    }
    const std::size_t n_neg = scores.size() - n_pos;
    if (n_pos == 0 || n_neg == 0) throw std::invalid_argument("auc_roc: need at least one positive and one negative");
    const double np = static_cast<double>(n_pos);
    const double nn = static_cast<double>(n_neg);
    return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

enum class SeparabilityRule {
    center_inside_gt,  // positive when the anchor centre lies inside any gt
    threshold_pair,    // positive above pos_iou, negative below neg_iou, rest dropped
};

struct SeparabilityOptions {
    SeparabilityRule rule = SeparabilityRule::center_inside_gt;
    double pos_iou = 0.7;
    double neg_iou = 0.3;
};

struct AnchorQualityReport {
    double mean_best_iou = 0.0;
    double auc_roc = 0.0;
    std::size_t positives = 0;
    std::size_t negatives = 0;
};

/// Per-anchor (score, label) pairs with score = max IoU with any gt.
struct SeparabilitySamples {
    std::vector<double> scores;
    std::vector<char> labels;

    void append(std::span<const Box> anchors, std::span<const Box> gts, const SeparabilityOptions& opt) {
        for (const auto& a : anchors) {
            double best = 0.0;
            bool center_inside = false;
            const double cx = a.center_x();
            const double cy = a.center_y();
            for (const auto& g : gts) {
                best = std::max(best, iou(a, g));
                if (cx >= g.x1 && cx <= g.x2 && cy >= g.y1 && cy <= g.y2) center_inside = true;
            }
            if (opt.rule == SeparabilityRule::center_inside_gt) {
                scores.push_back(best);
                labels.push_back(center_inside ? 1 : 0);
            } else if (best > opt.pos_iou || best < opt.neg_iou) {
                scores.push_back(best);
                labels.push_back(best > opt.pos_iou ? 1 : 0);
            }
        }
    }

    std::size_t positives() const { return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1)); }
};

inline AnchorQualityReport anchor_separability(std::span<const Box> anchors, std::span<const Box> gts,
                                               const SeparabilityOptions& opt = {}) {
    SeparabilitySamples s;
    s.append(anchors, gts, opt);
    AnchorQualityReport r;
    r.positives = s.positives();
    r.negatives = s.labels.size() - r.positives;
    r.auc_roc = auc_roc(s.scores, s.labels);
    r.mean_best_iou = mean_best_iou(anchors, gts);
    return r;
}

}  // namespace aadi
