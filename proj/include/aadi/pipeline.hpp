/*
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

/// @file pipeline.hpp
/// @brief Augment-then-refine proposal pipeline.
///
/// Augmentation runs each head densely (conv form) over every pyramid level,
/// decodes one box per cell against the hand-designed grid and keeps the
/// best few thousand. Refinement re-reads features for those boxes with RoI
/// Align and applies the same parameters in FC form. Only the refinement
/// path is differentiated during training.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "aadi/geometry.hpp"
#include "aadi/head.hpp"
#include "aadi/random.hpp"
#include "aadi/tensor.hpp"

namespace aadi {

struct Scene {
    int image_width = 0;
    int image_height = 0;
    std::vector<Box> gt_boxes;
    std::vector<char> crowd;  // parallel to gt_boxes; empty means no crowd regions
    FeaturePyramid features;

    bool is_crowd(std::size_t i) const { return i < crowd.size() && crowd[i] != 0; }

    /// Ground truth that takes part in training and evaluation.
    std::vector<Box> active_gts() const {
        std::vector<Box> out;
        for (std::size_t i = 0; i < gt_boxes.size(); ++i) {
            if (!is_crowd(i)) out.push_back(gt_boxes[i]);
        }
        return out;
    }
};

struct PipelineConfig {
    int kernel_h = 3;
    int kernel_w = 3;
    std::vector<int> dilations{2, 4};  // one head per entry, parameters not shared
    std::size_t pre_nms_top_k = 1000;  // per head and level
    double augment_nms_iou = 0.7;
    std::size_t post_nms_keep = 2000;
    bool single_stage_selection = false;
    double final_nms_iou = 0.7;
    double single_stage_final_nms_iou = 0.6;
    std::size_t final_keep = 1000;
    double pos_iou = 0.7;
    double neg_iou = 0.3;
    std::size_t batch_size = 256;
    double positive_fraction = 0.5;
    double positive_filter_nms_iou = 0.7;
    bool anchor_guided = true;

    double final_nms_threshold() const { return single_stage_selection ? single_stage_final_nms_iou : final_nms_iou; }

    void validate() const {
        if (kernel_h < 1 || kernel_w < 1 || kernel_h % 2 == 0 || kernel_w % 2 == 0) {
            throw std::invalid_argument("kernel dims must be odd and positive");
        }
        if (dilations.empty()) throw std::invalid_argument("at least one dilation is required");
        for (int d : dilations) {
            if (d < 1) throw std::invalid_argument("dilations must be >= 1");
        }
        if (!(neg_iou > 0.0 && neg_iou < pos_iou && pos_iou <= 1.0)) {
            throw std::invalid_argument("label thresholds must satisfy 0 < neg_iou < pos_iou <= 1");
        }
        if (pre_nms_top_k == 0 || post_nms_keep == 0 || final_keep == 0 || batch_size == 0) {
            throw std::invalid_argument("keep counts and batch size must be positive");
        }
        if (!(positive_fraction > 0.0 && positive_fraction <= 1.0)) {
            throw std::invalid_argument("positive_fraction must be in (0, 1]");
        }
        for (double t : {augment_nms_iou, final_nms_iou, single_stage_final_nms_iou, positive_filter_nms_iou}) {
            if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("NMS thresholds must be in [0, 1]");
        }
    }
};

enum class Origin { augmented, anchor_guided };

struct ProposalSource {
    int level_index = 0;
    int head_index = 0;
    Origin origin = Origin::augmented;
    std::size_t parent = 0;  // index of the box this one was derived from, in the previous stage
};

/// Scored boxes in descending score order (anchor-guided boxes, which carry
/// no score, sit at the end with score -inf).
struct ProposalSet {
    std::vector<Box> boxes;
    std::vector<double> scores;
    std::vector<ProposalSource> sources;

    std::size_t size() const { return boxes.size(); }
    bool empty() const { return boxes.empty(); }

    void push_back(const Box& b, double s, const ProposalSource& src) {
        boxes.push_back(b);
        scores.push_back(s);
        sources.push_back(src);
    }

    /// Subset in the given index order.
    ProposalSet select(std::span<const std::size_t> indices) const {
        ProposalSet out;
        out.boxes.reserve(indices.size());
        out.scores.reserve(indices.size());
        out.sources.reserve(indices.size());
        for (std::size_t i : indices) out.push_back(boxes[i], scores[i], sources[i]);
        return out;
    }

    /// First k entries.
    ProposalSet top(std::size_t k) const {
        ProposalSet out = *this;
        if (out.size() > k) {
            out.boxes.resize(k);
            out.scores.resize(k);
            out.sources.resize(k);
        }
        return out;
    }
};

/// The hand-designed grid: for each head, for each level, one anchor per cell.
inline std::vector<Anchor> hand_designed_anchors(const FeaturePyramid& features, std::span<const RpnHead> heads) {
    std::vector<Anchor> all;
    for (std::size_t h = 0; h < heads.size(); ++h) {
        for (std::size_t l = 0; l < features.levels.size(); ++l) {
            const auto& lv = features.levels[l];
            const AnchorSpec spec{heads[h].params.kernel_h(), heads[h].params.kernel_w(), heads[h].dilation, lv.stride};
            auto grid = generate_anchor_grid(spec, lv.map.height(), lv.map.width(), static_cast<int>(l),
                                             static_cast<int>(h));
            all.insert(all.end(), grid.begin(), grid.end());
        }
    }
    return all;
}

/// Gradient-free augmentation: dense head pass, decode against the grid,
/// per-level top-K, then NMS (or plain top-K in single-stage selection).
/// Every hand-designed anchor decoded by its head, clipped, in
/// hand_designed_anchors() order (one-to-one, no selection).
inline ProposalSet augment_grid(const Scene& scene, std::span<const RpnHead> heads) {
    ProposalSet pool;
    for (std::size_t h = 0; h < heads.size(); ++h) {
        const auto& head = heads[h];
        for (std::size_t l = 0; l < scene.features.levels.size(); ++l) {
            const auto& lv = scene.features.levels[l];
            const HeadGrid grid = forward_conv(lv.map, head.params, head.dilation);
            const AnchorSpec spec{head.params.kernel_h(), head.params.kernel_w(), head.dilation, lv.stride};
            const auto anchors = generate_anchor_grid(spec, lv.map.height(), lv.map.width(), static_cast<int>(l),
                                                      static_cast<int>(h));
            for (std::size_t i = 0; i < anchors.size(); ++i) {
                const Box b = clip_to_image(decode_deltas(anchors[i].box, grid.cells[i].delta), scene.image_width,
                                            scene.image_height);
                pool.push_back(b, grid.cells[i].logit, {static_cast<int>(l), static_cast<int>(h), Origin::augmented, pool.size()});
            }
        }
    }
    return pool;
}

inline ProposalSet augment(const Scene& scene, std::span<const RpnHead> heads, const PipelineConfig& cfg) {
    ProposalSet pool;
    std::size_t anchor_offset = 0;
    for (std::size_t h = 0; h < heads.size(); ++h) {
        const auto& head = heads[h];
        for (std::size_t l = 0; l < scene.features.levels.size(); ++l) {
            const auto& lv = scene.features.levels[l];
            const HeadGrid grid = forward_conv(lv.map, head.params, head.dilation);
            const AnchorSpec spec{head.params.kernel_h(), head.params.kernel_w(), head.dilation, lv.stride};
            const auto anchors = generate_anchor_grid(spec, lv.map.height(), lv.map.width(), static_cast<int>(l),
                                                      static_cast<int>(h));
            std::vector<double> logits(anchors.size());
            for (std::size_t i = 0; i < anchors.size(); ++i) logits[i] = grid.cells[i].logit;
            auto order = order_by_score(logits);
            if (order.size() > cfg.pre_nms_top_k) order.resize(cfg.pre_nms_top_k);
            for (std::size_t i : order) {
                const Box b = clip_to_image(decode_deltas(anchors[i].box, grid.cells[i].delta), scene.image_width,
                                            scene.image_height);
                pool.push_back(b, logits[i],
                               {static_cast<int>(l), static_cast<int>(h), Origin::augmented, anchor_offset + i});
            }
            anchor_offset += anchors.size();
        }
    }
    std::vector<std::size_t> keep;
    if (cfg.single_stage_selection) {
        keep = order_by_score(pool.scores);
        if (keep.size() > cfg.post_nms_keep) keep.resize(cfg.post_nms_keep);
    } else {
        keep = nms(pool.boxes, pool.scores, cfg.augment_nms_iou, cfg.post_nms_keep);
    }
    return pool.select(keep);
}

/// Appends, per ground truth, its highest-IoU hand-designed anchor (ties to
/// the lowest anchor index). An anchor chosen by several gts is appended once.
inline ProposalSet anchor_guided_append(const ProposalSet& augmented, std::span<const Anchor> hand_anchors,
                                        std::span<const Box> gts) {
    ProposalSet out = augmented;
    if (hand_anchors.empty()) return out;
    std::vector<std::size_t> chosen;
    for (const auto& gt : gts) {
        std::size_t best = 0;
        double best_iou = -1.0;
        for (std::size_t i = 0; i < hand_anchors.size(); ++i) {
            const double v = iou(hand_anchors[i].box, gt);
            if (v > best_iou) {
                best_iou = v;
                best = i;
            }
        }
        if (std::find(chosen.begin(), chosen.end(), best) == chosen.end()) chosen.push_back(best);
    }
    for (std::size_t i : chosen) {
        const auto& a = hand_anchors[i];
        out.push_back(a.box, -std::numeric_limits<double>::infinity(),
                      {a.level_index, a.head_index, Origin::anchor_guided, i});
    }
    return out;
}

enum class AnchorLabel { negative, positive, ignore };

struct LabelAssignment {
    std::vector<AnchorLabel> labels;
    std::vector<int> matched_gt;  // argmax-IoU gt, -1 when there are no gts
    std::vector<double> max_iou;

    std::size_t count(AnchorLabel l) const { return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), l)); }
};

/// Positive when max IoU > pos_iou, negative when < neg_iou, ignored in
/// between; each gt's single best anchor is forced positive. Zero-area
/// boxes are always ignored.
inline LabelAssignment assign_labels(std::span<const Box> anchors, std::span<const Box> gts, const PipelineConfig& cfg) {
    LabelAssignment a;
    a.labels.assign(anchors.size(), AnchorLabel::ignore);
    a.matched_gt.assign(anchors.size(), -1);
    a.max_iou.assign(anchors.size(), 0.0);
    const IouMatrix m = match_quality_matrix(anchors, gts);
    for (std::size_t i = 0; i < anchors.size(); ++i) {
        if (!anchors[i].has_positive_area()) continue;
        double best = 0.0;
        int arg = gts.empty() ? -1 : 0;
        for (std::size_t j = 0; j < gts.size(); ++j) {
            if (m.at(i, j) > best) {
                best = m.at(i, j);
                arg = static_cast<int>(j);
            }
        }
        a.max_iou[i] = best;
        a.matched_gt[i] = arg;
        if (best > cfg.pos_iou) {
            a.labels[i] = AnchorLabel::positive;
        } else if (best < cfg.neg_iou) {
            a.labels[i] = AnchorLabel::negative;
        }
    }
    for (std::size_t j = 0; j < gts.size(); ++j) {
        std::size_t best_i = 0;
        double best = 0.0;
        for (std::size_t i = 0; i < anchors.size(); ++i) {
            if (m.at(i, j) > best) {
                best = m.at(i, j);
                best_i = i;
            }
        }
        if (best > 0.0) a.labels[best_i] = AnchorLabel::positive;
    }
    return a;
}

/// Greedy NMS among positives, scored by their IoU with the best-matching gt.
/// Suppressed positives become ignored; exempt boxes, negatives and ignores
/// are left as they are.
inline LabelAssignment filter_positive_redundancy(std::span<const Box> anchors, const LabelAssignment& assignment,
                                                  std::span<const char> exempt, const PipelineConfig& cfg) {
    LabelAssignment out = assignment;
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < anchors.size(); ++i) {
        const bool is_exempt = i < exempt.size() && exempt[i];
        if (assignment.labels[i] == AnchorLabel::positive && !is_exempt) idx.push_back(i);
    }
    if (idx.empty()) return out;
    std::vector<Box> boxes;
    std::vector<double> scores;
    for (std::size_t i : idx) {
        boxes.push_back(anchors[i]);
        scores.push_back(assignment.max_iou[i]);
    }
    const auto keep = nms(boxes, scores, cfg.positive_filter_nms_iou, boxes.size());
    std::vector<char> kept(idx.size(), 0);
    for (std::size_t k : keep) kept[k] = 1;
    for (std::size_t k = 0; k < idx.size(); ++k) {
        if (!kept[k]) out.labels[idx[k]] = AnchorLabel::ignore;
    }
    return out;
}

/// Up to batch_size indices, at most positive_fraction of them positive,
/// drawn uniformly without replacement. Positives first, each group sorted.
inline std::vector<std::size_t> sample_minibatch(std::span<const AnchorLabel> labels, const PipelineConfig& cfg, Rng& rng) {
    std::vector<std::size_t> pos;
    std::vector<std::size_t> neg;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == AnchorLabel::positive) pos.push_back(i);
        if (labels[i] == AnchorLabel::negative) neg.push_back(i);
    }
    if (pos.empty() && neg.empty()) throw std::invalid_argument("sample_minibatch: no labeled examples");
    const auto max_pos = static_cast<std::size_t>(std::floor(static_cast<double>(cfg.batch_size) * cfg.positive_fraction));
    const std::size_t n_pos = std::min(pos.size(), max_pos);
    const std::size_t n_neg = std::min(neg.size(), cfg.batch_size - n_pos);
    auto draw = [&rng](std::vector<std::size_t>& pool, std::size_t k) {
        for (std::size_t i = 0; i < k; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
            std::swap(pool[i], pool[j]);
        }
        pool.resize(k);
        std::sort(pool.begin(), pool.end());
    };
    draw(pos, n_pos);
    draw(neg, n_neg);
    pos.insert(pos.end(), neg.begin(), neg.end());
    return pos;
}

/// m x n RoI Align patch for a box on its source level.
inline FeatureMap extract_patch(const Scene& scene, const RpnHead& head, const Box& box, int level_index) {
    const auto& lv = scene.features.levels.at(static_cast<std::size_t>(level_index));
    return roi_align(lv.map, to_feature_coords(box, lv.stride), head.params.kernel_h(), head.params.kernel_w());
}

struct RefineStats {
    std::size_t skipped_zero_area = 0;
};

/// FC-form pass over each anchor's RoI patch on its source level; one
/// proposal per non-degenerate input, re-sorted by the refined logit.
inline ProposalSet refine(const ProposalSet& anchors, const Scene& scene, std::span<const RpnHead> heads,
                          RefineStats* stats = nullptr) {
    ProposalSet raw;
    RefineStats local;
    for (std::size_t i = 0; i < anchors.size(); ++i) {
        const Box& box = anchors.boxes[i];
        const auto& src = anchors.sources[i];
        if (!box.has_positive_area()) {
            ++local.skipped_zero_area;
            continue;
        }
        const RpnHead& head = heads[static_cast<std::size_t>(src.head_index)];
        const FeatureMap patch = extract_patch(scene, head, box, src.level_index);
        const HeadOutput out = forward_fc(patch, head.params);
        const Box refined = clip_to_image(decode_deltas(box, out.delta), scene.image_width, scene.image_height);
        raw.push_back(refined, out.logit, {src.level_index, src.head_index, src.origin, i});
    }
    if (stats) *stats = local;
    const auto order = order_by_score(raw.scores);
    return raw.select(order);
}

struct TrainingBatch {
    std::vector<TrainingExample> examples;
    std::size_t positives = 0;
    std::size_t negatives = 0;
    std::size_t augmented = 0;      // boxes coming out of augmentation
    std::size_t anchor_guided = 0;  // boxes appended by Anchor Guided
};

/// Everything in a training step up to (not including) the loss: augment,
/// Anchor Guided, labelling, positive filtering, sampling and patch
/// extraction. Patches are plain values, so nothing upstream of them can
/// receive gradient.
inline TrainingBatch build_training_batch(const Scene& scene, std::span<const RpnHead> heads, const PipelineConfig& cfg,
                                          Rng& rng) {
    TrainingBatch batch;
    const auto gts = scene.active_gts();
    if (gts.empty()) return batch;
    ProposalSet candidates = augment(scene, heads, cfg);
    batch.augmented = candidates.size();
    if (cfg.anchor_guided) {
        const auto hand = hand_designed_anchors(scene.features, heads);
        candidates = anchor_guided_append(candidates, hand, gts);
    }
    batch.anchor_guided = candidates.size() - batch.augmented;

    std::vector<char> exempt(candidates.size(), 0);
    for (std::size_t i = 0; i < candidates.size(); ++i) exempt[i] = candidates.sources[i].origin == Origin::anchor_guided;
    auto labels = assign_labels(candidates.boxes, gts, cfg);
    labels = filter_positive_redundancy(candidates.boxes, labels, exempt, cfg);
    if (labels.count(AnchorLabel::positive) + labels.count(AnchorLabel::negative) == 0) return batch;

    const auto sampled = sample_minibatch(labels.labels, cfg, rng);
    batch.examples.reserve(sampled.size());
    for (std::size_t i : sampled) {
        const auto& src = candidates.sources[i];
        const RpnHead& head = heads[static_cast<std::size_t>(src.head_index)];
        TrainingExample ex;
        ex.head_index = static_cast<std::size_t>(src.head_index);
        ex.patch = extract_patch(scene, head, candidates.boxes[i], src.level_index);
        ex.positive = labels.labels[i] == AnchorLabel::positive;
        if (ex.positive) {
            ex.target = encode_deltas(candidates.boxes[i], gts[static_cast<std::size_t>(labels.matched_gt[i])]);
            ++batch.positives;
        } else {
            ++batch.negatives;
        }
        batch.examples.push_back(std::move(ex));
    }
    return batch;
}

struct StepRecord {
    LossBreakdown loss;
    std::size_t positives = 0;
    std::size_t negatives = 0;
    bool skipped = false;  // no gts or no labeled examples
};

/// One iteration: augment, refine-forward, loss, backward, update.
inline StepRecord train_step(const Scene& scene, std::span<RpnHead> heads, const PipelineConfig& cfg,
                             const LossConfig& loss_cfg, Optimizer& optimizer, Rng& rng) {
    StepRecord rec;
    const TrainingBatch batch = build_training_batch(scene, heads, cfg, rng);
    if (batch.examples.empty()) {
        rec.skipped = true;
        return rec;
    }
    const BatchGradients bg = backward(batch.examples, heads, loss_cfg);
    rec.loss = bg.loss;
    rec.positives = batch.positives;
    rec.negatives = batch.negatives;
    optimizer.step(heads, bg.grads);
    return rec;
}

inline StepRecord train_step(const Scene& scene, std::span<RpnHead> heads, const PipelineConfig& cfg,
                             const LossConfig& loss_cfg, double epsilon, Rng& rng) {
    Optimizer sgd(epsilon, 0.0);
    return train_step(scene, heads, cfg, loss_cfg, sgd, rng);
}

/// augment -> refine -> final NMS, keeping cfg.final_keep proposals.
inline ProposalSet infer(const Scene& scene, std::span<const RpnHead> heads, const PipelineConfig& cfg) {
    const ProposalSet augmented = augment(scene, heads, cfg);
    const ProposalSet refined = refine(augmented, scene, heads);
    const auto keep = nms(refined.boxes, refined.scores, cfg.final_nms_threshold(), cfg.final_keep);
    return refined.select(keep);
}

/// IoU floor inside the log of em_elbo.
inline constexpr double kElboIouFloor = 1e-6;

/// Mean over gts of ln(max(best IoU with any proposal, 1e-6)).
inline double em_elbo(std::span<const Box> proposals, std::span<const Box> gts) {
    if (gts.empty()) throw std::invalid_argument("em_elbo: scene has no ground truth");
    double sum = 0.0;
    for (const auto& gt : gts) {
        double best = 0.0;
        for (const auto& p : proposals) best = std::max(best, iou(p, gt));
        sum += std::log(std::max(best, kElboIouFloor));
    }
    return sum / static_cast<double>(gts.size());
}

/// Likelihood proxy of the EM reading: augmentation estimates the latent
/// anchors with theta fixed, training updates theta given them.
inline double em_elbo_diagnostic(const Scene& scene, std::span<const RpnHead> heads, const PipelineConfig& cfg) {
    const auto gts = scene.active_gts();
    if (gts.empty()) throw std::invalid_argument("em_elbo_diagnostic: scene has no ground truth");
    return em_elbo(infer(scene, heads, cfg).boxes, gts);
}

/// Heads with initialised parameters, one per configured dilation.
inline std::vector<RpnHead> make_heads(const PipelineConfig& cfg, int in_channels, int mid_channels, double init_std,
                                       Rng& rng) {
    std::vector<RpnHead> heads;
    for (int d : cfg.dilations) {
        heads.push_back({d, make_head_params(in_channels, mid_channels, cfg.kernel_h, cfg.kernel_w, init_std, rng)});
    }
    return heads;
}

}  // namespace aadi
