/*
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

/// @file commands.hpp
/// @brief Drivers behind the `aadi` CLI subcommands.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "aadi/geometry.hpp"
#include "aadi/head.hpp"
#include "aadi/io/coco.hpp"
#include "aadi/io/config.hpp"
#include "aadi/io/metrics_doc.hpp"
#include "aadi/io/svg.hpp"
#include "aadi/io/synthetic.hpp"
#include "aadi/metrics.hpp"
#include "aadi/pipeline.hpp"
#include "aadi/random.hpp"
#include "aadi/tensor.hpp"

namespace aadi {

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

struct EquivalenceResult {
    double max_abs_error = 0.0;
    std::size_t instances = 0;
    std::size_t cells = 0;
};

/// Compares the dense head (conv form) with RoI Align + FC form at every
/// cell of randomly shaped instances: C_in <= 8, H, W <= 32, d in 1..4,
/// odd kernels up to 5. With corrupt_layout the FC side reads the taps of
/// each channel in reversed order, which must break the equivalence.
inline EquivalenceResult equivalence_harness(std::uint64_t seed, int instances, bool corrupt_layout = false) {
    Rng rng(seed);
    EquivalenceResult res;
    constexpr int kStrides[] = {1, 4, 8};
    constexpr int kKernels[] = {1, 3, 5};
    for (int t = 0; t < instances; ++t) {
        const int cin = 1 + static_cast<int>(rng.below(8));
        const int cmid = 1 + static_cast<int>(rng.below(8));
        const int H = 1 + static_cast<int>(rng.below(32));
        const int W = 1 + static_cast<int>(rng.below(32));
        const int d = 1 + static_cast<int>(rng.below(4));
        const int s = kStrides[rng.below(3)];
        const int kh = t % 4 == 0 ? kKernels[rng.below(3)] : 3;
        const int kw = t % 4 == 0 ? kKernels[rng.below(3)] : 3;

        FeatureMap fm(cin, H, W);
        for (double& v : fm.values()) v = rng.normal();
        RpnHeadParams p = make_head_params(cin, cmid, kh, kw, 1.0, rng);
        for (double& b : p.hidden.bias) b = rng.normal(0.0, 0.5);
        p.objectness_bias[0] = rng.normal();
        for (double& b : p.regression_bias) b = rng.normal();

        RpnHeadParams fc_params = p;
        if (corrupt_layout) {
            const std::size_t taps = static_cast<std::size_t>(kh) * kw;
            for (std::size_t blk = 0; blk + taps <= fc_params.hidden.weights.size(); blk += taps) {
                std::reverse(fc_params.hidden.weights.begin() + static_cast<std::ptrdiff_t>(blk),
                             fc_params.hidden.weights.begin() + static_cast<std::ptrdiff_t>(blk + taps));
            }
        }

        const HeadGrid dense = forward_conv(fm, p, d);
        const AnchorSpec spec{kh, kw, d, s};
        for (const auto& a : generate_anchor_grid(spec, H, W)) {
            const FeatureMap patch = roi_align(fm, to_feature_coords(a.box, s), kh, kw);
            const HeadOutput fc = forward_fc(patch, fc_params);
            const HeadOutput& cv = dense.at(a.cell_row, a.cell_col);
            const double err = std::max({std::abs(fc.logit - cv.logit), std::abs(fc.delta.dx - cv.delta.dx),
                                         std::abs(fc.delta.dy - cv.delta.dy), std::abs(fc.delta.dw - cv.delta.dw),
                                         std::abs(fc.delta.dh - cv.delta.dh)});
            res.max_abs_error = std::max(res.max_abs_error, err);
            ++res.cells;
        }
        ++res.instances;
    }
    return res;
}

struct GradientCheckResult {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::string worst;  // "<head>/<tensor>[index]"
};

/// Relative error |a - n| / max(|a|, |n|, floor).
inline constexpr double kGradientRelFloor = 1e-6;

/// Central finite differences (step h) against backward() on a random
/// two-head batch, params_per_tensor randomly chosen entries per tensor.
inline GradientCheckResult gradient_check(std::uint64_t seed, int params_per_tensor, double h = 1e-5) {
    Rng rng(seed);
    std::vector<RpnHead> heads;
    for (int k = 0; k < 2; ++k) {
        RpnHeadParams p = make_head_params(4, 6, 3, 3, 0.5, rng);
        for (double& b : p.hidden.bias) b = rng.normal(0.0, 0.5);
        for (double& b : p.regression_bias) b = rng.normal(0.0, 0.1);
        heads.push_back({k + 1, std::move(p)});
    }
    std::vector<TrainingExample> batch;
    for (int i = 0; i < 24; ++i) {
        TrainingExample ex;
        ex.head_index = static_cast<std::size_t>(i % 2);
        ex.patch = FeatureMap(4, 3, 3);
        for (double& v : ex.patch.values()) v = rng.normal();
        ex.positive = i % 3 != 0;
        // Mix of errors inside and outside the smooth-L1 quadratic zone.
        ex.target = {rng.normal(0.0, 1.0), rng.normal(0.0, 1.0), rng.normal(0.0, 1.0), rng.normal(0.0, 1.0)};
        batch.push_back(std::move(ex));
    }
    const LossConfig cfg{};
    const BatchGradients analytic = backward(batch, heads, cfg);

    GradientCheckResult res;
    for (std::size_t hi = 0; hi < heads.size(); ++hi) {
        const auto names = heads[hi].params.tensors();
        for (std::size_t ti = 0; ti < names.size(); ++ti) {
            const std::size_t n = heads[hi].params.tensors()[ti].values.size();
            std::vector<std::size_t> idx(n);
            std::iota(idx.begin(), idx.end(), std::size_t{0});
            const std::size_t k = std::min(n, static_cast<std::size_t>(params_per_tensor));
            for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
            idx.resize(k);
            for (std::size_t j : idx) {
                double& v = heads[hi].params.tensors()[ti].values[j];
                const double orig = v;
                v = orig + h;
                const double lp = backward(batch, heads, cfg).loss.total;
                v = orig - h;
                const double lm = backward(batch, heads, cfg).loss.total;
                v = orig;
                const double numeric = (lp - lm) / (2.0 * h);
                const double a = analytic.grads[hi].tensors()[ti].values[j];
                const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), kGradientRelFloor});
                if (rel > res.max_rel_error || res.worst.empty()) {
                    res.max_rel_error = std::max(res.max_rel_error, rel);
                    if (rel >= res.max_rel_error) {
                        res.worst = std::to_string(hi) + "/" + std::string(names[ti].name) + "[" + std::to_string(j) + "]";
                    }
                }
                ++res.checked;
            }
        }
    }
    return res;
}

struct VerifyOptions {
    std::uint64_t seed = 1;
    int instances = 100;
    int params_per_tensor = 20;
    bool corrupt_layout = false;  // negative control
};

inline constexpr double kEquivalenceTolerance = 1e-9;
inline constexpr double kGradientTolerance = 1e-4;

struct VerifyReport {
    EquivalenceResult equivalence;
    GradientCheckResult gradients;
    bool passed = false;
    std::string text;
};

inline VerifyReport cmd_verify(const VerifyOptions& opt) {
    VerifyReport r;
    r.equivalence = equivalence_harness(opt.seed, opt.instances, opt.corrupt_layout);
    r.gradients = gradient_check(opt.seed + 1, opt.params_per_tensor);
    const bool eq_ok = r.equivalence.max_abs_error <= kEquivalenceTolerance;
    const bool gr_ok = r.gradients.max_rel_error <= kGradientTolerance;
    r.passed = eq_ok && gr_ok;
    std::ostringstream os;
    os.precision(6);
    os << "conv/fc equivalence: " << r.equivalence.instances << " instances, " << r.equivalence.cells
       << " cells, max abs error " << std::scientific << r.equivalence.max_abs_error << " (tol " << kEquivalenceTolerance
       << ") " << (eq_ok ? "PASS" : "FAIL") << "\n";
    os << "gradient check: " << r.gradients.checked << " parameters, max rel error " << r.gradients.max_rel_error
       << " at " << r.gradients.worst << " (tol " << kGradientTolerance << ") " << (gr_ok ? "PASS" : "FAIL") << "\n";
    r.text = os.str();
    return r;
}

// ---------------------------------------------------------------------------
// shared experiment plumbing
// ---------------------------------------------------------------------------

/// Independent seeded streams of one experiment.
struct ExperimentStreams {
    Rng train_scenes;
    Rng eval_scenes;
    Rng init;
    Rng sampling;
};

inline ExperimentStreams experiment_streams(std::uint64_t seed) {
    Rng root(seed);
    Rng a = root.fork(1);
    Rng b = root.fork(2);
    Rng c = root.fork(3);
    Rng d = root.fork(4);
    return {a, b, c, d};
}

/// Same parameters with the regression branch zeroed: proposals are then the
/// hand-designed grid, ranked by the head's own objectness.
inline std::vector<RpnHead> zero_delta_heads(std::span<const RpnHead> heads) {
    std::vector<RpnHead> out(heads.begin(), heads.end());
    for (auto& h : out) {
        std::fill(h.params.regression_weights.begin(), h.params.regression_weights.end(), 0.0);
        std::fill(h.params.regression_bias.begin(), h.params.regression_bias.end(), 0.0);
    }
    return out;
}

struct EvalSummary {
    RecallReport ar100;
    RecallReport ar1000;
    RecallReport baseline_ar100;
    RecallReport baseline_ar1000;
    double em_elbo = 0.0;
    double mean_best_iou_hand = 0.0;
    double mean_best_iou_augmented = 0.0;
    double auc_hand = 0.0;
    double auc_augmented = 0.0;
    double mean_best_iou_selected = 0.0;  // the top-2000 set fed to refinement
    double auc_selected = 0.0;
};

inline double mean_em_elbo(std::span<const Scene> scenes, std::span<const RpnHead> heads, const PipelineConfig& cfg) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& s : scenes) {
        if (s.active_gts().empty()) continue;
        sum += em_elbo_diagnostic(s, heads, cfg);
        ++n;
    }
    return n ? sum / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

inline double sorted_mean(std::vector<double> v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(v.begin(), v.end());
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

inline double auc_or_nan(const SeparabilitySamples& s) {
    const auto p = s.positives();
    if (p == 0 || p == s.labels.size()) return std::numeric_limits<double>::quiet_NaN();
    return auc_roc(s.scores, s.labels);
}

/// AR of the full pipeline and of the zero-delta baseline, plus the anchor
/// quality of hand-designed vs augmented anchors, pooled over scenes.
/// "augmented" is the whole decoded grid, one box per hand-designed anchor;
/// "selected" is the top-2000 subset that refinement sees.
inline EvalSummary evaluate(std::span<const Scene> scenes, std::span<const RpnHead> heads, const PipelineConfig& cfg) {
    const auto baseline = zero_delta_heads(heads);
    RecallAccumulator ar100(100), ar1000(1000), base100(100), base1000(1000);
    std::vector<double> best_hand, best_aug, best_sel, elbo;
    SeparabilitySamples sep_hand, sep_aug, sep_sel;
    for (const auto& scene : scenes) {
        const auto gts = scene.active_gts();
        const ProposalSet augmented = augment(scene, heads, cfg);
        const ProposalSet refined = refine(augmented, scene, heads);
        const auto keep = nms(refined.boxes, refined.scores, cfg.final_nms_threshold(), cfg.final_keep);
        const ProposalSet proposals = refined.select(keep);
        const ProposalSet base = infer(scene, baseline, cfg);
        ar100.add(proposals.boxes, gts);
        ar1000.add(proposals.boxes, gts);
        base100.add(base.boxes, gts);
        base1000.add(base.boxes, gts);
        if (gts.empty()) continue;
        elbo.push_back(em_elbo(proposals.boxes, gts));
        const auto hand = boxes_of(hand_designed_anchors(scene.features, heads));
        for (double v : best_iou_per_gt(hand, gts)) best_hand.push_back(v);
        const auto grid = augment_grid(scene, heads).boxes;
        for (double v : best_iou_per_gt(grid, gts)) best_aug.push_back(v);
        for (double v : best_iou_per_gt(augmented.boxes, gts)) best_sel.push_back(v);
        sep_hand.append(hand, gts, {});
        sep_aug.append(grid, gts, {});
        sep_sel.append(augmented.boxes, gts, {});
    }
    EvalSummary s;
    s.ar100 = ar100.report();
    s.ar1000 = ar1000.report();
    s.baseline_ar100 = base100.report();
    s.baseline_ar1000 = base1000.report();
    s.em_elbo = sorted_mean(elbo);
    s.mean_best_iou_hand = sorted_mean(best_hand);
    s.mean_best_iou_augmented = sorted_mean(best_aug);
    s.auc_hand = auc_or_nan(sep_hand);
    s.auc_augmented = auc_or_nan(sep_aug);
    s.mean_best_iou_selected = sorted_mean(best_sel);
    s.auc_selected = auc_or_nan(sep_sel);
    return s;
}

inline void put_eval_metrics(MetricsDocument& doc, const EvalSummary& s) {
    doc.set("ar100", s.ar100.ar);
    doc.set("ar1000", s.ar1000.ar);
    doc.set("ar100_small", s.ar100.ar_small);
    doc.set("ar100_medium", s.ar100.ar_medium);
    doc.set("ar100_large", s.ar100.ar_large);
    doc.set("baseline_ar100", s.baseline_ar100.ar);
    doc.set("baseline_ar1000", s.baseline_ar1000.ar);
    doc.set("em_elbo", s.em_elbo);
    doc.set("mean_best_iou_hand", s.mean_best_iou_hand);
    doc.set("mean_best_iou_augmented", s.mean_best_iou_augmented);
    doc.set("auc_hand", s.auc_hand);
    doc.set("auc_augmented", s.auc_augmented);
    doc.set("mean_best_iou_selected", s.mean_best_iou_selected);
    doc.set("auc_selected", s.auc_selected);
    if (s.ar100.recall_at) {
        doc.curve("recall_at_iou_top100", std::vector<double>(s.ar100.recall_at->begin(), s.ar100.recall_at->end()));
    }
}

inline MetricsDocument new_document(const std::string& command, const ExperimentConfig& cfg) {
    MetricsDocument doc;
    doc.command = command;
    doc.seed = cfg.seed;
    doc.config_digest = config_digest(cfg);
    doc.timestamp = utc_timestamp();
    return doc;
}

/// Throws when a checkpoint does not fit the configured heads and features.
inline void check_heads_match(const ExperimentConfig& cfg, std::span<const RpnHead> heads) {
    if (heads.size() != cfg.pipeline.dilations.size()) {
        throw std::runtime_error("checkpoint has " + std::to_string(heads.size()) + " heads, config expects " +
                                 std::to_string(cfg.pipeline.dilations.size()));
    }
    for (std::size_t i = 0; i < heads.size(); ++i) {
        const auto& p = heads[i].params;
        if (heads[i].dilation != cfg.pipeline.dilations[i] || p.kernel_h() != cfg.pipeline.kernel_h ||
            p.kernel_w() != cfg.pipeline.kernel_w || p.in_channels() != cfg.scenes.in_channels) {
            throw std::runtime_error("checkpoint head " + std::to_string(i) + " does not match config (dilation " +
                                     std::to_string(heads[i].dilation) + ", kernel " + std::to_string(p.kernel_h()) + "x" +
                                     std::to_string(p.kernel_w()) + ", in_channels " + std::to_string(p.in_channels()) + ")");
        }
    }
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainOutcome {
    MetricsDocument doc;
    std::vector<RpnHead> heads;
};

inline double window_mean(const std::vector<double>& v, bool from_end, std::size_t window) {
    std::vector<double> finite;
    for (double x : v) {
        if (std::isfinite(x)) finite.push_back(x);
    }
    if (finite.empty()) return std::numeric_limits<double>::quiet_NaN();
    const std::size_t n = std::min(window, finite.size());
    const auto first = from_end ? finite.end() - static_cast<std::ptrdiff_t>(n) : finite.begin();
    return std::accumulate(first, first + static_cast<std::ptrdiff_t>(n), 0.0) / static_cast<double>(n);
}

/// Runs the training loop over seeded synthetic scenes (scene i % N at
/// iteration i) and evaluates on a held-out split.
inline TrainOutcome cmd_train(const ExperimentConfig& cfg, std::ostream* log = nullptr) {
    auto streams = experiment_streams(cfg.seed);
    const auto train = generate_scenes(streams.train_scenes, cfg.scenes, cfg.train_scenes);
    const auto eval = generate_scenes(streams.eval_scenes, cfg.scenes, cfg.eval_scenes);
    auto heads = make_heads(cfg.pipeline, cfg.scenes.in_channels, cfg.mid_channels, cfg.init_std, streams.init);
    Optimizer opt(cfg.learning_rate, cfg.momentum);

    std::vector<double> total_curve, cls_curve, reg_curve, em_curve, em_iters;
    std::size_t skipped = 0;
    auto record_em = [&](int it) {
        em_iters.push_back(it);
        em_curve.push_back(mean_em_elbo(eval, heads, cfg.pipeline));
    };
    record_em(0);
    for (int it = 0; it < cfg.iterations; ++it) {
        const Scene& scene = train[static_cast<std::size_t>(it) % train.size()];
        const StepRecord rec = train_step(scene, heads, cfg.pipeline, cfg.loss, opt, streams.sampling);
        if (rec.skipped) {
            ++skipped;
            total_curve.push_back(std::numeric_limits<double>::quiet_NaN());
            cls_curve.push_back(std::numeric_limits<double>::quiet_NaN());
            reg_curve.push_back(std::numeric_limits<double>::quiet_NaN());
        } else {
            if (!std::isfinite(rec.loss.total)) {
                throw std::runtime_error("non-finite loss at iteration " + std::to_string(it) + " (cls " +
                                         std::to_string(rec.loss.cls) + ", reg " + std::to_string(rec.loss.reg) +
                                         ", positives " + std::to_string(rec.positives) + ")");
            }
            total_curve.push_back(rec.loss.total);
            cls_curve.push_back(rec.loss.cls);
            reg_curve.push_back(rec.loss.reg);
        }
        if (log && (it % 50 == 0 || it + 1 == cfg.iterations)) {
            *log << "iter " << it << " loss " << rec.loss.total << " (cls " << rec.loss.cls << ", reg " << rec.loss.reg
                 << ", pos " << rec.positives << ", neg " << rec.negatives << ")\n";
        }
        if ((it + 1) % cfg.em_every == 0 && it + 1 != cfg.iterations) record_em(it + 1);
    }
    if (cfg.iterations > 0) record_em(cfg.iterations);

    const EvalSummary summary = evaluate(eval, heads, cfg.pipeline);
    TrainOutcome out;
    out.doc = new_document("train", cfg);
    out.doc.set("iterations", cfg.iterations);
    out.doc.set("train_scenes", cfg.train_scenes);
    out.doc.set("eval_scenes", cfg.eval_scenes);
    out.doc.set("skipped_steps", static_cast<double>(skipped));
    out.doc.set("loss_initial", window_mean(total_curve, false, 10));
    out.doc.set("loss_final", window_mean(total_curve, true, 10));
    out.doc.set("em_elbo_initial", em_curve.front());
    out.doc.set("em_elbo_final", em_curve.back());
    put_eval_metrics(out.doc, summary);
    out.doc.curve("loss_total", total_curve);
    out.doc.curve("loss_cls", cls_curve);
    out.doc.curve("loss_reg", reg_curve);
    out.doc.curve("em_elbo_iteration", em_iters);
    out.doc.curve("em_elbo", em_curve);
    out.heads = std::move(heads);
    return out;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// Inference over the held-out split that cmd_train evaluates on.
inline MetricsDocument cmd_eval(const ExperimentConfig& cfg, std::span<const RpnHead> heads) {
    check_heads_match(cfg, heads);
    auto streams = experiment_streams(cfg.seed);
    const auto eval = generate_scenes(streams.eval_scenes, cfg.scenes, cfg.eval_scenes);
    MetricsDocument doc = new_document("eval", cfg);
    doc.set("eval_scenes", cfg.eval_scenes);
    put_eval_metrics(doc, evaluate(eval, heads, cfg.pipeline));
    doc.note("selection", cfg.pipeline.single_stage_selection ? "single_stage_top_k" : "nms");
    return doc;
}

// ---------------------------------------------------------------------------
// anchor-stats
// ---------------------------------------------------------------------------

/// Mean best IoU and separability AUC of each configured anchor family (one
/// per dilation x stride) against every image's annotations. Results do not
/// depend on the order of images or annotations in the file.
inline MetricsDocument cmd_anchor_stats(const ExperimentConfig& cfg, const AnnotationSet& set) {
    auto images = set.images;
    std::sort(images.begin(), images.end(), [](const ImageInfo& a, const ImageInfo& b) { return a.id < b.id; });
    std::vector<std::vector<Box>> gts_per_image;
    std::size_t total_gts = 0;
    for (const auto& img : images) {
        auto gts = set.gts_for_image(img.id);
        std::sort(gts.begin(), gts.end(), [](const Box& a, const Box& b) {
            return std::tie(a.x1, a.y1, a.x2, a.y2) < std::tie(b.x1, b.y1, b.x2, b.y2);
        });
        total_gts += gts.size();
        gts_per_image.push_back(std::move(gts));
    }
    if (total_gts == 0) throw std::runtime_error("anchor-stats: annotation set has no (non-crowd) ground truth");

    MetricsDocument doc = new_document("anchor-stats", cfg);
    doc.set("images", static_cast<double>(images.size()));
    doc.set("gts", static_cast<double>(total_gts));
    std::vector<double> best_all(total_gts, 0.0);
    SeparabilitySamples sep_all;
    for (int d : cfg.pipeline.dilations) {
        for (int s : cfg.scenes.strides) {
            const AnchorSpec spec{cfg.pipeline.kernel_h, cfg.pipeline.kernel_w, d, s};
            std::vector<double> best;
            SeparabilitySamples sep;
            std::size_t g_offset = 0;
            for (std::size_t i = 0; i < images.size(); ++i) {
                const auto& gts = gts_per_image[i];
                const int fh = (images[i].height + s - 1) / s;
                const int fw = (images[i].width + s - 1) / s;
                const auto anchors = boxes_of(generate_anchor_grid(spec, fh, fw));
                const auto b = best_iou_per_gt(anchors, gts);
                for (std::size_t j = 0; j < b.size(); ++j) {
                    best.push_back(b[j]);
                    best_all[g_offset + j] = std::max(best_all[g_offset + j], b[j]);
                }
                g_offset += gts.size();
                sep.append(anchors, gts, {});
                sep_all.append(anchors, gts, {});
            }
            const std::string name = "k" + std::to_string(spec.kernel_h) + "x" + std::to_string(spec.kernel_w) + "_d" +
                                     std::to_string(d) + "_s" + std::to_string(s);
            doc.set(name + ".scale_px", anchor_scale(spec) * s);
            doc.set(name + ".mean_best_iou", sorted_mean(best));
            doc.set(name + ".auc_roc", auc_or_nan(sep));
            doc.set(name + ".positives", static_cast<double>(sep.positives()));
            doc.set(name + ".negatives", static_cast<double>(sep.labels.size() - sep.positives()));
        }
    }
    doc.set("all.mean_best_iou", sorted_mean(best_all));
    doc.set("all.auc_roc", auc_or_nan(sep_all));
    return doc;
}

// ---------------------------------------------------------------------------
// render
// ---------------------------------------------------------------------------

/// Three panels for one scene: hand-designed anchors (the best-matching
/// ones), augmented anchors and final proposals, each capped at max_boxes.
inline std::string render_scene(const Scene& scene, std::span<const RpnHead> heads, const PipelineConfig& cfg,
                                std::size_t max_boxes) {
    const auto gts = scene.active_gts();
    const auto hand = boxes_of(hand_designed_anchors(scene.features, heads));
    std::vector<double> quality(hand.size(), 0.0);
    for (std::size_t i = 0; i < hand.size(); ++i) {
        for (const auto& g : gts) quality[i] = std::max(quality[i], iou(hand[i], g));
    }
    auto order = order_by_score(quality);
    if (order.size() > max_boxes) order.resize(max_boxes);
    SvgPanel hand_panel{"hand-designed anchors", {}, "#1f77b4"};
    for (std::size_t i : order) hand_panel.boxes.push_back(hand[i]);

    const ProposalSet augmented = augment(scene, heads, cfg);
    const ProposalSet proposals = infer(scene, heads, cfg);
    SvgPanel aug_panel{"augmented anchors", augmented.top(max_boxes).boxes, "#ff7f0e"};
    SvgPanel prop_panel{"proposals", proposals.top(max_boxes).boxes, "#d62728"};
    const std::vector<SvgPanel> panels{hand_panel, aug_panel, prop_panel};
    return render_svg(scene.image_width, scene.image_height, gts, panels);
}

/// Renders the first held-out scene of the experiment.
inline std::string cmd_render(const ExperimentConfig& cfg, std::span<const RpnHead> heads) {
    check_heads_match(cfg, heads);
    auto streams = experiment_streams(cfg.seed);
    const Scene scene = generate_synthetic_scene(streams.eval_scenes, cfg.scenes);
    return render_scene(scene, heads, cfg.pipeline, static_cast<std::size_t>(cfg.render_max_boxes));
}

/// Freshly initialised heads for a config (used when no checkpoint is given).
inline std::vector<RpnHead> initial_heads(const ExperimentConfig& cfg) {
    auto streams = experiment_streams(cfg.seed);
    return make_heads(cfg.pipeline, cfg.scenes.in_channels, cfg.mid_channels, cfg.init_std, streams.init);
}

}  // namespace aadi
