#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "aadi/commands.hpp"
#include "aadi/io/synthetic.hpp"
#include "aadi/metrics.hpp"
#include "aadi/pipeline.hpp"
#include "oracles.hpp"

using namespace aadi;

namespace {

SceneConfig small_scene_config() {
    SceneConfig c;
    c.image_width = 64;
    c.image_height = 48;
    c.strides = {8, 16};
    c.in_channels = 6;
    c.min_boxes = 1;
    c.max_boxes = 3;
    c.min_box_size = 12.0;
    c.max_box_size = 40.0;
    return c;
}

Scene small_scene(std::uint64_t seed) {
    Rng rng(seed);
    return generate_synthetic_scene(rng, small_scene_config());
}

std::vector<RpnHead> random_heads(std::uint64_t seed, int in, double sd = 0.1) {
    Rng rng(seed);
    PipelineConfig cfg;
    return make_heads(cfg, in, 8, sd, rng);
}

/// Bias-only heads: zero deltas and a constant logit everywhere.
std::vector<RpnHead> bias_only_heads(int in) {
    std::vector<RpnHead> heads;
    for (int d : {2, 4}) {
        RpnHead h{d, RpnHeadParams(in, 4)};
        h.params.objectness_bias[0] = 0.25;
        heads.push_back(h);
    }
    return heads;
}

Scene one_level_scene(int size, int stride, std::vector<Box> gts) {
    SceneConfig c;
    c.image_width = size * stride;
    c.image_height = size * stride;
    c.strides = {stride};
    c.in_channels = 5;
    Scene s;
    s.image_width = c.image_width;
    s.image_height = c.image_height;
    s.gt_boxes = std::move(gts);
    s.features = render_features(s.gt_boxes, c);
    return s;
}

}  // namespace

TEST(Augment, SingleSmallLevelBoundsCandidates) {
    const Scene s = one_level_scene(4, 8, {{4, 4, 20, 20}});
    Rng rng(1);
    std::vector<RpnHead> heads{{2, make_head_params(5, 4, 3, 3, 0.3, rng)}};
    PipelineConfig cfg;
    cfg.augment_nms_iou = 1.0;  // keep everything
    const ProposalSet out = augment(s, heads, cfg);
    EXPECT_LE(out.size(), 16u);
    EXPECT_EQ(out.size(), 16u);
}

TEST(Augment, BiasOnlyHeadReproducesGridAfterNms) {
    const Scene s = small_scene(3);
    const auto heads = bias_only_heads(6);
    PipelineConfig cfg;
    const ProposalSet out = augment(s, heads, cfg);
    std::vector<Box> grid;
    for (const auto& a : hand_designed_anchors(s.features, heads)) grid.push_back(clip_to_image(a.box, s.image_width, s.image_height));
    const std::vector<double> scores(grid.size(), 0.25);
    const auto keep = nms(grid, scores, cfg.augment_nms_iou, cfg.post_nms_keep);
    ASSERT_EQ(out.size(), keep.size());
    for (std::size_t i = 0; i < keep.size(); ++i) EXPECT_EQ(out.boxes[i], grid[keep[i]]);
}

TEST(Augment, ScoresSortedAndBoxesClipped) {
    const Scene s = small_scene(4);
    const auto heads = random_heads(4, 6, 0.3);
    for (bool single : {false, true}) {
        PipelineConfig cfg;
        cfg.single_stage_selection = single;
        const ProposalSet out = augment(s, heads, cfg);
        EXPECT_TRUE(std::is_sorted(out.scores.rbegin(), out.scores.rend()));
        for (const auto& b : out.boxes) {
            EXPECT_GE(b.x1, 0.0);
            EXPECT_LE(b.x2, s.image_width);
            EXPECT_GE(b.y1, 0.0);
            EXPECT_LE(b.y2, s.image_height);
        }
    }
}

TEST(Augment, SingleStageSelectionSkipsNms) {
    const Scene s = small_scene(5);
    const auto heads = bias_only_heads(6);
    PipelineConfig cfg;
    cfg.single_stage_selection = true;
    const auto total = hand_designed_anchors(s.features, heads).size();
    EXPECT_EQ(augment(s, heads, cfg).size(), std::min<std::size_t>(total, cfg.post_nms_keep));
    cfg.single_stage_selection = false;
    EXPECT_LT(augment(s, heads, cfg).size(), total);
}

TEST(Augment, GridIsOneToOneWithHandAnchors) {
    const Scene s = small_scene(6);
    const auto heads = random_heads(6, 6);
    EXPECT_EQ(augment_grid(s, heads).size(), hand_designed_anchors(s.features, heads).size());
}

TEST(AnchorGuided, NoGtsIsIdentity) {
    const Scene s = small_scene(7);
    const auto heads = random_heads(7, 6);
    const ProposalSet a = augment(s, heads, {});
    const ProposalSet b = anchor_guided_append(a, hand_designed_anchors(s.features, heads), {});
    EXPECT_EQ(b.boxes, a.boxes);
    EXPECT_EQ(b.scores, a.scores);
}

TEST(AnchorGuided, ExactAnchorIsAppended) {
    const auto grid = generate_anchor_grid({3, 3, 2, 8}, 4, 4);
    const std::vector<Box> gts{grid[5].box};
    const ProposalSet out = anchor_guided_append({}, grid, gts);
    ASSERT_EQ(out.size(), 1u);
    EXPECT_EQ(out.boxes[0], grid[5].box);
    EXPECT_EQ(out.sources[0].origin, Origin::anchor_guided);
    EXPECT_EQ(out.sources[0].parent, 5u);
    EXPECT_TRUE(std::isinf(out.scores[0]) && out.scores[0] < 0);
}

TEST(AnchorGuided, SharedArgmaxAppendedOnce) {
    const auto grid = generate_anchor_grid({3, 3, 2, 8}, 4, 4);
    const Box a = grid[5].box;
    const std::vector<Box> gts{{a.x1 + 1, a.y1, a.x2 + 1, a.y2}, {a.x1, a.y1 - 1, a.x2, a.y2 - 1}};
    const ProposalSet out = anchor_guided_append({}, grid, gts);
    ASSERT_EQ(out.size(), 1u);
    EXPECT_EQ(out.boxes[0], a);
}

TEST(AnchorGuided, AppendsMinOfGtsAndDistinctArgmax) {
    Rng rng(8);
    const auto grid = generate_anchor_grid({3, 3, 1, 8}, 6, 6);
    for (int t = 0; t < 50; ++t) {
        std::vector<Box> gts;
        const auto n = 1 + rng.below(6);
        for (std::uint64_t i = 0; i < n; ++i) gts.push_back(testing_oracles::random_box(rng, 48.0));
        std::set<std::size_t> distinct;
        for (const auto& g : gts) {
            std::size_t best = 0;
            for (std::size_t i = 0; i < grid.size(); ++i) {
                if (iou(grid[i].box, g) > iou(grid[best].box, g)) best = i;
            }
            distinct.insert(best);
        }
        EXPECT_EQ(anchor_guided_append({}, grid, gts).size(), std::min(gts.size(), distinct.size()));
    }
}

TEST(Labels, ThresholdRule) {
    const Box gt{0, 0, 10, 10};
    const std::vector<Box> gts{gt, {100, 100, 110, 110}};
    // IoUs against gt: 0.8, 0.2, 0.5 (width-only shrink keeps the same height).
    const std::vector<Box> anchors{{0, 0, 8, 10}, {0, 0, 2, 10}, {0, 0, 5, 10}, {100, 100, 110, 110}};
    EXPECT_NEAR(iou(anchors[0], gt), 0.8, 1e-12);
    const auto a = assign_labels(anchors, gts, {});
    // anchor 0 is also gt 0's argmax, anchor 3 matches gt 1 exactly
    EXPECT_EQ(a.labels[0], AnchorLabel::positive);
    EXPECT_EQ(a.labels[1], AnchorLabel::negative);
    EXPECT_EQ(a.labels[2], AnchorLabel::ignore);
    EXPECT_EQ(a.labels[3], AnchorLabel::positive);
    EXPECT_EQ(a.matched_gt[3], 1);
}

TEST(Labels, ThresholdsAreStrict) {
    const Box gt{0, 0, 10, 10};
    const std::vector<Box> gts{gt};
    const std::vector<Box> anchors{{0, 0, 10, 10}, {0, 0, 7, 10}, {0, 0, 3, 10}};
    PipelineConfig cfg;
    const auto a = assign_labels(anchors, gts, cfg);
    EXPECT_EQ(a.labels[1], AnchorLabel::ignore);  // exactly 0.7
    EXPECT_EQ(a.labels[2], AnchorLabel::ignore);  // exactly 0.3
}

TEST(Labels, ForcedArgmaxPositive) {
    const Box gt{0, 0, 10, 10};
    const std::vector<Box> anchors{{0, 0, 4.5, 10}, {0, 0, 2, 10}};
    const std::vector<Box> gts{gt};
    const auto a = assign_labels(anchors, gts, {});
    EXPECT_NEAR(a.max_iou[0], 0.45, 1e-12);
    EXPECT_EQ(a.labels[0], AnchorLabel::positive);
    EXPECT_EQ(a.labels[1], AnchorLabel::negative);
}

TEST(Labels, ZeroAreaIgnoredAndNoGts) {
    const std::vector<Box> anchors{{5, 5, 5, 9}, {0, 0, 1, 1}};
    const std::vector<Box> gts{{0, 0, 10, 10}};
    EXPECT_EQ(assign_labels(anchors, gts, {}).labels[0], AnchorLabel::ignore);
    const auto none = assign_labels(anchors, {}, {});
    EXPECT_EQ(none.labels[1], AnchorLabel::negative);
    EXPECT_EQ(none.matched_gt[1], -1);
}

TEST(PositiveFilter, NoPositivesUnchanged) {
    const std::vector<Box> anchors{{0, 0, 1, 1}};
    const std::vector<Box> gts{{50, 50, 60, 60}};
    const auto a = assign_labels(anchors, gts, {});
    const auto f = filter_positive_redundancy(anchors, a, {}, {});
    EXPECT_EQ(f.labels, a.labels);
}

TEST(PositiveFilter, NearDuplicatesCollapse) {
    const std::vector<Box> gts{{0, 0, 10, 10}};
    const std::vector<Box> anchors{{0, 0, 10, 9.5}, {0, 0, 10, 9.4}};
    const auto a = assign_labels(anchors, gts, {});
    ASSERT_EQ(a.count(AnchorLabel::positive), 2u);
    const auto f = filter_positive_redundancy(anchors, a, {}, {});
    EXPECT_EQ(f.count(AnchorLabel::positive), 1u);
    EXPECT_EQ(f.labels[0], AnchorLabel::positive);
    const std::vector<char> exempt{0, 1};
    EXPECT_EQ(filter_positive_redundancy(anchors, a, exempt, {}).count(AnchorLabel::positive), 2u);
}

TEST(PositiveFilter, MatchesBruteForceOracle) {
    Rng rng(9);
    const std::vector<Box> gts{{20, 20, 60, 50}};
    std::vector<Box> anchors;
    while (anchors.size() < 10) {
        const Box b{20 + rng.normal(0, 2), 20 + rng.normal(0, 2), 60 + rng.normal(0, 2), 50 + rng.normal(0, 2)};
        if (iou(b, gts[0]) > 0.7) anchors.push_back(b);
    }
    anchors.push_back({200, 200, 210, 210});
    const auto a = assign_labels(anchors, gts, {});
    const auto f = filter_positive_redundancy(anchors, a, {}, {});
    std::vector<Box> pos(anchors.begin(), anchors.begin() + 10);
    std::vector<double> sc(a.max_iou.begin(), a.max_iou.begin() + 10);
    const auto keep = testing_oracles::brute_force_nms(pos, sc, 0.7, 10);
    for (std::size_t i = 0; i < 10; ++i) {
        const bool kept = std::find(keep.begin(), keep.end(), i) != keep.end();
        EXPECT_EQ(f.labels[i] == AnchorLabel::positive, kept) << i;
    }
    EXPECT_EQ(f.labels[10], AnchorLabel::negative);
}

TEST(Sampling, FewPositives) {
    std::vector<AnchorLabel> labels(1010, AnchorLabel::negative);
    for (int i = 0; i < 10; ++i) labels[static_cast<std::size_t>(i) * 101] = AnchorLabel::positive;
    Rng rng(1);
    const auto idx = sample_minibatch(labels, {}, rng);
    ASSERT_EQ(idx.size(), 256u);
    const auto npos = std::count_if(idx.begin(), idx.end(), [&](std::size_t i) { return labels[i] == AnchorLabel::positive; });
    EXPECT_EQ(npos, 10);
    EXPECT_EQ(std::set<std::size_t>(idx.begin(), idx.end()).size(), 256u);
}

TEST(Sampling, BothPoolsSaturate) {
    std::vector<AnchorLabel> labels;
    for (int i = 0; i < 500; ++i) labels.push_back(AnchorLabel::positive);
    for (int i = 0; i < 500; ++i) labels.push_back(AnchorLabel::negative);
    labels.push_back(AnchorLabel::ignore);
    Rng rng(2);
    const auto idx = sample_minibatch(labels, {}, rng);
    ASSERT_EQ(idx.size(), 256u);
    EXPECT_EQ(std::count_if(idx.begin(), idx.end(), [](std::size_t i) { return i < 500; }), 128);
    EXPECT_EQ(std::count(idx.begin(), idx.end(), 1000u), 0);
}

TEST(Sampling, SeededAndErrors) {
    std::vector<AnchorLabel> labels(3000, AnchorLabel::negative);
    for (int i = 0; i < 300; ++i) labels[static_cast<std::size_t>(i) * 7] = AnchorLabel::positive;
    Rng a(5), b(5), c(6);
    const auto sa = sample_minibatch(labels, {}, a);
    EXPECT_EQ(sa, sample_minibatch(labels, {}, b));
    EXPECT_NE(sa, sample_minibatch(labels, {}, c));
    const std::vector<AnchorLabel> ignored(5, AnchorLabel::ignore);
    EXPECT_THROW(sample_minibatch(ignored, {}, a), std::invalid_argument);
}

TEST(Refine, BiasOnlyIsIdentity) {
    const Scene s = small_scene(10);
    const auto heads = bias_only_heads(6);
    const ProposalSet a = augment(s, heads, {});
    const ProposalSet r = refine(a, s, heads);
    ASSERT_EQ(r.size(), a.size());
    for (std::size_t i = 0; i < r.size(); ++i) EXPECT_EQ(r.boxes[i], a.boxes[r.sources[i].parent]);
}

TEST(Refine, OnGridMatchesDenseHead) {
    const Scene s = small_scene(11);
    const auto heads = random_heads(11, 6, 0.3);
    const auto hand = hand_designed_anchors(s.features, heads);
    ProposalSet in;
    for (std::size_t i = 0; i < hand.size(); ++i) in.push_back(hand[i].box, 0.0, {hand[i].level_index, hand[i].head_index, Origin::augmented, i});
    const ProposalSet out = refine(in, s, heads);
    ASSERT_EQ(out.size(), in.size());
    for (std::size_t k = 0; k < out.size(); ++k) {
        const Anchor& a = hand[out.sources[k].parent];
        const auto& lv = s.features.levels[static_cast<std::size_t>(a.level_index)];
        const auto& h = heads[static_cast<std::size_t>(a.head_index)];
        const HeadGrid g = forward_conv(lv.map, h.params, h.dilation);
        const HeadOutput& ref = g.at(a.cell_row, a.cell_col);
        EXPECT_LE(std::abs(out.scores[k] - ref.logit), 1e-9);
        const Box expect = clip_to_image(decode_deltas(a.box, ref.delta), s.image_width, s.image_height);
        EXPECT_LE(std::abs(out.boxes[k].x1 - expect.x1), 1e-9);
        EXPECT_LE(std::abs(out.boxes[k].y2 - expect.y2), 1e-9);
    }
}

TEST(Refine, OneToOneAndZeroAreaSkipped) {
    const Scene s = small_scene(12);
    const auto heads = random_heads(12, 6);
    ProposalSet a = augment(s, heads, {});
    a.push_back({3, 3, 3, 9}, -1.0, {0, 0, Origin::augmented, 0});
    RefineStats stats;
    const ProposalSet r = refine(a, s, heads, &stats);
    EXPECT_EQ(stats.skipped_zero_area, 1u);
    EXPECT_EQ(r.size(), a.size() - 1);
    std::set<std::size_t> parents;
    for (const auto& src : r.sources) parents.insert(src.parent);
    EXPECT_EQ(parents.size(), r.size());
    EXPECT_TRUE(std::is_sorted(r.scores.rbegin(), r.scores.rend()));
}

TEST(TrainStep, ZeroStepLeavesParamsUnchanged) {
    const Scene s = small_scene(13);
    auto heads = random_heads(13, 6);
    const auto before = heads;
    Rng rng(1);
    const StepRecord rec = train_step(s, heads, {}, {}, 0.0, rng);
    EXPECT_FALSE(rec.skipped);
    EXPECT_TRUE(std::isfinite(rec.loss.total));
    EXPECT_EQ(heads, before);
}

TEST(TrainStep, IdenticalScenesGiveIdenticalLoss) {
    const Scene a = small_scene(14);
    const Scene b = small_scene(14);
    const auto heads = random_heads(14, 6);
    auto h1 = heads;
    auto h2 = heads;
    Rng r1(3), r2(3);
    EXPECT_EQ(train_step(a, h1, {}, {}, 0.1, r1).loss.total, train_step(b, h2, {}, {}, 0.1, r2).loss.total);
    EXPECT_EQ(h1, h2);
}

TEST(TrainStep, MemorisesOneScene) {
    const Scene s = small_scene(15);
    auto heads = random_heads(15, 6, 0.01);
    Rng rng(4);
    const double first = train_step(s, heads, {}, {}, 0.5, rng).loss.total;
    double last = first;
    for (int i = 0; i < 200; ++i) last = train_step(s, heads, {}, {}, 0.5, rng).loss.total;
    EXPECT_LT(last, first);
}

TEST(TrainStep, NoGtsIsSkipped) {
    Scene s = small_scene(16);
    s.crowd.assign(s.gt_boxes.size(), 1);
    auto heads = random_heads(16, 6);
    Rng rng(5);
    EXPECT_TRUE(train_step(s, heads, {}, {}, 0.1, rng).skipped);
}

TEST(TrainStep, GradientFlowsOnlyThroughRefinement) {
    const Scene s = small_scene(17);
    const auto heads = random_heads(17, 6, 0.3);
    Rng rng(6);
    const TrainingBatch batch = build_training_batch(s, heads, {}, rng);
    ASSERT_FALSE(batch.examples.empty());
    const auto analytic = backward(batch.examples, heads, {});

    // Explicitly detached copies of the patches give the same gradients.
    std::vector<TrainingExample> detached;
    for (const auto& ex : batch.examples) {
        TrainingExample c;
        c.head_index = ex.head_index;
        c.patch = FeatureMap(ex.patch.channels(), ex.patch.height(), ex.patch.width());
        std::copy(ex.patch.values().begin(), ex.patch.values().end(), c.patch.values().begin());
        c.positive = ex.positive;
        c.target = ex.target;
        detached.push_back(std::move(c));
    }
    const auto again = backward(detached, heads, {});
    for (std::size_t h = 0; h < heads.size(); ++h) EXPECT_EQ(analytic.grads[h], again.grads[h]);

    // Finite differences with the augmented anchors held fixed agree.
    auto probe = heads;
    double worst = 0.0;
    for (std::size_t h = 0; h < probe.size(); ++h) {
        auto tensors = probe[h].params.tensors();
        const auto grads = analytic.grads[h].tensors();
        for (std::size_t t = 0; t < tensors.size(); ++t) {
            for (std::size_t i = 0; i < std::min<std::size_t>(tensors[t].values.size(), 6); ++i) {
                double& v = tensors[t].values[i];
                const double orig = v;
                v = orig + 1e-5;
                const double lp = backward(batch.examples, probe, {}).loss.total;
                v = orig - 1e-5;
                const double lm = backward(batch.examples, probe, {}).loss.total;
                v = orig;
                const double num = (lp - lm) / 2e-5;
                const double a = grads[t].values[i];
                worst = std::max(worst, std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-6}));
            }
        }
    }
    EXPECT_LE(worst, 1e-4);
}

TEST(Infer, CapAndDeterminism) {
    const Scene s = small_scene(18);
    const auto heads = random_heads(18, 6, 0.3);
    PipelineConfig cfg;
    cfg.final_keep = 20;
    const ProposalSet a = infer(s, heads, cfg);
    EXPECT_LE(a.size(), 20u);
    const ProposalSet b = infer(s, heads, cfg);
    EXPECT_EQ(a.boxes, b.boxes);
    EXPECT_EQ(a.scores, b.scores);
}

TEST(Infer, ZeroDeltaDegeneratesToNmsOverGrid) {
    const Scene s = small_scene(19);
    const auto heads = zero_delta_heads(random_heads(19, 6, 0.3));
    PipelineConfig cfg;
    const ProposalSet out = infer(s, heads, cfg);

    std::vector<Box> grid;
    std::vector<double> logits;
    for (const auto& h : heads) {
        for (const auto& lv : s.features.levels) {
            const HeadGrid g = forward_conv(lv.map, h.params, h.dilation);
            for (const auto& a : generate_anchor_grid({3, 3, h.dilation, lv.stride}, lv.map.height(), lv.map.width())) {
                grid.push_back(clip_to_image(a.box, s.image_width, s.image_height));
                logits.push_back(g.at(a.cell_row, a.cell_col).logit);
            }
        }
    }
    ASSERT_LT(grid.size(), cfg.pre_nms_top_k);
    const auto keep = nms(grid, logits, cfg.augment_nms_iou, cfg.post_nms_keep);
    std::vector<Box> raw;
    for (std::size_t i : keep) raw.push_back(grid[i]);
    ASSERT_LE(raw.size(), cfg.final_keep);

    auto key = [](const Box& b) { return std::tuple(b.x1, b.y1, b.x2, b.y2); };
    std::set<std::tuple<double, double, double, double>> got, want;
    for (const auto& b : out.boxes) got.insert(key(b));
    for (const auto& b : raw) want.insert(key(b));
    EXPECT_EQ(got, want);
    const auto gts = s.active_gts();
    EXPECT_EQ(*average_recall(out.boxes, gts, 1000).ar, *average_recall(raw, gts, 1000).ar);
}

TEST(EmElbo, Examples) {
    const std::vector<Box> gts{{0, 0, 10, 10}, {20, 20, 30, 40}};
    EXPECT_EQ(em_elbo(gts, gts), 0.0);
    const std::vector<Box> far{{100, 100, 101, 101}};
    EXPECT_NEAR(em_elbo(far, gts), std::log(1e-6), 1e-12);
    EXPECT_NEAR(std::log(1e-6), -13.8155, 1e-4);
    EXPECT_THROW(em_elbo(gts, {}), std::invalid_argument);
    Scene s = small_scene(20);
    s.crowd.assign(s.gt_boxes.size(), 1);
    EXPECT_THROW(em_elbo_diagnostic(s, random_heads(20, 6), {}), std::invalid_argument);
}

TEST(PipelineConfig, Validation) {
    PipelineConfig c;
    EXPECT_NO_THROW(c.validate());
    c.neg_iou = 0.8;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = {};
    c.kernel_h = 2;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = {};
    c.dilations.clear();
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = {};
    c.single_stage_selection = true;
    EXPECT_EQ(c.final_nms_threshold(), 0.6);
}
