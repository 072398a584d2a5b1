#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "aadi/geometry.hpp"
#include "aadi/random.hpp"
#include "aadi/tensor.hpp"
#include "oracles.hpp"

using namespace aadi;
using testing_oracles::random_map;

namespace {

ConvWeights random_conv(Rng& rng, int out, int in, int kh, int kw) {
    ConvWeights w(out, in, kh, kw);
    for (double& v : w.weights) v = rng.normal();
    for (double& v : w.bias) v = rng.normal();
    return w;
}

double max_abs_diff(const FeatureMap& a, const FeatureMap& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.values().size(); ++i) m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
    return m;
}

}  // namespace

TEST(FeatureMap, LayoutIsChannelMajorRowMajor) {
    FeatureMap m(2, 3, 4);
    m.at(1, 2, 3) = 7.0;
    EXPECT_EQ(m.values()[(1 * 3 + 2) * 4 + 3], 7.0);
    EXPECT_EQ(m.channel(1)[2 * 4 + 3], 7.0);
    EXPECT_THROW(FeatureMap(0, 1, 1), std::invalid_argument);
}

TEST(FeaturePyramid, ValidatesDimsAndStrides) {
    FeaturePyramid p;
    p.image_width = 30;
    p.image_height = 17;
    p.levels.push_back({FeatureMap(1, 5, 8), 4});
    p.levels.push_back({FeatureMap(1, 3, 4), 8});
    EXPECT_NO_THROW(p.validate());
    p.levels.push_back({FeatureMap(1, 3, 4), 8});
    EXPECT_THROW(p.validate(), std::invalid_argument);
    p.levels.pop_back();
    p.levels[1].map = FeatureMap(1, 2, 4);
    EXPECT_THROW(p.validate(), std::invalid_argument);
}

TEST(Conv, IdentityKernel) {
    Rng rng(1);
    const FeatureMap in = random_map(rng, 1, 6, 5);
    ConvWeights w(1, 1, 3, 3);
    w.at(0, 0, 1, 1) = 1.0;
    for (int d = 1; d <= 3; ++d) EXPECT_EQ(conv2d_dilated(in, w, d), in);
}

TEST(Conv, AllOnesOnConstantInput) {
    const FeatureMap in(1, 5, 5, 2.5);
    ConvWeights w(1, 1, 3, 3);
    std::fill(w.weights.begin(), w.weights.end(), 1.0);
    const FeatureMap out = conv2d_dilated(in, w, 1);
    EXPECT_EQ(out.at(0, 2, 2), 9 * 2.5);
    EXPECT_EQ(out.at(0, 0, 0), 4 * 2.5);  // corner sees 4 in-bounds taps
}

TEST(Conv, Errors) {
    const FeatureMap in(2, 4, 4);
    EXPECT_THROW(conv2d_dilated(in, ConvWeights(1, 2, 2, 3), 1), std::invalid_argument);
    EXPECT_THROW(conv2d_dilated(in, ConvWeights(1, 3, 3, 3), 1), std::invalid_argument);
    EXPECT_THROW(conv2d_dilated(in, ConvWeights(1, 2, 3, 3), 0), std::invalid_argument);
}

TEST(Conv, MatchesNestedLoopOracle) {
    Rng rng(17);
    constexpr int kKernels[] = {1, 3, 5};
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
        const int c = 1 + static_cast<int>(rng.below(8));
        const int h = 1 + static_cast<int>(rng.below(32));
        const int wd = 1 + static_cast<int>(rng.below(32));
        const int d = 1 + static_cast<int>(rng.below(4));
        const FeatureMap in = random_map(rng, c, h, wd);
        const ConvWeights w = random_conv(rng, 1 + static_cast<int>(rng.below(4)), c, kKernels[rng.below(3)],
                                          kKernels[rng.below(3)]);
        const FeatureMap out = conv2d_dilated(in, w, d);
        ASSERT_EQ(out.height(), h);
        ASSERT_EQ(out.width(), wd);
        worst = std::max(worst, max_abs_diff(out, testing_oracles::naive_conv(in, w, d)));
    }
    EXPECT_LE(worst, 1e-12);
}

TEST(Conv, LinearInInputAndWeights) {
    Rng rng(23);
    const FeatureMap a = random_map(rng, 3, 9, 7);
    const FeatureMap b = random_map(rng, 3, 9, 7);
    ConvWeights w1 = random_conv(rng, 2, 3, 3, 3);
    ConvWeights w2 = random_conv(rng, 2, 3, 3, 3);
    std::fill(w1.bias.begin(), w1.bias.end(), 0.0);
    std::fill(w2.bias.begin(), w2.bias.end(), 0.0);
    FeatureMap ab(3, 9, 7);
    for (std::size_t i = 0; i < ab.size(); ++i) ab.values()[i] = 2.0 * a.values()[i] - 0.5 * b.values()[i];
    const FeatureMap lhs = conv2d_dilated(ab, w1, 2);
    const FeatureMap ca = conv2d_dilated(a, w1, 2);
    const FeatureMap cb = conv2d_dilated(b, w1, 2);
    for (std::size_t i = 0; i < lhs.size(); ++i) {
        EXPECT_NEAR(lhs.values()[i], 2.0 * ca.values()[i] - 0.5 * cb.values()[i], 1e-12);
    }
    ConvWeights w12(2, 3, 3, 3);
    for (std::size_t i = 0; i < w12.weights.size(); ++i) w12.weights[i] = w1.weights[i] + w2.weights[i];
    const FeatureMap sum = conv2d_dilated(a, w12, 3);
    const FeatureMap s1 = conv2d_dilated(a, w1, 3);
    const FeatureMap s2 = conv2d_dilated(a, w2, 3);
    for (std::size_t i = 0; i < sum.size(); ++i) EXPECT_NEAR(sum.values()[i], s1.values()[i] + s2.values()[i], 1e-12);
}

TEST(Bilinear, ExactAtCellCentres) {
    Rng rng(2);
    const FeatureMap m = random_map(rng, 3, 4, 5);
    for (int r = 0; r < 4; ++r) {
        for (int c = 0; c < 5; ++c) {
            const auto v = bilinear_sample(m, c + 0.5, r + 0.5);
            for (int ch = 0; ch < 3; ++ch) EXPECT_EQ(v[static_cast<std::size_t>(ch)], m.at(ch, r, c));
        }
    }
}

TEST(Bilinear, MidpointIsMean) {
    Rng rng(4);
    const FeatureMap m = random_map(rng, 1, 3, 3);
    EXPECT_NEAR(bilinear_sample(m, 1.0, 1.5)[0], 0.5 * (m.at(0, 1, 0) + m.at(0, 1, 1)), 1e-15);
}

TEST(Bilinear, FarOutsideIsZero) {
    const FeatureMap m(2, 3, 3, 1.0);
    for (auto [x, y] : {std::pair{-50.0, 1.0}, {1.0, 1e9}, {-1e300, -1e300}, {4.0, 4.0}}) {
        const auto v = bilinear_sample(m, x, y);
        EXPECT_EQ(v[0], 0.0);
        EXPECT_EQ(v[1], 0.0);
    }
    // Half a cell beyond the last centre interpolates against the zero pad.
    EXPECT_NEAR(bilinear_sample(m, 3.0, 1.5)[0], 0.5, 1e-15);
}

TEST(Bilinear, MatchesTentOracle) {
    Rng rng(8);
    for (int t = 0; t < 20; ++t) {
        const FeatureMap m = random_map(rng, 2, 1 + static_cast<int>(rng.below(9)), 1 + static_cast<int>(rng.below(9)));
        for (int k = 0; k < 50; ++k) {
            const double x = rng.uniform(-2.0, m.width() + 2.0);
            const double y = rng.uniform(-2.0, m.height() + 2.0);
            const auto v = bilinear_sample(m, x, y);
            for (int ch = 0; ch < 2; ++ch) {
                EXPECT_NEAR(v[static_cast<std::size_t>(ch)], testing_oracles::tent_sample(m, ch, x, y), 1e-12);
            }
        }
    }
}

TEST(Bilinear, ContinuousAcrossCellBoundaries) {
    Rng rng(9);
    const FeatureMap m = random_map(rng, 1, 5, 5);
    for (double boundary : {1.0, 2.0, 3.0, 4.0, 1.5, 2.5}) {
        const double eps = 1e-9;
        const double a = bilinear_sample(m, boundary - eps, 2.3)[0];
        const double b = bilinear_sample(m, boundary + eps, 2.3)[0];
        EXPECT_NEAR(a, b, 1e-7);
        const double c = bilinear_sample(m, 2.3, boundary - eps)[0];
        const double d = bilinear_sample(m, 2.3, boundary + eps)[0];
        EXPECT_NEAR(c, d, 1e-7);
    }
}

TEST(RoiAlign, SingleBinOnCellCentre) {
    Rng rng(12);
    const FeatureMap m = random_map(rng, 2, 4, 4);
    const FeatureMap p = roi_align(m, Box::from_center(2.5, 1.5, 1.0, 1.0), 1, 1);
    EXPECT_EQ(p.at(0, 0, 0), m.at(0, 1, 2));
    EXPECT_EQ(p.at(1, 0, 0), m.at(1, 1, 2));
}

TEST(RoiAlign, OnGridAnchorGathersDilatedTaps) {
    Rng rng(13);
    for (int d = 1; d <= 4; ++d) {
        const FeatureMap m = random_map(rng, 3, 11, 13);
        for (const auto& a : generate_anchor_grid({3, 5, d, 1}, 11, 13)) {
            const FeatureMap p = roi_align(m, a.box, 3, 5);
            for (int ch = 0; ch < 3; ++ch) {
                for (int ki = 0; ki < 3; ++ki) {
                    for (int kj = 0; kj < 5; ++kj) {
                        const int r = a.cell_row + d * (ki - 1);
                        const int c = a.cell_col + d * (kj - 2);
                        const double expect = m.in_bounds(r, c) ? m.at(ch, r, c) : 0.0;
                        ASSERT_EQ(p.at(ch, ki, kj), expect);
                    }
                }
            }
        }
    }
}

TEST(RoiAlign, MatchesBruteForceOffGrid) {
    Rng rng(14);
    for (int t = 0; t < 50; ++t) {
        const FeatureMap m = random_map(rng, 2, 8, 10);
        const double x1 = rng.uniform(-3.0, 9.0);
        const double y1 = rng.uniform(-3.0, 7.0);
        const Box roi{x1, y1, x1 + rng.uniform(0.1, 6.0), y1 + rng.uniform(0.1, 6.0)};
        const int oh = 1 + static_cast<int>(rng.below(5));
        const int ow = 1 + static_cast<int>(rng.below(5));
        const FeatureMap p = roi_align(m, roi, oh, ow);
        for (int ch = 0; ch < 2; ++ch) {
            for (int i = 0; i < oh; ++i) {
                for (int j = 0; j < ow; ++j) {
                    const double x = roi.x1 + (j + 0.5) * roi.width() / ow;
                    const double y = roi.y1 + (i + 0.5) * roi.height() / oh;
                    EXPECT_NEAR(p.at(ch, i, j), testing_oracles::tent_sample(m, ch, x, y), 1e-12);
                }
            }
        }
    }
}

TEST(RoiAlign, ConstantMapInteriorRoi) {
    const FeatureMap m(2, 10, 10, 3.25);
    Rng rng(15);
    for (int t = 0; t < 100; ++t) {
        const double x1 = rng.uniform(0.5, 6.0);
        const double y1 = rng.uniform(0.5, 6.0);
        const FeatureMap p = roi_align(m, {x1, y1, x1 + rng.uniform(0.1, 3.4), y1 + rng.uniform(0.1, 3.4)}, 3, 3);
        for (double v : p.values()) EXPECT_NEAR(v, 3.25, 1e-12);
    }
}

TEST(RoiAlign, Errors) {
    const FeatureMap m(1, 3, 3);
    EXPECT_THROW(roi_align(m, {1, 1, 1, 2}, 3, 3), std::invalid_argument);
    EXPECT_THROW(roi_align(m, {1, 1, 2, 0.5}, 3, 3), std::invalid_argument);
    EXPECT_THROW(roi_align(m, {1, 1, 2, 2}, 0, 3), std::invalid_argument);
}

TEST(Fc, ZeroWeightsGiveBias) {
    ConvWeights w(3, 2, 3, 3);
    w.bias = {1.0, -2.0, 0.5};
    Rng rng(1);
    const auto out = fc_apply(random_map(rng, 2, 3, 3), fc_from_conv(w));
    EXPECT_EQ(out, w.bias);
}

TEST(Fc, OneByOneIsScalarMultiply) {
    ConvWeights w(1, 1, 1, 1);
    w.weights = {2.5};
    const std::vector<double> x{4.0};
    EXPECT_EQ(fc_apply(x, fc_from_conv(w))[0], 10.0);
    w.weights = {1.0};
    EXPECT_EQ(fc_apply(x, fc_from_conv(w))[0], 4.0);
}

TEST(Fc, ZeroPatchGivesBias) {
    Rng rng(3);
    const ConvWeights w = random_conv(rng, 4, 2, 3, 3);
    EXPECT_EQ(fc_apply(FeatureMap(2, 3, 3), fc_from_conv(w)), w.bias);
}

TEST(Fc, MatchesDotProductOracle) {
    Rng rng(6);
    for (int t = 0; t < 30; ++t) {
        const int c = 1 + static_cast<int>(rng.below(6));
        const ConvWeights w = random_conv(rng, 1 + static_cast<int>(rng.below(8)), c, 3, 3);
        const FeatureMap patch = random_map(rng, c, 3, 3);
        const auto out = fc_apply(patch, fc_from_conv(w));
        const std::vector<double> x(patch.values().begin(), patch.values().end());
        for (int o = 0; o < w.out_channels; ++o) {
            std::vector<double> row;
            for (int i = 0; i < c; ++i) {
                for (int ki = 0; ki < 3; ++ki) {
                    for (int kj = 0; kj < 3; ++kj) row.push_back(w.at(o, i, ki, kj));
                }
            }
            EXPECT_NEAR(out[static_cast<std::size_t>(o)],
                        testing_oracles::dot_fc(row, w.bias[static_cast<std::size_t>(o)], x), 1e-12);
        }
    }
}

TEST(Fc, DimensionMismatch) {
    const ConvWeights w(2, 3, 3, 3);
    EXPECT_THROW(fc_apply(FeatureMap(2, 3, 3), fc_from_conv(w)), std::invalid_argument);
    EXPECT_THROW(conv_from_fc(fc_from_conv(w), 2, 3, 3), std::invalid_argument);
}

TEST(Fc, LayoutBijection) {
    Rng rng(7);
    const ConvWeights w = random_conv(rng, 4, 3, 3, 5);
    const auto fc = fc_from_conv(w);
    EXPECT_EQ(fc.rows, 4);
    EXPECT_EQ(fc.cols, 45);
    EXPECT_EQ(conv_from_fc(fc, 3, 3, 5), w);
    // View shares storage with the conv weights.
    EXPECT_EQ(fc.weights.data(), w.weights.data());
}

TEST(Equivalence, FcOnRoiPatchEqualsConvAtEveryCell) {
    Rng rng(31);
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
        const int c = 1 + static_cast<int>(rng.below(8));
        const int h = 1 + static_cast<int>(rng.below(32));
        const int wd = 1 + static_cast<int>(rng.below(32));
        const int d = 1 + static_cast<int>(rng.below(4));
        const int s = t % 2 ? 8 : 1;
        const FeatureMap in = random_map(rng, c, h, wd);
        const ConvWeights w = random_conv(rng, 3, c, 3, 3);
        const FeatureMap dense = conv2d_dilated(in, w, d);
        const auto fc = fc_from_conv(w);
        for (const auto& a : generate_anchor_grid({3, 3, d, s}, h, wd)) {
            const auto out = fc_apply(roi_align(in, to_feature_coords(a.box, s), 3, 3), fc);
            for (int o = 0; o < 3; ++o) {
                worst = std::max(worst, std::abs(out[static_cast<std::size_t>(o)] - dense.at(o, a.cell_row, a.cell_col)));
            }
        }
    }
    EXPECT_LE(worst, 1e-9);
}
