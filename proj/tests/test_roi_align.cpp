#include <gtest/gtest.h>

#include <random>

#include "nucleo/gradcheck.hpp"
#include "nucleo/roi_align.hpp"

using namespace nucleo;

namespace {

// Feature plane whose value at index coordinate (x, y) is x + 2y; bilinear
// interpolation reproduces the field exactly inside the plane.
Tensor<double> linear_field(long h, long w) {
    Tensor<double> f({1, 1, h, w});
    for (long y = 0; y < h; ++y)
        for (long x = 0; x < w; ++x) f[y * w + x] = static_cast<double>(x) + 2.0 * y;
    return f;
}

// Analytic mean of the field x + 2y over the sample points of bin (i, j).
double analytic_bin_value(const Box& roi, int stride, int p, int samples, int i, int j) {
    double fy1 = roi.y1 / stride, fx1 = roi.x1 / stride;
    double bh = (roi.height() / stride) / p, bw = (roi.width() / stride) / p;
    double acc = 0;
    for (int sy = 0; sy < samples; ++sy)
        for (int sx = 0; sx < samples; ++sx) {
            double y = fy1 + (i + (sy + 0.5) / samples) * bh;
            double x = fx1 + (j + (sx + 0.5) / samples) * bw;
            acc += x + 2.0 * y;
        }
    return acc / (samples * samples);
}

}  // namespace

TEST(RoiAlign, ConstantFieldExact) {
    Tape<double> t;
    int f = t.push(Tensor<double>::full({1, 3, 10, 12}, 2.5));
    for (const Box& roi : {Box(1.3, 2.7, 17.9, 15.1), Box(0.5, 0.5, 23.5, 19.5),
                           Box(4, 4, 8, 8)}) {
        int out = roi_align(t, f, {{0, roi}}, 2, 7, 2);
        for (long i = 0; i < t.val(out).numel(); ++i) EXPECT_DOUBLE_EQ(t.val(out)[i], 2.5);
    }
}

TEST(RoiAlign, BilinearFieldMatchesAnalyticOracle) {
    Tape<double> t;
    int f = t.push(linear_field(16, 16));
    int stride = 4, p = 7, samples = 2;
    Box roi(3.7, 5.1, 41.3, 52.9);  // interior so no sample needs padding
    int out = roi_align(t, f, {{0, roi}}, stride, p, samples);
    for (int i = 0; i < p; ++i)
        for (int j = 0; j < p; ++j)
            EXPECT_NEAR(t.val(out).at4(0, 0, i, j),
                        analytic_bin_value(roi, stride, p, samples, i, j), 1e-6);
}

TEST(RoiAlign, QuarterPixelShiftChangesOutputAsPredicted) {
    // On the field x + 2y, shifting the roi by 0.25 image px along x must move
    // every output by exactly 0.25/stride; rounding the roi would give zero.
    Tape<double> t;
    int f = t.push(linear_field(16, 16));
    int stride = 4, p = 5;
    Box roi(8.0, 8.0, 40.0, 40.0);
    Box shifted(8.25, 8.0, 40.25, 8.0 + 32.0);
    int a = roi_align(t, f, {{0, roi}}, stride, p, 2);
    int b = roi_align(t, f, {{0, shifted}}, stride, p, 2);
    for (long i = 0; i < t.val(a).numel(); ++i)
        EXPECT_NEAR(t.val(b)[i] - t.val(a)[i], 0.25 / stride, 1e-9);
}

TEST(RoiAlign, OutOfBoundsSamplesReadZero) {
    Tape<double> t;
    int f = t.push(Tensor<double>::full({1, 1, 4, 4}, 1.0));
    // roi far outside the feature map
    int out = roi_align(t, f, {{0, Box(100, 100, 140, 140)}}, 2, 3, 2);
    for (long i = 0; i < t.val(out).numel(); ++i) EXPECT_DOUBLE_EQ(t.val(out)[i], 0.0);
}

TEST(RoiAlign, BackwardMatchesFiniteDifferencesIncludingEdges) {
    std::mt19937_64 rng(31);
    auto f = Tensor<double>::uniform({1, 2, 8, 8}, -1, 1, rng);
    // one roi inside, one hanging over the feature border
    std::vector<RoiRef> rois = {{0, Box(2.3, 3.1, 11.8, 13.9)},
                                {0, Box(-2.0, -1.5, 6.2, 5.5)}};
    std::uniform_real_distribution<double> u(-1, 1);
    std::vector<double> coefs;
    for (int i = 0; i < 2 * 2 * 5 * 5; ++i) coefs.push_back(u(rng));
    double err = grad_check(
        [&](Tape<double>& t, const std::vector<int>& in) {
            return weighted_sum(t, roi_align(t, in[0], rois, 2, 5, 2), coefs);
        },
        {f});
    EXPECT_LT(err, 1e-4);
}

TEST(RoiAlign, EmptyRoiListYieldsEmptyOutput) {
    Tape<double> t;
    int f = t.push(Tensor<double>::full({1, 2, 4, 4}, 1.0));
    int out = roi_align(t, f, {}, 2, 7, 2);
    EXPECT_EQ(t.val(out).dim(0), 0);
    EXPECT_EQ(t.val(out).numel(), 0);
}

TEST(RoiAlign, RejectsDegenerateRoi) {
    Tape<double> t;
    int f = t.push(Tensor<double>::full({1, 1, 4, 4}, 1.0));
    EXPECT_THROW(roi_align(t, f, {{0, Box(2, 2, 2, 6)}}, 1, 3, 2), std::invalid_argument);
    EXPECT_THROW(roi_align(t, f, {{1, Box(0, 0, 2, 2)}}, 1, 3, 2), std::invalid_argument);
}

TEST(AssignRoiLevel, FormulaAndClamps) {
    EXPECT_EQ(assign_roi_level(Box(0, 0, 56, 56)), 2);
    EXPECT_EQ(assign_roi_level(Box(0, 0, 448, 448)), 5);
    EXPECT_EQ(assign_roi_level(Box(0, 0, 112, 112)), 3);
    EXPECT_EQ(assign_roi_level(Box(0, 0, 1, 1)), 2);      // clamped below
    EXPECT_EQ(assign_roi_level(Box(0, 0, 4096, 4096)), 5);  // clamped above
}

TEST(AssignRoiLevel, MonotoneInArea) {
    int prev = 2;
    for (double side = 2; side < 2000; side *= 1.17) {
        int lvl = assign_roi_level(Box(0, 0, side, side));
        EXPECT_GE(lvl, prev);
        prev = lvl;
    }
}
