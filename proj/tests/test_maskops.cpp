#include <gtest/gtest.h>

#include <random>

#include "nucleo/maskops.hpp"

using namespace nucleo;

namespace {

Mask random_mask(int h, int w, std::mt19937_64& rng, double density = 0.4) {
    Mask m(h, w);
    std::uniform_real_distribution<double> u(0, 1);
    for (auto& b : m.bits) b = u(rng) < density ? 1 : 0;
    return m;
}

Mask rect_mask(int h, int w, int y1, int x1, int y2, int x2) {
    Mask m(h, w);
    for (int y = y1; y < y2; ++y)
        for (int x = x1; x < x2; ++x) m.set(y, x, 1);
    return m;
}

// Direct bilinear evaluation at one sample point, written independently of
// the implementation (indexes pixel centers explicitly).
double bilinear_oracle(const Mask& m, double u, double v) {
    double gx = u - 0.5, gy = v - 0.5;
    int x0 = static_cast<int>(std::floor(gx)), y0 = static_cast<int>(std::floor(gy));
    double fx = gx - x0, fy = gy - y0;
    auto val = [&](int y, int x) -> double {
        return (y >= 0 && x >= 0 && y < m.height && x < m.width) ? m.at(y, x) : 0.0;
    };
    return val(y0, x0) * (1 - fx) * (1 - fy) + val(y0, x0 + 1) * fx * (1 - fy) +
           val(y0 + 1, x0) * (1 - fx) * fy + val(y0 + 1, x0 + 1) * fx * fy;
}

}  // namespace

TEST(Rle, TwoByTwoAllOnes) {
    Mask m(2, 2);
    for (auto& b : m.bits) b = 1;
    Rle r = rle_encode(m);
    ASSERT_EQ(r.runs.size(), 1u);
    EXPECT_EQ(r.runs[0].first, 1);
    EXPECT_EQ(r.runs[0].second, 4);
}

TEST(Rle, AllZerosIsEmptyRunList) {
    Mask m(5, 7);
    EXPECT_TRUE(rle_encode(m).runs.empty());
}

TEST(Rle, ColumnMajorOrder) {
    // single pixel at row 1, col 2 of a 3x4 mask: position = 2*3 + 1 + 1 = 8
    Mask m(3, 4);
    m.set(1, 2, 1);
    Rle r = rle_encode(m);
    ASSERT_EQ(r.runs.size(), 1u);
    EXPECT_EQ(r.runs[0].first, 8);
    EXPECT_EQ(r.runs[0].second, 1);
}

TEST(Rle, RoundtripRandomMasks) {
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<int> dim(1, 64);
    for (int i = 0; i < 500; ++i) {
        Mask m = random_mask(dim(rng), dim(rng), rng);
        Mask back = rle_decode(rle_encode(m));
        EXPECT_EQ(back.bits, m.bits);
        EXPECT_EQ(back.height, m.height);
        EXPECT_EQ(back.width, m.width);
    }
}

TEST(Rle, RoundtripLargeMask) {
    std::mt19937_64 rng(11);
    Mask m = random_mask(512, 512, rng, 0.2);
    EXPECT_EQ(rle_decode(rle_encode(m)).bits, m.bits);
}

TEST(Rle, DecodeRejectsBadRuns) {
    Rle r;
    r.height = 2;
    r.width = 2;
    r.runs = {{1, 5}};  // out of range
    EXPECT_THROW(rle_decode(r), DataError);
    r.runs = {{1, 2}, {2, 1}};  // overlap
    EXPECT_THROW(rle_decode(r), DataError);
    r.runs = {{1, 2}, {3, 1}};  // adjacent, non-maximal
    EXPECT_THROW(rle_decode(r), DataError);
    r.runs = {{0, 1}};  // start below 1
    EXPECT_THROW(rle_decode(r), DataError);
}

TEST(RleLine, FormatAndParse) {
    Mask m(2, 2);
    for (auto& b : m.bits) b = 1;
    std::string line = format_rle_line("img1", rle_encode(m).runs);
    EXPECT_EQ(line, "img1,1 4");
    RleLine rl = parse_rle_line(line);
    EXPECT_EQ(rl.image_id, "img1");
    ASSERT_EQ(rl.runs.size(), 1u);
    EXPECT_EQ(rl.runs[0], std::make_pair(1L, 4L));
    EXPECT_EQ(format_rle_line(rl.image_id, rl.runs), line);  // byte-identical re-emit
}

TEST(RleLine, ParseRejectsGarbage) {
    EXPECT_THROW(parse_rle_line("no_comma_here"), DataError);
    EXPECT_THROW(parse_rle_line("id,1 2 3"), DataError);      // odd token count
    EXPECT_THROW(parse_rle_line("id,1 two"), DataError);      // non-integer
    EXPECT_THROW(parse_rle_line(",1 2"), DataError);          // empty id
}

TEST(RleLine, EmptyRunsAllowed) {
    RleLine rl = parse_rle_line("img2,");
    EXPECT_TRUE(rl.runs.empty());
    EXPECT_EQ(format_rle_line(rl.image_id, rl.runs), "img2,");
}

TEST(MaskIou, SelfAndDisjoint) {
    std::mt19937_64 rng(3);
    Mask a = random_mask(10, 10, rng);
    EXPECT_DOUBLE_EQ(mask_iou(a, a), 1.0);
    Mask left = rect_mask(4, 8, 0, 0, 4, 3), right = rect_mask(4, 8, 0, 5, 4, 8);
    EXPECT_DOUBLE_EQ(mask_iou(left, right), 0.0);
}

TEST(MaskIou, HandCountedThirds) {
    Mask a(3, 1), b(3, 1);
    a.bits = {1, 1, 0};
    b.bits = {0, 1, 1};
    EXPECT_DOUBLE_EQ(mask_iou(a, b), 1.0 / 3.0);
}

TEST(MaskIou, BothEmptyIsZeroAndMismatchThrows) {
    EXPECT_DOUBLE_EQ(mask_iou(Mask(4, 4), Mask(4, 4)), 0.0);
    EXPECT_THROW(mask_iou(Mask(4, 4), Mask(4, 5)), std::invalid_argument);
}

TEST(MergeMasks, SingleMask) {
    auto lm = merge_masks({rect_mask(4, 4, 1, 1, 3, 3)});
    int ones = 0;
    for (int v : lm.labels) {
        EXPECT_TRUE(v == 0 || v == 1);
        ones += v == 1;
    }
    EXPECT_EQ(ones, 4);
}

TEST(MergeMasks, DisjointPreservesSupports) {
    Mask a = rect_mask(6, 6, 0, 0, 2, 2), b = rect_mask(6, 6, 3, 3, 6, 6);
    auto lm = merge_masks({a, b});
    long n1 = 0, n2 = 0;
    for (int v : lm.labels) {
        n1 += v == 1;
        n2 += v == 2;
    }
    EXPECT_EQ(n1, a.count());
    EXPECT_EQ(n2, b.count());
}

TEST(MergeMasks, OverlapGoesToSmallerInstance) {
    // big 3x3 block and small 2x1 block overlapping in exactly one pixel
    Mask big = rect_mask(4, 4, 0, 0, 3, 3);
    Mask small = rect_mask(4, 4, 2, 2, 4, 3);
    ASSERT_EQ(mask_iou(big, small) > 0, true);
    auto lm = merge_masks({big, small});
    EXPECT_EQ(lm.at(2, 2), 2);  // the shared pixel goes to the smaller mask
    EXPECT_EQ(lm.at(0, 0), 1);
    EXPECT_EQ(lm.at(3, 2), 2);
}

TEST(MergeMasks, PixelConservationForDisjointInputs) {
    std::mt19937_64 rng(17);
    Mask a = rect_mask(12, 12, 0, 0, 5, 5);
    Mask b = rect_mask(12, 12, 6, 6, 11, 11);
    Mask c = rect_mask(12, 12, 0, 7, 3, 12);
    auto lm = merge_masks({a, b, c});
    long total = 0;
    for (int v : lm.labels) total += v > 0;
    EXPECT_EQ(total, a.count() + b.count() + c.count());
    EXPECT_TRUE(merge_masks({}).labels.empty());
}

TEST(ExtractMaskTarget, FullySetRegion) {
    Mask m = rect_mask(16, 16, 0, 0, 16, 16);
    auto g = extract_mask_target(m, Box(4, 4, 12, 12), 4);
    for (double v : g) EXPECT_DOUBLE_EQ(v, 1.0);
}

TEST(ExtractMaskTarget, BackgroundOnly) {
    Mask m = rect_mask(16, 16, 0, 0, 4, 4);
    auto g = extract_mask_target(m, Box(8, 8, 15, 15), 5);
    for (double v : g) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(ExtractMaskTarget, MatchesBilinearOracle) {
    // left half set, sampled under a 2x roi
    Mask m = rect_mask(8, 8, 0, 0, 8, 4);
    Box roi(1, 1, 7, 7);
    int msz = 6;
    auto g = extract_mask_target(m, roi, msz);
    for (int i = 0; i < msz; ++i)
        for (int j = 0; j < msz; ++j) {
            double u = roi.x1 + (j + 0.5) * roi.width() / msz;
            double v = roi.y1 + (i + 0.5) * roi.height() / msz;
            EXPECT_NEAR(g[i * msz + j], bilinear_oracle(m, u, v), 1e-6);
        }
}

TEST(ExtractMaskTarget, RejectsZeroAreaRoi) {
    Mask m(8, 8);
    EXPECT_THROW(extract_mask_target(m, Box(2, 2, 2, 5), 4), std::invalid_argument);
}

TEST(PasteMask, SaturatedLogits) {
    std::vector<double> pos(16, 30.0), neg(16, -30.0);
    Mask mp = paste_mask(pos, 4, Box(2, 2, 6, 7), 10, 10);
    Mask mn = paste_mask(neg, 4, Box(2, 2, 6, 7), 10, 10);
    EXPECT_EQ(mn.count(), 0);
    for (int y = 0; y < 10; ++y)
        for (int x = 0; x < 10; ++x) {
            bool inside = x + 0.5 >= 2 && x + 0.5 < 6 && y + 0.5 >= 2 && y + 0.5 < 7;
            EXPECT_EQ(mp.at(y, x), inside ? 1 : 0);
        }
}

TEST(PasteMask, RoiOutsideImageGivesEmpty) {
    std::vector<double> pos(16, 30.0);
    Mask m = paste_mask(pos, 4, Box(20, 20, 30, 30), 10, 10);
    EXPECT_EQ(m.count(), 0);
}

TEST(PasteExtract, RectangleRoundtripExact) {
    // paste(extract(.)) recovers an axis-aligned rectangle exactly when the
    // roi equals the rectangle
    for (int m_sz : {2, 7, 28}) {
        for (auto [y1, x1, y2, x2] : std::vector<std::array<int, 4>>{
                 {2, 2, 6, 6}, {0, 0, 2, 9}, {3, 1, 5, 3}, {1, 1, 11, 4}}) {
            Mask rect = rect_mask(12, 12, y1, x1, y2, x2);
            Box roi(x1, y1, x2, y2);
            auto grid = extract_mask_target(rect, roi, m_sz);
            Mask back = paste_mask(grid, m_sz, roi, 12, 12);
            EXPECT_DOUBLE_EQ(mask_iou(rect, back), 1.0)
                << "m=" << m_sz << " rect " << y1 << "," << x1 << "," << y2 << "," << x2;
        }
    }
}
