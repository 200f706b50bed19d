#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "nucleo/errors.hpp"

namespace nucleo {

/// Axis-aligned box in continuous pixel coordinates, origin top-left, y down.
/// Area arithmetic is half-open: area = (x2-x1)*(y2-y1), no +1 convention.
struct Box {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

    Box() = default;
    Box(double x1_, double y1_, double x2_, double y2_) : x1(x1_), y1(y1_), x2(x2_), y2(y2_) {}

    double width() const { return x2 - x1; }
    double height() const { return y2 - y1; }
    double area() const { return width() * height(); }
    double center_x() const { return 0.5 * (x1 + x2); }
    double center_y() const { return 0.5 * (y1 + y2); }

    bool valid() const {
        return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) &&
               std::isfinite(y2) && x2 >= x1 && y2 >= y1;
    }
};

/// Normalized box regression offsets: center shifts over anchor size, log size ratios.
struct BoxDelta {
    double dx = 0, dy = 0, dw = 0, dh = 0;
};

/// Anchor layout over pyramid levels. strides must be strictly increasing;
/// one anchor per (cell, scale, ratio) where ratio = h/w.
struct AnchorSpec {
    std::vector<int> strides = {4, 8, 16, 32};
    std::vector<std::vector<double>> scales = {{16}, {32}, {64}, {128}};  // per level, pixels
    std::vector<double> ratios = {0.5, 1.0, 2.0};

    int levels() const { return static_cast<int>(strides.size()); }
    int anchors_per_cell(int level) const {
        return static_cast<int>(scales[static_cast<size_t>(level)].size() * ratios.size());
    }
};

/// Intersection over union of two boxes. Degenerate zero-area inputs give 0.
inline double iou_box(const Box& a, const Box& b) {
    double ix = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    double iy = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    if (ix <= 0 || iy <= 0) return 0.0;
    double inter = ix * iy;
    double uni = a.area() + b.area() - inter;
    return uni > 0 ? inter / uni : 0.0;
}

/// Clamp a box to [0,w] x [0,h].
inline Box clip_box(const Box& b, int image_h, int image_w) {
    auto cl = [](double v, double hi) { return std::max(0.0, std::min(v, hi)); };
    return Box(cl(b.x1, image_w), cl(b.y1, image_h), cl(b.x2, image_w), cl(b.y2, image_h));
}

/// Greedy non-maximum suppression. Returns kept indices in descending score
/// order; score ties go to the lower original index.
inline std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<double>& scores,
                            double iou_threshold) {
    if (boxes.size() != scores.size())
        throw std::invalid_argument("nms: boxes and scores length mismatch");
    std::vector<int> order(boxes.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (scores[static_cast<size_t>(a)] != scores[static_cast<size_t>(b)])
            return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)];
        return a < b;
    });
    std::vector<char> suppressed(boxes.size(), 0);
    std::vector<int> keep;
    for (size_t oi = 0; oi < order.size(); ++oi) {
        int i = order[oi];
        if (suppressed[static_cast<size_t>(i)]) continue;
        keep.push_back(i);
        for (size_t oj = oi + 1; oj < order.size(); ++oj) {
            int j = order[oj];
            if (suppressed[static_cast<size_t>(j)]) continue;
            if (iou_box(boxes[static_cast<size_t>(i)], boxes[static_cast<size_t>(j)]) >
                iou_threshold)
                suppressed[static_cast<size_t>(j)] = 1;
        }
    }
    return keep;
}

/// Regression target for moving an anchor onto a ground-truth box.
inline BoxDelta encode_delta(const Box& anchor, const Box& gt) {
    double aw = anchor.width(), ah = anchor.height();
    if (aw <= 0 || ah <= 0)
        throw std::invalid_argument("encode_delta: anchor must have positive size");
    if (gt.width() <= 0 || gt.height() <= 0)
        throw std::invalid_argument("encode_delta: ground-truth box must have positive size");
    BoxDelta d;
    d.dx = (gt.center_x() - anchor.center_x()) / aw;
    d.dy = (gt.center_y() - anchor.center_y()) / ah;
    d.dw = std::log(gt.width() / aw);
    d.dh = std::log(gt.height() / ah);
    return d;
}

// Cap on decoded log-size ratios; exp(kDeltaClamp) = 1000/16.
inline constexpr double kDeltaClamp = 4.135166556742356;  // log(1000/16)

/// Inverse of encode_delta for the same anchor. dw/dh are clamped so a wild
/// regression output cannot overflow exp().
inline Box decode_delta(const Box& anchor, const BoxDelta& d) {
    double aw = anchor.width(), ah = anchor.height();
    if (aw <= 0 || ah <= 0)
        throw std::invalid_argument("decode_delta: anchor must have positive size");
    double cx = anchor.center_x() + d.dx * aw;
    double cy = anchor.center_y() + d.dy * ah;
    double w = aw * std::exp(std::min(d.dw, kDeltaClamp));
    double h = ah * std::exp(std::min(d.dh, kDeltaClamp));
    return Box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h);
}

/// Anchor with its pyramid level index (0-based into AnchorSpec levels).
struct LevelAnchor {
    Box box;
    int level = 0;
};

inline int grid_cells(int dim, int stride) { return (dim + stride - 1) / stride; }

/// Anchors for every feature cell of every level. Ordering is level-major,
/// then row (y), column (x), scale, ratio; RPN head outputs flatten to match.
inline std::vector<LevelAnchor> generate_anchors(const AnchorSpec& spec, int image_h,
                                                 int image_w) {
    for (size_t l = 1; l < spec.strides.size(); ++l)
        if (spec.strides[l] <= spec.strides[l - 1])
            throw std::invalid_argument("generate_anchors: strides must be strictly increasing");
    std::vector<LevelAnchor> out;
    for (int level = 0; level < spec.levels(); ++level) {
        int s = spec.strides[static_cast<size_t>(level)];
        int gh = grid_cells(image_h, s);
        int gw = grid_cells(image_w, s);
        for (int iy = 0; iy < gh; ++iy) {
            for (int ix = 0; ix < gw; ++ix) {
                double cx = s * (ix + 0.5);
                double cy = s * (iy + 0.5);
                for (double scale : spec.scales[static_cast<size_t>(level)]) {
                    for (double r : spec.ratios) {
                        if (scale <= 0 || r <= 0)
                            throw std::invalid_argument(
                                "generate_anchors: scales and ratios must be positive");
                        double w = scale / std::sqrt(r);
                        double h = scale * std::sqrt(r);
                        out.push_back({Box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h),
                                       level});
                    }
                }
            }
        }
    }
    return out;
}

}  // namespace nucleo
