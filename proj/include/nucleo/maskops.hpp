#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "nucleo/errors.hpp"
#include "nucleo/geometry.hpp"

namespace nucleo {

/// Dense per-instance 0/1 raster, row-major.
struct Mask {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> bits;  // height*width, values in {0,1}

    Mask() = default;
    Mask(int h, int w) : height(h), width(w), bits(static_cast<size_t>(h) * w, 0) {}

    std::uint8_t at(int y, int x) const {
        return bits[static_cast<size_t>(y) * width + x];
    }
    void set(int y, int x, std::uint8_t v) {
        bits[static_cast<size_t>(y) * width + x] = v;
    }
    long count() const {
        long c = 0;
        for (auto b : bits) c += b;
        return c;
    }
    bool empty_mask() const { return count() == 0; }
};

/// Run-length form of a mask: column-major scan, 1-indexed start positions,
/// maximal (non-overlapping, non-adjacent) runs sorted by start.
struct Rle {
    int height = 0;
    int width = 0;
    std::vector<std::pair<long, long>> runs;  // (start, length)
};

/// Merged instance image: 0 = background, k = instance k (1-based).
struct LabelMap {
    int height = 0;
    int width = 0;
    std::vector<int> labels;

    LabelMap() = default;
    LabelMap(int h, int w) : height(h), width(w), labels(static_cast<size_t>(h) * w, 0) {}
    int at(int y, int x) const { return labels[static_cast<size_t>(y) * width + x]; }
};

inline Rle rle_encode(const Mask& m) {
    Rle r;
    r.height = m.height;
    r.width = m.width;
    long pos = 0;  // 0-based column-major position
    long run_start = -1;
    for (int x = 0; x < m.width; ++x) {
        for (int y = 0; y < m.height; ++y, ++pos) {
            if (m.at(y, x)) {
                if (run_start < 0) run_start = pos;
            } else if (run_start >= 0) {
                r.runs.emplace_back(run_start + 1, pos - run_start);
                run_start = -1;
            }
        }
    }
    if (run_start >= 0) r.runs.emplace_back(run_start + 1, pos - run_start);
    return r;
}

inline Mask rle_decode(const Rle& r) {
    Mask m(r.height, r.width);
    long total = static_cast<long>(r.height) * r.width;
    long prev_end = 0;  // 1-based end of previous run
    for (const auto& [start, len] : r.runs) {
        if (start < 1 || len < 1 || start + len - 1 > total)
            throw DataError("rle_decode: run out of range");
        if (start <= prev_end + 1 && prev_end > 0)
            throw DataError("rle_decode: overlapping or non-maximal runs");
        for (long p = start - 1; p < start - 1 + len; ++p) {
            int x = static_cast<int>(p / r.height);
            int y = static_cast<int>(p % r.height);
            m.set(y, x, 1);
        }
        prev_end = start + len - 1;
    }
    return m;
}

/// |a AND b| / |a OR b|; 0 when both masks are empty.
inline double mask_iou(const Mask& a, const Mask& b) {
    if (a.height != b.height || a.width != b.width)
        throw std::invalid_argument("mask_iou: dimension mismatch");
    long inter = 0, uni = 0;
    for (size_t i = 0; i < a.bits.size(); ++i) {
        inter += a.bits[i] & b.bits[i];
        uni += a.bits[i] | b.bits[i];
    }
    return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

/// Merge per-nucleus masks into one label image. A pixel claimed by several
/// masks goes to the smallest-area instance (lower index on equal area).
inline LabelMap merge_masks(const std::vector<Mask>& masks) {
    if (masks.empty()) return LabelMap();
    LabelMap lm(masks[0].height, masks[0].width);
    std::vector<long> areas(masks.size());
    for (size_t k = 0; k < masks.size(); ++k) {
        if (masks[k].height != lm.height || masks[k].width != lm.width)
            throw std::invalid_argument("merge_masks: dimension mismatch");
        areas[k] = masks[k].count();
    }
    for (size_t k = 0; k < masks.size(); ++k) {
        for (size_t i = 0; i < masks[k].bits.size(); ++i) {
            if (!masks[k].bits[i]) continue;
            int cur = lm.labels[i];
            if (cur == 0 || areas[k] < areas[static_cast<size_t>(cur - 1)])
                lm.labels[i] = static_cast<int>(k) + 1;
        }
    }
    return lm;
}

namespace detail {

// Bilinear read of a 0/1 raster at continuous image point (u, v); pixel (x, y)
// has its center at (x + 0.5, y + 0.5); outside the raster reads 0.
inline double sample_mask_bilinear(const Mask& m, double u, double v) {
    double a = u - 0.5, b = v - 0.5;
    int x0 = static_cast<int>(std::floor(a));
    int y0 = static_cast<int>(std::floor(b));
    double fx = a - x0, fy = b - y0;
    auto px = [&](int y, int x) -> double {
        if (x < 0 || y < 0 || x >= m.width || y >= m.height) return 0.0;
        return m.at(y, x);
    };
    return (1 - fy) * ((1 - fx) * px(y0, x0) + fx * px(y0, x0 + 1)) +
           fy * ((1 - fx) * px(y0 + 1, x0) + fx * px(y0 + 1, x0 + 1));
}

// Bilinear read of an m-by-m grid at continuous grid coordinate (gx, gy),
// clamped to the grid border.
inline double sample_grid_bilinear(const std::vector<double>& grid, int m, double gx, double gy) {
    auto cl = [&](double v) { return std::max(0.0, std::min(v, static_cast<double>(m - 1))); };
    gx = cl(gx);
    gy = cl(gy);
    int x0 = std::min(static_cast<int>(std::floor(gx)), m - 2 >= 0 ? m - 2 : 0);
    int y0 = std::min(static_cast<int>(std::floor(gy)), m - 2 >= 0 ? m - 2 : 0);
    if (m == 1) return grid[0];
    double fx = gx - x0, fy = gy - y0;
    auto at = [&](int y, int x) { return grid[static_cast<size_t>(y) * m + x]; };
    return (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
           fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
}

}  // namespace detail

/// Instance mask restricted to roi and resampled to an m-by-m grid in [0,1]
/// by bilinear interpolation; training target for the mask head.
inline std::vector<double> extract_mask_target(const Mask& instance, const Box& roi, int m) {
    if (m < 1) throw std::invalid_argument("extract_mask_target: m must be >= 1");
    if (!roi.valid() || roi.area() <= 0)
        throw std::invalid_argument("extract_mask_target: zero-area roi");
    std::vector<double> grid(static_cast<size_t>(m) * m, 0.0);
    double bw = roi.width() / m, bh = roi.height() / m;
    for (int i = 0; i < m; ++i) {
        double v = roi.y1 + (i + 0.5) * bh;
        for (int j = 0; j < m; ++j) {
            double u = roi.x1 + (j + 0.5) * bw;
            grid[static_cast<size_t>(i) * m + j] = detail::sample_mask_bilinear(instance, u, v);
        }
    }
    return grid;
}

/// Mask-head logits resized into image space. Logits go through the logistic
/// function, get bilinearly resized to the roi, and are thresholded; pixels
/// whose centers fall outside the roi stay 0.
inline Mask paste_mask(const std::vector<double>& logit_grid, int m, const Box& roi, int image_h,
                       int image_w, double threshold = 0.5) {
    if (!roi.valid()) throw std::invalid_argument("paste_mask: invalid roi");
    Mask out(image_h, image_w);
    if (roi.width() <= 0 || roi.height() <= 0) return out;
    std::vector<double> prob(logit_grid.size());
    for (size_t i = 0; i < logit_grid.size(); ++i)
        prob[i] = 1.0 / (1.0 + std::exp(-logit_grid[i]));
    double bw = roi.width() / m, bh = roi.height() / m;
    int x_lo = std::max(0, static_cast<int>(std::floor(roi.x1 - 0.5)));
    int x_hi = std::min(image_w - 1, static_cast<int>(std::ceil(roi.x2)));
    int y_lo = std::max(0, static_cast<int>(std::floor(roi.y1 - 0.5)));
    int y_hi = std::min(image_h - 1, static_cast<int>(std::ceil(roi.y2)));
    for (int py = y_lo; py <= y_hi; ++py) {
        double cy = py + 0.5;
        if (cy < roi.y1 || cy >= roi.y2) continue;
        double gy = (cy - roi.y1) / bh - 0.5;
        for (int px = x_lo; px <= x_hi; ++px) {
            double cx = px + 0.5;
            if (cx < roi.x1 || cx >= roi.x2) continue;
            double gx = (cx - roi.x1) / bw - 0.5;
            if (detail::sample_grid_bilinear(prob, m, gx, gy) > threshold) out.set(py, px, 1);
        }
    }
    return out;
}

/// One submission line: `image_id,start len start len ...` (column-major,
/// 1-indexed). Dimensions travel separately; the wire form carries runs only.
struct RleLine {
    std::string image_id;
    std::vector<std::pair<long, long>> runs;
};

inline std::string format_rle_line(const std::string& image_id,
                                   const std::vector<std::pair<long, long>>& runs) {
    std::ostringstream os;
    os << image_id << ',';
    for (size_t i = 0; i < runs.size(); ++i) {
        if (i) os << ' ';
        os << runs[i].first << ' ' << runs[i].second;
    }
    return os.str();
}

inline RleLine parse_rle_line(const std::string& line) {
    auto comma = line.find(',');
    if (comma == std::string::npos) throw DataError("rle line: missing comma separator");
    RleLine out;
    out.image_id = line.substr(0, comma);
    if (out.image_id.empty()) throw DataError("rle line: empty image id");
    std::istringstream is(line.substr(comma + 1));
    long a;
    std::vector<long> nums;
    while (is >> a) nums.push_back(a);
    if (!is.eof()) throw DataError("rle line: non-integer run token");
    if (nums.size() % 2 != 0) throw DataError("rle line: odd run token count");
    for (size_t i = 0; i < nums.size(); i += 2) out.runs.emplace_back(nums[i], nums[i + 1]);
    return out;
}

}  // namespace nucleo
