#pragma once

#include <cmath>
#include <vector>

#include "nucleo/autodiff.hpp"
#include "nucleo/geometry.hpp"
#include "nucleo/tensor.hpp"

namespace nucleo {

/// A region to pool, referencing image n of the batch. Box is in image
/// coordinates; division by the feature stride maps it to feature
/// coordinates with no rounding.
struct RoiRef {
    int batch = 0;
    Box box;
};

namespace kernels {

// Corner indices and bilinear weights at continuous index coordinate (y, x).
// Coordinates within one pixel of the border clamp onto it; anything farther
// out reads zero (valid = false).
struct BilinearTaps {
    bool valid = false;
    long y0 = 0, y1 = 0, x0 = 0, x1 = 0;
    double w00 = 0, w01 = 0, w10 = 0, w11 = 0;
};

inline BilinearTaps bilinear_taps(long H, long W, double y, double x) {
    BilinearTaps tp;
    if (y < -1.0 || y > static_cast<double>(H) || x < -1.0 || x > static_cast<double>(W))
        return tp;
    tp.valid = true;
    if (y <= 0) y = 0;
    if (x <= 0) x = 0;
    tp.y0 = static_cast<long>(y);
    tp.x0 = static_cast<long>(x);
    if (tp.y0 >= H - 1) {
        tp.y0 = tp.y1 = H - 1;
        y = static_cast<double>(tp.y0);
    } else {
        tp.y1 = tp.y0 + 1;
    }
    if (tp.x0 >= W - 1) {
        tp.x0 = tp.x1 = W - 1;
        x = static_cast<double>(tp.x0);
    } else {
        tp.x1 = tp.x0 + 1;
    }
    double fy = y - tp.y0, fx = x - tp.x0;
    tp.w00 = (1 - fy) * (1 - fx);
    tp.w01 = (1 - fy) * fx;
    tp.w10 = fy * (1 - fx);
    tp.w11 = fy * fx;
    return tp;
}

template <typename T>
inline double roi_sample(const T* plane, long H, long W, double y, double x) {
    BilinearTaps tp = bilinear_taps(H, W, y, x);
    if (!tp.valid) return 0.0;
    return tp.w00 * static_cast<double>(plane[tp.y0 * W + tp.x0]) +
           tp.w01 * static_cast<double>(plane[tp.y0 * W + tp.x1]) +
           tp.w10 * static_cast<double>(plane[tp.y1 * W + tp.x0]) +
           tp.w11 * static_cast<double>(plane[tp.y1 * W + tp.x1]);
}

template <typename T>
inline void roi_sample_backward(T* plane, long H, long W, double y, double x, double g) {
    BilinearTaps tp = bilinear_taps(H, W, y, x);
    if (!tp.valid) return;
    plane[tp.y0 * W + tp.x0] += static_cast<T>(tp.w00 * g);
    plane[tp.y0 * W + tp.x1] += static_cast<T>(tp.w01 * g);
    plane[tp.y1 * W + tp.x0] += static_cast<T>(tp.w10 * g);
    plane[tp.y1 * W + tp.x1] += static_cast<T>(tp.w11 * g);
}

}  // namespace kernels

/// ROI-Align: pool each roi from feature [N,C,H,W] (feature stride s in image
/// pixels) into [R,C,p,p]. Each output bin averages samples-by-samples
/// bilinear reads at regular interior points of the bin.
template <typename T>
int roi_align(Tape<T>& t, int feature, std::vector<RoiRef> rois, int stride, int out_size,
              int samples = 2) {
    const auto& vf = t.val(feature);
    if (vf.rank() != 4) throw std::invalid_argument("roi_align: expected 4-D feature");
    long N = vf.dim(0), C = vf.dim(1), H = vf.dim(2), W = vf.dim(3);
    long R = static_cast<long>(rois.size());
    int p = out_size;
    for (const auto& r : rois) {
        if (r.batch < 0 || r.batch >= N) throw std::invalid_argument("roi_align: bad batch index");
        if (!r.box.valid() || r.box.area() <= 0)
            throw std::invalid_argument("roi_align: roi must have positive area");
    }
    Tensor<T> out({R, C, p, p});
    double inv_count = 1.0 / (samples * samples);
    for (long r = 0; r < R; ++r) {
        double fy1 = rois[static_cast<size_t>(r)].box.y1 / stride;
        double fx1 = rois[static_cast<size_t>(r)].box.x1 / stride;
        double bh = (rois[static_cast<size_t>(r)].box.height() / stride) / p;
        double bw = (rois[static_cast<size_t>(r)].box.width() / stride) / p;
        long n = rois[static_cast<size_t>(r)].batch;
        for (long c = 0; c < C; ++c) {
            const T* plane = &vf.data[static_cast<size_t>(((n * C + c) * H) * W)];
            for (int i = 0; i < p; ++i)
                for (int j = 0; j < p; ++j) {
                    double acc = 0;
                    for (int sy = 0; sy < samples; ++sy) {
                        double y = fy1 + (i + (sy + 0.5) / samples) * bh;
                        for (int sx = 0; sx < samples; ++sx) {
                            double x = fx1 + (j + (sx + 0.5) / samples) * bw;
                            acc += kernels::roi_sample(plane, H, W, y, x);
                        }
                    }
                    out.at4(r, c, i, j) = static_cast<T>(acc * inv_count);
                }
        }
    }
    int o = t.push(std::move(out));
    t.record("roi_align", o,
             [feature, o, rois = std::move(rois), stride, p, samples](Tape<T>& tp) {
                 const auto& g = tp.grad(o);
                 auto& gf = tp.grad(feature);
                 long C2 = gf.dim(1), H2 = gf.dim(2), W2 = gf.dim(3);
                 double inv = 1.0 / (samples * samples);
                 for (long r = 0; r < static_cast<long>(rois.size()); ++r) {
                     double fy1 = rois[static_cast<size_t>(r)].box.y1 / stride;
                     double fx1 = rois[static_cast<size_t>(r)].box.x1 / stride;
                     double bh = (rois[static_cast<size_t>(r)].box.height() / stride) / p;
                     double bw = (rois[static_cast<size_t>(r)].box.width() / stride) / p;
                     long n = rois[static_cast<size_t>(r)].batch;
                     for (long c = 0; c < C2; ++c) {
                         T* plane = &gf.data[static_cast<size_t>(((n * C2 + c) * H2) * W2)];
                         for (int i = 0; i < p; ++i)
                             for (int j = 0; j < p; ++j) {
                                 double go = static_cast<double>(g.at4(r, c, i, j)) * inv;
                                 for (int sy = 0; sy < samples; ++sy) {
                                     double y = fy1 + (i + (sy + 0.5) / samples) * bh;
                                     for (int sx = 0; sx < samples; ++sx) {
                                         double x = fx1 + (j + (sx + 0.5) / samples) * bw;
                                         kernels::roi_sample_backward(plane, H2, W2, y, x, go);
                                     }
                                 }
                             }
                     }
                 }
             });
    return o;
}

/// FPN routing: which pyramid level pools a roi of this size.
/// k = clamp(floor(k0 + log2(sqrt(area)/canonical)), 2, 5); canonical 56
/// reflects the 2x-upsampled nucleus scale.
inline int assign_roi_level(const Box& roi, int k0 = 2, double canonical = 56.0) {
    double side = std::sqrt(roi.area());
    if (side <= 0) throw std::invalid_argument("assign_roi_level: zero-area roi");
    int k = k0 + static_cast<int>(std::floor(std::log2(side / canonical)));
    return std::max(2, std::min(5, k));
}

}  // namespace nucleo
