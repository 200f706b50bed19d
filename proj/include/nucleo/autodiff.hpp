#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "nucleo/errors.hpp"
#include "nucleo/parallel.hpp"
#include "nucleo/tensor.hpp"

namespace nucleo {

/// Reverse-mode tape. Every op pushes its output as a new slot and records a
/// closure that scatters the output gradient back onto its inputs; backward
/// replays the closures in exact reverse execution order.
template <typename T>
class Tape {
public:
    int push(Tensor<T> v) {
        values_.push_back(std::move(v));
        grads_.emplace_back();
        return static_cast<int>(values_.size()) - 1;
    }

    const Tensor<T>& val(int id) const { return values_[static_cast<size_t>(id)]; }

    Tensor<T>& grad(int id) {
        auto& g = grads_[static_cast<size_t>(id)];
        if (g.shape != values_[static_cast<size_t>(id)].shape)
            g = Tensor<T>::zeros(values_[static_cast<size_t>(id)].shape);
        return g;
    }

    void record(const char* name, int out_id, std::function<void(Tape&)> fn) {
        nodes_.push_back({name, out_id, std::move(fn)});
    }

    /// Seeds d(root)/d(root) = 1 and accumulates gradients for every slot
    /// reachable backward from root. root must be scalar.
    void backward(int root) {
        if (val(root).numel() != 1)
            throw std::invalid_argument("Tape::backward: root must be scalar");
        grad(root)[0] = T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            bool corrupted = !corrupt_op.empty() && corrupt_op == it->name;
            if (corrupted)
                for (auto& g : grad(it->out_id).data) g *= T(2);
            it->fn(*this);
            if (corrupted)
                for (auto& g : grad(it->out_id).data) g *= T(0.5);
        }
    }

    size_t num_nodes() const { return nodes_.size(); }

    /// Name of an op whose backward pass gets scaled by 2; used by the
    /// gradient-check sensitivity self-test.
    std::string corrupt_op;

private:
    struct Node {
        const char* name;
        int out_id;
        std::function<void(Tape&)> fn;
    };
    std::vector<Tensor<T>> values_;
    std::vector<Tensor<T>> grads_;
    std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

template <typename T>
int add(Tape<T>& t, int a, int b) {
    const auto& va = t.val(a);
    const auto& vb = t.val(b);
    if (!va.same_shape(vb)) throw std::invalid_argument("add: shape mismatch");
    Tensor<T> out = va;
    for (long i = 0; i < out.numel(); ++i) out[i] += vb[i];
    int o = t.push(std::move(out));
    t.record("add", o, [a, b, o](Tape<T>& tp) {
        const auto& g = tp.grad(o);
        auto& ga = tp.grad(a);
        auto& gb = tp.grad(b);
        for (long i = 0; i < g.numel(); ++i) {
            ga[i] += g[i];
            gb[i] += g[i];
        }
    });
    return o;
}

/// Multiplication by a fixed scalar constant.
template <typename T>
int scale(Tape<T>& t, int x, double c) {
    Tensor<T> out = t.val(x);
    for (auto& v : out.data) v *= static_cast<T>(c);
    int o = t.push(std::move(out));
    t.record("scale", o, [x, o, c](Tape<T>& tp) {
        const auto& g = tp.grad(o);
        auto& gx = tp.grad(x);
        for (long i = 0; i < g.numel(); ++i) gx[i] += static_cast<T>(c) * g[i];
    });
    return o;
}

template <typename T>
int relu(Tape<T>& t, int x) {
    const auto& vx = t.val(x);
    Tensor<T> out = vx;
    for (auto& v : out.data) v = v > T(0) ? v : T(0);
    int o = t.push(std::move(out));
    t.record("relu", o, [x, o](Tape<T>& tp) {
        const auto& g = tp.grad(o);
        const auto& vx2 = tp.val(x);
        auto& gx = tp.grad(x);
        for (long i = 0; i < g.numel(); ++i)
            if (vx2[i] > T(0)) gx[i] += g[i];
    });
    return o;
}

template <typename T>
int reshape(Tape<T>& t, int x, std::vector<long> new_shape) {
    const auto& vx = t.val(x);
    if (Tensor<T>::numel_of(new_shape) != vx.numel())
        throw std::invalid_argument("reshape: element count mismatch");
    Tensor<T> out(std::move(new_shape), vx.data);
    int o = t.push(std::move(out));
    t.record("reshape", o, [x, o](Tape<T>& tp) {
        const auto& g = tp.grad(o);
        auto& gx = tp.grad(x);
        for (long i = 0; i < g.numel(); ++i) gx[i] += g[i];
    });
    return o;
}

/// Rows of x selected by index; backward scatter-adds into the source rows.
template <typename T>
int gather_rows(Tape<T>& t, int x, std::vector<long> indices) {
    const auto& vx = t.val(x);
    if (vx.rank() < 1) throw std::invalid_argument("gather_rows: rank-0 input");
    long rows = vx.dim(0);
    long row_sz = rows > 0 ? vx.numel() / rows : 0;
    for (long idx : indices)
        if (idx < 0 || idx >= rows) throw std::invalid_argument("gather_rows: index out of range");
    std::vector<long> shp = vx.shape;
    shp[0] = static_cast<long>(indices.size());
    Tensor<T> out(shp);
    for (size_t k = 0; k < indices.size(); ++k)
        std::copy_n(vx.data.begin() + indices[k] * row_sz, row_sz,
                    out.data.begin() + static_cast<long>(k) * row_sz);
    int o = t.push(std::move(out));
    t.record("gather_rows", o, [x, o, indices = std::move(indices), row_sz](Tape<T>& tp) {
        const auto& g = tp.grad(o);
        auto& gx = tp.grad(x);
        for (size_t k = 0; k < indices.size(); ++k)
            for (long j = 0; j < row_sz; ++j)
                gx[indices[k] * row_sz + j] += g[static_cast<long>(k) * row_sz + j];
    });
    return o;
}

/// Concatenation along dim 0.
template <typename T>
int concat_rows(Tape<T>& t, const std::vector<int>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty input list");
    std::vector<long> shp = t.val(parts[0]).shape;
    long rows = 0;
    for (int p : parts) {
        const auto& v = t.val(p);
        std::vector<long> tail(v.shape.begin() + 1, v.shape.end());
        std::vector<long> tail0(shp.begin() + 1, shp.end());
        if (tail != tail0) throw std::invalid_argument("concat_rows: trailing shape mismatch");
        rows += v.dim(0);
    }
    shp[0] = rows;
    Tensor<T> out(shp);
    long off = 0;
    for (int p : parts) {
        const auto& v = t.val(p);
        std::copy(v.data.begin(), v.data.end(), out.data.begin() + off);
        off += v.numel();
    }
    int o = t.push(std::move(out));
    t.record("concat_rows", o, [parts, o](Tape<T>& tp) {
        const auto& g = tp.grad(o);
        long off2 = 0;
        for (int p : parts) {
            auto& gp = tp.grad(p);
            for (long i = 0; i < gp.numel(); ++i) gp[i] += g[off2 + i];
            off2 += gp.numel();
        }
    });
    return o;
}

/// [N, K*cpa, h, w] -> [N*h*w*K, cpa], anchor-major: the row ordering matches
/// generate_anchors (per image: row y, column x, then anchor k per cell) with
/// the cpa components of anchor k living in channels [k*cpa, (k+1)*cpa).
template <typename T>
int flatten_anchor_major(Tape<T>& t, int x, long cpa) {
    const auto& vx = t.val(x);
    if (vx.rank() != 4 || vx.dim(1) % cpa != 0)
        throw std::invalid_argument("flatten_anchor_major: bad input shape");
    long N = vx.dim(0), K = vx.dim(1) / cpa, H = vx.dim(2), W = vx.dim(3);
    Tensor<T> out({N * H * W * K, cpa});
    long r = 0;
    for (long n = 0; n < N; ++n)
        for (long y = 0; y < H; ++y)
            for (long xx = 0; xx < W; ++xx)
                for (long k = 0; k < K; ++k, ++r)
                    for (long c = 0; c < cpa; ++c) out.at2(r, c) = vx.at4(n, k * cpa + c, y, xx);
    int o = t.push(std::move(out));
    t.record("flatten_anchor_major", o, [x, o, cpa](Tape<T>& tp) {
        const auto& g = tp.grad(o);
        auto& gx = tp.grad(x);
        long N2 = gx.dim(0), K2 = gx.dim(1) / cpa, H2 = gx.dim(2), W2 = gx.dim(3);
        long r2 = 0;
        for (long n = 0; n < N2; ++n)
            for (long y = 0; y < H2; ++y)
                for (long xx = 0; xx < W2; ++xx)
                    for (long k = 0; k < K2; ++k, ++r2)
                        for (long c = 0; c < cpa; ++c)
                            gx.at4(n, k * cpa + c, y, xx) += g.at2(r2, c);
    });
    return o;
}

/// Fixed linear functional sum_i coefs[i]*x[i] -> scalar. Used to reduce
/// non-scalar op outputs for gradient checks.
template <typename T>
int weighted_sum(Tape<T>& t, int x, std::vector<T> coefs) {
    const auto& vx = t.val(x);
    if (static_cast<long>(coefs.size()) != vx.numel())
        throw std::invalid_argument("weighted_sum: coef length mismatch");
    T s = T(0);
    for (long i = 0; i < vx.numel(); ++i) s += vx[i] * coefs[i];
    int o = t.push(Tensor<T>::scalar(s));
    t.record("weighted_sum", o, [x, o, coefs = std::move(coefs)](Tape<T>& tp) {
        T go = tp.grad(o)[0];
        auto& gx = tp.grad(x);
        for (long i = 0; i < gx.numel(); ++i) gx[i] += go * coefs[i];
    });
    return o;
}

// ---------------------------------------------------------------------------
// Convolution family
// ---------------------------------------------------------------------------

namespace kernels {

template <typename T>
void conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                    int pad, Tensor<T>& out) {
    long N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    long F = w.dim(0), KH = w.dim(2), KW = w.dim(3);
    long OH = out.dim(2), OW = out.dim(3);
    parallel_for(N * F, [&](long nf) {
        long n = nf / F, f = nf % F;
        T* obase = &out.data[static_cast<size_t>(((n * F + f) * OH) * OW)];
        for (long i = 0; i < OH * OW; ++i) obase[i] = b[f];
        for (long c = 0; c < C; ++c) {
            const T* xbase = &x.data[static_cast<size_t>(((n * C + c) * H) * W)];
            for (long ky = 0; ky < KH; ++ky) {
                const T* wrow = &w.data[static_cast<size_t>(((f * C + c) * KH + ky) * KW)];
                for (long oy = 0; oy < OH; ++oy) {
                    long iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= H) continue;
                    T* orow = obase + oy * OW;
                    const T* xrow = xbase + iy * W;
                    for (long kx = 0; kx < KW; ++kx) {
                        T wv = wrow[kx];
                        long shift = kx - pad;
                        long ox_lo = shift >= 0 ? 0 : (-shift + stride - 1) / stride;
                        long ox_hi = (W - 1 - shift) / stride;
                        if (ox_hi > OW - 1) ox_hi = OW - 1;
                        if (stride == 1) {
                            for (long ox = ox_lo; ox <= ox_hi; ++ox)
                                orow[ox] += wv * xrow[ox + shift];
                        } else {
                            for (long ox = ox_lo; ox <= ox_hi; ++ox)
                                orow[ox] += wv * xrow[ox * stride + shift];
                        }
                    }
                }
            }
        }
    });
}

template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad,
                     const Tensor<T>& gout, Tensor<T>& gx, Tensor<T>& gw, Tensor<T>& gb) {
    long N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    long F = w.dim(0), KH = w.dim(2), KW = w.dim(3);
    long OH = gout.dim(2), OW = gout.dim(3);
    // Weight and bias gradients: disjoint writes per output channel f.
    parallel_for(F, [&](long f) {
        T bsum = T(0);
        for (long n = 0; n < N; ++n) {
            const T* gbase = &gout.data[static_cast<size_t>(((n * F + f) * OH) * OW)];
            for (long i = 0; i < OH * OW; ++i) bsum += gbase[i];
            for (long c = 0; c < C; ++c) {
                const T* xbase = &x.data[static_cast<size_t>(((n * C + c) * H) * W)];
                for (long ky = 0; ky < KH; ++ky) {
                    T* gwrow = &gw.data[static_cast<size_t>(((f * C + c) * KH + ky) * KW)];
                    for (long oy = 0; oy < OH; ++oy) {
                        long iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= H) continue;
                        const T* grow = gbase + oy * OW;
                        const T* xrow = xbase + iy * W;
                        for (long kx = 0; kx < KW; ++kx) {
                            long shift = kx - pad;
                            long ox_lo = shift >= 0 ? 0 : (-shift + stride - 1) / stride;
                            long ox_hi = (W - 1 - shift) / stride;
                            if (ox_hi > OW - 1) ox_hi = OW - 1;
                            T acc = T(0);
                            for (long ox = ox_lo; ox <= ox_hi; ++ox)
                                acc += grow[ox] * xrow[ox * stride + shift];
                            gwrow[kx] += acc;
                        }
                    }
                }
            }
        }
        gb[f] += bsum;
    });
    // Input gradient: disjoint writes per (n, c) slice.
    parallel_for(N * C, [&](long nc) {
        long n = nc / C, c = nc % C;
        T* gxbase = &gx.data[static_cast<size_t>(((n * C + c) * H) * W)];
        for (long f = 0; f < F; ++f) {
            const T* gbase = &gout.data[static_cast<size_t>(((n * F + f) * OH) * OW)];
            for (long ky = 0; ky < KH; ++ky) {
                const T* wrow = &w.data[static_cast<size_t>(((f * C + c) * KH + ky) * KW)];
                for (long oy = 0; oy < OH; ++oy) {
                    long iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= H) continue;
                    const T* grow = gbase + oy * OW;
                    T* gxrow = gxbase + iy * W;
                    for (long kx = 0; kx < KW; ++kx) {
                        T wv = wrow[kx];
                        long shift = kx - pad;
                        long ox_lo = shift >= 0 ? 0 : (-shift + stride - 1) / stride;
                        long ox_hi = (W - 1 - shift) / stride;
                        if (ox_hi > OW - 1) ox_hi = OW - 1;
                        for (long ox = ox_lo; ox <= ox_hi; ++ox)
                            gxrow[ox * stride + shift] += wv * grow[ox];
                    }
                }
            }
        }
    });
}

}  // namespace kernels

/// Cross-correlation: x [N,C,H,W] * w [F,C,kh,kw] + b [F] -> [N,F,H',W'].
template <typename T>
int conv2d(Tape<T>& t, int x, int w, int b, int stride = 1, int pad = 0) {
    const auto& vx = t.val(x);
    const auto& vw = t.val(w);
    const auto& vb = t.val(b);
    if (vx.rank() != 4 || vw.rank() != 4 || vb.rank() != 1)
        throw std::invalid_argument("conv2d: expected 4-D input, 4-D weight, 1-D bias");
    if (vx.dim(1) != vw.dim(1) || vb.dim(0) != vw.dim(0))
        throw std::invalid_argument("conv2d: channel mismatch");
    long H = vx.dim(2), W = vx.dim(3), KH = vw.dim(2), KW = vw.dim(3);
    if ((H + 2 * pad - KH) % stride != 0 || (W + 2 * pad - KW) % stride != 0)
        throw std::invalid_argument("conv2d: output size not integral");
    long OH = (H + 2 * pad - KH) / stride + 1;
    long OW = (W + 2 * pad - KW) / stride + 1;
    if (OH <= 0 || OW <= 0) throw std::invalid_argument("conv2d: empty output");
    Tensor<T> out({vx.dim(0), vw.dim(0), OH, OW});
    kernels::conv2d_forward(vx, vw, vb, stride, pad, out);
    int o = t.push(std::move(out));
    t.record("conv2d", o, [x, w, b, stride, pad, o](Tape<T>& tp) {
        kernels::conv2d_backward(tp.val(x), tp.val(w), stride, pad, tp.grad(o), tp.grad(x),
                                 tp.grad(w), tp.grad(b));
    });
    return o;
}

/// Transposed convolution: x [N,C,H,W] * w [C,F,kh,kw] + b [F] ->
/// [N,F,(H-1)s+kh, (W-1)s+kw]. Used for the 2x mask-head upsample.
template <typename T>
int conv_transpose2d(Tape<T>& t, int x, int w, int b, int stride = 2) {
    const auto& vx = t.val(x);
    const auto& vw = t.val(w);
    const auto& vb = t.val(b);
    if (vx.rank() != 4 || vw.rank() != 4 || vb.rank() != 1)
        throw std::invalid_argument("conv_transpose2d: bad ranks");
    if (vx.dim(1) != vw.dim(0) || vb.dim(0) != vw.dim(1))
        throw std::invalid_argument("conv_transpose2d: channel mismatch");
    long N = vx.dim(0), C = vx.dim(1), H = vx.dim(2), W = vx.dim(3);
    long F = vw.dim(1), KH = vw.dim(2), KW = vw.dim(3);
    long OH = (H - 1) * stride + KH, OW = (W - 1) * stride + KW;
    Tensor<T> out({N, F, OH, OW});
    for (long n = 0; n < N; ++n)
        for (long f = 0; f < F; ++f)
            for (long i = 0; i < OH * OW; ++i)
                out.data[static_cast<size_t>(((n * F + f) * OH) * OW + i)] = vb[f];
    for (long n = 0; n < N; ++n)
        for (long c = 0; c < C; ++c)
            for (long iy = 0; iy < H; ++iy)
                for (long ix = 0; ix < W; ++ix) {
                    T xv = vx.at4(n, c, iy, ix);
                    for (long f = 0; f < F; ++f)
                        for (long ky = 0; ky < KH; ++ky)
                            for (long kx = 0; kx < KW; ++kx)
                                out.at4(n, f, iy * stride + ky, ix * stride + kx) +=
                                    xv * vw.at4(c, f, ky, kx);
                }
    int o = t.push(std::move(out));
    t.record("conv_transpose2d", o, [x, w, b, stride, o](Tape<T>& tp) {
        const auto& g = tp.grad(o);
        const auto& vx2 = tp.val(x);
        const auto& vw2 = tp.val(w);
        auto& gx = tp.grad(x);
        auto& gw = tp.grad(w);
        auto& gb = tp.grad(b);
        long N2 = vx2.dim(0), C2 = vx2.dim(1), H2 = vx2.dim(2), W2 = vx2.dim(3);
        long F2 = vw2.dim(1), KH2 = vw2.dim(2), KW2 = vw2.dim(3);
        for (long n = 0; n < N2; ++n)
            for (long f = 0; f < F2; ++f)
                for (long oy = 0; oy < g.dim(2); ++oy)
                    for (long ox = 0; ox < g.dim(3); ++ox) gb[f] += g.at4(n, f, oy, ox);
        for (long n = 0; n < N2; ++n)
            for (long c = 0; c < C2; ++c)
                for (long iy = 0; iy < H2; ++iy)
                    for (long ix = 0; ix < W2; ++ix) {
                        T xv = vx2.at4(n, c, iy, ix);
                        T gxv = T(0);
                        for (long f = 0; f < F2; ++f)
                            for (long ky = 0; ky < KH2; ++ky)
                                for (long kx = 0; kx < KW2; ++kx) {
                                    T go = g.at4(n, f, iy * stride + ky, ix * stride + kx);
                                    gxv += go * vw2.at4(c, f, ky, kx);
                                    gw.at4(c, f, ky, kx) += go * xv;
                                }
                        gx.at4(n, c, iy, ix) += gxv;
                    }
    });
    return o;
}

/// Affine layer: x [N,D] * w [D,M] + b [M] -> [N,M].
template <typename T>
int linear(Tape<T>& t, int x, int w, int b) {
    const auto& vx = t.val(x);
    const auto& vw = t.val(w);
    const auto& vb = t.val(b);
    if (vx.rank() != 2 || vw.rank() != 2 || vb.rank() != 1 || vx.dim(1) != vw.dim(0) ||
        vb.dim(0) != vw.dim(1))
        throw std::invalid_argument("linear: shape mismatch");
    long N = vx.dim(0), D = vx.dim(1), M = vw.dim(1);
    Tensor<T> out({N, M});
    for (long n = 0; n < N; ++n) {
        T* orow = &out.data[static_cast<size_t>(n * M)];
        for (long m = 0; m < M; ++m) orow[m] = vb[m];
        for (long d = 0; d < D; ++d) {
            T xv = vx.at2(n, d);
            const T* wrow = &vw.data[static_cast<size_t>(d * M)];
            for (long m = 0; m < M; ++m) orow[m] += xv * wrow[m];
        }
    }
    int o = t.push(std::move(out));
    t.record("linear", o, [x, w, b, o](Tape<T>& tp) {
        const auto& g = tp.grad(o);
        const auto& vx2 = tp.val(x);
        const auto& vw2 = tp.val(w);
        auto& gx = tp.grad(x);
        auto& gw = tp.grad(w);
        auto& gb = tp.grad(b);
        long N2 = vx2.dim(0), D2 = vx2.dim(1), M2 = vw2.dim(1);
        for (long n = 0; n < N2; ++n) {
            const T* grow = &g.data[static_cast<size_t>(n * M2)];
            for (long m = 0; m < M2; ++m) gb[m] += grow[m];
            for (long d = 0; d < D2; ++d) {
                const T* wrow = &vw2.data[static_cast<size_t>(d * M2)];
                T xv = vx2.at2(n, d);
                T acc = T(0);
                T* gwrow = &gw.data[static_cast<size_t>(d * M2)];
                for (long m = 0; m < M2; ++m) {
                    acc += grow[m] * wrow[m];
                    gwrow[m] += grow[m] * xv;
                }
                gx.at2(n, d) += acc;
            }
        }
    });
    return o;
}

/// 2x2 max pooling with stride 2 (floor on odd trailing row/column).
template <typename T>
int max_pool2d(Tape<T>& t, int x) {
    const auto& vx = t.val(x);
    if (vx.rank() != 4) throw std::invalid_argument("max_pool2d: expected 4-D input");
    long N = vx.dim(0), C = vx.dim(1), H = vx.dim(2), W = vx.dim(3);
    long OH = H / 2, OW = W / 2;
    if (OH < 1 || OW < 1) throw std::invalid_argument("max_pool2d: input too small");
    Tensor<T> out({N, C, OH, OW});
    auto argmax = std::make_shared<std::vector<long>>(static_cast<size_t>(out.numel()));
    long idx = 0;
    for (long n = 0; n < N; ++n)
        for (long c = 0; c < C; ++c)
            for (long oy = 0; oy < OH; ++oy)
                for (long ox = 0; ox < OW; ++ox, ++idx) {
                    long best = ((n * C + c) * H + 2 * oy) * W + 2 * ox;
                    T bv = vx[best];
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) {
                            long p = ((n * C + c) * H + 2 * oy + dy) * W + 2 * ox + dx;
                            if (vx[p] > bv) {
                                bv = vx[p];
                                best = p;
                            }
                        }
                    out[idx] = bv;
                    (*argmax)[static_cast<size_t>(idx)] = best;
                }
    int o = t.push(std::move(out));
    t.record("max_pool2d", o, [x, o, argmax](Tape<T>& tp) {
        const auto& g = tp.grad(o);
        auto& gx = tp.grad(x);
        for (long i = 0; i < g.numel(); ++i) gx[(*argmax)[static_cast<size_t>(i)]] += g[i];
    });
    return o;
}

namespace kernels {

// Axis resampling table for align_corners=false, half-pixel centers, edge clamp.
struct ResampleAxis {
    std::vector<long> i0, i1;
    std::vector<double> w0, w1;
};

inline ResampleAxis make_resample_axis(long in, long out) {
    ResampleAxis ax;
    ax.i0.resize(static_cast<size_t>(out));
    ax.i1.resize(static_cast<size_t>(out));
    ax.w0.resize(static_cast<size_t>(out));
    ax.w1.resize(static_cast<size_t>(out));
    double scale = static_cast<double>(in) / static_cast<double>(out);
    for (long i = 0; i < out; ++i) {
        double src = (i + 0.5) * scale - 0.5;
        if (src < 0) src = 0;
        if (src > in - 1) src = static_cast<double>(in - 1);
        long lo = static_cast<long>(std::floor(src));
        if (lo > in - 2) lo = in - 2 >= 0 ? in - 2 : 0;
        long hi = std::min(lo + 1, in - 1);
        double f = src - lo;
        ax.i0[static_cast<size_t>(i)] = lo;
        ax.i1[static_cast<size_t>(i)] = hi;
        ax.w0[static_cast<size_t>(i)] = 1.0 - f;
        ax.w1[static_cast<size_t>(i)] = f;
    }
    return ax;
}

}  // namespace kernels

/// Bilinear resize of [N,C,H,W] to [N,C,out_h,out_w]; align_corners=false,
/// half-pixel centers, edges clamped.
template <typename T>
int bilinear_resize(Tape<T>& t, int x, long out_h, long out_w) {
    const auto& vx = t.val(x);
    if (vx.rank() != 4) throw std::invalid_argument("bilinear_resize: expected 4-D input");
    if (out_h < 1 || out_w < 1) throw std::invalid_argument("bilinear_resize: bad output dims");
    long N = vx.dim(0), C = vx.dim(1), H = vx.dim(2), W = vx.dim(3);
    auto ay = std::make_shared<kernels::ResampleAxis>(kernels::make_resample_axis(H, out_h));
    auto ax = std::make_shared<kernels::ResampleAxis>(kernels::make_resample_axis(W, out_w));
    Tensor<T> out({N, C, out_h, out_w});
    for (long nc = 0; nc < N * C; ++nc) {
        const T* src = &vx.data[static_cast<size_t>(nc * H * W)];
        T* dst = &out.data[static_cast<size_t>(nc * out_h * out_w)];
        for (long oy = 0; oy < out_h; ++oy) {
            const T* r0 = src + ay->i0[static_cast<size_t>(oy)] * W;
            const T* r1 = src + ay->i1[static_cast<size_t>(oy)] * W;
            double wy0 = ay->w0[static_cast<size_t>(oy)], wy1 = ay->w1[static_cast<size_t>(oy)];
            for (long ox = 0; ox < out_w; ++ox) {
                long x0 = ax->i0[static_cast<size_t>(ox)], x1 = ax->i1[static_cast<size_t>(ox)];
                double wx0 = ax->w0[static_cast<size_t>(ox)], wx1 = ax->w1[static_cast<size_t>(ox)];
                dst[oy * out_w + ox] =
                    static_cast<T>(wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) +
                                   wy1 * (wx0 * r1[x0] + wx1 * r1[x1]));
            }
        }
    }
    int o = t.push(std::move(out));
    t.record("bilinear_resize", o, [x, o, ay, ax](Tape<T>& tp) {
        const auto& g = tp.grad(o);
        auto& gx = tp.grad(x);
        long N2 = gx.dim(0), C2 = gx.dim(1), H2 = gx.dim(2), W2 = gx.dim(3);
        long OH = g.dim(2), OW = g.dim(3);
        for (long nc = 0; nc < N2 * C2; ++nc) {
            T* dst = &gx.data[static_cast<size_t>(nc * H2 * W2)];
            const T* src = &g.data[static_cast<size_t>(nc * OH * OW)];
            for (long oy = 0; oy < OH; ++oy) {
                long y0 = ay->i0[static_cast<size_t>(oy)], y1 = ay->i1[static_cast<size_t>(oy)];
                double wy0 = ay->w0[static_cast<size_t>(oy)],
                       wy1 = ay->w1[static_cast<size_t>(oy)];
                for (long ox = 0; ox < OW; ++ox) {
                    long x0 = ax->i0[static_cast<size_t>(ox)],
                         x1 = ax->i1[static_cast<size_t>(ox)];
                    double wx0 = ax->w0[static_cast<size_t>(ox)],
                           wx1 = ax->w1[static_cast<size_t>(ox)];
                    T go = src[oy * OW + ox];
                    dst[y0 * W2 + x0] += static_cast<T>(wy0 * wx0) * go;
                    dst[y0 * W2 + x1] += static_cast<T>(wy0 * wx1) * go;
                    dst[y1 * W2 + x0] += static_cast<T>(wy1 * wx0) * go;
                    dst[y1 * W2 + x1] += static_cast<T>(wy1 * wx1) * go;
                }
            }
        }
    });
    return o;
}

// ---------------------------------------------------------------------------
// Loss primitives (each returns a scalar slot)
// ---------------------------------------------------------------------------

/// Mean of -log softmax(logits)[label] over rows whose label != -1.
/// All rows ignored -> 0 loss with zero gradient.
template <typename T>
int softmax_cross_entropy(Tape<T>& t, int logits, std::vector<int> labels) {
    const auto& vl = t.val(logits);
    if (vl.rank() != 2 || vl.dim(0) != static_cast<long>(labels.size()))
        throw std::invalid_argument("softmax_cross_entropy: shape/label mismatch");
    long N = vl.dim(0), K = vl.dim(1);
    for (int lb : labels)
        if (lb < -1 || lb >= K)
            throw std::invalid_argument("softmax_cross_entropy: label out of range");
    long valid = 0;
    double loss = 0;
    for (long n = 0; n < N; ++n) {
        if (labels[static_cast<size_t>(n)] < 0) continue;
        ++valid;
        const T* row = &vl.data[static_cast<size_t>(n * K)];
        double mx = row[0];
        for (long k = 1; k < K; ++k) mx = std::max<double>(mx, row[k]);
        double lse = 0;
        for (long k = 0; k < K; ++k) lse += std::exp(static_cast<double>(row[k]) - mx);
        lse = std::log(lse) + mx;
        loss += lse - static_cast<double>(row[labels[static_cast<size_t>(n)]]);
    }
    T out = valid > 0 ? static_cast<T>(loss / static_cast<double>(valid)) : T(0);
    int o = t.push(Tensor<T>::scalar(out));
    t.record("softmax_cross_entropy", o, [logits, o, labels = std::move(labels), valid](Tape<T>& tp) {
        if (valid == 0) return;
        T go = tp.grad(o)[0];
        const auto& vl2 = tp.val(logits);
        auto& gl = tp.grad(logits);
        long N2 = vl2.dim(0), K2 = vl2.dim(1);
        T inv = go / static_cast<T>(valid);
        for (long n = 0; n < N2; ++n) {
            int lb = labels[static_cast<size_t>(n)];
            if (lb < 0) continue;
            const T* row = &vl2.data[static_cast<size_t>(n * K2)];
            double mx = row[0];
            for (long k = 1; k < K2; ++k) mx = std::max<double>(mx, row[k]);
            double denom = 0;
            for (long k = 0; k < K2; ++k) denom += std::exp(static_cast<double>(row[k]) - mx);
            for (long k = 0; k < K2; ++k) {
                double p = std::exp(static_cast<double>(row[k]) - mx) / denom;
                gl.at2(n, k) += inv * static_cast<T>(p - (k == lb ? 1.0 : 0.0));
            }
        }
    });
    return o;
}

/// Huber-style box regression loss, mean over all elements; empty input -> 0.
template <typename T>
int smooth_l1(Tape<T>& t, int pred, int target, double beta = 1.0) {
    const auto& vp = t.val(pred);
    const auto& vt = t.val(target);
    if (!vp.same_shape(vt)) throw std::invalid_argument("smooth_l1: shape mismatch");
    long n = vp.numel();
    double loss = 0;
    for (long i = 0; i < n; ++i) {
        double d = static_cast<double>(vp[i]) - static_cast<double>(vt[i]);
        double a = std::abs(d);
        loss += a < beta ? 0.5 * d * d / beta : a - 0.5 * beta;
    }
    int o = t.push(Tensor<T>::scalar(n > 0 ? static_cast<T>(loss / n) : T(0)));
    t.record("smooth_l1", o, [pred, target, beta, o, n](Tape<T>& tp) {
        if (n == 0) return;
        T go = tp.grad(o)[0];
        const auto& vp2 = tp.val(pred);
        const auto& vt2 = tp.val(target);
        auto& gp = tp.grad(pred);
        auto& gt = tp.grad(target);
        T inv = go / static_cast<T>(n);
        for (long i = 0; i < n; ++i) {
            double d = static_cast<double>(vp2[i]) - static_cast<double>(vt2[i]);
            double gd = std::abs(d) < beta ? d / beta : (d > 0 ? 1.0 : -1.0);
            gp[i] += inv * static_cast<T>(gd);
            gt[i] -= inv * static_cast<T>(gd);
        }
    });
    return o;
}

/// Per-element binary cross entropy on logits in the stable log-sum form,
/// mean over elements; targets in [0,1]. Empty input -> 0.
template <typename T>
int sigmoid_bce(Tape<T>& t, int logits, int targets) {
    const auto& vz = t.val(logits);
    const auto& vt = t.val(targets);
    if (!vz.same_shape(vt)) throw std::invalid_argument("sigmoid_bce: shape mismatch");
    long n = vz.numel();
    double loss = 0;
    for (long i = 0; i < n; ++i) {
        double z = vz[i], y = vt[i];
        loss += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    }
    int o = t.push(Tensor<T>::scalar(n > 0 ? static_cast<T>(loss / n) : T(0)));
    t.record("sigmoid_bce", o, [logits, targets, o, n](Tape<T>& tp) {
        if (n == 0) return;
        T go = tp.grad(o)[0];
        const auto& vz2 = tp.val(logits);
        const auto& vt2 = tp.val(targets);
        auto& gz = tp.grad(logits);
        auto& gt = tp.grad(targets);
        T inv = go / static_cast<T>(n);
        for (long i = 0; i < n; ++i) {
            double z = vz2[i];
            double s = 1.0 / (1.0 + std::exp(-z));
            gz[i] += inv * static_cast<T>(s - static_cast<double>(vt2[i]));
            gt[i] -= inv * static_cast<T>(z);
        }
    });
    return o;
}

// ---------------------------------------------------------------------------
// Parameters and the optimizer
// ---------------------------------------------------------------------------

/// Which training stage unfreezes a parameter: heads first, then the upper
/// backbone stages, then everything.
enum class Stage { head, upper, lower };

inline const char* stage_name(Stage s) {
    switch (s) {
        case Stage::head: return "head";
        case Stage::upper: return "upper";
        default: return "lower";
    }
}

template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    Tensor<T> momentum_buf;
    Stage tag = Stage::head;
    bool trainable = true;

    Parameter() = default;
    Parameter(std::string n, Tensor<T> v, Stage s)
        : name(std::move(n)),
          value(std::move(v)),
          grad(Tensor<T>::zeros(value.shape)),
          momentum_buf(Tensor<T>::zeros(value.shape)),
          tag(s) {}

    void zero_grad() {
        for (auto& g : grad.data) g = T(0);
    }
};

/// One SGD-with-momentum update over the given parameters: global-norm
/// gradient clipping, then L2 decay folded into the gradient, then
/// buf <- momentum*buf + grad and value <- value - lr*buf.
/// Parameters with trainable=false are left untouched entirely.
template <typename T>
void sgd_momentum_step(const std::vector<Parameter<T>*>& params, double lr, double momentum,
                       double weight_decay, double clip_norm) {
    double sq = 0;
    for (auto* p : params) {
        if (!p->trainable) continue;
        for (const T& g : p->grad.data) {
            if (!std::isfinite(static_cast<double>(g)))
                throw NumericError("sgd_momentum_step: non-finite gradient in " + p->name);
            sq += static_cast<double>(g) * static_cast<double>(g);
        }
    }
    double norm = std::sqrt(sq);
    double scale = (clip_norm > 0 && norm > clip_norm) ? clip_norm / norm : 1.0;
    for (auto* p : params) {
        if (!p->trainable) continue;
        for (long i = 0; i < p->value.numel(); ++i) {
            T g = static_cast<T>(scale) * p->grad[i] +
                  static_cast<T>(weight_decay) * p->value[i];
            p->momentum_buf[i] = static_cast<T>(momentum) * p->momentum_buf[i] + g;
            p->value[i] -= static_cast<T>(lr) * p->momentum_buf[i];
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoint container: named tensors with shapes, versioned binary file.
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'N', 'U', 'C', 'K', 'P', 'T', '0', '1'};

template <typename T>
void save_checkpoint(const std::string& path,
                     const std::map<std::string, const Tensor<T>*>& tensors) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("save_checkpoint: cannot open " + path);
    f.write(kCheckpointMagic, 8);
    std::uint64_t count = tensors.size();
    f.write(reinterpret_cast<const char*>(&count), 8);
    for (const auto& [name, t] : tensors) {
        std::uint32_t nl = static_cast<std::uint32_t>(name.size());
        f.write(reinterpret_cast<const char*>(&nl), 4);
        f.write(name.data(), nl);
        std::uint32_t rank = static_cast<std::uint32_t>(t->shape.size());
        f.write(reinterpret_cast<const char*>(&rank), 4);
        for (long d : t->shape) {
            std::uint64_t dd = static_cast<std::uint64_t>(d);
            f.write(reinterpret_cast<const char*>(&dd), 8);
        }
        for (const T& v : t->data) {
            double dv = static_cast<double>(v);
            f.write(reinterpret_cast<const char*>(&dv), 8);
        }
    }
    if (!f) throw DataError("save_checkpoint: write failed for " + path);
}

inline std::map<std::string, Tensor<double>> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("load_checkpoint: cannot open " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw DataError("load_checkpoint: bad magic in " + path);
    std::uint64_t count = 0;
    f.read(reinterpret_cast<char*>(&count), 8);
    std::map<std::string, Tensor<double>> out;
    for (std::uint64_t i = 0; i < count; ++i) {
        std::uint32_t nl = 0;
        f.read(reinterpret_cast<char*>(&nl), 4);
        std::string name(nl, '\0');
        f.read(name.data(), nl);
        std::uint32_t rank = 0;
        f.read(reinterpret_cast<char*>(&rank), 4);
        std::vector<long> shape(rank);
        for (auto& d : shape) {
            std::uint64_t dd = 0;
            f.read(reinterpret_cast<char*>(&dd), 8);
            d = static_cast<long>(dd);
        }
        Tensor<double> t(shape);
        f.read(reinterpret_cast<char*>(t.data.data()),
               static_cast<std::streamsize>(t.data.size() * 8));
        if (!f) throw DataError("load_checkpoint: truncated file " + path);
        out.emplace(std::move(name), std::move(t));
    }
    return out;
}

}  // namespace nucleo
