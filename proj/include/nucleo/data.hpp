#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include "nucleo/autodiff.hpp"
#include "nucleo/geometry.hpp"
#include "nucleo/image.hpp"
#include "nucleo/maskops.hpp"
#include "nucleo/tensor.hpp"

namespace nucleo {

namespace fs = std::filesystem;

/// One dataset entry: raw 0-255 image and one mask per nucleus.
struct Sample {
    std::string id;
    Tensor<float> image;  // [3,H,W]
    std::vector<Mask> instances;

    int height() const { return static_cast<int>(image.dim(1)); }
    int width() const { return static_cast<int>(image.dim(2)); }
};

struct AugmentConfig {
    bool enabled = true;
    int crop_h = 256;
    int crop_w = 256;
    double rot_max_deg = 15.0;  // angle drawn uniformly from [-max, max]
    double blur_sigma_min = 0.0;
    double blur_sigma_max = 1.5;
    double flip_h_prob = 0.5;
    double flip_v_prob = 0.5;
    int min_instance_area = 4;  // instances smaller than this after transform are dropped
};

struct DatasetSplit {
    std::vector<std::string> train_ids, val_ids, test_ids;
    std::uint64_t seed = 0;
};

// -- loading -----------------------------------------------------------------

/// Sample directory layout: <root>/<id>/images/<id>.png plus
/// <root>/<id>/masks/*.png, one mask file per nucleus.
inline Sample load_sample(const fs::path& dir) {
    Sample s;
    s.id = dir.filename().string();
    fs::path image_path = dir / "images" / (s.id + ".png");
    if (!fs::exists(image_path))
        throw DataError("load_sample: missing image " + image_path.string());
    ImageU8 img = read_png(image_path.string());
    s.image = image_to_tensor(img);

    fs::path mask_dir = dir / "masks";
    std::vector<fs::path> mask_files;
    if (fs::exists(mask_dir))
        for (const auto& e : fs::directory_iterator(mask_dir))
            if (e.path().extension() == ".png") mask_files.push_back(e.path());
    std::sort(mask_files.begin(), mask_files.end());
    for (const auto& mp : mask_files) {
        ImageU8 mimg = read_png(mp.string());
        if (mimg.height != img.height || mimg.width != img.width)
            throw DataError("load_sample: mask dimension mismatch in " + mp.string());
        Mask m = mask_from_image(mimg);
        if (m.empty_mask()) continue;  // empty annotation file carries no instance
        s.instances.push_back(std::move(m));
    }
    if (s.instances.empty())
        std::cerr << "warning: sample " << s.id << " has no masks\n";
    return s;
}

/// Sample ids found under root, sorted for determinism.
inline std::vector<std::string> discover_dataset(const fs::path& root) {
    if (!fs::exists(root)) throw DataError("discover_dataset: no such directory " + root.string());
    std::vector<std::string> ids;
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory() && fs::exists(e.path() / "images")) ids.push_back(e.path().filename().string());
    std::sort(ids.begin(), ids.end());
    return ids;
}

/// Global per-channel means over the given (training) ids, raw 0-255 scale.
inline std::array<double, 3> compute_channel_means(const fs::path& root,
                                                   const std::vector<std::string>& ids) {
    std::array<double, 3> sum = {0, 0, 0};
    double count = 0;
    for (const auto& id : ids) {
        Sample s = load_sample(root / id);
        long hw = static_cast<long>(s.height()) * s.width();
        for (int c = 0; c < 3; ++c) {
            const float* p = &s.image.data[static_cast<size_t>(c) * hw];
            double acc = 0;
            for (long i = 0; i < hw; ++i) acc += p[i];
            sum[static_cast<size_t>(c)] += acc;
        }
        count += static_cast<double>(hw);
    }
    if (count == 0) throw DataError("compute_channel_means: empty id list");
    return {sum[0] / count, sum[1] / count, sum[2] / count};
}

// -- resampling helpers ------------------------------------------------------

/// Plain bilinear resize of a [C,H,W] tensor (align_corners=false, half-pixel
/// centers, clamped edges); same convention as the differentiable op.
inline Tensor<float> resize_bilinear_chw(const Tensor<float>& in, long out_h, long out_w) {
    long C = in.dim(0), H = in.dim(1), W = in.dim(2);
    auto ay = kernels::make_resample_axis(H, out_h);
    auto ax = kernels::make_resample_axis(W, out_w);
    Tensor<float> out({C, out_h, out_w});
    for (long c = 0; c < C; ++c) {
        const float* src = &in.data[static_cast<size_t>(c * H * W)];
        float* dst = &out.data[static_cast<size_t>(c * out_h * out_w)];
        for (long y = 0; y < out_h; ++y)
            for (long x = 0; x < out_w; ++x) {
                double v = ay.w0[static_cast<size_t>(y)] *
                               (ax.w0[static_cast<size_t>(x)] * src[ay.i0[static_cast<size_t>(y)] * W + ax.i0[static_cast<size_t>(x)]] +
                                ax.w1[static_cast<size_t>(x)] * src[ay.i0[static_cast<size_t>(y)] * W + ax.i1[static_cast<size_t>(x)]]) +
                           ay.w1[static_cast<size_t>(y)] *
                               (ax.w0[static_cast<size_t>(x)] * src[ay.i1[static_cast<size_t>(y)] * W + ax.i0[static_cast<size_t>(x)]] +
                                ax.w1[static_cast<size_t>(x)] * src[ay.i1[static_cast<size_t>(y)] * W + ax.i1[static_cast<size_t>(x)]]);
                dst[y * out_w + x] = static_cast<float>(v);
            }
    }
    return out;
}

/// Exact 2x nearest-neighbour mask upsample (each pixel becomes a 2x2 block).
inline Mask upsample_mask_2x(const Mask& m) {
    Mask out(m.height * 2, m.width * 2);
    for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x) out.set(y, x, m.at(y / 2, x / 2));
    return out;
}

inline long pad_to_multiple(long v, long m) { return ((v + m - 1) / m) * m; }

// -- preprocessing -----------------------------------------------------------

/// 2x bilinear upsample, per-channel mean subtraction, nearest 2x mask
/// upsample, then zero padding of both to a multiple of 32.
inline Sample preprocess(const Sample& s, const std::array<double, 3>& channel_means) {
    Sample out;
    out.id = s.id;
    long H2 = 2L * s.height(), W2 = 2L * s.width();
    Tensor<float> up = resize_bilinear_chw(s.image, H2, W2);
    for (int c = 0; c < 3; ++c) {
        float* p = &up.data[static_cast<size_t>(c) * H2 * W2];
        float mean = static_cast<float>(channel_means[static_cast<size_t>(c)]);
        for (long i = 0; i < H2 * W2; ++i) p[i] -= mean;
    }
    long PH = pad_to_multiple(H2, 32), PW = pad_to_multiple(W2, 32);
    out.image = Tensor<float>({3, PH, PW});
    for (long c = 0; c < 3; ++c)
        for (long y = 0; y < H2; ++y)
            for (long x = 0; x < W2; ++x)
                out.image[(c * PH + y) * PW + x] = up[(c * H2 + y) * W2 + x];
    for (const auto& m : s.instances) {
        Mask m2 = upsample_mask_2x(m);
        Mask padded(static_cast<int>(PH), static_cast<int>(PW));
        for (int y = 0; y < m2.height; ++y)
            for (int x = 0; x < m2.width; ++x) padded.set(y, x, m2.at(y, x));
        out.instances.push_back(std::move(padded));
    }
    return out;
}

// -- augmentation primitives --------------------------------------------------

inline void flip_h(Sample& s) {
    long C = s.image.dim(0), H = s.image.dim(1), W = s.image.dim(2);
    for (long c = 0; c < C; ++c)
        for (long y = 0; y < H; ++y)
            for (long x = 0; x < W / 2; ++x)
                std::swap(s.image[(c * H + y) * W + x], s.image[(c * H + y) * W + (W - 1 - x)]);
    for (auto& m : s.instances)
        for (int y = 0; y < m.height; ++y)
            for (int x = 0; x < m.width / 2; ++x) {
                auto tmp = m.at(y, x);
                m.set(y, x, m.at(y, m.width - 1 - x));
                m.set(y, m.width - 1 - x, tmp);
            }
}

inline void flip_v(Sample& s) {
    long C = s.image.dim(0), H = s.image.dim(1), W = s.image.dim(2);
    for (long c = 0; c < C; ++c)
        for (long y = 0; y < H / 2; ++y)
            for (long x = 0; x < W; ++x)
                std::swap(s.image[(c * H + y) * W + x], s.image[(c * H + (H - 1 - y)) * W + x]);
    for (auto& m : s.instances)
        for (int y = 0; y < m.height / 2; ++y)
            for (int x = 0; x < m.width; ++x) {
                auto tmp = m.at(y, x);
                m.set(y, x, m.at(m.height - 1 - y, x));
                m.set(m.height - 1 - y, x, tmp);
            }
}

/// Crop to crop_h x crop_w at the given top-left corner, padding with zeros
/// first when the source is smaller.
inline Sample crop(const Sample& s, int top, int left, int crop_h, int crop_w) {
    Sample out;
    out.id = s.id;
    long H = s.image.dim(1), W = s.image.dim(2);
    out.image = Tensor<float>({3, crop_h, crop_w});
    for (long c = 0; c < 3; ++c)
        for (long y = 0; y < crop_h; ++y)
            for (long x = 0; x < crop_w; ++x) {
                long sy = top + y, sx = left + x;
                out.image[(c * crop_h + y) * crop_w + x] =
                    (sy >= 0 && sy < H && sx >= 0 && sx < W)
                        ? s.image[(c * H + sy) * W + sx]
                        : 0.0f;
            }
    for (const auto& m : s.instances) {
        Mask mc(crop_h, crop_w);
        for (int y = 0; y < crop_h; ++y)
            for (int x = 0; x < crop_w; ++x) {
                int sy = top + y, sx = left + x;
                if (sy >= 0 && sy < m.height && sx >= 0 && sx < m.width) mc.set(y, x, m.at(sy, sx));
            }
        out.instances.push_back(std::move(mc));
    }
    return out;
}

/// Rotation about the image center: bilinear for the image (zero fill, which
/// is the channel mean after normalization), nearest for masks.
inline Sample rotate(const Sample& s, double degrees) {
    double rad = degrees * M_PI / 180.0;
    double ca = std::cos(rad), sa = std::sin(rad);
    long C = s.image.dim(0), H = s.image.dim(1), W = s.image.dim(2);
    double cy = H / 2.0, cx = W / 2.0;
    Sample out;
    out.id = s.id;
    out.image = Tensor<float>({C, H, W});
    for (long y = 0; y < H; ++y)
        for (long x = 0; x < W; ++x) {
            // inverse map of a rotation by `degrees` around the center
            double dx = (x + 0.5) - cx, dy = (y + 0.5) - cy;
            double sxf = ca * dx + sa * dy + cx - 0.5;
            double syf = -sa * dx + ca * dy + cy - 0.5;
            long x0 = static_cast<long>(std::floor(sxf)), y0 = static_cast<long>(std::floor(syf));
            double fx = sxf - x0, fy = syf - y0;
            for (long c = 0; c < C; ++c) {
                auto px = [&](long yy, long xx) -> double {
                    if (yy < 0 || xx < 0 || yy >= H || xx >= W) return 0.0;
                    return s.image[(c * H + yy) * W + xx];
                };
                double v = (1 - fy) * ((1 - fx) * px(y0, x0) + fx * px(y0, x0 + 1)) +
                           fy * ((1 - fx) * px(y0 + 1, x0) + fx * px(y0 + 1, x0 + 1));
                out.image[(c * H + y) * W + x] = static_cast<float>(v);
            }
        }
    for (const auto& m : s.instances) {
        Mask mr(static_cast<int>(H), static_cast<int>(W));
        for (long y = 0; y < H; ++y)
            for (long x = 0; x < W; ++x) {
                double dx = (x + 0.5) - cx, dy = (y + 0.5) - cy;
                long sx = static_cast<long>(std::floor(ca * dx + sa * dy + cx));
                long sy = static_cast<long>(std::floor(-sa * dx + ca * dy + cy));
                if (sx >= 0 && sy >= 0 && sx < W && sy < H)
                    mr.set(static_cast<int>(y), static_cast<int>(x),
                           m.at(static_cast<int>(sy), static_cast<int>(sx)));
            }
        out.instances.push_back(std::move(mr));
    }
    return out;
}

/// Separable gaussian blur of the image only; sigma < 0.01 is a no-op.
inline void gaussian_blur(Sample& s, double sigma) {
    if (sigma < 0.01) return;
    int radius = static_cast<int>(std::ceil(3 * sigma));
    std::vector<double> k(static_cast<size_t>(2 * radius + 1));
    double sum = 0;
    for (int i = -radius; i <= radius; ++i) {
        k[static_cast<size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
        sum += k[static_cast<size_t>(i + radius)];
    }
    for (auto& v : k) v /= sum;
    long C = s.image.dim(0), H = s.image.dim(1), W = s.image.dim(2);
    Tensor<float> tmp({C, H, W});
    for (long c = 0; c < C; ++c)
        for (long y = 0; y < H; ++y)
            for (long x = 0; x < W; ++x) {
                double acc = 0;
                for (int i = -radius; i <= radius; ++i) {
                    long xx = std::clamp(x + i, 0L, W - 1);
                    acc += k[static_cast<size_t>(i + radius)] * s.image[(c * H + y) * W + xx];
                }
                tmp[(c * H + y) * W + x] = static_cast<float>(acc);
            }
    for (long c = 0; c < C; ++c)
        for (long y = 0; y < H; ++y)
            for (long x = 0; x < W; ++x) {
                double acc = 0;
                for (int i = -radius; i <= radius; ++i) {
                    long yy = std::clamp(y + i, 0L, H - 1);
                    acc += k[static_cast<size_t>(i + radius)] * tmp[(c * H + yy) * W + x];
                }
                s.image[(c * H + y) * W + x] = static_cast<float>(acc);
            }
}

/// Crop -> rotate -> blur -> flips, with the identical geometric transform
/// applied to the image and every instance mask. Instances that end up
/// smaller than min_instance_area pixels are dropped.
inline Sample augment(const Sample& s, const AugmentConfig& cfg, std::mt19937_64& rng) {
    long H = s.image.dim(1), W = s.image.dim(2);
    int top = 0, left = 0;
    long slack_h = std::max(0L, H - cfg.crop_h), slack_w = std::max(0L, W - cfg.crop_w);
    if (slack_h > 0) top = static_cast<int>(std::uniform_int_distribution<long>(0, slack_h)(rng));
    if (slack_w > 0) left = static_cast<int>(std::uniform_int_distribution<long>(0, slack_w)(rng));
    Sample out = crop(s, top, left, cfg.crop_h, cfg.crop_w);

    if (cfg.rot_max_deg > 0) {
        double angle = std::uniform_real_distribution<double>(-cfg.rot_max_deg, cfg.rot_max_deg)(rng);
        out = rotate(out, angle);
    }
    if (cfg.blur_sigma_max > 0) {
        double sigma =
            std::uniform_real_distribution<double>(cfg.blur_sigma_min, cfg.blur_sigma_max)(rng);
        gaussian_blur(out, sigma);
    }
    if (std::uniform_real_distribution<double>(0, 1)(rng) < cfg.flip_h_prob) flip_h(out);
    if (std::uniform_real_distribution<double>(0, 1)(rng) < cfg.flip_v_prob) flip_v(out);

    std::vector<Mask> kept;
    for (auto& m : out.instances)
        if (m.count() >= cfg.min_instance_area) kept.push_back(std::move(m));
    out.instances = std::move(kept);
    return out;
}

// -- splits --------------------------------------------------------------------

/// Deterministic shuffle by seed; the first test_count ids are held out, the
/// rest split into train/val by val_fraction.
inline DatasetSplit split_dataset(std::vector<std::string> ids, std::uint64_t seed,
                                  int test_count = 65, double val_fraction = 0.1) {
    if (static_cast<int>(ids.size()) < test_count)
        throw DataError("split_dataset: fewer ids than the requested test count");
    std::sort(ids.begin(), ids.end());
    std::mt19937_64 rng(seed);
    std::shuffle(ids.begin(), ids.end(), rng);
    DatasetSplit sp;
    sp.seed = seed;
    sp.test_ids.assign(ids.begin(), ids.begin() + test_count);
    std::vector<std::string> rest(ids.begin() + test_count, ids.end());
    size_t val_n = static_cast<size_t>(std::floor(static_cast<double>(rest.size()) * val_fraction));
    sp.val_ids.assign(rest.begin(), rest.begin() + static_cast<long>(val_n));
    sp.train_ids.assign(rest.begin() + static_cast<long>(val_n), rest.end());
    return sp;
}

/// Per-sample augmentation stream: reproducible from (seed, sample id, epoch).
inline std::mt19937_64 sample_rng(std::uint64_t seed, const std::string& id, int epoch) {
    std::uint64_t h = 1469598103934665603ull;  // FNV-1a
    for (char c : id) {
        h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
        h *= 1099511628211ull;
    }
    return std::mt19937_64(seed ^ h ^ (static_cast<std::uint64_t>(epoch) * 0x9e3779b97f4a7c15ull));
}

// -- synthetic fixture ---------------------------------------------------------

struct SynthConfig {
    int image_size = 96;
    int min_nuclei = 3;
    int max_nuclei = 6;
    double min_radius = 8.0;
    double max_radius = 16.0;
};

/// Writes n synthetic nucleus images (bright ellipses on a noisy background)
/// in the dataset directory layout, with one exact mask file per nucleus.
inline void make_synthetic_dataset(const fs::path& root, int n, std::uint64_t seed,
                                   const SynthConfig& cfg = {}) {
    if (n < 1) throw std::invalid_argument("make_synthetic_dataset: n must be >= 1");
    fs::create_directories(root);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, 8.0);
    int S = cfg.image_size;
    for (int i = 0; i < n; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "synth_%04d", i);
        std::string id(name);
        double bg = std::uniform_real_distribution<double>(20, 60)(rng);
        int count = std::uniform_int_distribution<int>(cfg.min_nuclei, cfg.max_nuclei)(rng);
        std::vector<Mask> masks;
        std::vector<double> intensity;
        Mask occupied(S, S);
        for (int k = 0; k < count; ++k) {
            for (int attempt = 0; attempt < 30; ++attempt) {
                double cx = std::uniform_real_distribution<double>(0.2 * S, 0.8 * S)(rng);
                double cy = std::uniform_real_distribution<double>(0.2 * S, 0.8 * S)(rng);
                double rx = std::uniform_real_distribution<double>(cfg.min_radius, cfg.max_radius)(rng);
                double ry = std::uniform_real_distribution<double>(cfg.min_radius, cfg.max_radius)(rng);
                double phi = std::uniform_real_distribution<double>(0, M_PI)(rng);
                Mask m(S, S);
                long overlap = 0;
                for (int y = 0; y < S; ++y)
                    for (int x = 0; x < S; ++x) {
                        double dx = (x + 0.5) - cx, dy = (y + 0.5) - cy;
                        double u = std::cos(phi) * dx + std::sin(phi) * dy;
                        double v = -std::sin(phi) * dx + std::cos(phi) * dy;
                        if ((u * u) / (rx * rx) + (v * v) / (ry * ry) <= 1.0) {
                            m.set(y, x, 1);
                            overlap += occupied.at(y, x);
                        }
                    }
                if (m.count() == 0) continue;
                if (static_cast<double>(overlap) / static_cast<double>(m.count()) > 0.05) continue;
                for (size_t p = 0; p < m.bits.size(); ++p) occupied.bits[p] |= m.bits[p];
                masks.push_back(std::move(m));
                intensity.push_back(std::uniform_real_distribution<double>(150, 220)(rng));
                break;
            }
        }
        ImageU8 img;
        img.height = S;
        img.width = S;
        img.rgb.assign(static_cast<size_t>(S) * S * 3, 0);
        for (int y = 0; y < S; ++y)
            for (int x = 0; x < S; ++x) {
                double base = bg;
                for (size_t k = 0; k < masks.size(); ++k)
                    if (masks[k].at(y, x)) base = intensity[k];
                double v = std::clamp(base + noise(rng), 0.0, 255.0);
                auto b = static_cast<std::uint8_t>(v);
                for (int c = 0; c < 3; ++c) img.set(y, x, c, b);
            }
        fs::create_directories(root / id / "images");
        fs::create_directories(root / id / "masks");
        write_png((root / id / "images" / (id + ".png")).string(), img);
        for (size_t k = 0; k < masks.size(); ++k)
            write_png_gray((root / id / "masks" / (std::to_string(k) + ".png")).string(), S, S,
                           mask_to_gray(masks[k]));
    }
}

/// Tight bounding box of a mask in continuous coordinates; empty mask -> zero box.
inline Box mask_bbox(const Mask& m) {
    int x1 = m.width, y1 = m.height, x2 = -1, y2 = -1;
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x)
            if (m.at(y, x)) {
                x1 = std::min(x1, x);
                y1 = std::min(y1, y);
                x2 = std::max(x2, x);
                y2 = std::max(y2, y);
            }
    if (x2 < 0) return Box();
    return Box(x1, y1, x2 + 1, y2 + 1);
}

}  // namespace nucleo
