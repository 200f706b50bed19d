#pragma once

#include <array>
#include <cmath>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "nucleo/autodiff.hpp"
#include "nucleo/geometry.hpp"
#include "nucleo/maskops.hpp"
#include "nucleo/roi_align.hpp"
#include "nucleo/targets.hpp"
#include "nucleo/tensor.hpp"

namespace nucleo {

struct ModelConfig {
    // Micro-backbone stage widths: stem plus the four feature stages C2..C5
    // at strides {4,8,16,32}.
    int stem_width = 16;
    std::array<int, 4> stage_widths = {16, 32, 64, 128};
    int fpn_channels = 32;
    int mask_channels = 16;
    int head_hidden = 128;
    int num_classes = 2;  // background, nucleus
    int cls_pool = 7;
    int mask_pool = 14;
    int mask_size = 28;
    int roi_samples = 2;       // sample grid per roi-align bin
    double input_scale = 1.0 / 128.0;  // mean-subtracted 0-255 pixels -> unit range
    AnchorSpec anchors;
};

struct DetectConfig {
    double score_threshold = 0.7;
    double nms_iou = 0.3;
    int max_detections = 400;
    double mask_threshold = 0.5;
    ProposalConfig proposals;
};

struct Detection {
    Box box;
    double score = 0;
    Mask mask;
};

/// Detection plus the raw mask-head grid, for pasting at a different scale.
struct RawDetection {
    Box box;
    double score = 0;
    std::vector<double> mask_logits;  // mask_size^2
};

struct LossBreakdown {
    double l_cls = 0, l_bbox = 0, l_mask = 0, total = 0;
};

template <typename T>
class MaskRcnn {
public:
    using Bound = std::map<std::string, int>;

    struct RpnOut {
        int logits = -1;  // [N*A, 1], per-image-major, generate_anchors order
        int deltas = -1;  // [N*A, 4]
        long anchors_per_image = 0;
    };
    struct HeadOut {
        int cls_logits = -1;   // [R, num_classes]
        int box_deltas = -1;   // [R, 4]
        int mask_logits = -1;  // [M, 1, mask_size, mask_size]
    };

    explicit MaskRcnn(const ModelConfig& cfg = {}, std::uint64_t seed = 1)
        : cfg_(cfg) {
        std::mt19937_64 rng(seed);
        int K = anchors_per_cell();
        // Downsampling convs use 4x4 stride 2 pad 1 so the output size stays
        // integral on even inputs; c4/c5 downsample by max pooling instead.
        add_conv("backbone.stem", 3, cfg.stem_width, 4, Stage::lower, rng);
        add_conv("backbone.c2", cfg.stem_width, cfg.stage_widths[0], 4, Stage::lower, rng);
        add_conv("backbone.c3", cfg.stage_widths[0], cfg.stage_widths[1], 4, Stage::lower, rng);
        add_conv("backbone.c4", cfg.stage_widths[1], cfg.stage_widths[2], 3, Stage::upper, rng);
        add_conv("backbone.c5", cfg.stage_widths[2], cfg.stage_widths[3], 3, Stage::upper, rng);
        for (int l = 0; l < 4; ++l) {
            std::string n = std::to_string(l + 2);
            add_conv("fpn.lat" + n, cfg.stage_widths[static_cast<size_t>(l)], cfg.fpn_channels, 1,
                     Stage::head, rng);
            add_conv("fpn.smooth" + n, cfg.fpn_channels, cfg.fpn_channels, 3, Stage::head, rng);
        }
        add_conv("rpn.conv", cfg.fpn_channels, cfg.fpn_channels, 3, Stage::head, rng);
        add_conv("rpn.logit", cfg.fpn_channels, K, 1, Stage::head, rng);
        add_conv("rpn.delta", cfg.fpn_channels, 4 * K, 1, Stage::head, rng);
        long fc_in = static_cast<long>(cfg.fpn_channels) * cfg.cls_pool * cfg.cls_pool;
        add_linear("head.fc1", fc_in, cfg.head_hidden, rng);
        add_linear("head.fc2", cfg.head_hidden, cfg.head_hidden, rng);
        add_linear("head.cls", cfg.head_hidden, cfg.num_classes, rng);
        add_linear("head.box", cfg.head_hidden, 4, rng);
        add_conv("mask.conv1", cfg.fpn_channels, cfg.mask_channels, 3, Stage::head, rng);
        add_conv("mask.conv2", cfg.mask_channels, cfg.mask_channels, 3, Stage::head, rng);
        add_conv("mask.conv3", cfg.mask_channels, cfg.mask_channels, 3, Stage::head, rng);
        add_conv("mask.conv4", cfg.mask_channels, cfg.mask_channels, 3, Stage::head, rng);
        add_deconv("mask.deconv", cfg.mask_channels, cfg.mask_channels, 2, rng);
        add_conv("mask.out", cfg.mask_channels, 1, 1, Stage::head, rng);
    }

    const ModelConfig& config() const { return cfg_; }

    int anchors_per_cell() const {
        int K = cfg_.anchors.anchors_per_cell(0);
        for (int l = 1; l < cfg_.anchors.levels(); ++l)
            if (cfg_.anchors.anchors_per_cell(l) != K)
                throw std::invalid_argument("MaskRcnn: anchors per cell must match across levels");
        return K;
    }

    Parameter<T>& param(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw std::invalid_argument("unknown parameter " + name);
        return it->second;
    }

    std::vector<Parameter<T>*> parameters() {
        std::vector<Parameter<T>*> out;
        for (auto& [k, p] : params_) out.push_back(&p);
        return out;
    }

    /// Parameters unfrozen in training stage 1, 2 or 3: heads only, heads +
    /// upper backbone, everything.
    std::vector<Parameter<T>*> stage_params(int stage) {
        std::vector<Parameter<T>*> out;
        for (auto& [k, p] : params_) {
            bool active = p.tag == Stage::head || (stage >= 2 && p.tag == Stage::upper) ||
                          (stage >= 3 && p.tag == Stage::lower);
            if (active) out.push_back(&p);
        }
        return out;
    }

    long parameter_count() const {
        long n = 0;
        for (const auto& [k, p] : params_) n += p.value.numel();
        return n;
    }

    void zero_grads() {
        for (auto& [k, p] : params_) p.zero_grad();
    }

    /// Pushes every parameter value onto the tape as a leaf slot.
    Bound bind(Tape<T>& t) {
        Bound b;
        for (auto& [k, p] : params_) b[k] = t.push(p.value);
        return b;
    }

    /// Accumulates tape gradients back into the parameters.
    void collect_grads(Tape<T>& t, const Bound& b) {
        for (auto& [k, p] : params_) {
            const auto& g = t.grad(b.at(k));
            for (long i = 0; i < g.numel(); ++i) p.grad[i] += g[i];
        }
    }

    // -- forward pieces ------------------------------------------------------

    /// Backbone stages C2..C5 at strides {4,8,16,32}. H and W must be
    /// divisible by 32 (the data pipeline pads).
    std::array<int, 4> backbone_forward(Tape<T>& t, const Bound& b, int image) const {
        const auto& v = t.val(image);
        if (v.rank() != 4 || v.dim(1) != 3)
            throw std::invalid_argument("backbone_forward: expected [N,3,H,W]");
        if (v.dim(2) % 32 != 0 || v.dim(3) % 32 != 0)
            throw std::invalid_argument("backbone_forward: H and W must be divisible by 32");
        int scaled = scale(t, image, cfg_.input_scale);
        int stem = relu(t, conv(t, b, "backbone.stem", scaled, 2, 1));
        int c2 = relu(t, conv(t, b, "backbone.c2", stem, 2, 1));
        int c3 = relu(t, conv(t, b, "backbone.c3", c2, 2, 1));
        int c4 = max_pool2d(t, relu(t, conv(t, b, "backbone.c4", c3, 1, 1)));
        int c5 = max_pool2d(t, relu(t, conv(t, b, "backbone.c5", c4, 1, 1)));
        return {c2, c3, c4, c5};
    }

    /// Lateral 1x1 projections, top-down 2x bilinear upsampling with addition,
    /// then a 3x3 smoothing conv per output level.
    std::array<int, 4> build_fpn(Tape<T>& t, const Bound& b, const std::array<int, 4>& stages) const {
        std::array<int, 4> lat{};
        for (int l = 0; l < 4; ++l)
            lat[static_cast<size_t>(l)] =
                conv(t, b, "fpn.lat" + std::to_string(l + 2), stages[static_cast<size_t>(l)], 1, 0);
        std::array<int, 4> merged{};
        merged[3] = lat[3];
        for (int l = 2; l >= 0; --l) {
            const auto& target = t.val(lat[static_cast<size_t>(l)]);
            int up = bilinear_resize(t, merged[static_cast<size_t>(l + 1)], target.dim(2),
                                     target.dim(3));
            merged[static_cast<size_t>(l)] = add(t, lat[static_cast<size_t>(l)], up);
        }
        std::array<int, 4> out{};
        for (int l = 0; l < 4; ++l)
            out[static_cast<size_t>(l)] =
                conv(t, b, "fpn.smooth" + std::to_string(l + 2), merged[static_cast<size_t>(l)], 1, 1);
        return out;
    }

    /// Shared 3x3 conv + sibling 1x1 heads on every level; outputs flattened
    /// per-image-major so image n occupies rows [n*A, (n+1)*A) in exactly the
    /// generate_anchors ordering.
    RpnOut rpn_forward(Tape<T>& t, const Bound& b, const std::array<int, 4>& pyramid) const {
        long K = anchors_per_cell();
        std::vector<int> logit_parts, delta_parts;
        std::vector<long> rows_per_level;
        long N = t.val(pyramid[0]).dim(0);
        for (int l = 0; l < 4; ++l) {
            int h = relu(t, conv(t, b, "rpn.conv", pyramid[static_cast<size_t>(l)], 1, 1));
            int lg = conv(t, b, "rpn.logit", h, 1, 0);
            int dl = conv(t, b, "rpn.delta", h, 1, 0);
            const auto& vl = t.val(lg);
            rows_per_level.push_back(vl.dim(2) * vl.dim(3) * K);
            logit_parts.push_back(flatten_anchor_major(t, lg, 1));
            delta_parts.push_back(flatten_anchor_major(t, dl, 4));
        }
        int logits_cat = concat_rows(t, logit_parts);
        int deltas_cat = concat_rows(t, delta_parts);
        long A = 0;
        for (long r : rows_per_level) A += r;
        // Reorder level-major/image-major -> image-major/level-major.
        std::vector<long> perm;
        perm.reserve(static_cast<size_t>(N * A));
        for (long n = 0; n < N; ++n) {
            long level_off = 0;
            for (size_t l = 0; l < rows_per_level.size(); ++l) {
                for (long j = 0; j < rows_per_level[l]; ++j)
                    perm.push_back(level_off + n * rows_per_level[l] + j);
                level_off += N * rows_per_level[l];
            }
        }
        RpnOut out;
        out.logits = gather_rows(t, logits_cat, perm);
        out.deltas = gather_rows(t, deltas_cat, std::move(perm));
        out.anchors_per_image = A;
        return out;
    }

    /// ROI-Align over the pyramid with size-based level routing. Returns the
    /// pooled tensor (rows grouped by level) and the original roi index for
    /// each pooled row.
    std::pair<int, std::vector<int>> pool_rois(Tape<T>& t, const Bound&,
                                               const std::array<int, 4>& pyramid,
                                               const std::vector<RoiRef>& rois,
                                               int out_size) const {
        if (rois.empty()) {
            int empty = t.push(Tensor<T>({0, cfg_.fpn_channels, out_size, out_size}));
            return {empty, {}};
        }
        std::array<std::vector<RoiRef>, 4> groups;
        std::array<std::vector<int>, 4> group_idx;
        for (size_t i = 0; i < rois.size(); ++i) {
            int lvl = assign_roi_level(rois[i].box);
            groups[static_cast<size_t>(lvl - 2)].push_back(rois[i]);
            group_idx[static_cast<size_t>(lvl - 2)].push_back(static_cast<int>(i));
        }
        std::vector<int> parts;
        std::vector<int> order;
        for (int l = 0; l < 4; ++l) {
            if (groups[static_cast<size_t>(l)].empty()) continue;
            int stride = cfg_.anchors.strides[static_cast<size_t>(l)];
            parts.push_back(roi_align(t, pyramid[static_cast<size_t>(l)],
                                      groups[static_cast<size_t>(l)], stride, out_size,
                                      cfg_.roi_samples));
            for (int i : group_idx[static_cast<size_t>(l)]) order.push_back(i);
        }
        int pooled = parts.size() == 1 ? parts[0] : concat_rows(t, parts);
        return {pooled, order};
    }

    /// Classification branch: two hidden affine layers then sibling class and
    /// box outputs.
    std::pair<int, int> heads_cls_forward(Tape<T>& t, const Bound& b, int pooled_cls) const {
        const auto& v = t.val(pooled_cls);
        int flat = reshape(t, pooled_cls, {v.dim(0), v.dim(1) * v.dim(2) * v.dim(3)});
        int h1 = relu(t, lin(t, b, "head.fc1", flat));
        int h2 = relu(t, lin(t, b, "head.fc2", h1));
        return {lin(t, b, "head.cls", h2), lin(t, b, "head.box", h2)};
    }

    /// Mask branch: four 3x3 convs, a 2x transposed-conv upsample, and a 1x1
    /// output conv. Not conditioned on the classification branch.
    int heads_mask_forward(Tape<T>& t, const Bound& b, int pooled_mask) const {
        int h = relu(t, conv(t, b, "mask.conv1", pooled_mask, 1, 1));
        h = relu(t, conv(t, b, "mask.conv2", h, 1, 1));
        h = relu(t, conv(t, b, "mask.conv3", h, 1, 1));
        h = relu(t, conv(t, b, "mask.conv4", h, 1, 1));
        h = relu(t, deconv(t, b, "mask.deconv", h, 2));
        return conv(t, b, "mask.out", h, 1, 0);
    }

    HeadOut heads_forward(Tape<T>& t, const Bound& b, int pooled_cls, int pooled_mask) const {
        HeadOut out;
        auto [cls, box] = heads_cls_forward(t, b, pooled_cls);
        out.cls_logits = cls;
        out.box_deltas = box;
        out.mask_logits = heads_mask_forward(t, b, pooled_mask);
        return out;
    }

    // -- multitask loss ------------------------------------------------------

    struct RpnLossTargets {
        std::vector<long> sampled_rows;  // rows of the flattened RPN outputs
        Tensor<T> sampled_labels;        // [S,1] values in {0,1}
        std::vector<long> positive_rows;
        Tensor<T> positive_deltas;  // [P,4]
    };
    struct HeadLossTargets {
        std::vector<int> class_labels;  // per head row, {0,1}
        std::vector<long> fg_rows;
        Tensor<T> fg_deltas;  // [F,4]
        Tensor<T> fg_masks;   // [F,1,mask_size,mask_size]
    };
    struct LossIds {
        int l_cls = -1, l_bbox = -1, l_mask = -1, total = -1;
    };

    /// L = L_cls + L_bbox + L_mask. Classification couples the RPN objectness
    /// term and the head class term; box regression runs on positives only;
    /// the mask term runs on foreground roi grids only.
    std::pair<LossIds, LossBreakdown> multitask_loss(Tape<T>& t, const RpnOut& rpn,
                                                     const HeadOut& heads,
                                                     const RpnLossTargets& rt,
                                                     const HeadLossTargets& ht) const {
        int rpn_obj = sigmoid_bce(t, gather_rows(t, rpn.logits, rt.sampled_rows),
                                  t.push(rt.sampled_labels));
        int head_cls = softmax_cross_entropy(t, heads.cls_logits, ht.class_labels);
        int l_cls = add(t, rpn_obj, head_cls);
        int rpn_box = smooth_l1(t, gather_rows(t, rpn.deltas, rt.positive_rows),
                                t.push(rt.positive_deltas));
        int head_box =
            smooth_l1(t, gather_rows(t, heads.box_deltas, ht.fg_rows), t.push(ht.fg_deltas));
        int l_bbox = add(t, rpn_box, head_box);
        int l_mask = sigmoid_bce(t, heads.mask_logits, t.push(ht.fg_masks));
        int total = add(t, add(t, l_cls, l_bbox), l_mask);
        LossIds ids{l_cls, l_bbox, l_mask, total};
        LossBreakdown vals;
        vals.l_cls = static_cast<double>(t.val(l_cls)[0]);
        vals.l_bbox = static_cast<double>(t.val(l_bbox)[0]);
        vals.l_mask = static_cast<double>(t.val(l_mask)[0]);
        vals.total = static_cast<double>(t.val(total)[0]);
        return {ids, vals};
    }

    // -- inference -----------------------------------------------------------

    std::vector<RawDetection> detect_raw(const Tensor<T>& image, const DetectConfig& dc) {
        if (image.rank() != 4 || image.dim(0) != 1)
            throw std::invalid_argument("detect_raw: expected [1,3,H,W]");
        int H = static_cast<int>(image.dim(2)), W = static_cast<int>(image.dim(3));
        Tape<T> t;
        Bound b = bind(t);
        int img = t.push(image);
        auto stages = backbone_forward(t, b, img);
        auto pyramid = build_fpn(t, b, stages);
        RpnOut rpn = rpn_forward(t, b, pyramid);
        auto anchors = generate_anchors(cfg_.anchors, H, W);
        const auto& lv = t.val(rpn.logits);
        if (static_cast<long>(anchors.size()) != lv.dim(0))
            throw std::logic_error("detect_raw: anchor/output count mismatch");
        std::vector<double> logits(anchors.size());
        std::vector<BoxDelta> deltas(anchors.size());
        const auto& dv = t.val(rpn.deltas);
        for (size_t a = 0; a < anchors.size(); ++a) {
            logits[a] = static_cast<double>(lv[static_cast<long>(a)]);
            deltas[a] = {static_cast<double>(dv.at2(static_cast<long>(a), 0)),
                         static_cast<double>(dv.at2(static_cast<long>(a), 1)),
                         static_cast<double>(dv.at2(static_cast<long>(a), 2)),
                         static_cast<double>(dv.at2(static_cast<long>(a), 3))};
        }
        auto proposals = generate_proposals(logits, deltas, anchors, H, W, dc.proposals);
        if (proposals.empty()) return {};

        std::vector<RoiRef> rois;
        for (const auto& p : proposals) rois.push_back({0, p.box});
        auto [pooled, order] = pool_rois(t, b, pyramid, rois, cfg_.cls_pool);
        auto [cls_id, box_id] = heads_cls_forward(t, b, pooled);
        const auto& cls = t.val(cls_id);
        const auto& box = t.val(box_id);

        std::vector<Box> refined;
        std::vector<double> scores;
        for (long r = 0; r < cls.dim(0); ++r) {
            const Box& src = proposals[static_cast<size_t>(order[static_cast<size_t>(r)])].box;
            double z0 = cls.at2(r, 0), z1 = cls.at2(r, 1);
            double m = std::max(z0, z1);
            double p1 = std::exp(z1 - m) / (std::exp(z0 - m) + std::exp(z1 - m));
            BoxDelta d{static_cast<double>(box.at2(r, 0)), static_cast<double>(box.at2(r, 1)),
                       static_cast<double>(box.at2(r, 2)), static_cast<double>(box.at2(r, 3))};
            Box rb = clip_box(decode_delta(src, d), H, W);
            if (p1 < dc.score_threshold) continue;
            if (rb.width() < 1 || rb.height() < 1) continue;
            refined.push_back(rb);
            scores.push_back(p1);
        }
        std::vector<int> kept = nms(refined, scores, dc.nms_iou);
        if (kept.size() > static_cast<size_t>(dc.max_detections))
            kept.resize(static_cast<size_t>(dc.max_detections));
        if (kept.empty()) return {};

        std::vector<RoiRef> mask_rois;
        for (int i : kept) mask_rois.push_back({0, refined[static_cast<size_t>(i)]});
        auto [mask_pooled, mask_order] = pool_rois(t, b, pyramid, mask_rois, cfg_.mask_pool);
        int mask_id = heads_mask_forward(t, b, mask_pooled);
        const auto& mlog = t.val(mask_id);

        std::vector<RawDetection> out(kept.size());
        long msz = static_cast<long>(cfg_.mask_size) * cfg_.mask_size;
        for (long r = 0; r < static_cast<long>(kept.size()); ++r) {
            int orig = mask_order[static_cast<size_t>(r)];
            RawDetection det;
            det.box = refined[static_cast<size_t>(kept[static_cast<size_t>(orig)])];
            det.score = scores[static_cast<size_t>(kept[static_cast<size_t>(orig)])];
            det.mask_logits.resize(static_cast<size_t>(msz));
            for (long i = 0; i < msz; ++i)
                det.mask_logits[static_cast<size_t>(i)] = static_cast<double>(mlog[r * msz + i]);
            out[static_cast<size_t>(orig)] = std::move(det);
        }
        std::sort(out.begin(), out.end(),
                  [](const RawDetection& a, const RawDetection& b) { return a.score > b.score; });
        return out;
    }

    /// Full forward pass to pasted masks in the input image space.
    std::vector<Detection> detect(const Tensor<T>& image, const DetectConfig& dc = {}) {
        int H = static_cast<int>(image.dim(2)), W = static_cast<int>(image.dim(3));
        std::vector<Detection> out;
        for (auto& raw : detect_raw(image, dc)) {
            Detection d;
            d.box = raw.box;
            d.score = raw.score;
            d.mask = paste_mask(raw.mask_logits, cfg_.mask_size, raw.box, H, W, dc.mask_threshold);
            out.push_back(std::move(d));
        }
        return out;
    }

    // -- checkpointing -------------------------------------------------------

    void save(const std::string& path) const {
        std::map<std::string, const Tensor<T>*> m;
        for (const auto& [k, p] : params_) m[k] = &p.value;
        save_checkpoint(path, m);
    }

    void load(const std::string& path) {
        auto loaded = load_checkpoint(path);
        for (auto& [k, p] : params_) {
            auto it = loaded.find(k);
            if (it == loaded.end()) throw DataError("checkpoint missing parameter " + k);
            if (it->second.shape != p.value.shape)
                throw DataError("checkpoint shape mismatch for " + k + ": file " +
                                it->second.shape_str() + " vs model " + p.value.shape_str());
            p.value = it->second.template cast<T>();
        }
        for (const auto& [k, v] : loaded)
            if (params_.find(k) == params_.end())
                throw DataError("checkpoint has unknown parameter " + k);
    }

    template <typename U>
    MaskRcnn<U> cast() const {
        MaskRcnn<U> other(cfg_, 1);
        for (const auto& [k, p] : params_) {
            other.param(k).value = p.value.template cast<U>();
            other.param(k).tag = p.tag;
            other.param(k).trainable = p.trainable;
        }
        return other;
    }

private:
    int conv(Tape<T>& t, const Bound& b, const std::string& name, int x, int stride,
             int pad) const {
        return conv2d(t, x, b.at(name + ".w"), b.at(name + ".b"), stride, pad);
    }
    int deconv(Tape<T>& t, const Bound& b, const std::string& name, int x, int stride) const {
        return conv_transpose2d(t, x, b.at(name + ".w"), b.at(name + ".b"), stride);
    }
    int lin(Tape<T>& t, const Bound& b, const std::string& name, int x) const {
        return linear(t, x, b.at(name + ".w"), b.at(name + ".b"));
    }

    static Tensor<T> he_uniform(std::vector<long> shape, long fan_in, std::mt19937_64& rng) {
        double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
        return Tensor<T>::uniform(std::move(shape), static_cast<T>(-limit), static_cast<T>(limit),
                                  rng);
    }

    void add_conv(const std::string& name, long cin, long cout, long k, Stage tag,
                  std::mt19937_64& rng) {
        params_.emplace(name + ".w",
                        Parameter<T>(name + ".w", he_uniform({cout, cin, k, k}, cin * k * k, rng),
                                     tag));
        params_.emplace(name + ".b", Parameter<T>(name + ".b", Tensor<T>::zeros({cout}), tag));
    }
    void add_deconv(const std::string& name, long cin, long cout, long k, std::mt19937_64& rng) {
        params_.emplace(name + ".w",
                        Parameter<T>(name + ".w", he_uniform({cin, cout, k, k}, cin * k * k, rng),
                                     Stage::head));
        params_.emplace(name + ".b",
                        Parameter<T>(name + ".b", Tensor<T>::zeros({cout}), Stage::head));
    }
    void add_linear(const std::string& name, long din, long dout, std::mt19937_64& rng) {
        params_.emplace(name + ".w",
                        Parameter<T>(name + ".w", he_uniform({din, dout}, din, rng), Stage::head));
        params_.emplace(name + ".b",
                        Parameter<T>(name + ".b", Tensor<T>::zeros({dout}), Stage::head));
    }

    ModelConfig cfg_;
    std::map<std::string, Parameter<T>> params_;
};

}  // namespace nucleo
