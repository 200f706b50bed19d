#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "nucleo/config.hpp"
#include "nucleo/data.hpp"
#include "nucleo/eval.hpp"
#include "nucleo/model.hpp"
#include "nucleo/targets.hpp"

namespace nucleo {

// -- batch assembly -----------------------------------------------------------

/// Images stacked to [N,3,maxH,maxW] (zero padded) plus per-image ground truth.
template <typename T>
struct Batch {
    Tensor<T> images;
    std::vector<std::vector<Box>> gt_boxes;
    std::vector<std::vector<Mask>> gt_masks;
};

template <typename T>
Batch<T> collate(const std::vector<Sample>& samples) {
    long H = 0, W = 0;
    for (const auto& s : samples) {
        H = std::max(H, static_cast<long>(s.height()));
        W = std::max(W, static_cast<long>(s.width()));
    }
    Batch<T> b;
    b.images = Tensor<T>({static_cast<long>(samples.size()), 3, H, W});
    for (size_t n = 0; n < samples.size(); ++n) {
        const auto& img = samples[n].image;
        long h = img.dim(1), w = img.dim(2);
        for (long c = 0; c < 3; ++c)
            for (long y = 0; y < h; ++y)
                for (long x = 0; x < w; ++x)
                    b.images[((static_cast<long>(n) * 3 + c) * H + y) * W + x] =
                        static_cast<T>(img[(c * h + y) * w + x]);
        std::vector<Box> boxes;
        std::vector<Mask> masks;
        for (const auto& m : samples[n].instances) {
            Box bb = mask_bbox(m);
            if (bb.area() <= 0) continue;
            // pad the mask to batch dims so roi extraction sees batch coords
            Mask mm(static_cast<int>(H), static_cast<int>(W));
            for (int y = 0; y < m.height; ++y)
                for (int x = 0; x < m.width; ++x)
                    if (m.at(y, x)) mm.set(y, x, 1);
            boxes.push_back(bb);
            masks.push_back(std::move(mm));
        }
        b.gt_boxes.push_back(std::move(boxes));
        b.gt_masks.push_back(std::move(masks));
    }
    return b;
}

// -- training targets ---------------------------------------------------------

/// Sampling decisions and regression/mask targets for one batch, fixed before
/// the differentiable pass so the loss is a clean function of the parameters.
template <typename T>
struct BatchTargets {
    typename MaskRcnn<T>::RpnLossTargets rpn;
    typename MaskRcnn<T>::HeadLossTargets head;
    std::vector<RoiRef> rois;     // level-sorted, aligned with head targets
    long anchors_per_image = 0;
};

template <typename T>
BatchTargets<T> compute_batch_targets(MaskRcnn<T>& model, const Batch<T>& batch,
                                      const RunConfig& cfg, std::mt19937_64& rng) {
    long N = batch.images.dim(0);
    int H = static_cast<int>(batch.images.dim(2));
    int W = static_cast<int>(batch.images.dim(3));
    auto anchors = generate_anchors(cfg.anchors, H, W);
    long A = static_cast<long>(anchors.size());

    // Forward pass without gradients to source proposals.
    Tape<T> t;
    auto bound = model.bind(t);
    int img = t.push(batch.images);
    auto pyramid = model.build_fpn(t, bound, model.backbone_forward(t, bound, img));
    auto rpn = model.rpn_forward(t, bound, pyramid);
    const auto& lv = t.val(rpn.logits);
    const auto& dv = t.val(rpn.deltas);

    BatchTargets<T> out;
    out.anchors_per_image = A;
    std::vector<double> labels01;
    std::vector<T> pos_deltas;
    std::vector<int> cls_labels;
    std::vector<T> fg_deltas;
    std::vector<std::vector<double>> fg_masks;
    struct PendingRoi {
        int level;
        RoiRef roi;
        int cls;
        BoxDelta delta;
        std::vector<double> mask;
        long seq;
    };
    std::vector<PendingRoi> pending;

    for (long n = 0; n < N; ++n) {
        auto rt = assign_rpn_targets(anchors, batch.gt_boxes[static_cast<size_t>(n)], cfg.rpn, rng);
        for (long a = 0; a < A; ++a) {
            int lab = rt.labels[static_cast<size_t>(a)];
            if (lab < 0) continue;
            out.rpn.sampled_rows.push_back(n * A + a);
            labels01.push_back(lab);
            if (lab == 1) {
                out.rpn.positive_rows.push_back(n * A + a);
                const auto& d = rt.deltas[static_cast<size_t>(a)];
                pos_deltas.insert(pos_deltas.end(),
                                  {static_cast<T>(d.dx), static_cast<T>(d.dy),
                                   static_cast<T>(d.dw), static_cast<T>(d.dh)});
            }
        }

        std::vector<double> logits(static_cast<size_t>(A));
        std::vector<BoxDelta> deltas(static_cast<size_t>(A));
        for (long a = 0; a < A; ++a) {
            logits[static_cast<size_t>(a)] = static_cast<double>(lv[n * A + a]);
            deltas[static_cast<size_t>(a)] = {
                static_cast<double>(dv.at2(n * A + a, 0)), static_cast<double>(dv.at2(n * A + a, 1)),
                static_cast<double>(dv.at2(n * A + a, 2)), static_cast<double>(dv.at2(n * A + a, 3))};
        }
        auto proposals = generate_proposals(logits, deltas, anchors, H, W, cfg.proposals);
        auto dt = sample_rois(proposals, batch.gt_boxes[static_cast<size_t>(n)],
                              batch.gt_masks[static_cast<size_t>(n)], cfg.roi, rng);
        for (size_t r = 0; r < dt.rois.size(); ++r) {
            PendingRoi pr;
            pr.level = assign_roi_level(dt.rois[r]);
            pr.roi = {static_cast<int>(n), dt.rois[r]};
            pr.cls = dt.class_labels[r];
            pr.delta = dt.box_deltas[r];
            pr.mask = dt.mask_targets[r];
            pr.seq = static_cast<long>(pending.size());
            pending.push_back(std::move(pr));
        }
    }

    // Stable sort by pyramid level so pooled rows align one-to-one with the
    // target rows (pool_rois groups by level preserving in-level order).
    std::stable_sort(pending.begin(), pending.end(),
                     [](const PendingRoi& a, const PendingRoi& b) { return a.level < b.level; });
    int msz = cfg.roi.mask_size;
    for (auto& pr : pending) {
        long row = static_cast<long>(out.rois.size());
        out.rois.push_back(pr.roi);
        cls_labels.push_back(pr.cls);
        if (pr.cls == 1) {
            out.head.fg_rows.push_back(row);
            fg_deltas.insert(fg_deltas.end(),
                             {static_cast<T>(pr.delta.dx), static_cast<T>(pr.delta.dy),
                              static_cast<T>(pr.delta.dw), static_cast<T>(pr.delta.dh)});
            fg_masks.push_back(std::move(pr.mask));
        }
    }

    out.rpn.sampled_labels =
        Tensor<T>({static_cast<long>(labels01.size()), 1});
    for (size_t i = 0; i < labels01.size(); ++i)
        out.rpn.sampled_labels[static_cast<long>(i)] = static_cast<T>(labels01[i]);
    out.rpn.positive_deltas =
        Tensor<T>({static_cast<long>(out.rpn.positive_rows.size()), 4}, std::move(pos_deltas));
    out.head.class_labels = std::move(cls_labels);
    out.head.fg_deltas =
        Tensor<T>({static_cast<long>(out.head.fg_rows.size()), 4}, std::move(fg_deltas));
    out.head.fg_masks =
        Tensor<T>({static_cast<long>(fg_masks.size()), 1, msz, msz});
    for (size_t f = 0; f < fg_masks.size(); ++f)
        for (long i = 0; i < static_cast<long>(msz) * msz; ++i)
            out.head.fg_masks[static_cast<long>(f) * msz * msz + i] =
                static_cast<T>(fg_masks[f][static_cast<size_t>(i)]);
    return out;
}

/// Differentiable loss pass for a batch with fixed targets.
template <typename T>
std::pair<typename MaskRcnn<T>::LossIds, LossBreakdown> compute_loss(
    MaskRcnn<T>& model, Tape<T>& t, const typename MaskRcnn<T>::Bound& bound,
    const Tensor<T>& images, const BatchTargets<T>& targets) {
    int img = t.push(images);
    auto pyramid = model.build_fpn(t, bound, model.backbone_forward(t, bound, img));
    auto rpn = model.rpn_forward(t, bound, pyramid);
    auto [pooled_cls, order] =
        model.pool_rois(t, bound, pyramid, targets.rois, model.config().cls_pool);
    for (size_t i = 0; i < order.size(); ++i)
        if (order[i] != static_cast<int>(i))
            throw std::logic_error("compute_loss: targets must be level-sorted");
    std::vector<RoiRef> fg_rois;
    for (long r : targets.head.fg_rows) fg_rois.push_back(targets.rois[static_cast<size_t>(r)]);
    auto [pooled_mask, mask_order] =
        model.pool_rois(t, bound, pyramid, fg_rois, model.config().mask_pool);
    typename MaskRcnn<T>::HeadOut heads;
    auto [cls_id, box_id] = model.heads_cls_forward(t, bound, pooled_cls);
    heads.cls_logits = cls_id;
    heads.box_deltas = box_id;
    heads.mask_logits = model.heads_mask_forward(t, bound, pooled_mask);
    return model.multitask_loss(t, rpn, heads, targets.rpn, targets.head);
}

// -- training loop ------------------------------------------------------------

struct TrainLogEntry {
    int epoch = 0;
    long step = 0;
    int stage = 1;
    double lr = 0;
    LossBreakdown loss;
};

struct TrainLog {
    std::vector<TrainLogEntry> steps;
    std::vector<std::pair<int, double>> val;  // (epoch, mean val loss)

    std::string steps_csv() const {
        std::ostringstream os;
        os << "epoch,step,stage,lr,l_cls,l_bbox,l_mask,total\n";
        os << std::setprecision(10);
        for (const auto& e : steps)
            os << e.epoch << ',' << e.step << ',' << e.stage << ',' << e.lr << ',' << e.loss.l_cls
               << ',' << e.loss.l_bbox << ',' << e.loss.l_mask << ',' << e.loss.total << '\n';
        return os.str();
    }
    std::string val_csv() const {
        std::ostringstream os;
        os << "epoch,val_total\n" << std::setprecision(10);
        for (const auto& [e, v] : val) os << e << ',' << v << '\n';
        return os.str();
    }
};

/// Scoped lock file: one training process per checkpoint directory.
class DirLock {
public:
    explicit DirLock(const fs::path& dir) : path_(dir / ".nucleo_lock") {
        fs::create_directories(dir);
        if (fs::exists(path_))
            throw DataError("training lock already present: " + path_.string());
        std::ofstream(path_.string()) << "locked\n";
    }
    ~DirLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    fs::path path_;
};

inline int stage_of_epoch(const RunConfig& cfg, int epoch) {  // epoch is 1-based
    if (epoch <= cfg.stage_epochs[0]) return 1;
    if (epoch <= cfg.stage_epochs[0] + cfg.stage_epochs[1]) return 2;
    return 3;
}

struct TrainResult {
    TrainLog log;
    std::array<double, 3> channel_means = {0, 0, 0};
};

/// Loads one training sample by id, preprocessed and (optionally) augmented.
inline Sample load_train_sample(const fs::path& root, const std::string& id,
                                const RunConfig& cfg, int epoch) {
    Sample s = preprocess(load_sample(root / id), cfg.channel_means);
    if (cfg.augment.enabled) {
        auto rng = sample_rng(cfg.seed, id, epoch);
        s = augment(s, cfg.augment, rng);
    }
    return s;
}

/// The staged training procedure. Stage 1 updates head-tagged parameters at
/// lr_initial, stage 2 adds the upper backbone, stage 3 unfreezes everything
/// at lr_final (a 10x reduction by default). Deterministic given the seed.
inline TrainResult train(MaskRcnn<float>& model, RunConfig cfg,
                         const std::vector<std::string>& train_ids,
                         const std::vector<std::string>& val_ids, const fs::path& out_dir) {
    cfg.validate();
    if (train_ids.empty()) throw DataError("train: empty training split");
    DirLock lock(out_dir);
    fs::path root(cfg.dataset_root);

    if (!cfg.channel_means_set) {
        cfg.channel_means = compute_channel_means(root, train_ids);
        cfg.channel_means_set = true;
    }
    std::ofstream(out_dir / "run_config.cfg") << serialize_config(cfg);

    TrainResult result;
    result.channel_means = cfg.channel_means;
    long global_step = 0;
    double best_val = std::numeric_limits<double>::infinity();
    int prev_stage = 1;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        int stage = stage_of_epoch(cfg, epoch);
        if (stage != prev_stage) {
            model.save((out_dir / ("ckpt_stage" + std::to_string(prev_stage) + ".nuc")).string());
            prev_stage = stage;
        }
        double lr = stage == 3 ? cfg.lr_final : cfg.lr_initial;
        auto params = model.stage_params(stage);

        std::vector<std::string> order = train_ids;
        std::mt19937_64 erng(cfg.seed ^ (0x5deece66dull * static_cast<std::uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), erng);
        long steps = cfg.steps_per_epoch > 0
                         ? cfg.steps_per_epoch
                         : (static_cast<long>(order.size()) + cfg.batch_size - 1) / cfg.batch_size;
        size_t cursor = 0;
        for (long step = 0; step < steps; ++step) {
            std::vector<Sample> samples;
            for (int k = 0; k < cfg.batch_size; ++k) {
                samples.push_back(load_train_sample(root, order[cursor], cfg, epoch));
                cursor = (cursor + 1) % order.size();
            }
            Batch<float> batch = collate<float>(samples);
            std::mt19937_64 srng(cfg.seed ^ (0x9e3779b97f4a7c15ull *
                                             static_cast<std::uint64_t>(global_step + 1)));
            auto targets = compute_batch_targets(model, batch, cfg, srng);

            Tape<float> tape;
            auto bound = model.bind(tape);
            auto [ids, loss] = compute_loss(model, tape, bound, batch.images, targets);
            if (!std::isfinite(loss.total)) {
                model.save((out_dir / "ckpt_last.nuc").string());
                throw NumericError("train: non-finite loss at step " +
                                   std::to_string(global_step));
            }
            tape.backward(ids.total);
            model.zero_grads();
            model.collect_grads(tape, bound);
            sgd_momentum_step(params, lr, cfg.momentum, cfg.weight_decay, cfg.clip_norm);

            result.log.steps.push_back({epoch, global_step, stage, lr, loss});
            ++global_step;
        }

        if (!val_ids.empty()) {
            double vtotal = 0;
            std::mt19937_64 vrng(cfg.seed ^ 0xabcdefull);
            for (const auto& id : val_ids) {
                Sample s = preprocess(load_sample(root / id), cfg.channel_means);
                Batch<float> vb = collate<float>(std::vector<Sample>{s});
                auto vt = compute_batch_targets(model, vb, cfg, vrng);
                Tape<float> tape;
                auto bound = model.bind(tape);
                auto [ids, loss] = compute_loss(model, tape, bound, vb.images, vt);
                vtotal += loss.total;
            }
            vtotal /= static_cast<double>(val_ids.size());
            result.log.val.push_back({epoch, vtotal});
            if (vtotal < best_val) {
                best_val = vtotal;
                model.save((out_dir / "ckpt_best.nuc").string());
            }
        }
        model.save((out_dir / "ckpt_last.nuc").string());
    }
    model.save((out_dir / ("ckpt_stage" + std::to_string(prev_stage) + ".nuc")).string());
    model.save((out_dir / "ckpt_final.nuc").string());
    if (val_ids.empty()) model.save((out_dir / "ckpt_best.nuc").string());
    std::ofstream(out_dir / "train_log.csv") << result.log.steps_csv();
    std::ofstream(out_dir / "val_log.csv") << result.log.val_csv();
    return result;
}

// -- inference and evaluation ---------------------------------------------------

/// Detections mapped back to the original (pre-upsample, pre-pad) image space.
inline std::vector<Detection> detect_original_space(MaskRcnn<float>& model,
                                                    const Tensor<float>& raw_image,
                                                    const std::array<double, 3>& means,
                                                    const DetectConfig& dc) {
    Sample s;
    s.id = "image";
    s.image = raw_image;
    int H = static_cast<int>(raw_image.dim(1)), W = static_cast<int>(raw_image.dim(2));
    Sample pre = preprocess(s, means);
    Tensor<float> input({1, 3, pre.image.dim(1), pre.image.dim(2)}, pre.image.data);
    std::vector<Detection> out;
    for (auto& raw : model.detect_raw(input, dc)) {
        Detection d;
        d.box = clip_box(Box(raw.box.x1 / 2, raw.box.y1 / 2, raw.box.x2 / 2, raw.box.y2 / 2), H, W);
        if (d.box.width() < 0.5 || d.box.height() < 0.5) continue;
        d.score = raw.score;
        d.mask = paste_mask(raw.mask_logits, model.config().mask_size, d.box, H, W,
                            dc.mask_threshold);
        out.push_back(std::move(d));
    }
    return out;
}

/// Runs the model over a split and scores it against ground truth.
inline std::vector<ImageEval> predict_split(MaskRcnn<float>& model, const fs::path& root,
                                            const std::vector<std::string>& ids,
                                            const std::array<double, 3>& means,
                                            const DetectConfig& dc) {
    std::vector<ImageEval> evals;
    for (const auto& id : ids) {
        Sample s = load_sample(root / id);
        ImageEval ie;
        ie.image_id = id;
        ie.gt_masks = s.instances;
        for (auto& d : detect_original_space(model, s.image, means, dc)) {
            if (d.mask.empty_mask()) continue;
            ie.pred_masks.push_back(std::move(d.mask));
            ie.scores.push_back(d.score);
        }
        evals.push_back(std::move(ie));
    }
    return evals;
}

/// Builds eval inputs from a submission file; earlier lines of an image rank
/// higher (scores descend with line order).
inline std::vector<ImageEval> rle_predictions(const fs::path& rle_file, const fs::path& root,
                                              const std::vector<std::string>& ids) {
    std::ifstream f(rle_file);
    if (!f) throw DataError("rle_predictions: cannot open " + rle_file.string());
    std::map<std::string, std::vector<std::vector<std::pair<long, long>>>> by_image;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        RleLine rl = parse_rle_line(line);
        by_image[rl.image_id].push_back(rl.runs);
    }
    std::vector<ImageEval> evals;
    for (const auto& id : ids) {
        Sample s = load_sample(root / id);
        ImageEval ie;
        ie.image_id = id;
        ie.gt_masks = s.instances;
        auto it = by_image.find(id);
        if (it != by_image.end()) {
            int rank = 0;
            for (const auto& runs : it->second) {
                Rle r;
                r.height = s.height();
                r.width = s.width();
                r.runs = runs;
                ie.pred_masks.push_back(rle_decode(r));
                ie.scores.push_back(1.0 - 1e-6 * rank++);
            }
        }
        evals.push_back(std::move(ie));
    }
    return evals;
}

}  // namespace nucleo
