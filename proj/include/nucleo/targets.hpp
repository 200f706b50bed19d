#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "nucleo/geometry.hpp"
#include "nucleo/maskops.hpp"
#include "nucleo/roi_align.hpp"

namespace nucleo {

/// RPN output for one candidate region.
struct Proposal {
    Box box;                // clipped to image
    double objectness = 0;  // in [0,1]
    int level = 0;          // source pyramid level index (0-based)
};

struct RpnTargetConfig {
    double pos_iou = 0.7;
    double neg_iou = 0.3;
    int batch = 256;
    double pos_fraction = 0.5;
};

/// Per-anchor labels {1 fg, 0 bg, -1 ignore} after sampling, plus regression
/// targets for the positives.
struct RpnTargets {
    std::vector<int> labels;        // one per anchor
    std::vector<BoxDelta> deltas;   // valid where labels == 1
    std::vector<int> matched_gt;    // gt index where labels == 1, else -1
};

/// Anchor-to-gt assignment: positive when IoU >= pos_iou with any gt or when
/// the anchor is (one of) the best for some gt; negative when max IoU <
/// neg_iou; the rest ignored. Sampled down to `batch` labels with the target
/// positive fraction; unsampled anchors are set back to ignore.
inline RpnTargets assign_rpn_targets(const std::vector<LevelAnchor>& anchors,
                                     const std::vector<Box>& gt_boxes,
                                     const RpnTargetConfig& cfg, std::mt19937_64& rng) {
    size_t n = anchors.size();
    RpnTargets out;
    out.labels.assign(n, -1);
    out.deltas.assign(n, BoxDelta{});
    out.matched_gt.assign(n, -1);

    std::vector<double> max_iou(n, 0.0);
    std::vector<int> argmax_gt(n, -1);
    std::vector<double> gt_best(gt_boxes.size(), 0.0);
    for (size_t a = 0; a < n; ++a) {
        for (size_t g = 0; g < gt_boxes.size(); ++g) {
            double v = iou_box(anchors[a].box, gt_boxes[g]);
            if (v > max_iou[a]) {
                max_iou[a] = v;
                argmax_gt[a] = static_cast<int>(g);
            }
            if (v > gt_best[g]) gt_best[g] = v;
        }
    }
    for (size_t a = 0; a < n; ++a) {
        if (max_iou[a] < cfg.neg_iou) out.labels[a] = 0;
        if (!gt_boxes.empty() && max_iou[a] >= cfg.pos_iou) out.labels[a] = 1;
    }
    // Best anchor per gt counts as positive even below pos_iou (ties included).
    for (size_t g = 0; g < gt_boxes.size(); ++g) {
        if (gt_best[g] <= 0) continue;
        for (size_t a = 0; a < n; ++a)
            if (iou_box(anchors[a].box, gt_boxes[g]) == gt_best[g]) {
                out.labels[a] = 1;
                if (argmax_gt[a] < 0 || max_iou[a] < gt_best[g]) {
                    argmax_gt[a] = static_cast<int>(g);
                    max_iou[a] = gt_best[g];
                }
            }
    }
    for (size_t a = 0; a < n; ++a)
        if (out.labels[a] == 1) {
            out.matched_gt[a] = argmax_gt[a];
            out.deltas[a] = encode_delta(anchors[a].box, gt_boxes[static_cast<size_t>(argmax_gt[a])]);
        }

    // Subsample to the label batch.
    std::vector<int> pos, neg;
    for (size_t a = 0; a < n; ++a) {
        if (out.labels[a] == 1) pos.push_back(static_cast<int>(a));
        if (out.labels[a] == 0) neg.push_back(static_cast<int>(a));
    }
    size_t want_pos = static_cast<size_t>(cfg.batch * cfg.pos_fraction);
    if (pos.size() > want_pos) {
        std::shuffle(pos.begin(), pos.end(), rng);
        for (size_t i = want_pos; i < pos.size(); ++i) out.labels[static_cast<size_t>(pos[i])] = -1;
        pos.resize(want_pos);
    }
    size_t want_neg = static_cast<size_t>(cfg.batch) - pos.size();
    if (neg.size() > want_neg) {
        std::shuffle(neg.begin(), neg.end(), rng);
        for (size_t i = want_neg; i < neg.size(); ++i) out.labels[static_cast<size_t>(neg[i])] = -1;
    }
    return out;
}

struct ProposalConfig {
    int pre_nms_top_k = 2000;
    double nms_iou = 0.7;
    int post_nms_top_k = 512;
    double min_side = 1.0;        // decoded boxes thinner than this are dropped
    double min_objectness = 0.01;  // anchors scoring below this never propose
};

/// Top-k by objectness -> decode -> clip -> degenerate drop -> NMS -> top-k.
/// Output sorted by objectness descending.
inline std::vector<Proposal> generate_proposals(const std::vector<double>& logits,
                                                const std::vector<BoxDelta>& deltas,
                                                const std::vector<LevelAnchor>& anchors,
                                                int image_h, int image_w,
                                                const ProposalConfig& cfg = {}) {
    if (logits.size() != anchors.size() || deltas.size() != anchors.size())
        throw std::invalid_argument("generate_proposals: length mismatch");
    std::vector<int> order(anchors.size());
    std::iota(order.begin(), order.end(), 0);
    size_t k = std::min<size_t>(static_cast<size_t>(cfg.pre_nms_top_k), order.size());
    std::partial_sort(order.begin(), order.begin() + static_cast<long>(k), order.end(),
                      [&](int a, int b) {
                          if (logits[static_cast<size_t>(a)] != logits[static_cast<size_t>(b)])
                              return logits[static_cast<size_t>(a)] > logits[static_cast<size_t>(b)];
                          return a < b;
                      });
    order.resize(k);

    std::vector<Box> boxes;
    std::vector<double> scores;
    std::vector<int> levels;
    for (int idx : order) {
        const auto& a = anchors[static_cast<size_t>(idx)];
        double obj = 1.0 / (1.0 + std::exp(-logits[static_cast<size_t>(idx)]));
        if (obj < cfg.min_objectness) continue;
        Box b = clip_box(decode_delta(a.box, deltas[static_cast<size_t>(idx)]), image_h, image_w);
        if (b.width() < cfg.min_side || b.height() < cfg.min_side) continue;
        boxes.push_back(b);
        scores.push_back(logits[static_cast<size_t>(idx)]);
        levels.push_back(a.level);
    }
    std::vector<int> kept = nms(boxes, scores, cfg.nms_iou);
    if (kept.size() > static_cast<size_t>(cfg.post_nms_top_k))
        kept.resize(static_cast<size_t>(cfg.post_nms_top_k));

    std::vector<Proposal> out;
    out.reserve(kept.size());
    for (int i : kept) {
        Proposal p;
        p.box = boxes[static_cast<size_t>(i)];
        p.objectness = 1.0 / (1.0 + std::exp(-scores[static_cast<size_t>(i)]));
        p.level = levels[static_cast<size_t>(i)];
        out.push_back(p);
    }
    return out;
}

struct RoiSampleConfig {
    int batch = 128;
    double fg_fraction = 0.25;  // 1:3 foreground:background
    double fg_iou = 0.5;
    int mask_size = 28;
    bool include_gt = true;  // append gt boxes to the candidate pool
};

/// Per sampled ROI: class label (1 nucleus, 0 background), regression delta
/// and mask grid where foreground. Background rows contribute no box or mask
/// loss.
struct DetectionTargets {
    std::vector<Box> rois;
    std::vector<int> class_labels;
    std::vector<int> matched_gt;                    // -1 for background
    std::vector<BoxDelta> box_deltas;               // valid where fg
    std::vector<std::vector<double>> mask_targets;  // valid where fg (mask_size^2 grids)
};

inline DetectionTargets sample_rois(const std::vector<Proposal>& proposals,
                                    const std::vector<Box>& gt_boxes,
                                    const std::vector<Mask>& gt_masks,
                                    const RoiSampleConfig& cfg, std::mt19937_64& rng) {
    std::vector<Box> cand;
    for (const auto& p : proposals) cand.push_back(p.box);
    if (cfg.include_gt)
        for (const auto& g : gt_boxes) cand.push_back(g);

    std::vector<int> fg, bg;
    std::vector<int> best_gt(cand.size(), -1);
    for (size_t i = 0; i < cand.size(); ++i) {
        double best = 0;
        for (size_t g = 0; g < gt_boxes.size(); ++g) {
            double v = iou_box(cand[i], gt_boxes[g]);
            if (v > best) {
                best = v;
                best_gt[i] = static_cast<int>(g);
            }
        }
        if (best_gt[i] >= 0 && best >= cfg.fg_iou)
            fg.push_back(static_cast<int>(i));
        else
            bg.push_back(static_cast<int>(i));
    }
    size_t want_fg = static_cast<size_t>(cfg.batch * cfg.fg_fraction);
    if (fg.size() > want_fg) {
        std::shuffle(fg.begin(), fg.end(), rng);
        fg.resize(want_fg);
    }
    size_t want_bg = static_cast<size_t>(cfg.batch) - fg.size();
    if (bg.size() > want_bg) {
        std::shuffle(bg.begin(), bg.end(), rng);
        bg.resize(want_bg);
    }

    DetectionTargets out;
    auto push = [&](int i, bool is_fg) {
        out.rois.push_back(cand[static_cast<size_t>(i)]);
        out.class_labels.push_back(is_fg ? 1 : 0);
        int g = is_fg ? best_gt[static_cast<size_t>(i)] : -1;
        out.matched_gt.push_back(g);
        if (is_fg) {
            out.box_deltas.push_back(
                encode_delta(cand[static_cast<size_t>(i)], gt_boxes[static_cast<size_t>(g)]));
            out.mask_targets.push_back(extract_mask_target(gt_masks[static_cast<size_t>(g)],
                                                           cand[static_cast<size_t>(i)],
                                                           cfg.mask_size));
        } else {
            out.box_deltas.push_back(BoxDelta{});
            out.mask_targets.emplace_back();
        }
    };
    for (int i : fg) push(i, true);
    for (int i : bg) push(i, false);
    return out;
}

}  // namespace nucleo
