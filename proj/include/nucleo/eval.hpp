#pragma once

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "nucleo/errors.hpp"
#include "nucleo/maskops.hpp"

namespace nucleo {

/// The 10 evaluation thresholds 0.50 to 0.95 in steps of 0.05.
inline std::vector<double> ap_thresholds() {
    std::vector<double> t;
    for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
    return t;
}

/// One-to-one pred/gt pairing at a threshold.
struct MatchResult {
    double threshold = 0;
    struct Pair {
        int pred = -1, gt = -1;
        double iou = 0;
    };
    std::vector<Pair> pairs;
    std::vector<int> unmatched_preds;
    std::vector<int> unmatched_gts;
};

/// Greedy matching: predictions in descending score order (ties to the lower
/// index) each claim the highest-IoU still-unmatched gt with IoU >= threshold.
/// Zero-overlap pairs never match.
inline MatchResult match_instances(const std::vector<Mask>& pred_masks,
                                   const std::vector<double>& scores,
                                   const std::vector<Mask>& gt_masks, double threshold) {
    if (pred_masks.size() != scores.size())
        throw std::invalid_argument("match_instances: preds and scores length mismatch");
    MatchResult res;
    res.threshold = threshold;
    std::vector<int> order(pred_masks.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (scores[static_cast<size_t>(a)] != scores[static_cast<size_t>(b)])
            return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)];
        return a < b;
    });
    std::vector<char> gt_taken(gt_masks.size(), 0);
    for (int p : order) {
        int best_gt = -1;
        double best = 0;
        for (size_t g = 0; g < gt_masks.size(); ++g) {
            if (gt_taken[g]) continue;
            double v = mask_iou(pred_masks[static_cast<size_t>(p)], gt_masks[g]);
            if (v <= 0 || v < threshold) continue;
            if (v > best) {
                best = v;
                best_gt = static_cast<int>(g);
            }
        }
        if (best_gt >= 0) {
            gt_taken[static_cast<size_t>(best_gt)] = 1;
            res.pairs.push_back({p, best_gt, best});
        } else {
            res.unmatched_preds.push_back(p);
        }
    }
    for (size_t g = 0; g < gt_masks.size(); ++g)
        if (!gt_taken[g]) res.unmatched_gts.push_back(static_cast<int>(g));
    return res;
}

/// One image's predictions and ground truth.
struct ImageEval {
    std::string image_id;
    std::vector<Mask> pred_masks;
    std::vector<double> scores;
    std::vector<Mask> gt_masks;
};

namespace detail {

// 101-point interpolated AP from per-prediction TP flags pooled in
// (score desc, image, index) order.
inline double ap_101(const std::vector<char>& tp_sorted, long n_gt) {
    if (n_gt == 0) return 0;
    std::vector<double> precision, recall;
    long tp = 0, fp = 0;
    for (char f : tp_sorted) {
        if (f) ++tp;
        else ++fp;
        precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
        recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
    }
    // precision envelope (max precision at recall >= r)
    for (long i = static_cast<long>(precision.size()) - 2; i >= 0; --i)
        precision[static_cast<size_t>(i)] =
            std::max(precision[static_cast<size_t>(i)], precision[static_cast<size_t>(i + 1)]);
    double ap = 0;
    size_t j = 0;
    for (int r = 0; r <= 100; ++r) {
        double rr = r / 100.0;
        while (j < recall.size() && recall[j] < rr) ++j;
        ap += j < precision.size() ? precision[j] : 0.0;
    }
    return ap / 101.0;
}

struct PooledPred {
    double score;
    size_t image;
    size_t idx;
};

inline std::vector<PooledPred> pooled_order(const std::vector<ImageEval>& images) {
    std::vector<PooledPred> all;
    for (size_t i = 0; i < images.size(); ++i)
        for (size_t p = 0; p < images[i].pred_masks.size(); ++p)
            all.push_back({images[i].scores[p], i, p});
    std::sort(all.begin(), all.end(), [&](const PooledPred& a, const PooledPred& b) {
        if (a.score != b.score) return a.score > b.score;
        if (images[a.image].image_id != images[b.image].image_id)
            return images[a.image].image_id < images[b.image].image_id;
        return a.idx < b.idx;
    });
    return all;
}

}  // namespace detail

/// Per-threshold AP (global score-ranked PR, 101-point interpolation) and the
/// mean over the 10 thresholds. No gt instances at all -> missing.
inline std::pair<std::optional<double>, std::vector<double>> average_precision(
    const std::vector<ImageEval>& images) {
    long n_gt = 0;
    for (const auto& im : images) n_gt += static_cast<long>(im.gt_masks.size());
    if (n_gt == 0) return {std::nullopt, {}};
    auto pooled = detail::pooled_order(images);
    std::vector<double> per_threshold;
    for (double t : ap_thresholds()) {
        // TP flags per (image, pred) at this threshold
        std::vector<std::vector<char>> tp(images.size());
        for (size_t i = 0; i < images.size(); ++i) {
            tp[i].assign(images[i].pred_masks.size(), 0);
            auto m = match_instances(images[i].pred_masks, images[i].scores, images[i].gt_masks, t);
            for (const auto& pr : m.pairs) tp[i][static_cast<size_t>(pr.pred)] = 1;
        }
        std::vector<char> flags;
        flags.reserve(pooled.size());
        for (const auto& p : pooled) flags.push_back(tp[p.image][p.idx]);
        per_threshold.push_back(detail::ap_101(flags, n_gt));
    }
    double mean = 0;
    for (double v : per_threshold) mean += v;
    mean /= static_cast<double>(per_threshold.size());
    return {mean, per_threshold};
}

/// Mean over all gt instances of the best one-to-one matched IoU (score-order
/// greedy, any positive overlap); unmatched gts contribute 0. No gts -> missing.
inline std::optional<double> mean_mask_iou_metric(const std::vector<ImageEval>& images) {
    long n_gt = 0;
    double sum = 0;
    for (const auto& im : images) {
        n_gt += static_cast<long>(im.gt_masks.size());
        auto m = match_instances(im.pred_masks, im.scores, im.gt_masks, 0.0);
        for (const auto& pr : m.pairs) sum += pr.iou;
    }
    if (n_gt == 0) return std::nullopt;
    return sum / static_cast<double>(n_gt);
}

struct PerImageEval {
    std::string image_id;
    long n_gt = 0, n_pred = 0;
    std::optional<double> ap50, ap, mean_iou;
};

struct EvalReport {
    std::optional<double> ap;
    std::optional<double> mean_mask_iou;
    std::vector<double> per_threshold_ap;  // empty when ap is missing
    std::vector<PerImageEval> per_image;
};

inline EvalReport evaluate_dataset(const std::vector<ImageEval>& images) {
    EvalReport rep;
    auto [ap, per_t] = average_precision(images);
    rep.ap = ap;
    rep.per_threshold_ap = per_t;
    rep.mean_mask_iou = mean_mask_iou_metric(images);
    for (const auto& im : images) {
        PerImageEval row;
        row.image_id = im.image_id;
        row.n_gt = static_cast<long>(im.gt_masks.size());
        row.n_pred = static_cast<long>(im.pred_masks.size());
        std::vector<ImageEval> one = {im};
        auto [iap, it] = average_precision(one);
        row.ap = iap;
        if (!it.empty()) row.ap50 = it[0];
        row.mean_iou = mean_mask_iou_metric(one);
        rep.per_image.push_back(std::move(row));
    }
    return rep;
}

inline std::string format_metric(const std::optional<double>& v) {
    if (!v) return "NA";
    std::ostringstream os;
    os << std::fixed << std::setprecision(6) << *v;
    return os.str();
}

/// CSV with header image_id,n_gt,n_pred,ap50,ap,mean_iou and a final ALL row.
inline std::string report_to_csv(const EvalReport& rep) {
    std::ostringstream os;
    os << "image_id,n_gt,n_pred,ap50,ap,mean_iou\n";
    long tg = 0, tp = 0;
    for (const auto& r : rep.per_image) {
        tg += r.n_gt;
        tp += r.n_pred;
        os << r.image_id << ',' << r.n_gt << ',' << r.n_pred << ',' << format_metric(r.ap50) << ','
           << format_metric(r.ap) << ',' << format_metric(r.mean_iou) << '\n';
    }
    std::optional<double> ap50;
    if (!rep.per_threshold_ap.empty()) ap50 = rep.per_threshold_ap[0];
    os << "ALL," << tg << ',' << tp << ',' << format_metric(ap50) << ',' << format_metric(rep.ap)
       << ',' << format_metric(rep.mean_mask_iou) << '\n';
    return os.str();
}

}  // namespace nucleo
