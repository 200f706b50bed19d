#pragma once

#include <array>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "nucleo/data.hpp"
#include "nucleo/geometry.hpp"
#include "nucleo/model.hpp"
#include "nucleo/targets.hpp"

namespace nucleo {

/// Everything one training/inference run needs, serialized as flat
/// `key = value` text. Unknown keys are rejected.
struct RunConfig {
    std::string dataset_root;
    std::uint64_t seed = 42;

    int epochs = 100;
    int batch_size = 6;
    double lr_initial = 0.001;
    double lr_final = 0.0001;  // defaults to lr_initial / 10
    double momentum = 0.9;
    double weight_decay = 0.0001;
    double clip_norm = 5.0;
    std::array<int, 3> stage_epochs = {40, 40, 20};
    int steps_per_epoch = 0;  // 0 = one pass over the training split

    int test_count = 65;
    double val_fraction = 0.1;

    AugmentConfig augment;
    AnchorSpec anchors;
    RpnTargetConfig rpn;
    ProposalConfig proposals;
    RoiSampleConfig roi;

    double score_threshold = 0.7;
    double det_nms_iou = 0.3;
    int max_detections = 400;
    double mask_threshold = 0.5;

    std::array<double, 3> channel_means = {0, 0, 0};
    bool channel_means_set = false;

    void validate() const {
        if (stage_epochs[0] <= 0 || stage_epochs[1] <= 0 || stage_epochs[2] <= 0)
            throw std::invalid_argument("config: stage_epochs must all be positive");
        if (stage_epochs[0] + stage_epochs[1] + stage_epochs[2] != epochs)
            throw std::invalid_argument("config: stage_epochs must sum to epochs");
        if (batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
        if (augment.crop_h % 32 || augment.crop_w % 32)
            throw std::invalid_argument("config: crop dims must be multiples of 32");
        for (double p : {augment.flip_h_prob, augment.flip_v_prob})
            if (p < 0 || p > 1) throw std::invalid_argument("config: flip prob outside [0,1]");
    }

    DetectConfig detect_config() const {
        DetectConfig dc;
        dc.score_threshold = score_threshold;
        dc.nms_iou = det_nms_iou;
        dc.max_detections = max_detections;
        dc.mask_threshold = mask_threshold;
        dc.proposals = proposals;
        return dc;
    }

    ModelConfig model_config() const {
        ModelConfig mc;
        mc.anchors = anchors;
        return mc;
    }
};

namespace detail {

inline std::string join_doubles(const std::vector<double>& v) {
    std::ostringstream os;
    for (size_t i = 0; i < v.size(); ++i) {
        if (i) os << ',';
        os << v[i];
    }
    return os.str();
}

inline std::vector<double> parse_doubles(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        size_t pos = 0;
        double v = std::stod(tok, &pos);
        out.push_back(v);
    }
    return out;
}

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

}  // namespace detail

inline std::string serialize_config(const RunConfig& c) {
    std::ostringstream os;
    os << "# nucleo run configuration\n";
    os << "dataset_root = " << c.dataset_root << "\n";
    os << "seed = " << c.seed << "\n";
    os << "\n# optimization: SGD with momentum 0.9, 100 epochs, batch size 6,\n";
    os << "# learning rate 0.001 dropping to 0.0001, gradient norm clipped to 5.0,\n";
    os << "# weight decay 0.0001\n";
    os << "epochs = " << c.epochs << "\n";
    os << "batch_size = " << c.batch_size << "\n";
    os << "lr_initial = " << c.lr_initial << "\n";
    os << "lr_final = " << c.lr_final << "\n";
    os << "momentum = " << c.momentum << "\n";
    os << "weight_decay = " << c.weight_decay << "\n";
    os << "clip_norm = " << c.clip_norm << "\n";
    os << "\n# three training stages: heads only, then the upper backbone stages,\n";
    os << "# then all layers with the learning rate reduced by a factor of 10\n";
    os << "stage_epochs = " << c.stage_epochs[0] << ',' << c.stage_epochs[1] << ','
       << c.stage_epochs[2] << "\n";
    os << "steps_per_epoch = " << c.steps_per_epoch << "\n";
    os << "\n# split: 65 held-out test images, the rest train/val\n";
    os << "test_count = " << c.test_count << "\n";
    os << "val_fraction = " << c.val_fraction << "\n";
    os << "\n# augmentation: random crops, rotations, gaussian blur, h/v flips\n";
    os << "augment_enabled = " << (c.augment.enabled ? 1 : 0) << "\n";
    os << "crop_h = " << c.augment.crop_h << "\n";
    os << "crop_w = " << c.augment.crop_w << "\n";
    os << "rot_max_deg = " << c.augment.rot_max_deg << "\n";
    os << "blur_sigma_min = " << c.augment.blur_sigma_min << "\n";
    os << "blur_sigma_max = " << c.augment.blur_sigma_max << "\n";
    os << "flip_h_prob = " << c.augment.flip_h_prob << "\n";
    os << "flip_v_prob = " << c.augment.flip_v_prob << "\n";
    os << "\n# anchors over pyramid levels (ratios are h/w)\n";
    std::vector<double> strides(c.anchors.strides.begin(), c.anchors.strides.end());
    os << "anchor_strides = " << detail::join_doubles(strides) << "\n";
    std::vector<double> scales;
    for (const auto& s : c.anchors.scales) scales.push_back(s.at(0));
    os << "anchor_scales = " << detail::join_doubles(scales) << "\n";
    os << "anchor_ratios = " << detail::join_doubles(c.anchors.ratios) << "\n";
    os << "\n# rpn target assignment and proposal generation\n";
    os << "rpn_pos_iou = " << c.rpn.pos_iou << "\n";
    os << "rpn_neg_iou = " << c.rpn.neg_iou << "\n";
    os << "rpn_batch = " << c.rpn.batch << "\n";
    os << "rpn_pos_fraction = " << c.rpn.pos_fraction << "\n";
    os << "pre_nms_top_k = " << c.proposals.pre_nms_top_k << "\n";
    os << "proposal_nms_iou = " << c.proposals.nms_iou << "\n";
    os << "post_nms_top_k = " << c.proposals.post_nms_top_k << "\n";
    os << "\n# roi sampling for the detection heads (1:3 fg:bg)\n";
    os << "roi_batch = " << c.roi.batch << "\n";
    os << "roi_fg_fraction = " << c.roi.fg_fraction << "\n";
    os << "roi_fg_iou = " << c.roi.fg_iou << "\n";
    os << "\n# inference thresholds\n";
    os << "score_threshold = " << c.score_threshold << "\n";
    os << "det_nms_iou = " << c.det_nms_iou << "\n";
    os << "max_detections = " << c.max_detections << "\n";
    os << "mask_threshold = " << c.mask_threshold << "\n";
    if (c.channel_means_set)
        os << "channel_means = " << c.channel_means[0] << ',' << c.channel_means[1] << ','
           << c.channel_means[2] << "\n";
    return os.str();
}

inline RunConfig parse_config(const std::string& text) {
    RunConfig c;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        std::string s = detail::trim(line);
        if (s.empty() || s[0] == '#') continue;
        auto eq = s.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
        std::string key = detail::trim(s.substr(0, eq));
        std::string val = detail::trim(s.substr(eq + 1));
        try {
            if (key == "dataset_root") c.dataset_root = val;
            else if (key == "seed") c.seed = std::stoull(val);
            else if (key == "epochs") c.epochs = std::stoi(val);
            else if (key == "batch_size") c.batch_size = std::stoi(val);
            else if (key == "lr_initial") c.lr_initial = std::stod(val);
            else if (key == "lr_final") c.lr_final = std::stod(val);
            else if (key == "momentum") c.momentum = std::stod(val);
            else if (key == "weight_decay") c.weight_decay = std::stod(val);
            else if (key == "clip_norm") c.clip_norm = std::stod(val);
            else if (key == "stage_epochs") {
                auto v = detail::parse_doubles(val);
                if (v.size() != 3) throw std::invalid_argument("need 3 values");
                for (int i = 0; i < 3; ++i)
                    c.stage_epochs[static_cast<size_t>(i)] = static_cast<int>(v[static_cast<size_t>(i)]);
            } else if (key == "steps_per_epoch") c.steps_per_epoch = std::stoi(val);
            else if (key == "test_count") c.test_count = std::stoi(val);
            else if (key == "val_fraction") c.val_fraction = std::stod(val);
            else if (key == "augment_enabled") c.augment.enabled = std::stoi(val) != 0;
            else if (key == "crop_h") c.augment.crop_h = std::stoi(val);
            else if (key == "crop_w") c.augment.crop_w = std::stoi(val);
            else if (key == "rot_max_deg") c.augment.rot_max_deg = std::stod(val);
            else if (key == "blur_sigma_min") c.augment.blur_sigma_min = std::stod(val);
            else if (key == "blur_sigma_max") c.augment.blur_sigma_max = std::stod(val);
            else if (key == "flip_h_prob") c.augment.flip_h_prob = std::stod(val);
            else if (key == "flip_v_prob") c.augment.flip_v_prob = std::stod(val);
            else if (key == "anchor_strides") {
                auto v = detail::parse_doubles(val);
                c.anchors.strides.clear();
                for (double x : v) c.anchors.strides.push_back(static_cast<int>(x));
            } else if (key == "anchor_scales") {
                auto v = detail::parse_doubles(val);
                c.anchors.scales.clear();
                for (double x : v) c.anchors.scales.push_back({x});
            } else if (key == "anchor_ratios") c.anchors.ratios = detail::parse_doubles(val);
            else if (key == "rpn_pos_iou") c.rpn.pos_iou = std::stod(val);
            else if (key == "rpn_neg_iou") c.rpn.neg_iou = std::stod(val);
            else if (key == "rpn_batch") c.rpn.batch = std::stoi(val);
            else if (key == "rpn_pos_fraction") c.rpn.pos_fraction = std::stod(val);
            else if (key == "pre_nms_top_k") c.proposals.pre_nms_top_k = std::stoi(val);
            else if (key == "proposal_nms_iou") c.proposals.nms_iou = std::stod(val);
            else if (key == "post_nms_top_k") c.proposals.post_nms_top_k = std::stoi(val);
            else if (key == "roi_batch") c.roi.batch = std::stoi(val);
            else if (key == "roi_fg_fraction") c.roi.fg_fraction = std::stod(val);
            else if (key == "roi_fg_iou") c.roi.fg_iou = std::stod(val);
            else if (key == "score_threshold") c.score_threshold = std::stod(val);
            else if (key == "det_nms_iou") c.det_nms_iou = std::stod(val);
            else if (key == "max_detections") c.max_detections = std::stoi(val);
            else if (key == "mask_threshold") c.mask_threshold = std::stod(val);
            else if (key == "channel_means") {
                auto v = detail::parse_doubles(val);
                if (v.size() != 3) throw std::invalid_argument("need 3 values");
                c.channel_means = {v[0], v[1], v[2]};
                c.channel_means_set = true;
            } else
                throw std::invalid_argument("config line " + std::to_string(lineno) +
                                            ": unknown key '" + key + "'");
        } catch (const std::invalid_argument&) {
            throw;
        } catch (const std::exception&) {
            throw std::invalid_argument("config line " + std::to_string(lineno) +
                                        ": bad value for '" + key + "'");
        }
    }
    if (c.anchors.scales.size() != c.anchors.strides.size())
        throw std::invalid_argument("config: anchor_scales and anchor_strides length mismatch");
    c.validate();
    return c;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::invalid_argument("config: cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_config(ss.str());
}

}  // namespace nucleo
