#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "nucleo/config.hpp"
#include "nucleo/data.hpp"
#include "nucleo/eval.hpp"
#include "nucleo/gradcheck.hpp"
#include "nucleo/image.hpp"
#include "nucleo/model.hpp"
#include "nucleo/pipeline.hpp"

namespace fs = std::filesystem;
using namespace nucleo;

namespace {

RunConfig load_run_config(const std::string& config_path, const std::string& dataset_root,
                          std::uint64_t seed, bool seed_given) {
    RunConfig cfg;
    if (!config_path.empty()) cfg = load_config(config_path);
    if (!dataset_root.empty()) cfg.dataset_root = dataset_root;
    if (seed_given) cfg.seed = seed;
    return cfg;
}

std::vector<std::string> split_ids(const RunConfig& cfg, const std::string& which) {
    auto ids = discover_dataset(cfg.dataset_root);
    if (which == "all") return ids;
    int test_count = std::min<int>(cfg.test_count, static_cast<int>(ids.size()));
    auto sp = split_dataset(ids, cfg.seed, test_count, cfg.val_fraction);
    if (which == "train") return sp.train_ids;
    if (which == "val") return sp.val_ids;
    if (which == "test") return sp.test_ids;
    throw std::invalid_argument("unknown split '" + which + "' (train|val|test|all)");
}

std::array<double, 3> resolve_means(const RunConfig& cfg) {
    if (cfg.channel_means_set) return cfg.channel_means;
    std::cerr << "note: channel_means missing from config; computing from the training split\n";
    auto ids = discover_dataset(cfg.dataset_root);
    int test_count = std::min<int>(cfg.test_count, static_cast<int>(ids.size()));
    auto sp = split_dataset(ids, cfg.seed, test_count, cfg.val_fraction);
    return compute_channel_means(cfg.dataset_root, sp.train_ids);
}

void print_reference_results() {
    std::cout << "reference single-model results on this dataset (GPU-scale, pretrained "
                 "ResNet FPN backbones; not expected from this desk-scale build):\n"
              << "  ResNet-50-FPN   AP 56.06   Mask Average IoU 66.98\n"
              << "  ResNet-101-FPN  AP 59.40   Mask Average IoU 70.54\n";
}

int cmd_gradcheck(const std::string& corrupt) {
    auto rows = run_gradcheck_suite(5, corrupt);
    std::cout << "op                       max_rel_err   result\n";
    bool all_pass = true;
    for (const auto& r : rows) {
        std::printf("%-24s %.3e     %s\n", r.op.c_str(), r.max_rel_err,
                    r.pass ? "pass" : "FAIL");
        all_pass = all_pass && r.pass;
    }
    if (!all_pass) {
        std::cerr << "gradient certification failed\n";
        return 3;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"nucleo: desk-scale Mask-RCNN nucleus instance segmentation"};
    app.require_subcommand(1);

    std::string config_path, dataset_root, checkpoint, out_path, rle_path, split_name = "val";
    std::uint64_t seed = 42;
    bool seed_given = false;
    auto add_common = [&](CLI::App* c, bool with_checkpoint) {
        c->add_option("--config", config_path, "run configuration file");
        c->add_option("--dataset-root", dataset_root, "dataset directory");
        c->add_option("--seed", seed, "random seed")->each([&](const std::string&) {
            seed_given = true;
        });
        c->add_option("--out", out_path, "output path");
        if (with_checkpoint) c->add_option("--checkpoint", checkpoint, "model checkpoint file");
    };

    auto* synth = app.add_subcommand("make-synth", "generate a synthetic nucleus dataset");
    int synth_n = 2, synth_size = 96;
    add_common(synth, false);
    synth->add_option("--n", synth_n, "number of images");
    synth->add_option("--size", synth_size, "image side length");

    auto* split_cmd = app.add_subcommand("split", "print the deterministic dataset split");
    add_common(split_cmd, false);

    auto* train_cmd = app.add_subcommand("train", "run the three-stage training schedule");
    bool dump_config = false;
    add_common(train_cmd, false);
    train_cmd->add_flag("--dump-config", dump_config, "print the default configuration and exit");

    auto* infer_cmd = app.add_subcommand("infer", "detect nuclei in images");
    std::vector<std::string> image_paths;
    add_common(infer_cmd, true);
    infer_cmd->add_option("images", image_paths, "input PNG files");

    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint or RLE submission");
    add_common(eval_cmd, true);
    eval_cmd->add_option("--rle", rle_path, "score an RLE submission file instead of a checkpoint");
    eval_cmd->add_option("--split", split_name, "train|val|test|all");

    auto* export_cmd = app.add_subcommand("export-rle", "write submission-format RLE lines");
    bool export_gt = false;
    add_common(export_cmd, true);
    export_cmd->add_option("--split", split_name, "train|val|test|all");
    export_cmd->add_flag("--gt", export_gt, "export ground-truth masks instead of predictions");

    auto* grad_cmd = app.add_subcommand("gradcheck", "certify every op against finite differences");
    std::string corrupt;
    grad_cmd->add_option("--corrupt", corrupt, "corrupt this op's backward pass (self-test)");

    try {
        app.parse(argc, argv);

        if (synth->parsed()) {
            if (out_path.empty()) throw std::invalid_argument("make-synth requires --out");
            SynthConfig sc;
            sc.image_size = synth_size;
            make_synthetic_dataset(out_path, synth_n, seed, sc);
            std::cout << "wrote " << synth_n << " synthetic samples to " << out_path << "\n";
            return 0;
        }

        if (split_cmd->parsed()) {
            RunConfig cfg = load_run_config(config_path, dataset_root, seed, seed_given);
            auto ids = discover_dataset(cfg.dataset_root);
            int test_count = std::min<int>(cfg.test_count, static_cast<int>(ids.size()));
            auto sp = split_dataset(ids, cfg.seed, test_count, cfg.val_fraction);
            std::cout << "discovered " << ids.size() << " samples: train " << sp.train_ids.size()
                      << ", val " << sp.val_ids.size() << ", test " << sp.test_ids.size() << "\n";
            if (!out_path.empty()) {
                fs::create_directories(out_path);
                auto dump = [&](const std::string& name, const std::vector<std::string>& v) {
                    std::ofstream f(fs::path(out_path) / name);
                    for (const auto& id : v) f << id << "\n";
                };
                dump("train.txt", sp.train_ids);
                dump("val.txt", sp.val_ids);
                dump("test.txt", sp.test_ids);
            }
            return 0;
        }

        if (train_cmd->parsed()) {
            RunConfig cfg = load_run_config(config_path, dataset_root, seed, seed_given);
            if (dump_config) {
                std::cout << serialize_config(cfg);
                return 0;
            }
            if (out_path.empty()) throw std::invalid_argument("train requires --out");
            if (cfg.dataset_root.empty())
                throw std::invalid_argument("train requires --dataset-root or a config value");
            auto ids = discover_dataset(cfg.dataset_root);
            int test_count = std::min<int>(cfg.test_count, static_cast<int>(ids.size()));
            auto sp = split_dataset(ids, cfg.seed, test_count, cfg.val_fraction);
            MaskRcnn<float> model(cfg.model_config(), cfg.seed);
            std::cout << "training on " << sp.train_ids.size() << " images (" << sp.val_ids.size()
                      << " val, " << sp.test_ids.size() << " test), "
                      << model.parameter_count() << " parameters\n";
            auto result = train(model, cfg, sp.train_ids, sp.val_ids, out_path);
            std::cout << "done: " << result.log.steps.size() << " steps; final total loss "
                      << result.log.steps.back().loss.total << "\n";
            return 0;
        }

        if (infer_cmd->parsed()) {
            if (checkpoint.empty()) throw std::invalid_argument("infer requires --checkpoint");
            if (image_paths.empty()) throw std::invalid_argument("infer requires image paths");
            RunConfig cfg = load_run_config(config_path, dataset_root, seed, seed_given);
            MaskRcnn<float> model(cfg.model_config(), cfg.seed);
            model.load(checkpoint);
            std::array<double, 3> means =
                cfg.channel_means_set ? cfg.channel_means : std::array<double, 3>{0, 0, 0};
            if (!cfg.channel_means_set)
                std::cerr << "note: config has no channel_means; using zeros\n";
            fs::path outdir = out_path.empty() ? fs::path(".") : fs::path(out_path);
            fs::create_directories(outdir);
            std::ofstream rle_out(outdir / "predictions.rle");
            bool any_failed = false;
            for (const auto& path : image_paths) {
                ImageU8 img;
                try {
                    img = read_png(path);
                } catch (const DataError& e) {
                    std::cerr << "skipping " << path << ": " << e.what() << "\n";
                    any_failed = true;
                    continue;
                }
                std::string stem = fs::path(path).stem().string();
                auto dets = detect_original_space(model, image_to_tensor(img), means,
                                                  cfg.detect_config());
                std::cout << stem << ": " << dets.size() << " detections\n";
                std::vector<Mask> masks;
                for (const auto& d : dets) {
                    std::cout << "  box " << d.box.x1 << ' ' << d.box.y1 << ' ' << d.box.x2 << ' '
                              << d.box.y2 << "  score " << d.score << "\n";
                    if (!d.mask.empty_mask()) {
                        rle_out << format_rle_line(stem, rle_encode(d.mask).runs) << "\n";
                        masks.push_back(d.mask);
                    }
                }
                draw_mask_contours(img, masks);
                write_png((outdir / (stem + "_overlay.png")).string(), img);
            }
            return any_failed ? 2 : 0;
        }

        if (eval_cmd->parsed()) {
            RunConfig cfg = load_run_config(config_path, dataset_root, seed, seed_given);
            if (cfg.dataset_root.empty())
                throw std::invalid_argument("eval requires --dataset-root or a config value");
            auto ids = split_ids(cfg, split_name);
            std::vector<ImageEval> evals;
            if (!rle_path.empty()) {
                evals = rle_predictions(rle_path, cfg.dataset_root, ids);
            } else {
                if (checkpoint.empty())
                    throw std::invalid_argument("eval requires --checkpoint or --rle");
                MaskRcnn<float> model(cfg.model_config(), cfg.seed);
                model.load(checkpoint);
                evals = predict_split(model, cfg.dataset_root, ids, resolve_means(cfg),
                                      cfg.detect_config());
            }
            EvalReport rep = evaluate_dataset(evals);
            std::cout << "split: " << split_name << " (" << ids.size() << " images)\n";
            std::cout << "AP: " << format_metric(rep.ap) << "\n";
            std::cout << "Mask Average IoU: " << format_metric(rep.mean_mask_iou) << "\n";
            print_reference_results();
            if (!out_path.empty()) {
                std::ofstream f(out_path);
                f << report_to_csv(rep);
                std::cout << "report written to " << out_path << "\n";
            }
            return 0;
        }

        if (export_cmd->parsed()) {
            RunConfig cfg = load_run_config(config_path, dataset_root, seed, seed_given);
            if (out_path.empty()) throw std::invalid_argument("export-rle requires --out");
            auto ids = split_ids(cfg, split_name);
            std::ofstream out(out_path);
            if (!out) throw DataError("cannot open output " + out_path);
            if (export_gt) {
                for (const auto& id : ids) {
                    Sample s = load_sample(fs::path(cfg.dataset_root) / id);
                    for (const auto& m : s.instances)
                        out << format_rle_line(id, rle_encode(m).runs) << "\n";
                }
            } else {
                if (checkpoint.empty())
                    throw std::invalid_argument("export-rle requires --checkpoint (or --gt)");
                MaskRcnn<float> model(cfg.model_config(), cfg.seed);
                model.load(checkpoint);
                auto means = resolve_means(cfg);
                for (const auto& id : ids) {
                    Sample s = load_sample(fs::path(cfg.dataset_root) / id);
                    for (auto& d :
                         detect_original_space(model, s.image, means, cfg.detect_config()))
                        if (!d.mask.empty_mask())
                            out << format_rle_line(id, rle_encode(d.mask).runs) << "\n";
                }
            }
            std::cout << "RLE lines written to " << out_path << "\n";
            return 0;
        }

        if (grad_cmd->parsed()) return cmd_gradcheck(corrupt);

        return 1;
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
