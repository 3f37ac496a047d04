#pragma once

// Command-line front end: train / attack / eval / visualize. Kept in a header so the
// test suite can drive it in-process; tools/advgen.cpp only forwards main().

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <opencv2/imgproc.hpp>

#include "advgen/advgen.hpp"
#include "advgen/config.hpp"

namespace advgen::cli {

enum ExitCode : int { ok = 0, failure = 1, config_error = 2 };

/// One-line JSON error record on stderr, e.g.
///   {"error":"config","key":"surrogate.weights","message":"..."}
inline void report_error(std::ostream& err, const std::string& kind, const std::string& key, const std::string& msg) {
    json j = {{"error", kind}, {"message", msg}};
    if (!key.empty()) j["key"] = key;
    err << j.dump() << '\n';
}

struct Context {
    RunConfig config;
    std::ostream& out;
    std::ostream& err;
};

// ---------------------------------------------------------------------------
// Helpers

inline ClassifierHandle load_model(const ModelSpec& spec, const std::string& key) {
    try {
        return load_classifier(spec);
    } catch (const Error& e) {
        throw Error(e.what(), e.key().empty() ? key : key + "." + e.key());
    }
}

inline ClassifierHandle load_surrogate(const RunConfig& cfg) { return load_model(surrogate_spec(cfg), "surrogate"); }

inline fs::path checkpoint_from(const RunConfig& cfg) {
    if (auto p = cfg.get<std::string>("attack.checkpoint"); !p.empty()) return p;
    const auto dir = cfg.get<std::string>("train.checkpoint_dir");
    return final_checkpoint_path(dir.empty() ? cfg.out_dir() / "checkpoints" : fs::path(dir));
}

inline LoadedGenerator load_generator(const RunConfig& cfg, const std::vector<std::string>& class_list) {
    std::optional<std::string> expected;
    try {
        expected = training_config_hash(train_config_from(cfg, class_list));
    } catch (const Error&) {
        // the hash comparison is advisory; an incomplete train section just skips it
    }
    return load_checkpoint(checkpoint_from(cfg), expected);
}

inline bool is_image_file(const fs::path& p) {
    static const std::set<std::string> exts{".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".tif", ".tiff"};
    auto e = p.extension().string();
    std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
    return exts.count(e) > 0;
}

/// A directory of images (sorted by name) or a JSONL manifest.
inline std::vector<fs::path> collect_inputs(const fs::path& input) {
    if (!fs::exists(input)) throw Error("input not found: " + input.string(), "input");
    std::vector<fs::path> files;
    if (fs::is_directory(input)) {
        for (const auto& e : fs::directory_iterator(input)) {
            if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
        }
        std::sort(files.begin(), files.end());
    } else if (input.extension() == ".jsonl") {
        for (const auto& e : load_manifest(input).entries) files.push_back(e.image);
    } else {
        files.push_back(input);
    }
    if (files.empty()) warn("no images under " + input.string());
    return files;
}

/// Jet-colored CAM blended over the image; both [3,H,W]/[H,W] in [0,1]. Returns BGR 8-bit.
inline cv::Mat cam_overlay(const torch::Tensor& image, const torch::Tensor& cam, double alpha) {
    cv::Mat base = to_mat(image);
    auto q = cam.detach().clamp(0.0, 1.0).mul(255.0).round().to(torch::kByte).contiguous();
    cv::Mat gray(static_cast<int>(q.size(0)), static_cast<int>(q.size(1)), CV_8UC1, q.data_ptr());
    cv::Mat heat;
    cv::applyColorMap(gray, heat, cv::COLORMAP_JET);
    cv::Mat blended;
    cv::addWeighted(heat, alpha, base, 1.0 - alpha, 0.0, blended);
    return blended;
}

// ---------------------------------------------------------------------------
// Commands

inline int cmd_train(Context& ctx) {
    const auto& cfg = ctx.config;
    auto surrogate = load_surrogate(cfg);
    const auto manifest_path = cfg.get<std::string>("data.manifest");
    if (manifest_path.empty()) throw Error("missing training manifest", "data.manifest");
    std::optional<fs::path> classes;
    if (auto c = cfg.get<std::string>("data.classes"); !c.empty()) classes = c;
    DatasetManifest manifest;
    try {
        manifest = with_class_list(load_manifest(manifest_path, classes), surrogate.class_list);
    } catch (const Error& e) {
        throw Error(e.what(), e.key().empty() ? "data.manifest" : e.key());
    }
    auto tcfg = train_config_from(cfg, surrogate.class_list);
    if (tcfg.image_size != surrogate.input_size) {
        throw Error("data.image_size " + std::to_string(tcfg.image_size) + " differs from the surrogate input size " +
                        std::to_string(surrogate.input_size),
                    "data.image_size");
    }
    cfg.write_snapshot(tcfg.checkpoint_dir / "train_config.json");
    const auto before = surrogate.checksum();
    auto result = train_generator(manifest, surrogate, tcfg);
    if (surrogate.checksum() != before) throw Error("surrogate weights changed during training");
    if (!result.epochs.empty()) {
        const auto& last = result.epochs.back();
        ctx.out << "epoch " << last.epoch << " L_g " << last.mean_global << " L_lpcl " << last.mean_lpcl << " total "
                << last.mean_total << " skipped " << last.skipped << '\n';
    }
    ctx.out << "checkpoint " << result.final_checkpoint.string() << '\n';
    ctx.out << "log " << result.log_path.string() << '\n';
    return ok;
}

inline int cmd_attack(Context& ctx, const fs::path& input, fs::path output) {
    const auto& cfg = ctx.config;
    if (output.empty()) output = cfg.out_dir() / "attack";
    auto budget = budget_from(cfg);
    std::vector<std::string> classes;
    if (!cfg.get<std::string>("surrogate.weights").empty()) classes = load_surrogate(cfg).class_list;
    auto gen = load_generator(cfg, classes);
    const auto files = collect_inputs(input);
    if (output == input) throw Error("attack output must differ from the input", "output");
    fs::create_directories(output);
    cfg.write_snapshot(output / "attack_config.json");

    std::ofstream csv(output / "deltas.csv");
    csv << "image,output,max_delta_255\n";
    csv << std::setprecision(17);
    torch::NoGradGuard no_grad;
    std::size_t written = 0;
    for (const auto& f : files) {
        torch::Tensor x;
        try {
            x = load_image(f, gen.meta.image_size).pixels;
        } catch (const Error& e) {
            warn(std::string("skipping unreadable input: ") + e.what());
            continue;
        }
        auto x_tilde = perturb(gen.net, x, budget, gen.meta.normalization);
        // measured before 8-bit quantization of the written PNG
        const double delta = (x_tilde - x).abs().max().item<double>() * 255.0;
        const auto dst = output / (f.stem().string() + ".png");
        write_png(dst, x_tilde);
        csv << detail::csv_escape(f.string()) << ',' << detail::csv_escape(dst.string()) << ',' << delta << '\n';
        ++written;
    }
    ctx.out << "wrote " << written << " images to " << output.string() << '\n';
    return ok;
}

inline int cmd_eval(Context& ctx) {
    const auto& cfg = ctx.config;
    auto budget = budget_from(cfg);
    auto surrogate = load_surrogate(cfg);
    auto gen = load_generator(cfg, surrogate.class_list);
    auto victims = victim_entries(cfg);
    if (victims.empty()) throw Error("no victims configured", "eval.victims");
    const auto out_dir = cfg.out_dir();
    fs::create_directories(out_dir);
    cfg.write_snapshot(out_dir / "eval_config.json");

    EvalOptions opts;
    opts.batch_size = cfg.get<std::size_t>("eval.batch_size");
    const auto mode = attack_mode_from(cfg, surrogate.class_list);
    if (mode.is_targeted()) opts.target = mode.target;
    SurrogateInfo info{surrogate.id, surrogate.dataset, surrogate.task};
    auto report = run_setting_suite(gen, info, victims, eval_manifests(cfg), budget, opts);
    write_report_csv(report, out_dir / "report.csv");
    const auto table = format_report_table(report);
    std::ofstream(out_dir / "report.txt") << table;
    ctx.out << table;
    if (report.succeeded() == 0) {
        report_error(ctx.err, "runtime", "eval.victims", "every victim failed");
        return failure;
    }
    return ok;
}

inline int cmd_visualize(Context& ctx, const std::vector<fs::path>& images, fs::path output) {
    const auto& cfg = ctx.config;
    if (images.empty()) throw Error("visualize needs at least one image", "images");
    if (output.empty()) output = cfg.out_dir() / "cam_grid.png";
    auto budget = budget_from(cfg);
    auto surrogate = load_surrogate(cfg);
    auto gen = load_generator(cfg, surrogate.class_list);
    const auto class_index = cfg.get<std::int64_t>("visualize.class_index");
    const auto alpha = cfg.get<double>("visualize.overlay_alpha");
    if (class_index >= surrogate.num_classes) throw Error("class index out of range", "visualize.class_index");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error("overlay alpha must be in [0,1]", "visualize.overlay_alpha");

    const auto S = surrogate.input_size;
    cv::Mat grid(static_cast<int>(4 * S), static_cast<int>(images.size() * S), CV_8UC3, cv::Scalar::all(0));
    torch::NoGradGuard no_grad;
    for (std::size_t n = 0; n < images.size(); ++n) {
        auto x = load_image(images[n], gen.meta.image_size).pixels;
        auto x_tilde = perturb(gen.net, x, budget, gen.meta.normalization);
        x = resample(x.unsqueeze(0), S).squeeze(0);
        x_tilde = resample(x_tilde.unsqueeze(0), S).squeeze(0);
        // the class is picked on the clean image and reused for the perturbed one
        auto cls = class_index >= 0 ? class_index : forward_logits(surrogate, x.unsqueeze(0))[0].argmax().item<std::int64_t>();
        const std::array<cv::Mat, 4> tiles{to_mat(x), cam_overlay(x, compute_cam(surrogate, x, cls), alpha), to_mat(x_tilde),
                                           cam_overlay(x_tilde, compute_cam(surrogate, x_tilde, cls), alpha)};
        for (int r = 0; r < 4; ++r) {
            tiles[r].copyTo(grid(cv::Rect(static_cast<int>(n * S), static_cast<int>(r * S), static_cast<int>(S),
                                          static_cast<int>(S))));
        }
    }
    if (output.has_parent_path()) fs::create_directories(output.parent_path());
    if (!cv::imwrite(output.string(), grid)) throw Error("cannot write " + output.string());
    cfg.write_snapshot(fs::path(output.string() + ".config.json"));
    ctx.out << "grid " << output.string() << '\n';
    return ok;
}

// ---------------------------------------------------------------------------
// Entry point

/// Parses argv and runs one subcommand. Overrides take the form --section.key=value
/// after the subcommand name.
inline int run(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Generative adversarial perturbations with local patch contrast"};
    app.require_subcommand(1);
    app.allow_extras();
    app.set_help_all_flag("--help-all");

    std::optional<std::string> config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out_dir;
    app.add_option("--config", config_path, "JSON config file");
    app.add_option("--seed", seed, "seed for data order, patch sampling and init");
    app.add_option("--out", out_dir, "output directory");

    auto* train = app.add_subcommand("train", "train a generator against the surrogate");
    auto* attack = app.add_subcommand("attack", "perturb a directory of images");
    auto* eval = app.add_subcommand("eval", "evaluate a generator on the configured victims");
    auto* visualize = app.add_subcommand("visualize", "CAM grid of clean and perturbed images");

    std::string input, attack_out, vis_out, checkpoint;
    std::vector<std::string> vis_images;
    attack->add_option("--input", input, "image directory, image file or manifest")->required();
    attack->add_option("--output", attack_out, "output directory");
    visualize->add_option("images", vis_images, "images to show")->required();
    visualize->add_option("--output", vis_out, "grid PNG path");
    for (auto* sub : {attack, eval, visualize}) sub->add_option("--checkpoint", checkpoint, "generator checkpoint");
    for (auto* sub : {train, attack, eval, visualize}) {
        sub->allow_extras();
        sub->fallthrough();
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        report_error(err, "usage", "", e.what());
        return config_error;
    }

    auto* sub = app.get_subcommands().front();
    try {
        auto cfg = RunConfig::from_file(config_path ? std::optional<fs::path>(*config_path) : std::nullopt);
        cfg.apply_env();
        auto extras = app.remaining();
        for (const auto& e : sub->remaining()) {
            if (std::find(extras.begin(), extras.end(), e) == extras.end()) extras.push_back(e);
        }
        for (const auto& extra : extras) {
            if (extra.rfind("--", 0) != 0 || extra.find('=') == std::string::npos) {
                throw Error("overrides take the form --section.key=value: " + extra, extra);
            }
            const auto eq = extra.find('=');
            cfg.set(extra.substr(2, eq - 2), extra.substr(eq + 1));
        }
        if (seed) cfg.set("train.seed", std::to_string(*seed));
        if (out_dir) cfg.set("out", *out_dir);
        if (!checkpoint.empty()) cfg.set("attack.checkpoint", checkpoint);

        Context ctx{cfg, out, err};
        const auto name = sub->get_name();
        if (name == "train") return cmd_train(ctx);
        if (name == "attack") return cmd_attack(ctx, input, attack_out);
        if (name == "eval") return cmd_eval(ctx);
        std::vector<fs::path> imgs(vis_images.begin(), vis_images.end());
        return cmd_visualize(ctx, imgs, vis_out);
    } catch (const Error& e) {
        if (!e.key().empty()) {
            report_error(err, "config", e.key(), e.what());
            return config_error;
        }
        report_error(err, "runtime", "", e.what());
        return failure;
    } catch (const std::exception& e) {
        report_error(err, "runtime", "", e.what());
        return failure;
    }
}

}  // namespace advgen::cli
