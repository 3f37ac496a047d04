#pragma once

// Synthetic multi-object fixtures: a shapes dataset and a quick classifier fit.
// Used by the test suites and by the `advgen_toy` tool to produce a runnable setup
// without external datasets or pretrained weights.

#include <array>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/imgproc.hpp>
#include <torch/torch.h>

#include "advgen/common.hpp"
#include "advgen/data.hpp"
#include "advgen/surrogate.hpp"

namespace advgen::toy {

struct DatasetSpec {
    std::size_t num_images = 256;
    std::int64_t image_size = 32;
    std::uint64_t seed = 0;
    std::vector<std::string> classes{"circle", "square", "triangle"};
    bool single_label = false;  // exactly one shape per image
    std::string prefix = "img";
    double noise_std = 12.0;     // per-pixel Gaussian noise, in 0..255 units
    double min_contrast = 90.0;  // minimum RGB distance between a shape and the background
};

namespace detail {

inline void draw_shape(cv::Mat& img, const std::string& kind, cv::Point center, int radius, const cv::Scalar& color) {
    if (kind == "circle") {
        cv::circle(img, center, radius, color, cv::FILLED, cv::LINE_AA);
    } else if (kind == "square") {
        cv::rectangle(img, cv::Point(center.x - radius, center.y - radius),
                      cv::Point(center.x + radius, center.y + radius), color, cv::FILLED, cv::LINE_AA);
    } else if (kind == "triangle") {
        std::vector<cv::Point> pts{{center.x, center.y - radius},
                                   {center.x - radius, center.y + radius},
                                   {center.x + radius, center.y + radius}};
        cv::fillConvexPoly(img, pts, color, cv::LINE_AA);
    } else if (kind == "cross") {
        const int t = std::max(1, radius / 3);
        cv::rectangle(img, cv::Point(center.x - radius, center.y - t), cv::Point(center.x + radius, center.y + t),
                      color, cv::FILLED);
        cv::rectangle(img, cv::Point(center.x - t, center.y - radius), cv::Point(center.x + t, center.y + radius),
                      color, cv::FILLED);
    } else if (kind == "ring") {
        cv::circle(img, center, radius, color, std::max(1, radius / 3), cv::LINE_AA);
    } else {
        throw Error("unknown toy shape: " + kind);
    }
}

}  // namespace detail

/// Renders `num_images` PNGs into `dir/images` and writes `dir/manifest.jsonl` and
/// `dir/classes.txt`. Each image holds a non-empty random subset of the shape classes
/// (one shape when single_label) in random colors over a noisy background.
inline DatasetManifest write_dataset(const fs::path& dir, const DatasetSpec& spec) {
    if (spec.classes.empty()) throw Error("toy dataset needs at least one class");
    fs::create_directories(dir / "images");
    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const int S = static_cast<int>(spec.image_size);
    const int cells = 2;  // 2x2 placement grid keeps shapes mostly apart
    const int cell = S / cells;

    DatasetManifest manifest;
    manifest.class_list = spec.classes;
    const std::size_t C = spec.classes.size();
    for (std::size_t n = 0; n < spec.num_images; ++n) {
        std::vector<std::size_t> present;
        if (spec.single_label) {
            present.push_back(std::uniform_int_distribution<std::size_t>(0, C - 1)(rng));
        } else {
            while (present.empty()) {
                for (std::size_t c = 0; c < C; ++c) {
                    if (unit(rng) < 0.5) present.push_back(c);
                }
            }
            if (present.size() > 4) present.resize(4);
        }

        cv::Mat img(S, S, CV_8UC3);
        const cv::Scalar bg(40 + 120 * unit(rng), 40 + 120 * unit(rng), 40 + 120 * unit(rng));
        img.setTo(bg);

        std::array<int, 4> slots{0, 1, 2, 3};
        std::shuffle(slots.begin(), slots.end(), rng);
        ManifestEntry entry;
        for (std::size_t i = 0; i < present.size(); ++i) {
            const int slot = slots[i];
            const int radius = static_cast<int>(cell * (0.28 + 0.12 * unit(rng)));
            const int jitter = std::max(1, cell / 2 - radius);
            const cv::Point center((slot % cells) * cell + cell / 2 + static_cast<int>((unit(rng) - 0.5) * jitter),
                                   (slot / cells) * cell + cell / 2 + static_cast<int>((unit(rng) - 0.5) * jitter));
            cv::Scalar color;
            do {
                color = cv::Scalar(255 * unit(rng), 255 * unit(rng), 255 * unit(rng));
            } while (cv::norm(color - bg) < spec.min_contrast);
            detail::draw_shape(img, spec.classes[present[i]], center, radius, color);
            entry.labels.push_back(spec.classes[present[i]]);
        }
        std::normal_distribution<double> noise(0.0, spec.noise_std);
        for (int y = 0; y < S; ++y) {
            auto* row = img.ptr<cv::Vec3b>(y);
            for (int x = 0; x < S; ++x) {
                for (int ch = 0; ch < 3; ++ch) row[x][ch] = cv::saturate_cast<std::uint8_t>(row[x][ch] + noise(rng));
            }
        }
        std::sort(entry.labels.begin(), entry.labels.end());

        char name[64];
        std::snprintf(name, sizeof(name), "%s_%05zu.png", spec.prefix.c_str(), n);
        entry.image = dir / "images" / name;
        if (!cv::imwrite(entry.image.string(), img)) throw Error("cannot write " + entry.image.string());
        manifest.entries.push_back(std::move(entry));
    }
    write_manifest(dir / "manifest.jsonl", manifest);
    std::ofstream classes(dir / "classes.txt");
    for (const auto& c : spec.classes) classes << c << '\n';
    return manifest;
}

struct FitConfig {
    std::int64_t epochs = 15;
    double learning_rate = 2e-3;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    double weight_decay = 0.0;
};

/// Loads a whole manifest into one [N,3,S,S] tensor plus its [N,C] label matrix.
inline std::pair<torch::Tensor, torch::Tensor> load_all(const DatasetManifest& manifest, std::int64_t image_size) {
    auto seq = make_batches(manifest, manifest.size(), false, 0, image_size);
    auto batch = seq.batch(0);
    return {batch.images, batch.labels};
}

/// Fits a classifier in place (BCE for multi-label, cross-entropy for single-label).
/// Returns the final training-set accuracy (Jaccard or top-1).
inline double fit_classifier(ClassifierNet& net, const DatasetManifest& manifest, Task task, std::int64_t image_size,
                             const Normalization& norm, const FitConfig& cfg) {
    torch::manual_seed(cfg.seed);
    auto [images, labels] = load_all(manifest, image_size);
    auto inputs = norm.normalize(images);
    torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(cfg.learning_rate).weight_decay(cfg.weight_decay));
    const auto N = inputs.size(0);
    std::mt19937_64 rng(cfg.seed);
    std::vector<std::int64_t> order(static_cast<std::size_t>(N));
    std::iota(order.begin(), order.end(), 0);
    auto target_idx = labels.argmax(1);
    net->train();
    for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        auto perm = torch::tensor(order, torch::kLong);
        for (std::int64_t start = 0; start < N; start += static_cast<std::int64_t>(cfg.batch_size)) {
            auto idx = perm.slice(0, start, std::min<std::int64_t>(N, start + cfg.batch_size));
            auto logits = net->forward(inputs.index_select(0, idx)).logits;
            torch::Tensor loss = task == Task::multi_label
                                     ? torch::binary_cross_entropy_with_logits(logits, labels.index_select(0, idx))
                                     : torch::cross_entropy_loss(logits, target_idx.index_select(0, idx));
            opt.zero_grad();
            loss.backward();
            opt.step();
        }
    }
    net->eval();
    torch::NoGradGuard no_grad;
    auto logits = net->forward(inputs).logits;
    if (task == Task::multi_label) {
        auto pred = logits.ge(0.0);
        auto truth = labels.gt(0.5);
        auto inter = (pred & truth).sum(1).to(torch::kDouble);
        auto uni = (pred | truth).sum(1).to(torch::kDouble);
        return torch::where(uni > 0, inter / uni.clamp_min(1.0), torch::ones_like(uni)).mean().item<double>();
    }
    return logits.argmax(1).eq(target_idx).to(torch::kDouble).mean().item<double>();
}

/// Trains a toy classifier on `manifest` and saves it with its sidecar.
inline ClassifierHandle train_and_save(const fs::path& weights, const ArchSpec& arch, const DatasetManifest& manifest,
                                       Task task, const std::string& dataset, std::int64_t image_size,
                                       const FitConfig& fit) {
    ClassifierSidecar meta;
    meta.arch = arch;
    meta.class_list = manifest.class_list;
    meta.task = task;
    meta.dataset = dataset;
    meta.input_size = image_size;
    torch::manual_seed(fit.seed);
    ClassifierNet net(arch);
    const double acc = fit_classifier(net, manifest, task, image_size, meta.normalization, fit);
    info(weights.filename().string() + " train accuracy " + std::to_string(acc));
    save_classifier(net, meta, weights);
    return make_handle(net, weights.stem().string(), meta);
}

struct WorkspaceSpec {
    std::int64_t image_size = 32;
    std::size_t train_images = 256;
    std::size_t test_images = 64;
    std::uint64_t seed = 0;
    bool victims = true;  // also build one victim per setting 2..4
    FitConfig fit{30, 2e-3, 32, 0};
};

struct Workspace {
    fs::path root;
    fs::path config;  // ready-to-run config.json
    DatasetManifest train;
    DatasetManifest test;
    ClassifierHandle surrogate;
};

/// Builds datasets, a surrogate, optional victims and a config under `root`:
///   toy/{train,test}           3-class multi-label shapes (surrogate data)
///   toy-alt/{train,test}       different shapes, multi-label
///   toy-single/{train,test}    one shape per image, single-label
///   models/*.pt                classifiers with sidecars
inline Workspace make_workspace(const fs::path& root, const WorkspaceSpec& spec) {
    Workspace ws;
    ws.root = root;
    const auto S = spec.image_size;
    DatasetSpec ds;
    ds.image_size = S;
    auto make = [&](const std::string& name, std::vector<std::string> classes, bool single, std::uint64_t salt) {
        ds.classes = std::move(classes);
        ds.single_label = single;
        ds.num_images = spec.train_images;
        ds.seed = spec.seed * 7919 + salt;
        ds.prefix = "train";
        auto train = write_dataset(root / name / "train", ds);
        ds.num_images = spec.test_images;
        ds.seed = spec.seed * 7919 + salt + 1;
        ds.prefix = "test";
        auto test = write_dataset(root / name / "test", ds);
        return std::pair{train, test};
    };
    const std::vector<std::string> shapes{"circle", "square", "triangle"};
    std::tie(ws.train, ws.test) = make("toy", shapes, false, 1);

    ArchSpec small;
    small.arch = "toycnn";
    small.num_classes = 3;
    auto fit = spec.fit;
    ws.surrogate =
        train_and_save(root / "models" / "surrogate.pt", small, ws.train, Task::multi_label, "toy", S, fit);

    nlohmann::json victims = nlohmann::json::array();
    nlohmann::json manifests = {{"toy", (root / "toy" / "test" / "manifest.jsonl").string()}};
    if (spec.victims) {
        ArchSpec wide = small;
        wide.channels = {32, 32, 64, 64};
        fit.seed = spec.fit.seed + 1;
        train_and_save(root / "models" / "victim_wide.pt", wide, ws.train, Task::multi_label, "toy", S, fit);

        auto [alt_train, alt_test] = make("toy-alt", {"cross", "ring", "square"}, false, 11);
        train_and_save(root / "models" / "victim_alt.pt", small, alt_train, Task::multi_label, "toy-alt", S, fit);

        auto [single_train, single_test] = make("toy-single", shapes, true, 21);
        train_and_save(root / "models" / "victim_single.pt", small, single_train, Task::single_label, "toy-single",
                       S, fit);

        victims.push_back({{"id", "surrogate"}, {"weights", (root / "models" / "surrogate.pt").string()}});
        for (const auto* v : {"victim_wide", "victim_alt", "victim_single"}) {
            victims.push_back({{"id", v}, {"weights", (root / "models" / (std::string(v) + ".pt")).string()}});
        }
        manifests["toy-alt"] = (root / "toy-alt" / "test" / "manifest.jsonl").string();
        manifests["toy-single"] = (root / "toy-single" / "test" / "manifest.jsonl").string();
    }

    nlohmann::json cfg = {
        {"out", (root / "run").string()},
        {"data", {{"manifest", (root / "toy" / "train" / "manifest.jsonl").string()}, {"batch_size", 8}, {"image_size", S}}},
        {"surrogate", {{"id", "surrogate"}, {"weights", (root / "models" / "surrogate.pt").string()}}},
        {"generator", {{"base_channels", 16}, {"residual_blocks", 6}}},
        {"loss", {{"R", 8}}},
        {"train", {{"epochs", 20}, {"seed", spec.seed}}},
        {"eval", {{"victims", victims}, {"manifests", manifests}, {"batch_size", 32}}},
    };
    ws.config = root / "config.json";
    std::ofstream(ws.config) << cfg.dump(2) << '\n';
    return ws;
}

}  // namespace advgen::toy
