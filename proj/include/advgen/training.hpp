#pragma once

// Generator training against a frozen surrogate, plus generator checkpoints.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "advgen/common.hpp"
#include "advgen/data.hpp"
#include "advgen/generator.hpp"
#include "advgen/losses.hpp"
#include "advgen/surrogate.hpp"

namespace advgen {

struct TrainConfig {
    double learning_rate = 1e-4;
    double beta1 = 0.5;
    double beta2 = 0.999;
    std::size_t batch_size = 32;
    std::int64_t epochs = 20;
    bool shuffle = true;
    std::uint64_t seed = 0;
    std::optional<std::uint64_t> data_seed;  // shuffle seed; follows `seed` when unset
    std::int64_t image_size = kDefaultImageSize;
    AttackMode mode;
    PerturbationBudget budget;
    LossConfig loss;
    GeneratorSpec generator;
    double grad_clip = 0.0;  // max global grad norm; 0 disables
    bool deterministic = true;
    fs::path checkpoint_dir = "checkpoints";
    std::optional<fs::path> resume_from;
    std::string config_hash;  // filled from training fields when empty

    void validate() const {
        if (!(learning_rate > 0.0)) throw Error("learning rate must be positive", "train.learning_rate");
        if (epochs < 1) throw Error("epochs must be >= 1", "train.epochs");
        if (batch_size < 1) throw Error("batch_size must be >= 1", "data.batch_size");
        if (!(budget.epsilon >= 0.0)) throw Error("epsilon must be non-negative", "attack.epsilon");
        if (mode.is_targeted() && !mode.target) throw Error("targeted mode requires attack.target", "attack.target");
        loss.lpcl.validate();
    }
};

/// Hash over the fields that influence the learned weights.
inline std::string training_config_hash(const TrainConfig& cfg) {
    nlohmann::json j = {{"lr", cfg.learning_rate},
                        {"betas", {cfg.beta1, cfg.beta2}},
                        {"batch_size", cfg.batch_size},
                        {"epochs", cfg.epochs},
                        {"shuffle", cfg.shuffle},
                        {"seed", cfg.seed},
                        {"data_seed", cfg.data_seed ? nlohmann::json(*cfg.data_seed) : nlohmann::json()},
                        {"image_size", cfg.image_size},
                        {"targeted", cfg.mode.is_targeted()},
                        {"target", cfg.mode.target ? cfg.mode.target->bits : std::vector<std::uint8_t>{}},
                        {"epsilon", cfg.budget.epsilon},
                        {"tau", cfg.loss.lpcl.tau},
                        {"R", cfg.loss.lpcl.num_positives},
                        {"queries_per_layer", cfg.loss.lpcl.queries_per_layer},
                        {"use_global", cfg.loss.use_global},
                        {"use_lpcl", cfg.loss.use_lpcl},
                        {"generator", cfg.generator},
                        {"grad_clip", cfg.grad_clip}};
    Fnv1a h;
    h.update(j.dump());
    return hex64(h.digest());
}

// ---------------------------------------------------------------------------
// Checkpoints

struct CheckpointMeta {
    std::int64_t epoch = 0;
    std::int64_t step = 0;
    std::string config_hash;
    std::string surrogate_id;
    double epsilon = 10.0;
    std::int64_t num_positives = 128;
    std::int64_t num_layers = 0;
    std::uint64_t seed = 0;
    std::int64_t image_size = kDefaultImageSize;
    GeneratorSpec generator;
    Normalization normalization;
    std::string weights_checksum;
};

inline nlohmann::json to_json(const CheckpointMeta& m) {
    return {{"epoch", m.epoch},
            {"step", m.step},
            {"config_hash", m.config_hash},
            {"surrogate_id", m.surrogate_id},
            {"epsilon", m.epsilon},
            {"R", m.num_positives},
            {"L", m.num_layers},
            {"seed", m.seed},
            {"image_size", m.image_size},
            {"generator", m.generator},
            {"normalization", m.normalization},
            {"weights_checksum", m.weights_checksum}};
}

inline CheckpointMeta checkpoint_meta_from_json(const nlohmann::json& j) {
    CheckpointMeta m;
    j.at("epoch").get_to(m.epoch);
    if (j.contains("step")) j.at("step").get_to(m.step);
    j.at("config_hash").get_to(m.config_hash);
    j.at("surrogate_id").get_to(m.surrogate_id);
    j.at("epsilon").get_to(m.epsilon);
    j.at("R").get_to(m.num_positives);
    j.at("L").get_to(m.num_layers);
    j.at("seed").get_to(m.seed);
    if (j.contains("image_size")) j.at("image_size").get_to(m.image_size);
    m.generator = j.at("generator").get<GeneratorSpec>();
    if (j.contains("normalization")) m.normalization = j.at("normalization").get<Normalization>();
    if (j.contains("weights_checksum")) j.at("weights_checksum").get_to(m.weights_checksum);
    return m;
}

inline fs::path optimizer_state_path(const fs::path& checkpoint) {
    return fs::path(checkpoint.string() + ".optim");
}

/// Writes the generator weights and a `<path>.json` sidecar. Returns `path`.
inline fs::path save_checkpoint(const GeneratorNet& net, CheckpointMeta meta, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    meta.weights_checksum = module_checksum(*net);
    torch::save(net, path.string());
    std::ofstream out(sidecar_path(path));
    if (!out) throw Error("cannot write checkpoint sidecar: " + sidecar_path(path).string());
    out << to_json(meta).dump(2) << '\n';
    return path;
}

struct LoadedGenerator {
    GeneratorNet net{nullptr};
    CheckpointMeta meta;
};

/// Loads a generator checkpoint. A config-hash mismatch against `expected_hash` only warns.
inline LoadedGenerator load_checkpoint(const fs::path& path, const std::optional<std::string>& expected_hash = {}) {
    if (!fs::exists(path)) throw Error("checkpoint not found: " + path.string(), "attack.checkpoint");
    const auto side = sidecar_path(path);
    LoadedGenerator out;
    try {
        std::ifstream in(side);
        if (!in) throw Error("checkpoint sidecar not found: " + side.string(), "attack.checkpoint");
        out.meta = checkpoint_meta_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
        throw Error("malformed checkpoint sidecar " + side.string() + ": " + e.what(), "attack.checkpoint");
    }
    out.net = GeneratorNet(out.meta.generator);
    try {
        load_module_strict(out.net, path.string());
    } catch (const c10::Error& e) {
        throw Error("corrupted checkpoint " + path.string() + ": " + e.what_without_backtrace(), "attack.checkpoint");
    }
    if (!out.meta.weights_checksum.empty() && module_checksum(*out.net) != out.meta.weights_checksum) {
        throw Error("corrupted checkpoint " + path.string() + ": weight checksum mismatch", "attack.checkpoint");
    }
    if (expected_hash && *expected_hash != out.meta.config_hash) {
        warn("checkpoint " + path.string() + " was trained with config hash " + out.meta.config_hash +
             ", requested " + *expected_hash);
    }
    out.net->eval();
    return out;
}

// ---------------------------------------------------------------------------
// Training

struct StepDiagnostics {
    std::int64_t step = 0;
    std::int64_t epoch = 0;
    double global = 0.0;
    double lpcl = 0.0;
    double total = 0.0;
    double max_delta = 0.0;  // max |x_tilde - x| in [0,1] pixel units
    bool skipped = false;
};

/// Per-step rng for patch sampling, independent of how many steps ran before in
/// this process (needed for resume equivalence).
inline std::mt19937_64 step_rng(std::uint64_t seed, std::int64_t step) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(step >> 32), 0x9e3779b9u};
    return std::mt19937_64(seq);
}

inline torch::optim::Adam make_optimizer(GeneratorNet& net, const TrainConfig& cfg) {
    return torch::optim::Adam(net->parameters(), torch::optim::AdamOptions(cfg.learning_rate)
                                                     .betas({cfg.beta1, cfg.beta2})
                                                     .weight_decay(0.0));
}

/// One optimization step: clean features, perturb, perturbed features, objective, Adam.
/// Non-finite objectives skip the update.
inline StepDiagnostics train_step(GeneratorNet& net, torch::optim::Adam& optimizer, const ClassifierHandle& surrogate,
                                  const torch::Tensor& images, const TrainConfig& cfg, std::mt19937_64& rng) {
    if (!surrogate.frozen) throw Error("surrogate must be frozen before training");
    net->train();
    FeatureMapSet clean;
    {
        torch::NoGradGuard no_grad;
        clean = extract_features(surrogate, images);
    }
    auto x_tilde = perturb(net, images, cfg.budget, surrogate.normalization);
    auto [logits, pert] = forward_with_features(surrogate, x_tilde);
    auto terms = combined_objective(clean, pert, logits, cfg.mode, cfg.loss, rng);

    StepDiagnostics d;
    d.global = terms.global;
    d.lpcl = terms.lpcl;
    d.total = terms.loss.item<double>();
    d.max_delta = (x_tilde.detach() - images).abs().max().item<double>();
    optimizer.zero_grad();
    if (!std::isfinite(d.total)) {
        d.skipped = true;
        warn("non-finite loss, skipping update");
        return d;
    }
    terms.loss.backward();
    if (cfg.grad_clip > 0.0) torch::nn::utils::clip_grad_norm_(net->parameters(), cfg.grad_clip);
    optimizer.step();
    return d;
}

struct EpochSummary {
    std::int64_t epoch = 0;
    double mean_global = 0.0;
    double mean_lpcl = 0.0;
    double mean_total = 0.0;
    double max_delta = 0.0;
    std::int64_t skipped = 0;
};

struct TrainResult {
    fs::path final_checkpoint;
    std::vector<fs::path> epoch_checkpoints;
    fs::path log_path;
    std::vector<EpochSummary> epochs;
    GeneratorNet net{nullptr};
};

inline fs::path epoch_checkpoint_path(const fs::path& dir, std::int64_t epoch) {
    return dir / ("generator_epoch" + std::to_string(epoch) + ".pt");
}

inline fs::path final_checkpoint_path(const fs::path& dir) { return dir / "generator_final.pt"; }

/// Trains a generator for cfg.epochs epochs (or the remainder after `resume_from`),
/// writing a checkpoint per epoch, a final alias and a CSV loss log.
inline TrainResult train_generator(const DatasetManifest& manifest, const ClassifierHandle& surrogate,
                                   TrainConfig cfg) {
    cfg.validate();
    if (cfg.config_hash.empty()) cfg.config_hash = training_config_hash(cfg);
    if (cfg.deterministic) enable_deterministic_mode();
    if (!surrogate.frozen) throw Error("surrogate must be frozen before training");
    if (surrogate.input_size != cfg.image_size) {
        throw Error("surrogate expects " + std::to_string(surrogate.input_size) + "px inputs but data.image_size is " +
                        std::to_string(cfg.image_size),
                    "data.image_size");
    }
    const auto unlabeled = std::count_if(manifest.entries.begin(), manifest.entries.end(),
                                         [](const ManifestEntry& e) { return e.labels.empty(); });
    if (unlabeled > 0) {
        warn(std::to_string(unlabeled) + " training images have no labels; kept, since the loss does not read them");
    }
    fs::create_directories(cfg.checkpoint_dir);

    TrainResult result;
    torch::manual_seed(cfg.seed);
    GeneratorNet net(cfg.generator);
    auto optimizer = make_optimizer(net, cfg);
    std::int64_t start_epoch = 1;
    std::int64_t step = 0;

    if (cfg.resume_from) {
        auto loaded = load_checkpoint(*cfg.resume_from, cfg.config_hash);
        if (!(loaded.meta.generator == cfg.generator)) throw Error("resume checkpoint has a different generator spec");
        net = loaded.net;
        optimizer = make_optimizer(net, cfg);
        const auto opt_path = optimizer_state_path(*cfg.resume_from);
        if (!fs::exists(opt_path)) throw Error("optimizer state missing for resume: " + opt_path.string());
        torch::load(optimizer, opt_path.string());
        start_epoch = loaded.meta.epoch + 1;
        step = loaded.meta.step;
        info("resuming from epoch " + std::to_string(loaded.meta.epoch));
    }

    result.log_path = cfg.checkpoint_dir / "train_log.csv";
    const bool append = cfg.resume_from.has_value() && fs::exists(result.log_path);
    std::ofstream log_csv(result.log_path, append ? std::ios::app : std::ios::trunc);
    if (!append) log_csv << "step,epoch,L_g,L_lpcl,total,max_delta\n";
    log_csv.precision(10);

    CheckpointMeta meta;
    meta.config_hash = cfg.config_hash;
    meta.surrogate_id = surrogate.id;
    meta.epsilon = cfg.budget.epsilon;
    meta.num_positives = cfg.loss.lpcl.num_positives;
    meta.num_layers = static_cast<std::int64_t>(surrogate.num_taps());
    meta.seed = cfg.seed;
    meta.image_size = cfg.image_size;
    meta.generator = cfg.generator;
    meta.normalization = surrogate.normalization;

    for (std::int64_t epoch = start_epoch; epoch <= cfg.epochs; ++epoch) {
        const auto batches = make_batches(manifest, cfg.batch_size, cfg.shuffle,
                                          cfg.data_seed.value_or(cfg.seed) * 1000003ULL + static_cast<std::uint64_t>(epoch),
                                          cfg.image_size);
        EpochSummary summary;
        summary.epoch = epoch;
        std::int64_t counted = 0;
        for (auto batch : batches) {
            ++step;
            auto rng = step_rng(cfg.seed, step);
            auto d = train_step(net, optimizer, surrogate, batch.images, cfg, rng);
            d.step = step;
            d.epoch = epoch;
            log_csv << d.step << ',' << d.epoch << ',' << d.global << ',' << d.lpcl << ',' << d.total << ','
                    << d.max_delta << '\n';
            summary.max_delta = std::max(summary.max_delta, d.max_delta);
            if (d.skipped) {
                ++summary.skipped;
                continue;
            }
            summary.mean_global += d.global;
            summary.mean_lpcl += d.lpcl;
            summary.mean_total += d.total;
            ++counted;
        }
        if (counted > 0) {
            summary.mean_global /= static_cast<double>(counted);
            summary.mean_lpcl /= static_cast<double>(counted);
            summary.mean_total /= static_cast<double>(counted);
        }
        log_csv.flush();
        result.epochs.push_back(summary);

        meta.epoch = epoch;
        meta.step = step;
        auto path = save_checkpoint(net, meta, epoch_checkpoint_path(cfg.checkpoint_dir, epoch));
        torch::save(optimizer, optimizer_state_path(path).string());
        result.epoch_checkpoints.push_back(path);
    }

    result.final_checkpoint = save_checkpoint(net, meta, final_checkpoint_path(cfg.checkpoint_dir));
    torch::save(optimizer, optimizer_state_path(result.final_checkpoint).string());
    net->eval();
    result.net = net;
    return result;
}

}  // namespace advgen
