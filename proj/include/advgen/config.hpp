#pragma once

// Run configuration: a JSON document with data/surrogate/generator/attack/loss/
// train/eval/visualize sections. Values are layered as
//   defaults < config file < ADVGEN_* environment variables < --key=value flags
// and unknown keys are rejected.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "advgen/common.hpp"
#include "advgen/data.hpp"
#include "advgen/evaluation.hpp"
#include "advgen/generator.hpp"
#include "advgen/losses.hpp"
#include "advgen/surrogate.hpp"
#include "advgen/training.hpp"

extern char** environ;

namespace advgen {

using nlohmann::json;

inline constexpr const char* kEnvPrefix = "ADVGEN_";

/// Schema of one classifier entry (surrogate or victim). Empty values defer to the
/// weights sidecar.
inline json model_defaults() {
    return {{"id", ""},      {"arch", ""},    {"weights", ""},     {"taps", json::array()},
            {"task", ""},    {"dataset", ""}, {"input_size", 0},   {"mean", json::array()},
            {"std", json::array()}};
}

inline json default_config() {
    return {
        {"out", "runs/default"},
        {"data",
         {{"manifest", ""}, {"classes", ""}, {"batch_size", 32}, {"seed", nullptr}, {"shuffle", true},
          {"image_size", kDefaultImageSize}}},
        {"surrogate", model_defaults()},
        {"generator", {{"residual_blocks", 6}, {"base_channels", 64}}},
        {"attack",
         {{"epsilon", PerturbationBudget::kUntargetedDefault},
          {"mode", "untargeted"},
          {"target", json::array()},
          {"checkpoint", ""}}},
        {"loss", {{"tau", 0.07}, {"R", 128}, {"queries_per_layer", 1}, {"use_global", true}, {"use_lpcl", true}}},
        {"train",
         {{"learning_rate", 1e-4},
          {"beta1", 0.5},
          {"beta2", 0.999},
          {"epochs", 20},
          {"seed", 0},
          {"checkpoint_dir", ""},
          {"deterministic", true},
          {"grad_clip", 0.0},
          {"resume", ""}}},
        {"eval", {{"victims", json::array()}, {"manifests", json::object()}, {"batch_size", 32}}},
        {"visualize", {{"class_index", -1}, {"overlay_alpha", 0.5}}},
    };
}

namespace detail {

inline bool same_kind(const json& expected, const json& value) {
    if (expected.is_number_integer() || expected.is_number_unsigned()) return value.is_number_integer();
    if (expected.is_number_float()) return value.is_number();
    if (expected.is_boolean()) return value.is_boolean();
    if (expected.is_string()) return value.is_string();
    if (expected.is_array()) return value.is_array();
    if (expected.is_object()) return value.is_object();
    return true;
}

inline void validate_model(const json& entry, const std::string& where) {
    if (!entry.is_object()) throw Error(where + " must be an object", where);
    const auto schema = model_defaults();
    for (auto it = entry.begin(); it != entry.end(); ++it) {
        const auto key = where + "." + it.key();
        if (!schema.contains(it.key())) throw Error("unknown config key: " + key, key);
        if (!same_kind(schema[it.key()], it.value())) throw Error("wrong type for config key: " + key, key);
    }
}

inline void validate_against(const json& schema, const json& value, const std::string& prefix) {
    for (auto it = value.begin(); it != value.end(); ++it) {
        const auto key = prefix.empty() ? it.key() : prefix + "." + it.key();
        if (!schema.contains(it.key())) throw Error("unknown config key: " + key, key);
        const auto& expected = schema[it.key()];
        if (!same_kind(expected, it.value())) throw Error("wrong type for config key: " + key, key);
        if (key == "surrogate") {
            validate_model(it.value(), key);
        } else if (key == "eval.victims") {
            for (std::size_t i = 0; i < it.value().size(); ++i) {
                validate_model(it.value()[i], key + "[" + std::to_string(i) + "]");
            }
        } else if (key == "eval.manifests") {
            for (auto m = it.value().begin(); m != it.value().end(); ++m) {
                if (!m.value().is_string()) throw Error("manifest paths must be strings: " + key + "." + m.key(), key);
            }
        } else if (expected.is_object()) {
            validate_against(expected, it.value(), key);
        }
    }
}

// recursive assign; unlike a JSON merge patch, null is a value rather than a deletion
inline void deep_merge(json& into, const json& from) {
    for (auto it = from.begin(); it != from.end(); ++it) {
        if (it.value().is_object() && into.contains(it.key()) && into[it.key()].is_object() &&
            !into[it.key()].empty()) {
            deep_merge(into[it.key()], it.value());
        } else {
            into[it.key()] = it.value();
        }
    }
}

inline std::vector<std::string> split(const std::string& s, const std::string& sep) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (true) {
        const auto pos = s.find(sep, start);
        parts.push_back(s.substr(start, pos - start));
        if (pos == std::string::npos) break;
        start = pos + sep.size();
    }
    return parts;
}

}  // namespace detail

class RunConfig {
public:
    RunConfig() : doc_(default_config()) {}

    /// Builds a config from defaults and an optional file, validating every key.
    static RunConfig from_file(const std::optional<fs::path>& path) {
        RunConfig cfg;
        if (path) {
            std::ifstream in(*path);
            if (!in) throw Error("config file not found: " + path->string(), "config");
            json user;
            try {
                user = json::parse(in);
            } catch (const json::parse_error& e) {
                throw Error("malformed config " + path->string() + ": " + e.what(), "config");
            }
            cfg.merge(user);
        }
        return cfg;
    }

    /// Deep-merges `user` over the current values after validating it.
    void merge(const json& user) {
        if (!user.is_object()) throw Error("config root must be an object", "config");
        detail::validate_against(default_config(), user, "");
        detail::deep_merge(doc_, user);
    }

    /// Sets a dotted key from command-line/env text. The text is read as JSON when it
    /// parses, otherwise as a string; comma-separated text fills array keys.
    void set(const std::string& dotted, const std::string& text) {
        const auto parts = detail::split(dotted, ".");
        json schema = default_config();
        for (const auto& p : parts) {
            if (!schema.is_object() || !schema.contains(p)) throw Error("unknown config key: " + dotted, dotted);
            schema = schema[p];
        }
        json value;
        try {
            value = json::parse(text);
        } catch (const json::parse_error&) {
            value = text;
        }
        if (schema.is_string() && !value.is_string()) value = text;
        if (schema.is_array() && value.is_string()) {
            value = json::array();
            if (!text.empty()) {
                for (const auto& item : detail::split(text, ",")) value.push_back(item);
            }
        }
        json patch = value;
        for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
        merge(patch);
    }

    /// Applies ADVGEN_<SECTION>__<KEY>=value variables, e.g. ADVGEN_TRAIN__EPOCHS=1.
    void apply_env(char** env = environ) {
        if (!env) return;
        const std::string prefix = kEnvPrefix;
        for (char** e = env; *e; ++e) {
            const std::string entry = *e;
            if (entry.rfind(prefix, 0) != 0) continue;
            const auto eq = entry.find('=');
            if (eq == std::string::npos) continue;
            auto name = entry.substr(prefix.size(), eq - prefix.size());
            for (auto& ch : name) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
            // variable names are case-insensitive; recover the key's spelling (e.g. loss.R)
            std::string dotted;
            json schema = default_config();
            for (auto part : detail::split(name, "__")) {
                if (schema.is_object()) {
                    for (auto it = schema.begin(); it != schema.end(); ++it) {
                        auto lower = it.key();
                        for (auto& ch : lower) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
                        if (lower == part) {
                            part = it.key();
                            break;
                        }
                    }
                    schema = schema.contains(part) ? schema[part] : json();
                }
                dotted += (dotted.empty() ? "" : ".") + part;
            }
            set(dotted, entry.substr(eq + 1));
        }
    }

    const json& doc() const { return doc_; }
    const json& at(const std::string& dotted) const {
        const json* node = &doc_;
        for (const auto& p : detail::split(dotted, ".")) node = &node->at(p);
        return *node;
    }
    template <typename T>
    T get(const std::string& dotted) const {
        return at(dotted).get<T>();
    }

    fs::path out_dir() const { return get<std::string>("out"); }

    /// Writes the fully resolved document; feeding it back via --config reproduces the run.
    fs::path write_snapshot(const fs::path& path) const {
        if (path.has_parent_path()) fs::create_directories(path.parent_path());
        std::ofstream out(path);
        if (!out) throw Error("cannot write config snapshot: " + path.string());
        out << doc_.dump(2) << '\n';
        return path;
    }

    std::string hash() const {
        Fnv1a h;
        h.update(doc_.dump());
        return hex64(h.digest());
    }

private:
    json doc_;
};

// ---------------------------------------------------------------------------
// Typed views

inline ModelSpec model_spec_from(const json& j, const std::string& key) {
    ModelSpec spec;
    spec.id = j.value("id", "");
    spec.arch = j.value("arch", "");
    spec.weights = j.value("weights", "");
    if (spec.weights.empty()) throw Error("missing weights path: " + key + ".weights", key + ".weights");
    spec.taps = j.value("taps", std::vector<std::string>{});
    if (const auto task = j.value("task", ""); !task.empty()) spec.task = parse_task(task);
    spec.dataset = j.value("dataset", "");
    if (const auto size = j.value("input_size", 0); size > 0) spec.input_size = size;
    const auto mean = j.value("mean", std::vector<float>{});
    const auto stdv = j.value("std", std::vector<float>{});
    if (!mean.empty() || !stdv.empty()) {
        if (mean.size() != 3 || stdv.size() != 3) throw Error(key + ".mean/std need three values each", key + ".mean");
        Normalization n;
        std::copy(mean.begin(), mean.end(), n.mean.begin());
        std::copy(stdv.begin(), stdv.end(), n.std.begin());
        spec.normalization = n;
    }
    return spec;
}

inline ModelSpec surrogate_spec(const RunConfig& cfg) { return model_spec_from(cfg.at("surrogate"), "surrogate"); }

inline std::vector<VictimEntry> victim_entries(const RunConfig& cfg) {
    std::vector<VictimEntry> out;
    const auto& victims = cfg.at("eval.victims");
    for (std::size_t i = 0; i < victims.size(); ++i) {
        out.push_back({model_spec_from(victims[i], "eval.victims[" + std::to_string(i) + "]")});
    }
    return out;
}

inline std::map<std::string, fs::path> eval_manifests(const RunConfig& cfg) {
    std::map<std::string, fs::path> out;
    for (const auto& [name, path] : cfg.at("eval.manifests").items()) out[name] = path.get<std::string>();
    return out;
}

inline PerturbationBudget budget_from(const RunConfig& cfg) {
    PerturbationBudget b{cfg.get<double>("attack.epsilon")};
    b.radius();
    return b;
}

inline AttackMode attack_mode_from(const RunConfig& cfg, const std::vector<std::string>& class_list) {
    const auto mode = cfg.get<std::string>("attack.mode");
    if (mode == "untargeted") return AttackMode::untargeted();
    if (mode != "targeted") throw Error("attack.mode must be 'untargeted' or 'targeted'", "attack.mode");
    const auto target = cfg.get<std::vector<std::string>>("attack.target");
    if (target.empty()) throw Error("targeted mode needs attack.target class names", "attack.target");
    try {
        return AttackMode::targeted(encode_labels(target, class_list));
    } catch (const Error& e) {
        throw Error(std::string(e.what()), "attack.target");
    }
}

inline LossConfig loss_config_from(const RunConfig& cfg) {
    LossConfig l;
    l.lpcl.tau = cfg.get<double>("loss.tau");
    l.lpcl.num_positives = cfg.get<std::int64_t>("loss.R");
    l.lpcl.queries_per_layer = cfg.get<std::int64_t>("loss.queries_per_layer");
    l.use_global = cfg.get<bool>("loss.use_global");
    l.use_lpcl = cfg.get<bool>("loss.use_lpcl");
    l.lpcl.validate();
    return l;
}

inline GeneratorSpec generator_spec_from(const RunConfig& cfg) {
    return {cfg.get<std::int64_t>("generator.base_channels"), cfg.get<std::int64_t>("generator.residual_blocks")};
}

inline TrainConfig train_config_from(const RunConfig& cfg, const std::vector<std::string>& class_list) {
    TrainConfig t;
    t.learning_rate = cfg.get<double>("train.learning_rate");
    t.beta1 = cfg.get<double>("train.beta1");
    t.beta2 = cfg.get<double>("train.beta2");
    t.epochs = cfg.get<std::int64_t>("train.epochs");
    t.seed = cfg.get<std::uint64_t>("train.seed");
    if (const auto& ds = cfg.at("data.seed"); !ds.is_null()) {
        if (!ds.is_number_unsigned() && !(ds.is_number_integer() && ds.get<std::int64_t>() >= 0)) {
            throw Error("data.seed must be a non-negative integer or null", "data.seed");
        }
        t.data_seed = ds.get<std::uint64_t>();
    }
    t.batch_size = cfg.get<std::size_t>("data.batch_size");
    t.shuffle = cfg.get<bool>("data.shuffle");
    t.image_size = cfg.get<std::int64_t>("data.image_size");
    t.mode = attack_mode_from(cfg, class_list);
    t.budget = budget_from(cfg);
    t.loss = loss_config_from(cfg);
    t.generator = generator_spec_from(cfg);
    t.grad_clip = cfg.get<double>("train.grad_clip");
    t.deterministic = cfg.get<bool>("train.deterministic");
    const auto dir = cfg.get<std::string>("train.checkpoint_dir");
    t.checkpoint_dir = dir.empty() ? cfg.out_dir() / "checkpoints" : fs::path(dir);
    if (const auto resume = cfg.get<std::string>("train.resume"); !resume.empty()) t.resume_from = resume;
    t.validate();
    return t;
}

}  // namespace advgen
