#pragma once

// Prediction rules, accuracy metrics, attack-setting classification and the
// victim sweep that produces result tables.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "advgen/common.hpp"
#include "advgen/data.hpp"
#include "advgen/generator.hpp"
#include "advgen/losses.hpp"
#include "advgen/surrogate.hpp"
#include "advgen/training.hpp"

namespace advgen {

// ---------------------------------------------------------------------------
// Predictions and metrics

/// Multi-label rule: class c is predicted iff sigmoid(logit_c) >= 0.5.
inline LabelVector predict_multilabel(const torch::Tensor& logits_row) {
    auto row = logits_row.detach().to(torch::kDouble).contiguous();
    if (row.dim() != 1) throw Error("expected a single logits row");
    auto probs = torch::sigmoid(row);
    auto acc = probs.accessor<double, 1>();
    LabelVector out(static_cast<std::size_t>(row.size(0)));
    for (std::int64_t c = 0; c < row.size(0); ++c) out.bits[static_cast<std::size_t>(c)] = acc[c] >= 0.5 ? 1 : 0;
    return out;
}

/// Single-label rule: argmax, lowest index on ties.
inline std::int64_t predict_class(const torch::Tensor& logits_row) {
    auto row = logits_row.detach().to(torch::kDouble).contiguous();
    if (row.dim() != 1 || row.size(0) == 0) throw Error("expected a non-empty logits row");
    auto acc = row.accessor<double, 1>();
    std::int64_t best = 0;
    for (std::int64_t c = 1; c < row.size(0); ++c) {
        if (acc[c] > acc[best]) best = c;
    }
    return best;
}

/// Mean per-sample Jaccard index |Y & Y'| / |Y | Y'|. A sample with both sets empty scores 1.
inline double multilabel_accuracy(const std::vector<LabelVector>& truths, const std::vector<LabelVector>& preds) {
    if (truths.size() != preds.size()) throw Error("multilabel_accuracy: length mismatch");
    if (truths.empty()) return 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < truths.size(); ++i) {
        const auto& t = truths[i].bits;
        const auto& p = preds[i].bits;
        if (t.size() != p.size()) throw Error("multilabel_accuracy: label vector length mismatch");
        std::size_t inter = 0;
        std::size_t uni = 0;
        for (std::size_t c = 0; c < t.size(); ++c) {
            inter += (t[c] && p[c]) ? 1 : 0;
            uni += (t[c] || p[c]) ? 1 : 0;
        }
        total += uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
    }
    return total / static_cast<double>(truths.size());
}

inline double top1_accuracy(const std::vector<std::int64_t>& truths, const std::vector<std::int64_t>& preds) {
    if (truths.size() != preds.size()) throw Error("top1_accuracy: length mismatch");
    if (truths.empty()) return 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < truths.size(); ++i) hits += truths[i] == preds[i] ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(truths.size());
}

// ---------------------------------------------------------------------------
// Attack settings

struct SettingQuery {
    std::string surrogate_id;
    std::string train_dataset;
    Task surrogate_task = Task::multi_label;
    std::string victim_id;
    std::string victim_dataset;
    Task victim_task = Task::multi_label;
};

/// 1 white-box, 2 unseen model, 3 unseen dataset, 4 unseen task. The most severe
/// unseen attribute decides.
inline int classify_setting(const SettingQuery& q) {
    if (q.victim_task != q.surrogate_task) return 4;
    if (q.victim_dataset != q.train_dataset) return 3;
    if (q.victim_id != q.surrogate_id) return 2;
    return 1;
}

// ---------------------------------------------------------------------------
// Single victim

struct AttackMetrics {
    std::string metric;  // "multilabel_accuracy" or "top1_accuracy"
    double clean = 0.0;
    double perturbed = 0.0;
    std::size_t samples = 0;
};

struct EvalOptions {
    std::size_t batch_size = 32;
    std::optional<LabelVector> target;  // targeted attacks score against the target
};

inline torch::Tensor resample(const torch::Tensor& images, std::int64_t size) {
    if (images.size(2) == size && images.size(3) == size) return images;
    namespace F = torch::nn::functional;
    return F::interpolate(images, F::InterpolateFuncOptions()
                                      .size(std::vector<std::int64_t>{size, size})
                                      .mode(torch::kBilinear)
                                      .align_corners(false))
        .clamp(0.0, 1.0);
}

/// Clean and perturbed metric of one victim on one test manifest. Perturbations are made at
/// the generator's resolution and bilinearly resampled to the victim's after projection.
inline AttackMetrics evaluate_attack(const LoadedGenerator& generator, const ClassifierHandle& victim,
                                     const DatasetManifest& manifest, const PerturbationBudget& budget,
                                     const EvalOptions& opts = {}) {
    if (victim.class_list != manifest.class_list) {
        throw Error("class-list mismatch between victim " + victim.id + " and the test manifest");
    }
    if (opts.target && victim.task != Task::multi_label) throw Error("targeted evaluation needs a multi-label victim");
    budget.radius();
    torch::NoGradGuard no_grad;
    auto net = generator.net;
    net->eval();

    std::vector<LabelVector> truth_sets, clean_sets, pert_sets;
    std::vector<std::int64_t> truth_idx, clean_idx, pert_idx;
    for (auto batch : make_batches(manifest, opts.batch_size, false, 0, generator.meta.image_size)) {
        auto x_tilde = perturb(net, batch.images, budget, generator.meta.normalization);
        auto clean_logits = forward_logits(victim, resample(batch.images, victim.input_size));
        auto pert_logits = forward_logits(victim, resample(x_tilde, victim.input_size));
        for (std::int64_t b = 0; b < batch.size(); ++b) {
            const auto& entry = manifest.entries[batch.indices[static_cast<std::size_t>(b)]];
            if (victim.task == Task::multi_label) {
                truth_sets.push_back(opts.target ? *opts.target : encode_labels(entry.labels, manifest.class_list));
                clean_sets.push_back(predict_multilabel(clean_logits[b]));
                pert_sets.push_back(predict_multilabel(pert_logits[b]));
            } else {
                if (entry.labels.size() != 1) {
                    throw Error("single-label victim needs exactly one label per image: " + entry.image.string());
                }
                auto it = std::find(manifest.class_list.begin(), manifest.class_list.end(), entry.labels.front());
                truth_idx.push_back(it - manifest.class_list.begin());
                clean_idx.push_back(predict_class(clean_logits[b]));
                pert_idx.push_back(predict_class(pert_logits[b]));
            }
        }
    }
    AttackMetrics m;
    if (victim.task == Task::multi_label) {
        m.metric = "multilabel_accuracy";
        m.clean = multilabel_accuracy(truth_sets, clean_sets);
        m.perturbed = multilabel_accuracy(truth_sets, pert_sets);
        m.samples = truth_sets.size();
    } else {
        m.metric = "top1_accuracy";
        m.clean = top1_accuracy(truth_idx, clean_idx);
        m.perturbed = top1_accuracy(truth_idx, pert_idx);
        m.samples = truth_idx.size();
    }
    return m;
}

// ---------------------------------------------------------------------------
// Reports

struct EvalRow {
    std::string victim;
    std::string dataset;
    Task task = Task::multi_label;
    int setting = 1;
    std::string metric;
    double clean = 0.0;
    double perturbed = 0.0;
    double epsilon = 0.0;
    std::size_t samples = 0;
    std::string checkpoint;
    std::string error;  // non-empty when the row failed

    bool ok() const { return error.empty(); }
    double drop() const { return clean - perturbed; }
};

struct SettingSummary {
    int setting = 0;
    std::size_t rows = 0;
    double mean_clean = 0.0;
    double mean_perturbed = 0.0;
};

struct EvalReport {
    std::vector<EvalRow> rows;

    std::size_t succeeded() const {
        return static_cast<std::size_t>(std::count_if(rows.begin(), rows.end(), [](const auto& r) { return r.ok(); }));
    }

    /// Arithmetic means of successful rows, per setting, ascending.
    std::vector<SettingSummary> summary() const {
        std::map<int, SettingSummary> by;
        for (const auto& r : rows) {
            if (!r.ok()) continue;
            auto& s = by[r.setting];
            s.setting = r.setting;
            ++s.rows;
            s.mean_clean += r.clean;
            s.mean_perturbed += r.perturbed;
        }
        std::vector<SettingSummary> out;
        for (auto& [k, s] : by) {
            s.mean_clean /= static_cast<double>(s.rows);
            s.mean_perturbed /= static_cast<double>(s.rows);
            out.push_back(s);
        }
        return out;
    }
};

namespace detail {
inline std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

inline std::vector<std::string> csv_split(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            fields.push_back(std::move(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    fields.push_back(std::move(cur));
    return fields;
}
}  // namespace detail

inline constexpr const char* kReportHeader =
    "victim,dataset,task,setting,metric,clean,perturbed,drop,epsilon,samples,checkpoint,error";

inline void write_report_csv(const EvalReport& report, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw Error("cannot write report: " + path.string());
    out << std::setprecision(17) << kReportHeader << '\n';
    for (const auto& r : report.rows) {
        out << detail::csv_escape(r.victim) << ',' << detail::csv_escape(r.dataset) << ',' << to_string(r.task) << ','
            << r.setting << ',' << r.metric << ',' << r.clean << ',' << r.perturbed << ',' << r.drop() << ','
            << r.epsilon << ',' << r.samples << ',' << r.checkpoint << ',' << detail::csv_escape(r.error) << '\n';
    }
}

inline EvalReport read_report_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot read report: " + path.string());
    std::string line;
    std::getline(in, line);
    if (line != kReportHeader) throw Error("unexpected report header in " + path.string());
    EvalReport report;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto f = detail::csv_split(line);
        if (f.size() != 12) throw Error("malformed report row in " + path.string());
        EvalRow r;
        r.victim = f[0];
        r.dataset = f[1];
        r.task = parse_task(f[2]);
        r.setting = std::stoi(f[3]);
        r.metric = f[4];
        r.clean = std::stod(f[5]);
        r.perturbed = std::stod(f[6]);
        r.epsilon = std::stod(f[8]);
        r.samples = std::stoul(f[9]);
        r.checkpoint = f[10];
        r.error = f[11];
        report.rows.push_back(std::move(r));
    }
    return report;
}

/// Aligned text table: one block per setting with a mean row, accuracies in percent.
inline std::string format_report_table(const EvalReport& report) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2);
    const auto line = std::string(96, '-');
    os << std::left << std::setw(9) << "Setting" << std::setw(22) << "Victim" << std::setw(14) << "Dataset"
       << std::setw(14) << "Task" << std::right << std::setw(10) << "Clean" << std::setw(12) << "Perturbed"
       << std::setw(10) << "Drop" << "  Note\n"
       << line << '\n';
    for (const auto& s : report.summary()) {
        for (const auto& r : report.rows) {
            if (!r.ok() || r.setting != s.setting) continue;
            os << std::left << std::setw(9) << r.setting << std::setw(22) << r.victim << std::setw(14) << r.dataset
               << std::setw(14) << to_string(r.task) << std::right << std::setw(10) << 100.0 * r.clean
               << std::setw(12) << 100.0 * r.perturbed << std::setw(10) << 100.0 * r.drop() << '\n';
        }
        os << std::left << std::setw(9) << s.setting << std::setw(50) << "Mean result" << std::right << std::setw(10)
           << 100.0 * s.mean_clean << std::setw(12) << 100.0 * s.mean_perturbed << std::setw(10)
           << 100.0 * (s.mean_clean - s.mean_perturbed) << '\n'
           << line << '\n';
    }
    for (const auto& r : report.rows) {
        if (r.ok()) continue;
        os << std::left << std::setw(9) << "-" << std::setw(22) << r.victim << std::setw(14) << r.dataset
           << "  failed: " << r.error << '\n';
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Sweep

/// Re-indexes a manifest against a classifier's class list. Every label must be known to it.
inline DatasetManifest with_class_list(DatasetManifest manifest, const std::vector<std::string>& class_list) {
    for (const auto& e : manifest.entries) {
        for (const auto& label : e.labels) {
            if (std::find(class_list.begin(), class_list.end(), label) == class_list.end()) {
                throw Error("class-list mismatch: label '" + label + "' is unknown to the classifier");
            }
        }
    }
    manifest.class_list = class_list;
    return manifest;
}

struct VictimEntry {
    ModelSpec model;  // model.dataset names the manifest to test on
};

struct SurrogateInfo {
    std::string id;
    std::string train_dataset;
    Task task = Task::multi_label;
};

/// Evaluates every victim on the manifest registered for its dataset. Row failures are
/// recorded and the sweep continues.
inline EvalReport run_setting_suite(const LoadedGenerator& generator, const SurrogateInfo& surrogate,
                                    const std::vector<VictimEntry>& victims,
                                    const std::map<std::string, fs::path>& manifests,
                                    const PerturbationBudget& budget, const EvalOptions& opts = {}) {
    if (victims.empty()) throw Error("no victims configured", "eval.victims");
    EvalReport report;
    for (const auto& v : victims) {
        EvalRow row;
        row.victim = v.model.id.empty() ? v.model.weights.stem().string() : v.model.id;
        row.dataset = v.model.dataset;
        row.task = v.model.task.value_or(Task::multi_label);
        row.epsilon = budget.epsilon;
        row.checkpoint = generator.meta.weights_checksum;
        try {
            auto handle = load_classifier(v.model);
            row.victim = handle.id;
            row.task = handle.task;
            row.dataset = handle.dataset;
            row.setting = classify_setting({surrogate.id, surrogate.train_dataset, surrogate.task, handle.id,
                                            handle.dataset, handle.task});
            auto it = manifests.find(handle.dataset);
            if (it == manifests.end()) throw Error("no test manifest for dataset '" + handle.dataset + "'");
            auto manifest = with_class_list(load_manifest(it->second), handle.class_list);
            auto m = evaluate_attack(generator, handle, manifest, budget, opts);
            row.metric = m.metric;
            row.clean = m.clean;
            row.perturbed = m.perturbed;
            row.samples = m.samples;
        } catch (const std::exception& e) {
            row.error = e.what();
            warn("victim " + row.victim + " failed: " + row.error);
        }
        report.rows.push_back(std::move(row));
    }
    return report;
}

}  // namespace advgen
