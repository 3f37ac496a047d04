#pragma once

// Global feature loss, local patch-contrasting loss and the combined objective.

#include <cmath>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "advgen/common.hpp"
#include "advgen/data.hpp"
#include "advgen/surrogate.hpp"

namespace advgen {

struct LpclConfig {
    double tau = 0.07;
    std::int64_t num_positives = 128;  // R
    std::int64_t queries_per_layer = 1;

    void validate() const {
        if (!(tau > 0.0)) throw Error("tau must be positive", "loss.tau");
        if (num_positives < 1) throw Error("R must be >= 1", "loss.R");
        if (queries_per_layer < 1) throw Error("queries_per_layer must be >= 1", "loss.queries_per_layer");
    }
};

struct LossConfig {
    LpclConfig lpcl;
    bool use_global = true;
    bool use_lpcl = true;
};

// ---------------------------------------------------------------------------
// Similarity

/// Dot product over tau. Inputs are not normalized.
inline double similarity(std::span<const double> a, std::span<const double> b, double tau) {
    if (a.size() != b.size()) throw Error("similarity: length mismatch");
    if (!(tau > 0.0)) throw Error("similarity: tau must be positive");
    double dot = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
    return dot / tau;
}

/// Batched similarity along the last dimension.
inline torch::Tensor similarity(const torch::Tensor& a, const torch::Tensor& b, double tau) {
    if (a.sizes() != b.sizes()) throw Error("similarity: shape mismatch");
    if (!(tau > 0.0)) throw Error("similarity: tau must be positive");
    return (a * b).sum(-1) / tau;
}

// ---------------------------------------------------------------------------
// Patch sampling

/// `count` distinct locations drawn uniformly from {0..v-1} minus `excluded` (pass -1 to
/// exclude nothing), by a partial Fisher-Yates shuffle.
inline std::vector<std::int64_t> sample_without_replacement(std::int64_t v, std::int64_t excluded, std::int64_t count,
                                                            std::mt19937_64& rng) {
    const std::int64_t pool_size = excluded >= 0 ? v - 1 : v;
    std::vector<std::int64_t> pool(static_cast<std::size_t>(pool_size));
    for (std::int64_t i = 0; i < pool_size; ++i) {
        pool[static_cast<std::size_t>(i)] = (excluded >= 0 && i >= excluded) ? i + 1 : i;
    }
    for (std::int64_t i = 0; i < count; ++i) {
        std::uniform_int_distribution<std::int64_t> pick(i, pool_size - 1);
        std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(pick(rng))]);
    }
    pool.resize(static_cast<std::size_t>(count));
    return pool;
}

/// R distinct positive locations, none equal to the query location q.
inline std::vector<std::int64_t> sample_locations(std::int64_t v, std::int64_t q, std::int64_t R,
                                                  std::mt19937_64& rng) {
    if (q < 0 || q >= v) throw Error("query location " + std::to_string(q) + " outside [0, " + std::to_string(v) + ")");
    if (R < 1) throw Error("R must be >= 1");
    if (R > v - 1) {
        throw Error("cannot sample R=" + std::to_string(R) + " positives from a feature map with v_k=" +
                    std::to_string(v) + " locations (need R <= v_k - 1)");
    }
    return sample_without_replacement(v, q, R, rng);
}

/// One query slot of one layer, batched over images. Row b belongs to image b.
struct PatchTriplet {
    std::size_t layer = 0;
    torch::Tensor query_locations;     // [B] int64
    torch::Tensor positive_locations;  // [B, R] int64
    torch::Tensor query;               // [B, c]      from perturbed features
    torch::Tensor negative;            // [B, c]      clean features at the query location
    torch::Tensor positives;           // [B, R, c]   clean features elsewhere

    std::int64_t num_positives() const { return positives.size(1); }

    /// Negative first, then the positives: [B, R+1, c].
    torch::Tensor keys() const { return torch::cat({negative.unsqueeze(1), positives}, 1); }
};

inline void check_matching(const FeatureMapSet& clean, const FeatureMapSet& pert) {
    if (clean.num_layers() != pert.num_layers() || clean.num_layers() == 0) {
        throw Error("feature sets must have the same non-zero number of layers");
    }
    for (std::size_t k = 0; k < clean.num_layers(); ++k) {
        if (clean.maps[k].sizes() != pert.maps[k].sizes()) {
            throw Error("feature shape mismatch at layer " + std::to_string(k));
        }
    }
}

/// Draws queries_per_layer distinct query locations per image and layer, and R positives
/// for each. Queries come from `pert`; negatives and positives from `clean`.
inline std::vector<PatchTriplet> build_patch_triplets(const FeatureMapSet& clean, const FeatureMapSet& pert,
                                                      const LpclConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    check_matching(clean, pert);
    std::vector<PatchTriplet> triplets;
    for (std::size_t k = 0; k < clean.num_layers(); ++k) {
        const auto D = clean.flat(k);
        const auto D_hat = pert.flat(k);
        const auto B = D.size(0);
        const auto v = D.size(1);
        if (cfg.queries_per_layer > v) {
            throw Error("queries_per_layer=" + std::to_string(cfg.queries_per_layer) + " exceeds v_k=" +
                        std::to_string(v) + " at layer " + std::to_string(k));
        }
        if (cfg.num_positives > v - 1) {
            throw Error("cannot sample R=" + std::to_string(cfg.num_positives) + " positives at layer " +
                        std::to_string(k) + " with v_k=" + std::to_string(v) + " locations (need R <= v_k - 1)");
        }
        const auto Q = cfg.queries_per_layer;
        const auto R = cfg.num_positives;
        auto qloc = torch::empty({Q, B}, torch::kLong);
        auto ploc = torch::empty({Q, B, R}, torch::kLong);
        auto qa = qloc.accessor<std::int64_t, 2>();
        auto pa = ploc.accessor<std::int64_t, 3>();
        for (std::int64_t b = 0; b < B; ++b) {
            const auto queries = sample_without_replacement(v, -1, Q, rng);
            for (std::int64_t j = 0; j < Q; ++j) {
                const auto q = queries[static_cast<std::size_t>(j)];
                qa[j][b] = q;
                const auto pos = sample_locations(v, q, R, rng);
                for (std::int64_t r = 0; r < R; ++r) pa[j][b][r] = pos[static_cast<std::size_t>(r)];
            }
        }
        const auto rows = torch::arange(B, torch::kLong);
        for (std::int64_t j = 0; j < Q; ++j) {
            PatchTriplet t;
            t.layer = k;
            t.query_locations = qloc[j];
            t.positive_locations = ploc[j];
            t.query = D_hat.index({rows, t.query_locations});
            t.negative = D.index({rows, t.query_locations});
            t.positives = D.index({rows.unsqueeze(1), t.positive_locations});
            triplets.push_back(std::move(t));
        }
    }
    return triplets;
}

// ---------------------------------------------------------------------------
// Local patch-contrasting loss

/// Similarity logits [B, R+1] of each query against its keys (negative at column 0).
inline torch::Tensor lpcl_logits(const torch::Tensor& query, const torch::Tensor& keys, double tau) {
    return torch::bmm(keys, query.unsqueeze(2)).squeeze(2) / tau;
}

namespace detail {

// Per-row (R+1)-way cross-entropy with the negative as the target class,
// with hand-written gradients for both the query and the keys.
struct PatchContrastFunction : public torch::autograd::Function<PatchContrastFunction> {
    static torch::Tensor forward(torch::autograd::AutogradContext* ctx, const torch::Tensor& query,
                                 const torch::Tensor& keys, double tau) {
        auto logits = lpcl_logits(query, keys, tau);
        auto row_max = std::get<0>(logits.max(1, /*keepdim=*/true));
        auto shifted = logits - row_max;
        auto sum_exp = shifted.exp().sum(1, /*keepdim=*/true);
        auto log_z = row_max + sum_exp.log();
        auto probs = (shifted.exp() / sum_exp);
        ctx->save_for_backward({query, keys, probs});
        ctx->saved_data["tau"] = tau;
        return (log_z - logits.narrow(1, 0, 1)).squeeze(1);
    }

    static torch::autograd::variable_list backward(torch::autograd::AutogradContext* ctx,
                                                   torch::autograd::variable_list grad_out) {
        auto saved = ctx->get_saved_variables();
        const auto& query = saved[0];
        const auto& keys = saved[1];
        auto coeff = saved[2].clone();  // d loss / d logits = softmax - onehot(0)
        coeff.narrow(1, 0, 1).sub_(1.0);
        const double tau = ctx->saved_data["tau"].toDouble();
        coeff = coeff * grad_out[0].unsqueeze(1) / tau;                                  // [B, R+1]
        auto grad_query = torch::bmm(coeff.unsqueeze(1), keys).squeeze(1);              // [B, c]
        auto grad_keys = coeff.unsqueeze(2) * query.unsqueeze(1);                       // [B, R+1, c]
        return {grad_query, grad_keys, torch::Tensor()};
    }
};

}  // namespace detail

/// Per-image loss [B] for one triplet: -log(exp(s_neg) / (exp(s_neg) + sum_r exp(s_pos_r))).
inline torch::Tensor patch_contrast(const torch::Tensor& query, const torch::Tensor& keys, double tau) {
    if (query.dim() != 2 || keys.dim() != 3 || keys.size(0) != query.size(0) || keys.size(2) != query.size(1)) {
        throw Error("patch_contrast expects [B,c] queries and [B,R+1,c] keys");
    }
    return detail::PatchContrastFunction::apply(query, keys, tau);
}

/// Mean over layers of the per-layer mean (over query slots and images) contrastive loss.
inline torch::Tensor lpcl_loss(const std::vector<PatchTriplet>& triplets, const LpclConfig& cfg) {
    if (triplets.empty()) throw Error("lpcl_loss: empty triplet list");
    if (!(cfg.tau > 0.0)) throw Error("tau must be positive", "loss.tau");
    const auto R = triplets.front().num_positives();
    std::map<std::size_t, std::vector<torch::Tensor>> per_layer;
    for (const auto& t : triplets) {
        if (t.num_positives() != R) throw Error("lpcl_loss: triplets disagree on R");
        per_layer[t.layer].push_back(patch_contrast(t.query, t.keys(), cfg.tau).mean());
    }
    std::vector<torch::Tensor> layer_losses;
    for (auto& [layer, losses] : per_layer) layer_losses.push_back(torch::stack(losses).mean());
    return torch::stack(layer_losses).mean();
}

// ---------------------------------------------------------------------------
// Global loss

/// Layer-averaged mean squared error between clean and perturbed features.
inline torch::Tensor global_loss(const FeatureMapSet& clean, const FeatureMapSet& pert) {
    check_matching(clean, pert);
    std::vector<torch::Tensor> per_layer;
    for (std::size_t k = 0; k < clean.num_layers(); ++k) {
        per_layer.push_back((clean.maps[k] - pert.maps[k]).pow(2).mean());
    }
    return torch::stack(per_layer).mean();
}

// ---------------------------------------------------------------------------
// Combined objective

struct AttackMode {
    enum class Kind { untargeted, targeted };
    Kind kind = Kind::untargeted;
    std::optional<LabelVector> target;

    static AttackMode untargeted() { return {}; }
    static AttackMode targeted(LabelVector t) { return {Kind::targeted, std::move(t)}; }
    bool is_targeted() const { return kind == Kind::targeted; }
};

struct ObjectiveTerms {
    torch::Tensor loss;  // scalar to minimize
    double global = 0.0;  // feature MSE (untargeted) or BCE to target (targeted)
    double lpcl = 0.0;
};

/// Sign convention: untargeted maximizes (global + lpcl), so it returns their negation;
/// targeted minimizes (global + lpcl) where global is the BCE to the target.
inline torch::Tensor combine_terms(const AttackMode& mode, const std::optional<torch::Tensor>& global,
                                   const std::optional<torch::Tensor>& lpcl) {
    if (!global && !lpcl) throw Error("objective has no active terms (loss.use_global and loss.use_lpcl both off)");
    torch::Tensor sum;
    if (global) sum = *global;
    if (lpcl) sum = sum.defined() ? sum + *lpcl : *lpcl;
    return mode.is_targeted() ? sum : -sum;
}

inline ObjectiveTerms combined_objective(const FeatureMapSet& clean, const FeatureMapSet& pert,
                                         const torch::Tensor& logits_pert, const AttackMode& mode,
                                         const LossConfig& cfg, std::mt19937_64& rng) {
    if (mode.is_targeted() && !mode.target) throw Error("targeted mode requires a target label vector");
    std::optional<torch::Tensor> global;
    std::optional<torch::Tensor> lpcl;
    if (cfg.use_global) {
        if (mode.is_targeted()) {
            if (static_cast<std::int64_t>(mode.target->size()) != logits_pert.size(1)) {
                throw Error("target vector length does not match the number of classes");
            }
            auto t = mode.target->to_tensor().to(logits_pert.dtype()).unsqueeze(0).expand_as(logits_pert);
            global = torch::binary_cross_entropy_with_logits(logits_pert, t);
        } else {
            global = global_loss(clean, pert);
        }
    }
    if (cfg.use_lpcl) lpcl = lpcl_loss(build_patch_triplets(clean, pert, cfg.lpcl, rng), cfg.lpcl);

    ObjectiveTerms out;
    out.loss = combine_terms(mode, global, lpcl);
    if (global) out.global = global->item<double>();
    if (lpcl) out.lpcl = lpcl->item<double>();
    return out;
}

}  // namespace advgen
