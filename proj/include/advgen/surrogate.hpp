#pragma once

// Classifier wrappers used as the frozen surrogate and as victims.
//
// Every network is a chain of named stages followed by a classification
// head. Tap points name stages; features are the stage outputs (post
// activation) in network order.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "advgen/common.hpp"
#include "advgen/data.hpp"

namespace advgen {

enum class Task { multi_label, single_label };

inline std::string to_string(Task task) { return task == Task::multi_label ? "multi-label" : "single-label"; }

inline Task parse_task(const std::string& s) {
    if (s == "multi-label" || s == "multi_label" || s == "multi") return Task::multi_label;
    if (s == "single-label" || s == "single_label" || s == "single") return Task::single_label;
    throw Error("unknown task: " + s);
}

// ---------------------------------------------------------------------------
// Feature maps

/// Mid-layer activations for a batch. `maps[k]` is [B, c_k, h_k, w_k].
struct FeatureMapSet {
    std::vector<torch::Tensor> maps;

    std::size_t num_layers() const { return maps.size(); }

    /// Location-by-channel view [B, v_k, c_k]; row i*w_k + j holds map[:, :, i, j].
    torch::Tensor flat(std::size_t k) const {
        const auto& m = maps.at(k);
        return m.permute({0, 2, 3, 1}).reshape({m.size(0), m.size(2) * m.size(3), m.size(1)});
    }

    FeatureMapSet image(std::int64_t b) const {
        FeatureMapSet out;
        for (const auto& m : maps) out.maps.push_back(m.slice(0, b, b + 1));
        return out;
    }

    FeatureMapSet detached() const {
        FeatureMapSet out;
        for (const auto& m : maps) out.maps.push_back(m.detach());
        return out;
    }
};

// ---------------------------------------------------------------------------
// Architectures

enum class HeadKind { global_pool_linear, pooled_mlp };

struct ArchSpec {
    std::string arch = "toycnn";
    std::int64_t num_classes = 2;
    std::int64_t width = 64;                           // base channel count
    std::vector<std::int64_t> channels{16, 32, 32, 64};  // toycnn only
    std::vector<std::int64_t> strides{1, 2, 2, 2};       // toycnn only
    std::int64_t hidden = 4096;                        // vgg head width
    bool batch_norm = false;                           // toycnn only
};

inline void to_json(nlohmann::json& j, const ArchSpec& a) {
    j = {{"arch", a.arch},         {"num_classes", a.num_classes}, {"width", a.width},
         {"channels", a.channels}, {"strides", a.strides},         {"hidden", a.hidden},
         {"batch_norm", a.batch_norm}};
}

inline void from_json(const nlohmann::json& j, ArchSpec& a) {
    a = ArchSpec{};
    j.at("arch").get_to(a.arch);
    j.at("num_classes").get_to(a.num_classes);
    if (j.contains("width")) j.at("width").get_to(a.width);
    if (j.contains("channels")) j.at("channels").get_to(a.channels);
    if (j.contains("strides")) j.at("strides").get_to(a.strides);
    if (j.contains("hidden")) j.at("hidden").get_to(a.hidden);
    if (j.contains("batch_norm")) j.at("batch_norm").get_to(a.batch_norm);
}

namespace detail {

inline torch::nn::Conv2d conv(std::int64_t in, std::int64_t out, std::int64_t k, std::int64_t stride = 1,
                              std::int64_t pad = 0, bool bias = false) {
    return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, k).stride(stride).padding(pad).bias(bias));
}

struct BasicBlockImpl : torch::nn::Module {
    static constexpr std::int64_t expansion = 1;

    BasicBlockImpl(std::int64_t in, std::int64_t planes, std::int64_t stride) {
        conv1 = register_module("conv1", conv(in, planes, 3, stride, 1));
        bn1 = register_module("bn1", torch::nn::BatchNorm2d(planes));
        conv2 = register_module("conv2", conv(planes, planes, 3, 1, 1));
        bn2 = register_module("bn2", torch::nn::BatchNorm2d(planes));
        if (stride != 1 || in != planes) {
            downsample = register_module(
                "downsample", torch::nn::Sequential(conv(in, planes, 1, stride), torch::nn::BatchNorm2d(planes)));
        }
    }

    torch::Tensor forward(const torch::Tensor& x) {
        auto out = torch::relu(bn1(conv1(x)));
        out = bn2(conv2(out));
        auto identity = downsample.is_empty() ? x : downsample->forward(x);
        return torch::relu(out + identity);
    }

    torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
    torch::nn::BatchNorm2d bn1{nullptr}, bn2{nullptr};
    torch::nn::Sequential downsample{nullptr};
};
TORCH_MODULE(BasicBlock);

struct BottleneckImpl : torch::nn::Module {
    static constexpr std::int64_t expansion = 4;

    BottleneckImpl(std::int64_t in, std::int64_t planes, std::int64_t stride) {
        conv1 = register_module("conv1", conv(in, planes, 1));
        bn1 = register_module("bn1", torch::nn::BatchNorm2d(planes));
        conv2 = register_module("conv2", conv(planes, planes, 3, stride, 1));
        bn2 = register_module("bn2", torch::nn::BatchNorm2d(planes));
        conv3 = register_module("conv3", conv(planes, planes * expansion, 1));
        bn3 = register_module("bn3", torch::nn::BatchNorm2d(planes * expansion));
        if (stride != 1 || in != planes * expansion) {
            downsample = register_module("downsample",
                                         torch::nn::Sequential(conv(in, planes * expansion, 1, stride),
                                                               torch::nn::BatchNorm2d(planes * expansion)));
        }
    }

    torch::Tensor forward(const torch::Tensor& x) {
        auto out = torch::relu(bn1(conv1(x)));
        out = torch::relu(bn2(conv2(out)));
        out = bn3(conv3(out));
        auto identity = downsample.is_empty() ? x : downsample->forward(x);
        return torch::relu(out + identity);
    }

    torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, conv3{nullptr};
    torch::nn::BatchNorm2d bn1{nullptr}, bn2{nullptr}, bn3{nullptr};
    torch::nn::Sequential downsample{nullptr};
};
TORCH_MODULE(Bottleneck);

}  // namespace detail

struct ForwardResult {
    torch::Tensor logits;             // [B, C]
    std::vector<torch::Tensor> taps;  // requested stage outputs, network order
    torch::Tensor last_stage;         // input to the head
};

/// Named-stage classifier network.
class ClassifierNetImpl : public torch::nn::Module {
public:
    explicit ClassifierNetImpl(const ArchSpec& spec) : spec_(spec) {
        if (spec.num_classes < 1) throw Error("num_classes must be >= 1");
        if (spec.arch == "toycnn") {
            build_toycnn();
        } else if (spec.arch.rfind("resnet", 0) == 0) {
            build_resnet(std::stoi(spec.arch.substr(6)));
        } else if (spec.arch.rfind("vgg", 0) == 0) {
            build_vgg(std::stoi(spec.arch.substr(3)));
        } else {
            throw Error("unknown architecture: " + spec.arch);
        }
    }

    const ArchSpec& spec() const { return spec_; }
    const std::vector<std::string>& stage_names() const { return names_; }
    HeadKind head_kind() const { return head_kind_; }
    const std::vector<std::string>& default_taps() const { return default_taps_; }

    /// Head weights [C, c_last] for global-pool + linear heads.
    torch::Tensor head_weight() const {
        if (head_kind_ != HeadKind::global_pool_linear) {
            throw Error("architecture " + spec_.arch + " has no global-pool + linear head");
        }
        return fc_->weight;
    }

    ForwardResult forward(torch::Tensor x, const std::vector<std::size_t>& tap_indices = {}) {
        ForwardResult out;
        std::size_t next_tap = 0;
        for (std::size_t s = 0; s < stages_.size(); ++s) {
            x = stages_[s]->forward(x);
            while (next_tap < tap_indices.size() && tap_indices[next_tap] == s) {
                out.taps.push_back(x);
                ++next_tap;
            }
        }
        out.last_stage = x;
        if (head_kind_ == HeadKind::global_pool_linear) {
            out.logits = fc_(x.mean({2, 3}));
        } else {
            out.logits = mlp_->forward(torch::flatten(pool_(x), 1));
        }
        return out;
    }

private:
    void add_stage(const std::string& name, torch::nn::Sequential stage) {
        names_.push_back(name);
        stages_.push_back(register_module(name, std::move(stage)));
    }

    void build_toycnn() {
        if (spec_.channels.empty() || spec_.channels.size() != spec_.strides.size()) {
            throw Error("toycnn needs matching non-empty channels and strides");
        }
        std::int64_t in = 3;
        for (std::size_t i = 0; i < spec_.channels.size(); ++i) {
            const auto out = spec_.channels[i];
            torch::nn::Sequential stage(detail::conv(in, out, 3, spec_.strides[i], 1, !spec_.batch_norm));
            if (spec_.batch_norm) stage->push_back(torch::nn::BatchNorm2d(out));
            stage->push_back(torch::nn::ReLU());
            add_stage("conv" + std::to_string(i + 1), stage);
            default_taps_.push_back(names_.back());
            in = out;
        }
        if (default_taps_.size() > 4) default_taps_.erase(default_taps_.begin(), default_taps_.end() - 4);
        fc_ = register_module("fc", torch::nn::Linear(in, spec_.num_classes));
        head_kind_ = HeadKind::global_pool_linear;
    }

    void build_resnet(int depth) {
        std::vector<int> blocks;
        bool bottleneck = depth >= 50;
        switch (depth) {
            case 18: blocks = {2, 2, 2, 2}; break;
            case 34: blocks = {3, 4, 6, 3}; break;
            case 50: blocks = {3, 4, 6, 3}; break;
            case 101: blocks = {3, 4, 23, 3}; break;
            case 152: blocks = {3, 8, 36, 3}; break;
            default: throw Error("unsupported resnet depth: " + std::to_string(depth));
        }
        const auto w = spec_.width;
        add_stage("stem", torch::nn::Sequential(detail::conv(3, w, 7, 2, 3), torch::nn::BatchNorm2d(w),
                                                torch::nn::ReLU(),
                                                torch::nn::MaxPool2d(torch::nn::MaxPool2dOptions(3).stride(2).padding(1))));
        std::int64_t in = w;
        for (int stage = 0; stage < 4; ++stage) {
            torch::nn::Sequential seq;
            const std::int64_t planes = w << stage;
            for (int b = 0; b < blocks[static_cast<std::size_t>(stage)]; ++b) {
                const std::int64_t stride = (b == 0 && stage > 0) ? 2 : 1;
                if (bottleneck) {
                    seq->push_back(detail::Bottleneck(in, planes, stride));
                    in = planes * detail::BottleneckImpl::expansion;
                } else {
                    seq->push_back(detail::BasicBlock(in, planes, stride));
                    in = planes;
                }
            }
            add_stage("layer" + std::to_string(stage + 1), seq);
            default_taps_.push_back(names_.back());
        }
        fc_ = register_module("fc", torch::nn::Linear(in, spec_.num_classes));
        head_kind_ = HeadKind::global_pool_linear;
    }

    void build_vgg(int depth) {
        std::vector<int> convs;
        switch (depth) {
            case 11: convs = {1, 1, 2, 2, 2}; break;
            case 13: convs = {2, 2, 2, 2, 2}; break;
            case 16: convs = {2, 2, 3, 3, 3}; break;
            case 19: convs = {2, 2, 4, 4, 4}; break;
            default: throw Error("unsupported vgg depth: " + std::to_string(depth));
        }
        std::int64_t in = 3;
        for (int block = 0; block < 5; ++block) {
            const std::int64_t out = spec_.width * (std::int64_t{1} << std::min(block, 3));
            torch::nn::Sequential seq;
            for (int c = 0; c < convs[static_cast<std::size_t>(block)]; ++c) {
                seq->push_back(detail::conv(in, out, 3, 1, 1, true));
                seq->push_back(torch::nn::ReLU());
                in = out;
            }
            seq->push_back(torch::nn::MaxPool2d(torch::nn::MaxPool2dOptions(2).stride(2)));
            add_stage("pool" + std::to_string(block + 1), seq);
            if (block > 0) default_taps_.push_back(names_.back());
        }
        pool_ = register_module("pool", torch::nn::AdaptiveAvgPool2d(torch::nn::AdaptiveAvgPool2dOptions(7)));
        mlp_ = register_module("classifier",
                               torch::nn::Sequential(torch::nn::Linear(in * 49, spec_.hidden), torch::nn::ReLU(),
                                                     torch::nn::Linear(spec_.hidden, spec_.hidden), torch::nn::ReLU(),
                                                     torch::nn::Linear(spec_.hidden, spec_.num_classes)));
        head_kind_ = HeadKind::pooled_mlp;
    }

    ArchSpec spec_;
    std::vector<std::string> names_;
    std::vector<torch::nn::Sequential> stages_;
    std::vector<std::string> default_taps_;
    HeadKind head_kind_ = HeadKind::global_pool_linear;
    torch::nn::Linear fc_{nullptr};
    torch::nn::AdaptiveAvgPool2d pool_{nullptr};
    torch::nn::Sequential mlp_{nullptr};
};
TORCH_MODULE(ClassifierNet);

// ---------------------------------------------------------------------------
// Handles

/// Everything needed to load a classifier. Empty fields fall back to the weights sidecar.
struct ModelSpec {
    std::string id;
    std::string arch;
    fs::path weights;
    std::vector<std::string> taps;
    std::optional<Task> task;
    std::string dataset;
    std::optional<std::int64_t> input_size;
    std::optional<Normalization> normalization;
};

/// Sidecar stored next to classifier weights as `<weights>.json`.
struct ClassifierSidecar {
    ArchSpec arch;
    std::vector<std::string> class_list;
    Task task = Task::multi_label;
    std::string dataset;
    std::int64_t input_size = kDefaultImageSize;
    Normalization normalization;
};

inline nlohmann::json to_json(const ClassifierSidecar& s) {
    return {{"arch", s.arch},
            {"class_list", s.class_list},
            {"task", to_string(s.task)},
            {"dataset", s.dataset},
            {"input_size", s.input_size},
            {"normalization", s.normalization}};
}

inline ClassifierSidecar sidecar_from_json(const nlohmann::json& j) {
    ClassifierSidecar s;
    s.arch = j.at("arch").get<ArchSpec>();
    j.at("class_list").get_to(s.class_list);
    s.task = parse_task(j.at("task").get<std::string>());
    if (j.contains("dataset")) j.at("dataset").get_to(s.dataset);
    if (j.contains("input_size")) j.at("input_size").get_to(s.input_size);
    if (j.contains("normalization")) s.normalization = j.at("normalization").get<Normalization>();
    return s;
}

inline fs::path sidecar_path(const fs::path& weights) { return fs::path(weights.string() + ".json"); }

struct ClassifierHandle {
    std::string id;
    Task task = Task::multi_label;
    std::int64_t num_classes = 0;
    std::vector<std::string> tap_points;
    bool frozen = false;
    std::vector<std::string> class_list;
    std::string dataset;
    std::int64_t input_size = kDefaultImageSize;
    Normalization normalization;
    ClassifierNet net{nullptr};

    std::size_t num_taps() const { return tap_points.size(); }
    std::string checksum() const { return module_checksum(*net); }
};

inline std::vector<std::size_t> resolve_taps(const ClassifierNetImpl& net, const std::vector<std::string>& taps) {
    if (taps.empty()) throw Error("tap point list is empty");
    const auto& names = net.stage_names();
    std::vector<std::size_t> idx;
    for (const auto& t : taps) {
        auto it = std::find(names.begin(), names.end(), t);
        if (it == names.end()) throw Error("unknown tap point: " + t);
        idx.push_back(static_cast<std::size_t>(it - names.begin()));
    }
    if (!std::is_sorted(idx.begin(), idx.end()) || std::adjacent_find(idx.begin(), idx.end()) != idx.end()) {
        throw Error("tap points must be distinct and listed in network order");
    }
    return idx;
}

/// Puts the network in inference mode and disables parameter gradients. Gradients still
/// flow through the network to its input.
inline void freeze(ClassifierHandle& handle) {
    handle.net->eval();
    for (auto& p : handle.net->parameters()) p.set_requires_grad(false);
    handle.frozen = true;
}

/// Wraps an in-memory network. Used by fixtures and by `load_classifier`.
inline ClassifierHandle make_handle(ClassifierNet net, std::string id, const ClassifierSidecar& meta,
                                    std::vector<std::string> taps = {}) {
    ClassifierHandle h;
    h.id = std::move(id);
    h.task = meta.task;
    h.num_classes = meta.arch.num_classes;
    h.tap_points = taps.empty() ? net->default_taps() : std::move(taps);
    resolve_taps(*net, h.tap_points);
    h.class_list = meta.class_list;
    h.dataset = meta.dataset;
    h.input_size = meta.input_size;
    h.normalization = meta.normalization;
    h.net = std::move(net);
    freeze(h);
    return h;
}

inline void save_classifier(const ClassifierNet& net, const ClassifierSidecar& meta, const fs::path& weights) {
    if (weights.has_parent_path()) fs::create_directories(weights.parent_path());
    torch::save(net, weights.string());
    std::ofstream(sidecar_path(weights)) << to_json(meta).dump(2) << '\n';
}

inline ClassifierHandle load_classifier(const ModelSpec& spec) {
    if (spec.weights.empty()) throw Error("classifier weights path is empty", "weights");
    if (!fs::exists(spec.weights)) throw Error("classifier weights not found: " + spec.weights.string(), "weights");
    const auto side = sidecar_path(spec.weights);
    if (!fs::exists(side)) throw Error("classifier sidecar not found: " + side.string(), "weights");

    ClassifierSidecar meta;
    try {
        std::ifstream in(side);
        meta = sidecar_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
        throw Error("malformed classifier sidecar " + side.string() + ": " + e.what(), "weights");
    }
    if (!spec.arch.empty() && spec.arch != meta.arch.arch) {
        throw Error("weight/architecture mismatch: weights are " + meta.arch.arch + ", spec declares " + spec.arch,
                    "arch");
    }
    ClassifierNet net(meta.arch);
    try {
        load_module_strict(net, spec.weights.string());
    } catch (const c10::Error& e) {
        throw Error("weight/architecture mismatch loading " + spec.weights.string() + ": " + e.what_without_backtrace(),
                    "weights");
    }
    if (spec.task) meta.task = *spec.task;
    if (!spec.dataset.empty()) meta.dataset = spec.dataset;
    if (spec.input_size) meta.input_size = *spec.input_size;
    if (spec.normalization) meta.normalization = *spec.normalization;
    return make_handle(std::move(net), spec.id.empty() ? meta.arch.arch : spec.id, meta, spec.taps);
}

namespace detail {
inline void check_input(const ClassifierHandle& h, const torch::Tensor& images) {
    if (images.dim() != 4 || images.size(1) != 3) throw Error("expected a [B,3,H,W] batch");
    if (images.size(2) != h.input_size || images.size(3) != h.input_size) {
        throw Error("resolution mismatch: " + h.id + " expects " + std::to_string(h.input_size) + "x" +
                    std::to_string(h.input_size) + ", got " + std::to_string(images.size(2)) + "x" +
                    std::to_string(images.size(3)));
    }
}
}  // namespace detail

/// Raw logits for a batch of [0,1] images. The handle applies its own normalization.
inline torch::Tensor forward_logits(const ClassifierHandle& h, const torch::Tensor& images) {
    detail::check_input(h, images);
    auto net = h.net;
    return net->forward(h.normalization.normalize(images)).logits;
}

/// Stage activations at the handle's tap points, differentiable w.r.t. `images`.
inline FeatureMapSet extract_features(const ClassifierHandle& h, const torch::Tensor& images) {
    detail::check_input(h, images);
    auto net = h.net;
    auto idx = resolve_taps(*net, h.tap_points);
    return FeatureMapSet{net->forward(h.normalization.normalize(images), idx).taps};
}

/// Logits and features from one forward pass.
inline std::pair<torch::Tensor, FeatureMapSet> forward_with_features(const ClassifierHandle& h,
                                                                     const torch::Tensor& images) {
    detail::check_input(h, images);
    auto net = h.net;
    auto idx = resolve_taps(*net, h.tap_points);
    auto r = net->forward(h.normalization.normalize(images), idx);
    return {r.logits, FeatureMapSet{std::move(r.taps)}};
}

// ---------------------------------------------------------------------------
// Class activation maps

/// Weighted channel sum of `features` [c,h,w] with `weights` [c], bilinearly upsampled to
/// out_h x out_w and min-max normalized. A constant map normalizes to all zeros.
inline torch::Tensor cam_from_features(const torch::Tensor& features, const torch::Tensor& weights,
                                       std::int64_t out_h, std::int64_t out_w) {
    if (features.dim() != 3 || weights.dim() != 1 || weights.size(0) != features.size(0)) {
        throw Error("cam expects [c,h,w] features and [c] weights");
    }
    auto f = features.detach().to(torch::kDouble);
    auto w = weights.detach().to(torch::kDouble);
    auto cam = (f * w.view({-1, 1, 1})).sum(0);
    const double lo = cam.min().item<double>();
    const double hi = cam.max().item<double>();
    if (!(hi > lo)) return torch::zeros({out_h, out_w}, torch::kFloat);
    namespace F = torch::nn::functional;
    cam = F::interpolate(cam.view({1, 1, cam.size(0), cam.size(1)}),
                         F::InterpolateFuncOptions()
                             .size(std::vector<std::int64_t>{out_h, out_w})
                             .mode(torch::kBilinear)
                             .align_corners(false))
              .view({out_h, out_w});
    const double ulo = cam.min().item<double>();
    const double uhi = cam.max().item<double>();
    if (!(uhi > ulo)) return torch::zeros({out_h, out_w}, torch::kFloat);
    return ((cam - ulo) / (uhi - ulo)).clamp(0.0, 1.0).to(torch::kFloat);
}

/// CAM for one [3,H,W] image in [0,1]; output is [H,W] in [0,1].
inline torch::Tensor compute_cam(const ClassifierHandle& h, const torch::Tensor& image, std::int64_t class_index) {
    if (class_index < 0 || class_index >= h.num_classes) throw Error("class index out of range");
    auto net = h.net;
    auto weights = net->head_weight();
    torch::NoGradGuard no_grad;
    auto batch = image.unsqueeze(0);
    detail::check_input(h, batch);
    auto r = net->forward(h.normalization.normalize(batch));
    return cam_from_features(r.last_stage[0], weights[class_index], image.size(1), image.size(2));
}

}  // namespace advgen
