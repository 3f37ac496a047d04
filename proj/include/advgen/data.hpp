#pragma once

// Dataset manifests, label encoding and image preprocessing.
//
// Images are held as float tensors of shape [3, H, W] (channel-first, RGB)
// with values in [0, 1]. Batches stack them to [B, 3, H, W].

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <torch/torch.h>

#include "advgen/common.hpp"

namespace advgen {

namespace fs = std::filesystem;

inline constexpr std::int64_t kDefaultImageSize = 224;

struct ManifestEntry {
    fs::path image;
    std::vector<std::string> labels;
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;
    std::vector<std::string> class_list;

    std::size_t size() const { return entries.size(); }
    std::size_t num_classes() const { return class_list.size(); }
};

/// Binary multi-hot vector over the manifest's class list.
struct LabelVector {
    std::vector<std::uint8_t> bits;

    LabelVector() = default;
    explicit LabelVector(std::size_t num_classes) : bits(num_classes, 0) {}
    explicit LabelVector(std::vector<std::uint8_t> b) : bits(std::move(b)) {}

    std::size_t size() const { return bits.size(); }
    std::size_t count() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 1)); }
    bool empty_set() const { return count() == 0; }
    bool operator==(const LabelVector&) const = default;

    torch::Tensor to_tensor() const {
        auto t = torch::empty({static_cast<std::int64_t>(bits.size())}, torch::kFloat);
        auto acc = t.accessor<float, 1>();
        for (std::size_t i = 0; i < bits.size(); ++i) acc[i] = bits[i] ? 1.0f : 0.0f;
        return t;
    }
};

/// Per-channel normalization constants. `normalize` and `denormalize` are exact inverses
/// up to float rounding.
struct Normalization {
    std::array<float, 3> mean{0.485f, 0.456f, 0.406f};
    std::array<float, 3> std{0.229f, 0.224f, 0.225f};

    static Normalization imagenet() { return {}; }
    static Normalization identity() { return {{0.f, 0.f, 0.f}, {1.f, 1.f, 1.f}}; }

    torch::Tensor normalize(const torch::Tensor& images) const {
        auto [m, s] = broadcast(images);
        return (images - m) / s;
    }
    torch::Tensor denormalize(const torch::Tensor& images) const {
        auto [m, s] = broadcast(images);
        return images * s + m;
    }

    bool operator==(const Normalization&) const = default;

private:
    std::pair<torch::Tensor, torch::Tensor> broadcast(const torch::Tensor& images) const {
        TORCH_CHECK(images.dim() == 3 || images.dim() == 4, "expected [3,H,W] or [B,3,H,W] images");
        std::vector<std::int64_t> shape(images.dim(), 1);
        shape[images.dim() - 3] = 3;
        auto opts = torch::TensorOptions().dtype(images.scalar_type()).device(images.device());
        auto m = torch::tensor({mean[0], mean[1], mean[2]}).to(opts).view(shape);
        auto s = torch::tensor({std[0], std[1], std[2]}).to(opts).view(shape);
        return {m, s};
    }
};

inline void to_json(nlohmann::json& j, const Normalization& n) { j = {{"mean", n.mean}, {"std", n.std}}; }
inline void from_json(const nlohmann::json& j, Normalization& n) {
    j.at("mean").get_to(n.mean);
    j.at("std").get_to(n.std);
}

// ---------------------------------------------------------------------------
// Manifests

inline std::vector<std::string> load_class_list(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("class list not found: " + path.string(), "data.classes");
    std::vector<std::string> classes;
    std::set<std::string> seen;
    std::string line;
    while (std::getline(in, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
        if (line.empty()) continue;
        if (!seen.insert(line).second) throw Error("duplicate class in class list: " + line, "data.classes");
        classes.push_back(line);
    }
    if (classes.empty()) throw Error("empty class list: " + path.string(), "data.classes");
    return classes;
}

/// Parse a JSON Lines manifest. Relative image paths resolve against the manifest's
/// directory. Without an explicit class list the classes are the sorted union of labels.
inline DatasetManifest load_manifest(const fs::path& path,
                                     const std::optional<fs::path>& class_list_path = std::nullopt) {
    std::ifstream in(path);
    if (!in) throw Error("manifest not found: " + path.string(), "data.manifest");

    DatasetManifest manifest;
    std::set<std::string> label_union;
    std::set<std::string> seen_paths;
    std::size_t unlabeled = 0;
    const auto base = path.parent_path();

    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto where = path.string() + ":" + std::to_string(line_no);
        nlohmann::json obj;
        try {
            obj = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw Error("malformed manifest line " + std::to_string(line_no) + " (" + where + "): " + e.what(),
                        "data.manifest");
        }
        if (!obj.is_object() || !obj.contains("image") || !obj.contains("labels") || !obj["image"].is_string() ||
            !obj["labels"].is_array()) {
            throw Error("malformed manifest line " + std::to_string(line_no) + " (" + where +
                            "): expected {\"image\": string, \"labels\": [string...]}",
                        "data.manifest");
        }
        ManifestEntry entry;
        entry.image = obj["image"].get<std::string>();
        if (entry.image.is_relative()) entry.image = base / entry.image;
        entry.image = entry.image.lexically_normal();
        for (const auto& label : obj["labels"]) {
            if (!label.is_string()) {
                throw Error("malformed manifest line " + std::to_string(line_no) + ": labels must be strings",
                            "data.manifest");
            }
            entry.labels.push_back(label.get<std::string>());
            label_union.insert(entry.labels.back());
        }
        if (!seen_paths.insert(entry.image.string()).second) {
            throw Error("duplicate image path at manifest line " + std::to_string(line_no) + ": " +
                            entry.image.string(),
                        "data.manifest");
        }
        if (entry.labels.empty()) ++unlabeled;
        manifest.entries.push_back(std::move(entry));
    }
    if (manifest.entries.empty()) throw Error("empty manifest: " + path.string(), "data.manifest");

    if (class_list_path) {
        manifest.class_list = load_class_list(*class_list_path);
        const std::set<std::string> known(manifest.class_list.begin(), manifest.class_list.end());
        for (const auto& label : label_union) {
            if (!known.contains(label)) throw Error("label not in class list: " + label, "data.classes");
        }
    } else {
        manifest.class_list.assign(label_union.begin(), label_union.end());
    }
    if (unlabeled > 0) {
        warn(std::to_string(unlabeled) + " manifest entr" + (unlabeled == 1 ? "y has" : "ies have") +
             " no labels: " + path.string());
    }
    return manifest;
}

inline void write_manifest(const fs::path& path, const DatasetManifest& manifest) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write manifest: " + path.string());
    const auto base = path.parent_path();
    for (const auto& e : manifest.entries) {
        auto rel = e.image.lexically_relative(base);
        nlohmann::json obj = {{"image", rel.empty() ? e.image.string() : rel.generic_string()},
                              {"labels", e.labels}};
        out << obj.dump() << '\n';
    }
}

inline LabelVector encode_labels(const std::vector<std::string>& labels, const std::vector<std::string>& class_list) {
    LabelVector v(class_list.size());
    for (const auto& label : labels) {
        auto it = std::find(class_list.begin(), class_list.end(), label);
        if (it == class_list.end()) throw Error("unknown label: " + label);
        v.bits[static_cast<std::size_t>(it - class_list.begin())] = 1;
    }
    return v;
}

inline std::vector<std::string> decode_labels(const LabelVector& v, const std::vector<std::string>& class_list) {
    if (v.size() != class_list.size()) throw Error("label vector length does not match class list");
    std::vector<std::string> out;
    for (std::size_t c = 0; c < v.size(); ++c) {
        if (v.bits[c]) out.push_back(class_list[c]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Images

struct Image {
    torch::Tensor pixels;  // [3, H, W] float in [0, 1]

    std::int64_t height() const { return pixels.size(1); }
    std::int64_t width() const { return pixels.size(2); }
};

/// Converts a decoded [C,H,W] (C = 1 or 3) image to a [3,S,S] tensor in [0,1] by
/// bilinear resampling. uint8 input is scaled by 1/255. Grayscale is replicated.
inline Image preprocess_image(const torch::Tensor& raw, std::int64_t size = kDefaultImageSize) {
    if (raw.dim() != 3 || raw.size(1) < 1 || raw.size(2) < 1) throw Error("expected a [C,H,W] image");
    auto x = raw.scalar_type() == torch::kByte ? raw.to(torch::kFloat).div(255.0) : raw.to(torch::kFloat);
    if (x.size(0) == 1) {
        x = x.expand({3, x.size(1), x.size(2)});
    } else if (x.size(0) == 4) {
        x = x.slice(0, 0, 3);
    } else if (x.size(0) != 3) {
        throw Error("unsupported channel count: " + std::to_string(x.size(0)));
    }
    if (x.size(1) != size || x.size(2) != size) {
        namespace F = torch::nn::functional;
        x = F::interpolate(x.unsqueeze(0), F::InterpolateFuncOptions()
                                               .size(std::vector<std::int64_t>{size, size})
                                               .mode(torch::kBilinear)
                                               .align_corners(false))
                .squeeze(0);
    }
    return Image{x.clamp(0.0, 1.0).contiguous()};
}

/// Decodes a file to an RGB uint8 [C,H,W] tensor without resampling.
inline torch::Tensor decode_image(const fs::path& path) {
    cv::Mat mat = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
    if (mat.empty()) throw Error("cannot decode image: " + path.string());
    if (mat.depth() == CV_16U) mat.convertTo(mat, CV_8U, 1.0 / 257.0);
    if (mat.depth() != CV_8U) throw Error("unsupported pixel depth: " + path.string());
    switch (mat.channels()) {
        case 1: break;
        case 3: cv::cvtColor(mat, mat, cv::COLOR_BGR2RGB); break;
        case 4: cv::cvtColor(mat, mat, cv::COLOR_BGRA2RGB); break;
        default: throw Error("unsupported channel count in " + path.string());
    }
    mat = mat.clone();
    auto hwc = torch::from_blob(mat.data, {mat.rows, mat.cols, mat.channels()}, torch::kByte);
    return hwc.permute({2, 0, 1}).contiguous().clone();
}

inline Image load_image(const fs::path& path, std::int64_t size = kDefaultImageSize) {
    return preprocess_image(decode_image(path), size);
}

/// Quantizes a [3,H,W] image in [0,1] to 8-bit RGB.
inline cv::Mat to_mat(const torch::Tensor& pixels) {
    auto q = pixels.detach().cpu().clamp(0.0, 1.0).mul(255.0).round().to(torch::kByte).permute({1, 2, 0}).contiguous();
    cv::Mat rgb(static_cast<int>(q.size(0)), static_cast<int>(q.size(1)), CV_8UC3, q.data_ptr());
    cv::Mat bgr;
    cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
    return bgr;
}

/// Writes a lossless PNG.
inline void write_png(const fs::path& path, const torch::Tensor& pixels) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    if (!cv::imwrite(path.string(), to_mat(pixels))) throw Error("cannot write image: " + path.string());
}

// ---------------------------------------------------------------------------
// Batching

struct ImageBatch {
    torch::Tensor images;              // [B, 3, S, S]
    torch::Tensor labels;              // [B, C] float in {0, 1}
    std::vector<std::size_t> indices;  // manifest positions

    std::int64_t size() const { return images.size(0); }
};

class BatchSequence {
public:
    BatchSequence(const DatasetManifest& manifest, std::size_t batch_size, bool shuffle, std::uint64_t seed,
                  std::int64_t image_size = kDefaultImageSize)
        : manifest_(&manifest), batch_size_(batch_size), image_size_(image_size) {
        if (batch_size == 0) throw Error("batch_size must be >= 1", "data.batch_size");
        order_.resize(manifest.size());
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        if (shuffle) {
            std::mt19937_64 rng(seed);
            std::shuffle(order_.begin(), order_.end(), rng);
        }
    }

    std::size_t num_batches() const { return (order_.size() + batch_size_ - 1) / batch_size_; }
    const std::vector<std::size_t>& order() const { return order_; }

    ImageBatch batch(std::size_t b) const {
        if (b >= num_batches()) throw Error("batch index out of range");
        const auto first = b * batch_size_;
        const auto last = std::min(first + batch_size_, order_.size());
        std::vector<torch::Tensor> images;
        std::vector<torch::Tensor> labels;
        ImageBatch out;
        for (auto i = first; i < last; ++i) {
            const auto& entry = manifest_->entries[order_[i]];
            images.push_back(load_image(entry.image, image_size_).pixels);
            labels.push_back(encode_labels(entry.labels, manifest_->class_list).to_tensor());
            out.indices.push_back(order_[i]);
        }
        out.images = torch::stack(images);
        out.labels = torch::stack(labels);
        return out;
    }

    class iterator {
    public:
        using iterator_category = std::input_iterator_tag;
        using value_type = ImageBatch;
        using difference_type = std::ptrdiff_t;

        iterator(const BatchSequence* seq, std::size_t pos) : seq_(seq), pos_(pos) {}
        ImageBatch operator*() const { return seq_->batch(pos_); }
        iterator& operator++() {
            ++pos_;
            return *this;
        }
        bool operator==(const iterator& other) const { return pos_ == other.pos_; }

    private:
        const BatchSequence* seq_;
        std::size_t pos_;
    };

    iterator begin() const { return {this, 0}; }
    iterator end() const { return {this, num_batches()}; }

private:
    const DatasetManifest* manifest_;
    std::size_t batch_size_;
    std::int64_t image_size_;
    std::vector<std::size_t> order_;
};

/// Deterministic batching over a manifest. The final partial batch is kept.
inline BatchSequence make_batches(const DatasetManifest& manifest, std::size_t batch_size, bool shuffle,
                                  std::uint64_t seed, std::int64_t image_size = kDefaultImageSize) {
    return BatchSequence(manifest, batch_size, shuffle, seed, image_size);
}

}  // namespace advgen
