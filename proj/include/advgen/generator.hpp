#pragma once

// Image-to-image perturbation generator and the l-infinity budget projection.

#include <cmath>
#include <string>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "advgen/common.hpp"
#include "advgen/data.hpp"

namespace advgen {

/// Leaky rectifier with a learned per-channel bias and a constant gain:
/// `gain * leaky_relu(x + bias, slope)`.
class FusedLeakyReluImpl : public torch::nn::Module {
public:
    explicit FusedLeakyReluImpl(std::int64_t channels, double negative_slope = 0.2, double scale = std::sqrt(2.0))
        : slope_(negative_slope), scale_(scale) {
        bias_ = register_parameter("bias", torch::zeros({channels}));
    }

    torch::Tensor forward(const torch::Tensor& x) {
        auto shifted = x + bias_.view({1, -1, 1, 1});
        return torch::leaky_relu(shifted, slope_) * scale_;
    }

private:
    double slope_;
    double scale_;
    torch::Tensor bias_;
};
TORCH_MODULE(FusedLeakyRelu);

struct GeneratorSpec {
    std::int64_t base_channels = 64;
    std::int64_t residual_blocks = 6;

    bool operator==(const GeneratorSpec&) const = default;
};

inline void to_json(nlohmann::json& j, const GeneratorSpec& g) {
    j = {{"base_channels", g.base_channels}, {"residual_blocks", g.residual_blocks}};
}
inline void from_json(const nlohmann::json& j, GeneratorSpec& g) {
    j.at("base_channels").get_to(g.base_channels);
    j.at("residual_blocks").get_to(g.residual_blocks);
}

namespace detail {

// Sequential with a concrete forward so it can nest inside another Sequential.
class BlockImpl : public torch::nn::SequentialImpl {
public:
    using SequentialImpl::SequentialImpl;
    torch::Tensor forward(torch::Tensor x) { return SequentialImpl::forward(std::move(x)); }
};
TORCH_MODULE(Block);

inline Block conv_block(std::int64_t in, std::int64_t out, std::int64_t k, std::int64_t stride,
                                        std::int64_t pad, bool reflect) {
    Block seq;
    if (reflect) {
        seq->push_back(torch::nn::ReflectionPad2d(pad));
        pad = 0;
    }
    seq->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, k).stride(stride).padding(pad).bias(false)));
    seq->push_back(torch::nn::BatchNorm2d(out));
    seq->push_back(FusedLeakyRelu(out));
    return seq;
}

inline Block upsample_block(std::int64_t in, std::int64_t out) {
    Block seq;
    seq->push_back(torch::nn::ConvTranspose2d(
        torch::nn::ConvTranspose2dOptions(in, out, 3).stride(2).padding(1).output_padding(1).bias(false)));
    seq->push_back(torch::nn::BatchNorm2d(out));
    seq->push_back(FusedLeakyRelu(out));
    return seq;
}

struct ResidualBlockImpl : torch::nn::Module {
    explicit ResidualBlockImpl(std::int64_t channels) {
        body = register_module(
            "body", torch::nn::Sequential(
                        torch::nn::ReflectionPad2d(1),
                        torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 3).bias(false)),
                        torch::nn::BatchNorm2d(channels), FusedLeakyRelu(channels), torch::nn::ReflectionPad2d(1),
                        torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 3).bias(false)),
                        torch::nn::BatchNorm2d(channels)));
    }
    torch::Tensor forward(const torch::Tensor& x) { return x + body->forward(x); }

    torch::nn::Sequential body{nullptr};
};
TORCH_MODULE(ResidualBlock);

}  // namespace detail

/// Residual image-transformation network: three encoder conv blocks (the last two at
/// stride 2), a stack of residual blocks, two transposed-conv upsampling blocks and a
/// final 7x7 conv followed by tanh. Spatial size must be divisible by 4.
class GeneratorNetImpl : public torch::nn::Module {
public:
    explicit GeneratorNetImpl(GeneratorSpec spec = {}) : spec_(spec) {
        if (spec.base_channels < 1 || spec.residual_blocks < 0) throw Error("invalid generator spec");
        const auto c = spec.base_channels;
        encoder_ = register_module("encoder", torch::nn::Sequential(detail::conv_block(3, c, 7, 1, 3, true),
                                                                    detail::conv_block(c, 2 * c, 3, 2, 1, false),
                                                                    detail::conv_block(2 * c, 4 * c, 3, 2, 1, false)));
        residual_ = register_module("residual", torch::nn::Sequential());
        for (std::int64_t i = 0; i < spec.residual_blocks; ++i) residual_->push_back(detail::ResidualBlock(4 * c));
        decoder_ = register_module(
            "decoder", torch::nn::Sequential(detail::upsample_block(4 * c, 2 * c), detail::upsample_block(2 * c, c),
                                             torch::nn::ReflectionPad2d(3),
                                             torch::nn::Conv2d(torch::nn::Conv2dOptions(c, 3, 7))));
    }

    const GeneratorSpec& spec() const { return spec_; }

    /// Raw output in [-1, 1].
    torch::Tensor forward(const torch::Tensor& normalized) {
        if (normalized.dim() != 4 || normalized.size(1) != 3) throw Error("generator expects a [B,3,H,W] batch");
        if (normalized.size(2) % 4 != 0 || normalized.size(3) % 4 != 0) {
            throw Error("generator input size must be divisible by 4");
        }
        auto h = encoder_->forward(normalized);
        if (spec_.residual_blocks > 0) h = residual_->forward(h);
        return torch::tanh(decoder_->forward(h));
    }

private:
    GeneratorSpec spec_;
    torch::nn::Sequential encoder_{nullptr};
    torch::nn::Sequential residual_{nullptr};
    torch::nn::Sequential decoder_{nullptr};
};
TORCH_MODULE(GeneratorNet);

/// l-infinity radius on the 0-255 intensity scale.
struct PerturbationBudget {
    double epsilon = 10.0;

    static constexpr double kUntargetedDefault = 10.0;
    static constexpr double kTargetedDefault = 16.0;

    /// Radius in [0,1] pixel space.
    double radius() const {
        if (!(epsilon >= 0.0)) throw Error("epsilon must be non-negative", "attack.epsilon");
        return epsilon / 255.0;
    }
};

/// Unbounded perturbed image in [0,1] pixel space from a normalized batch.
inline torch::Tensor generator_forward(GeneratorNet& net, const torch::Tensor& normalized) {
    return (net->forward(normalized) + 1.0) * 0.5;
}

/// Nearest point of the box {|a - x| <= eps/255} intersected with [0,1]. Both sets are
/// axis-aligned boxes, so the nested clamp is the projection onto their intersection.
inline torch::Tensor project(const torch::Tensor& x_hat, const torch::Tensor& x, const PerturbationBudget& budget) {
    if (x_hat.sizes() != x.sizes()) throw Error("project: shape mismatch");
    const double r = budget.radius();
    return torch::clamp(torch::clamp(x_hat, x - r, x + r), 0.0, 1.0);
}

/// normalize -> generator -> [0,1] image space -> project.
inline torch::Tensor perturb(GeneratorNet& net, const torch::Tensor& x, const PerturbationBudget& budget,
                             const Normalization& normalization) {
    const bool batched = x.dim() == 4;
    auto batch = batched ? x : x.unsqueeze(0);
    auto out = project(generator_forward(net, normalization.normalize(batch)), batch, budget);
    return batched ? out : out.squeeze(0);
}

}  // namespace advgen
