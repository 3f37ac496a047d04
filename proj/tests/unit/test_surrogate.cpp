#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace advgen;
using testutil::TempDir;

namespace {

ClassifierSidecar sidecar_for(const ArchSpec& arch, std::int64_t size) {
    ClassifierSidecar meta;
    meta.arch = arch;
    for (std::int64_t c = 0; c < arch.num_classes; ++c) meta.class_list.push_back("k" + std::to_string(c));
    meta.input_size = size;
    return meta;
}

ArchSpec toy_arch(std::vector<std::int64_t> channels, std::vector<std::int64_t> strides, std::int64_t classes = 3) {
    ArchSpec a;
    a.arch = "toycnn";
    a.num_classes = classes;
    a.channels = std::move(channels);
    a.strides = std::move(strides);
    return a;
}

}  // namespace

TEST(LoadClassifier, ToyCnnTapsEveryConv) {
    TempDir tmp;
    auto arch = toy_arch({4, 4, 4, 4}, {1, 2, 2, 2});
    ClassifierNet net(arch);
    save_classifier(net, sidecar_for(arch, 16), tmp / "toy.pt");
    ModelSpec spec;
    spec.weights = tmp / "toy.pt";
    spec.taps = {"conv1", "conv2", "conv3", "conv4"};
    auto h = load_classifier(spec);
    EXPECT_EQ(h.num_taps(), 4u);
    EXPECT_TRUE(h.frozen);
    EXPECT_EQ(h.num_classes, 3);
    for (const auto& p : h.net->parameters()) EXPECT_FALSE(p.requires_grad());
    EXPECT_EQ(h.checksum(), module_checksum(*net));
}

TEST(LoadClassifier, UnknownTapIsAnError) {
    TempDir tmp;
    auto arch = toy_arch({4, 4}, {1, 2});
    save_classifier(ClassifierNet(arch), sidecar_for(arch, 16), tmp / "toy.pt");
    ModelSpec spec;
    spec.weights = tmp / "toy.pt";
    spec.taps = {"conv1", "conv9"};
    EXPECT_THROW(load_classifier(spec), Error);
    spec.taps = {"conv2", "conv1"};
    EXPECT_THROW(load_classifier(spec), Error);
}

TEST(LoadClassifier, WeightArchitectureMismatch) {
    TempDir tmp;
    auto arch = toy_arch({4, 4}, {1, 2});
    save_classifier(ClassifierNet(arch), sidecar_for(arch, 16), tmp / "toy.pt");
    ModelSpec spec;
    spec.weights = tmp / "toy.pt";
    spec.arch = "resnet18";
    EXPECT_THROW(load_classifier(spec), Error);

    // sidecar claims a wider net than the stored tensors
    auto wide = toy_arch({8, 8}, {1, 2});
    std::ofstream(sidecar_path(tmp / "toy.pt")) << to_json(sidecar_for(wide, 16)).dump();
    spec.arch.clear();
    EXPECT_THROW(load_classifier(spec), Error);
}

TEST(LoadClassifier, MissingWeightsNamesKey) {
    ModelSpec spec;
    spec.weights = "/nonexistent/w.pt";
    try {
        load_classifier(spec);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.key(), "weights");
    }
}

TEST(LoadClassifier, ResNet152StyleHasFourStageTaps) {
    ArchSpec arch;
    arch.arch = "resnet152";
    arch.num_classes = 5;
    arch.width = 4;  // narrow for speed; block structure is unchanged
    torch::manual_seed(0);
    auto h = make_handle(ClassifierNet(arch), "r152", sidecar_for(arch, 64));
    EXPECT_EQ(h.tap_points, (std::vector<std::string>{"layer1", "layer2", "layer3", "layer4"}));
    auto f = extract_features(h, torch::rand({1, 3, 64, 64}));
    ASSERT_EQ(f.num_layers(), 4u);
    // stem /4, then /1, /2, /2, /2; bottleneck expansion 4
    EXPECT_EQ(f.maps[0].sizes(), (std::vector<std::int64_t>{1, 16, 16, 16}));
    EXPECT_EQ(f.maps[1].sizes(), (std::vector<std::int64_t>{1, 32, 8, 8}));
    EXPECT_EQ(f.maps[2].sizes(), (std::vector<std::int64_t>{1, 64, 4, 4}));
    EXPECT_EQ(f.maps[3].sizes(), (std::vector<std::int64_t>{1, 128, 2, 2}));
}

TEST(LoadClassifier, VggDefaultsToLastFourPools) {
    ArchSpec arch;
    arch.arch = "vgg16";
    arch.num_classes = 2;
    arch.width = 2;
    arch.hidden = 8;
    auto h = make_handle(ClassifierNet(arch), "vgg", sidecar_for(arch, 32));
    EXPECT_EQ(h.tap_points, (std::vector<std::string>{"pool2", "pool3", "pool4", "pool5"}));
    EXPECT_THROW(h.net->head_weight(), Error);
    EXPECT_THROW(compute_cam(h, torch::rand({3, 32, 32}), 0), Error);
}

TEST(ForwardLogits, ShapeAndDeterminism) {
    auto h = testutil::tiny_classifier(16, 3);
    torch::manual_seed(5);
    auto img = torch::rand({1, 3, 16, 16});
    auto logits = forward_logits(h, torch::cat({img, img}));
    EXPECT_EQ(logits.sizes(), (std::vector<std::int64_t>{2, 3}));
    EXPECT_TRUE(torch::equal(logits[0], logits[1]));
}

TEST(ForwardLogits, ResolutionMismatch) {
    auto h = testutil::tiny_classifier(16, 3);
    EXPECT_THROW(forward_logits(h, torch::rand({1, 3, 20, 20})), Error);
}

TEST(ForwardLogits, HandComputedOneLayerFixture) {
    // one conv with zero kernel and bias b: every location holds relu(b), so the
    // pooled feature is relu(b) and logits = W relu(b) + c
    auto arch = toy_arch({2}, {1}, 2);
    ClassifierNet net(arch);
    torch::NoGradGuard no_grad;
    for (auto& item : net->named_parameters()) {
        const auto& name = item.key();
        auto& p = item.value();
        if (name == "conv1.0.weight") p.zero_();
        if (name == "conv1.0.bias") p.copy_(torch::tensor({0.5f, -1.0f}));
        if (name == "fc.weight") p.copy_(torch::tensor({{2.0f, 3.0f}, {-1.0f, 4.0f}}));
        if (name == "fc.bias") p.copy_(torch::tensor({0.25f, 0.0f}));
    }
    auto meta = sidecar_for(arch, 8);
    meta.normalization = Normalization::identity();
    auto h = make_handle(net, "lin", meta);
    auto logits = forward_logits(h, torch::full({1, 3, 8, 8}, 0.3f));
    // relu(0.5)=0.5, relu(-1)=0 -> (2*0.5 + 0.25, -1*0.5)
    EXPECT_NEAR(logits[0][0].item<float>(), 1.25f, 1e-6);
    EXPECT_NEAR(logits[0][1].item<float>(), -0.5f, 1e-6);
}

TEST(ExtractFeatures, StrideArithmetic) {
    auto arch = toy_arch({8, 8}, {2, 2});
    auto h = make_handle(ClassifierNet(arch), "s2", sidecar_for(arch, 16), {"conv1", "conv2"});
    auto f = extract_features(h, torch::rand({1, 3, 16, 16}));
    ASSERT_EQ(f.num_layers(), 2u);
    EXPECT_EQ(f.maps[0].sizes(), (std::vector<std::int64_t>{1, 8, 8, 8}));
    EXPECT_EQ(f.maps[1].sizes(), (std::vector<std::int64_t>{1, 8, 4, 4}));
}

TEST(ExtractFeatures, FlatViewIsRowMajor) {
    FeatureMapSet f;
    f.maps.push_back(torch::arange(2 * 3 * 2 * 2, torch::kFloat).view({2, 3, 2, 2}));
    auto flat = f.flat(0);
    ASSERT_EQ(flat.sizes(), (std::vector<std::int64_t>{2, 4, 3}));
    // location 3 of a 2x2 map is (1,1)
    EXPECT_TRUE(torch::equal(flat[0][3], f.maps[0][0].index({torch::indexing::Slice(), 1, 1})));

    // exhaustive over a few shapes
    for (std::int64_t h : {1, 2, 3}) {
        for (std::int64_t w : {1, 3, 4}) {
            FeatureMapSet g;
            g.maps.push_back(torch::randn({2, 5, h, w}));
            auto gf = g.flat(0);
            for (std::int64_t b = 0; b < 2; ++b) {
                for (std::int64_t i = 0; i < h; ++i) {
                    for (std::int64_t j = 0; j < w; ++j) {
                        EXPECT_TRUE(torch::equal(gf[b][i * w + j], g.maps[0][b].index({torch::indexing::Slice(), i, j})));
                    }
                }
            }
        }
    }
}

TEST(ExtractFeatures, DifferentiableWrtInput) {
    auto h = testutil::tiny_classifier(16, 3);
    auto x = torch::rand({1, 3, 16, 16}).requires_grad_(true);
    auto f = extract_features(h, x);
    torch::Tensor total = torch::zeros({});
    for (const auto& m : f.maps) total = total + m.sum();
    total.backward();
    EXPECT_GT(x.grad().abs().sum().item<float>(), 0.0f);
    for (const auto& p : h.net->parameters()) EXPECT_FALSE(p.grad().defined());
}

TEST(Cam, UniformFeatureMapGivesZeros) {
    auto cam = cam_from_features(torch::full({3, 4, 4}, 1.7f), torch::tensor({0.3f, -2.0f, 5.0f}), 16, 16);
    EXPECT_TRUE(torch::equal(cam, torch::zeros({16, 16})));
}

TEST(Cam, SingleChannelIsProportional) {
    torch::manual_seed(8);
    auto features = torch::zeros({3, 5, 5});
    auto channel = torch::rand({5, 5});
    features[1] = channel;
    auto cam = cam_from_features(features, torch::tensor({0.0f, 1.0f, 0.0f}), 5, 5);
    auto expected = (channel - channel.min()) / (channel.max() - channel.min());
    EXPECT_TRUE(torch::allclose(cam, expected, 1e-5, 1e-6));
    EXPECT_FLOAT_EQ(cam.max().item<float>(), 1.0f);
}

TEST(Cam, ArgmaxMatchesBruteForceWeightedSum) {
    torch::manual_seed(9);
    for (int trial = 0; trial < 10; ++trial) {
        auto features = torch::rand({4, 6, 6});
        auto weights = torch::randn({4});
        auto cam = cam_from_features(features, weights, 6, 6);
        // brute-force weighted sum
        std::int64_t best = -1;
        double best_val = -1e300;
        for (std::int64_t i = 0; i < 6; ++i) {
            for (std::int64_t j = 0; j < 6; ++j) {
                double s = 0;
                for (std::int64_t c = 0; c < 4; ++c) s += features[c][i][j].item<double>() * weights[c].item<double>();
                if (s > best_val) {
                    best_val = s;
                    best = i * 6 + j;
                }
            }
        }
        EXPECT_EQ(cam.flatten().argmax().item<std::int64_t>(), best);
    }
}

TEST(Cam, HandleCamRangeAndSize) {
    auto h = testutil::tiny_classifier(16, 2);
    torch::manual_seed(10);
    for (int i = 0; i < 5; ++i) {
        auto cam = compute_cam(h, torch::rand({3, 16, 16}), i % 2);
        EXPECT_EQ(cam.sizes(), (std::vector<std::int64_t>{16, 16}));
        EXPECT_GE(cam.min().item<float>(), 0.0f);
        EXPECT_LE(cam.max().item<float>(), 1.0f);
    }
    EXPECT_THROW(compute_cam(h, torch::rand({3, 16, 16}), 2), Error);
}

TEST(Freeze, ForwardBackwardLeavesWeightsUntouched) {
    auto h = testutil::tiny_classifier(16, 3);
    const auto before = h.checksum();
    auto x = torch::rand({2, 3, 16, 16}).requires_grad_(true);
    forward_logits(h, x).sum().backward();
    EXPECT_EQ(h.checksum(), before);
}
