#include <gtest/gtest.h>

#include <random>

#include "test_util.hpp"

using namespace advgen;

namespace {

GeneratorNet small_generator(std::uint64_t seed = 0, std::int64_t channels = 4, std::int64_t blocks = 2) {
    torch::manual_seed(seed);
    GeneratorNet net(GeneratorSpec{channels, blocks});
    net->eval();
    return net;
}

}  // namespace

TEST(GeneratorForward, PreservesShape224) {
    auto net = small_generator(0, 4, 6);
    torch::NoGradGuard no_grad;
    auto out = generator_forward(net, torch::randn({1, 3, 224, 224}));
    EXPECT_EQ(out.sizes(), (std::vector<std::int64_t>{1, 3, 224, 224}));
}

TEST(GeneratorForward, DeterministicInference) {
    auto net = small_generator();
    torch::NoGradGuard no_grad;
    auto x = torch::randn({1, 3, 32, 32});
    EXPECT_TRUE(torch::equal(generator_forward(net, x), generator_forward(net, x.clone())));
}

TEST(GeneratorForward, FreshNetIsFiniteAndBounded) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        auto net = small_generator(seed);
        torch::NoGradGuard no_grad;
        auto out = generator_forward(net, torch::randn({2, 3, 32, 32}) * 3.0);
        EXPECT_TRUE(torch::isfinite(out).all().item<bool>());
        EXPECT_GE(out.min().item<float>(), 0.0f);
        EXPECT_LE(out.max().item<float>(), 1.0f);
    }
}

TEST(GeneratorForward, RejectsBadShapes) {
    auto net = small_generator();
    EXPECT_THROW(generator_forward(net, torch::randn({1, 3, 30, 30})), Error);
    EXPECT_THROW(generator_forward(net, torch::randn({3, 32, 32})), Error);
    EXPECT_THROW(GeneratorNet(GeneratorSpec{0, 6}), Error);
}

TEST(GeneratorArchitecture, ResidualCountAndActivation) {
    GeneratorNet net(GeneratorSpec{4, 6});
    std::size_t residual = 0;
    for (const auto& m : net->named_modules()) {
        if (m.value()->name() == "advgen::detail::ResidualBlockImpl") ++residual;
    }
    EXPECT_EQ(residual, 6u);

    FusedLeakyRelu act(2);
    auto x = torch::tensor({-1.0f, 2.0f}).view({1, 2, 1, 1});
    auto y = act(x).flatten();
    EXPECT_NEAR(y[0].item<float>(), -0.2f * std::sqrt(2.0f), 1e-6);
    EXPECT_NEAR(y[1].item<float>(), 2.0f * std::sqrt(2.0f), 1e-6);
}

TEST(Project, ZeroBudgetIsIdentity) {
    torch::manual_seed(1);
    auto x = torch::rand({3, 8, 8});
    auto x_hat = torch::randn({3, 8, 8});
    EXPECT_TRUE(torch::equal(project(x_hat, x, PerturbationBudget{0.0}), x));
}

TEST(Project, ClampArithmetic) {
    auto x = torch::full({3, 2, 2}, 0.5f);
    auto p = project(torch::full({3, 2, 2}, 1.0f), x, PerturbationBudget{25.5});
    EXPECT_LE((p - 0.6f).abs().max().item<float>(), 1e-6f);

    auto x2 = torch::full({3, 2, 2}, 0.99f);
    auto p2 = project(torch::full({3, 2, 2}, 1.2f), x2, PerturbationBudget{10.0});
    EXPECT_TRUE(torch::equal(p2, torch::ones({3, 2, 2})));
}

TEST(Project, NegativeEpsilonAndShapeMismatch) {
    auto x = torch::rand({3, 2, 2});
    EXPECT_THROW(project(x, x, PerturbationBudget{-1.0}), Error);
    EXPECT_THROW(project(torch::rand({3, 2, 3}), x, PerturbationBudget{1.0}), Error);
    EXPECT_EQ(PerturbationBudget{}.epsilon, 10.0);
    EXPECT_EQ(PerturbationBudget::kTargetedDefault, 16.0);
}

TEST(Project, InvariantsOverRandomTriples) {
    torch::manual_seed(2);
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> eps(0.0, 40.0);
    for (int i = 0; i < 500; ++i) {
        auto x = torch::rand({3, 4, 4});
        auto a = torch::rand({3, 4, 4}) * 2.0 - 0.5;
        PerturbationBudget b1{eps(rng)};
        PerturbationBudget b2{b1.epsilon + eps(rng)};
        auto p1 = project(a, x, b1);
        auto p2 = project(a, x, b2);
        // idempotent
        EXPECT_TRUE(torch::equal(project(p1, x, b1), p1));
        // monotone in the budget
        EXPECT_LE((p1 - x).abs().max().item<float>(), (p2 - x).abs().max().item<float>());
        // identity on feasible points
        auto feasible = (x + (torch::rand({3, 4, 4}) * 2 - 1) * (b1.radius() * 0.5)).clamp(0.0, 1.0);
        EXPECT_TRUE(torch::equal(project(feasible, x, b1), feasible));
    }
}

TEST(Project, GradientPassesInsideTheBox) {
    auto x = torch::full({1, 4}, 0.5f);
    auto a = torch::tensor({{0.49f, 0.51f, 0.9f, 0.1f}}).requires_grad_(true);
    project(a, x, PerturbationBudget{10.0}).sum().backward();
    auto g = a.grad();
    EXPECT_EQ(g[0][0].item<float>(), 1.0f);
    EXPECT_EQ(g[0][1].item<float>(), 1.0f);
    EXPECT_EQ(g[0][2].item<float>(), 0.0f);
    EXPECT_EQ(g[0][3].item<float>(), 0.0f);
}

TEST(Perturb, ZeroBudgetReturnsInput) {
    auto net = small_generator(3);
    torch::NoGradGuard no_grad;
    auto x = torch::rand({2, 3, 16, 16});
    EXPECT_TRUE(torch::equal(perturb(net, x, PerturbationBudget{0.0}, Normalization{}), x));
    auto single = torch::rand({3, 16, 16});
    EXPECT_TRUE(torch::equal(perturb(net, single, PerturbationBudget{0.0}, Normalization{}), single));
}

TEST(Perturb, BudgetAndRangeOverSeeds) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto net = small_generator(seed);
        torch::manual_seed(seed + 100);
        torch::NoGradGuard no_grad;
        auto x = torch::rand({2, 3, 16, 16});
        auto xt = perturb(net, x, PerturbationBudget{10.0}, Normalization{});
        EXPECT_LE((xt - x).abs().max().item<float>(), 10.0 / 255.0 + 1e-7);
        EXPECT_GE(xt.min().item<float>(), 0.0f);
        EXPECT_LE(xt.max().item<float>(), 1.0f);
    }
}

TEST(Perturb, GradientReachesGeneratorWeights) {
    auto net = small_generator(4);
    net->train();
    auto x = torch::rand({2, 3, 16, 16}) * 0.5 + 0.25;  // interior pixels
    perturb(net, x, PerturbationBudget{255.0}, Normalization{}).sum().backward();
    double total = 0.0;
    for (const auto& p : net->parameters()) {
        if (p.grad().defined()) total += p.grad().abs().sum().item<double>();
    }
    EXPECT_GT(total, 0.0);
}
