#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace advgen;
using testutil::TempDir;

namespace {

TrainConfig tiny_config(const fs::path& dir) {
    TrainConfig cfg;
    cfg.batch_size = 8;
    cfg.epochs = 2;
    cfg.image_size = 16;
    cfg.loss.lpcl.num_positives = 3;
    cfg.generator = GeneratorSpec{4, 1};
    cfg.checkpoint_dir = dir;
    cfg.seed = 5;
    return cfg;
}

std::string net_checksum(const GeneratorNet& net) { return module_checksum(*net); }

// parameters only; normalization statistics move on every train-mode forward
std::vector<torch::Tensor> params_copy(const GeneratorNet& net) {
    std::vector<torch::Tensor> out;
    for (const auto& p : net->parameters()) out.push_back(p.detach().clone());
    return out;
}

bool same_params(const GeneratorNet& net, const std::vector<torch::Tensor>& ref) {
    auto now = net->parameters();
    if (now.size() != ref.size()) return false;
    for (std::size_t i = 0; i < ref.size(); ++i) {
        if (!torch::equal(now[i], ref[i])) return false;
    }
    return true;
}

}  // namespace

TEST(TrainStep, SurrogateUntouched) {
    auto h = testutil::tiny_classifier();
    const auto before = h.checksum();
    TempDir tmp;
    auto cfg = tiny_config(tmp.path());
    torch::manual_seed(0);
    GeneratorNet net(cfg.generator);
    auto opt = make_optimizer(net, cfg);
    auto rng = step_rng(0, 1);
    auto d = train_step(net, opt, h, torch::rand({2, 3, 16, 16}), cfg, rng);
    EXPECT_FALSE(d.skipped);
    EXPECT_EQ(h.checksum(), before);
}

TEST(TrainStep, ZeroBudgetLeavesImagesClean) {
    auto h = testutil::tiny_classifier();
    TempDir tmp;
    auto cfg = tiny_config(tmp.path());
    cfg.budget.epsilon = 0.0;
    torch::manual_seed(0);
    GeneratorNet net(cfg.generator);
    auto opt = make_optimizer(net, cfg);
    auto rng = step_rng(0, 1);
    auto d = train_step(net, opt, h, torch::rand({2, 3, 16, 16}), cfg, rng);
    EXPECT_EQ(d.global, 0.0);
    EXPECT_EQ(d.max_delta, 0.0);
}

TEST(TrainStep, SameSeedSameWeights) {
    auto h = testutil::tiny_classifier();
    TempDir tmp;
    auto cfg = tiny_config(tmp.path());
    torch::manual_seed(9);
    auto images = torch::rand({4, 3, 16, 16});
    std::vector<std::string> sums;
    for (int run = 0; run < 2; ++run) {
        torch::manual_seed(1);
        GeneratorNet net(cfg.generator);
        auto opt = make_optimizer(net, cfg);
        auto rng = step_rng(7, 1);
        train_step(net, opt, h, images, cfg, rng);
        sums.push_back(net_checksum(net));
    }
    EXPECT_EQ(sums[0], sums[1]);
}

TEST(TrainStep, NonFiniteLossSkipsUpdate) {
    auto h = testutil::tiny_classifier();
    {
        torch::NoGradGuard no_grad;
        h.net->parameters().front().fill_(std::numeric_limits<float>::quiet_NaN());
    }
    TempDir tmp;
    auto cfg = tiny_config(tmp.path());
    torch::manual_seed(1);
    GeneratorNet net(cfg.generator);
    const auto before = params_copy(net);
    auto opt = make_optimizer(net, cfg);
    auto rng = step_rng(0, 1);
    ScopedLogCapture logs;
    auto d = train_step(net, opt, h, torch::rand({2, 3, 16, 16}), cfg, rng);
    EXPECT_TRUE(d.skipped);
    EXPECT_TRUE(same_params(net, before));
    EXPECT_TRUE(logs.contains("non-finite"));
}

TEST(TrainGenerator, ToyRunWritesCheckpointsAndLog) {
    TempDir tmp;
    auto manifest = testutil::tiny_dataset(tmp / "data", 64);
    auto h = testutil::tiny_classifier();
    auto cfg = tiny_config(tmp / "ckpt");
    auto r = train_generator(manifest, h, cfg);
    EXPECT_EQ(r.epoch_checkpoints.size(), 2u);
    for (const auto& p : r.epoch_checkpoints) EXPECT_TRUE(fs::exists(p));
    EXPECT_TRUE(fs::exists(r.final_checkpoint));
    EXPECT_TRUE(fs::exists(sidecar_path(r.final_checkpoint)));

    auto lines = testutil::read_lines(r.log_path);
    ASSERT_EQ(lines.size(), 17u);  // header + 2 epochs x 8 batches
    EXPECT_EQ(lines[0], "step,epoch,L_g,L_lpcl,total,max_delta");
    for (std::size_t i = 1; i < lines.size(); ++i) {
        const auto max_delta = std::stod(lines[i].substr(lines[i].rfind(',') + 1));
        EXPECT_LE(max_delta, cfg.budget.radius() + 1e-7);
    }
    auto final = load_checkpoint(r.final_checkpoint);
    EXPECT_EQ(final.meta.epoch, 2);
    EXPECT_EQ(final.meta.surrogate_id, "tiny");
    EXPECT_EQ(final.meta.num_positives, 3);
    EXPECT_EQ(final.meta.num_layers, 4);
    EXPECT_EQ(final.meta.seed, 5u);
}

TEST(TrainGenerator, GlobalTermRisesOverTraining) {
    TempDir tmp;
    auto manifest = testutil::tiny_dataset(tmp / "data", 32);
    auto h = testutil::tiny_classifier();
    auto cfg = tiny_config(tmp / "ckpt");
    cfg.epochs = 4;
    cfg.learning_rate = 1e-3;
    auto r = train_generator(manifest, h, cfg);
    EXPECT_GE(r.epochs.back().mean_global, r.epochs.front().mean_global);
}

TEST(TrainGenerator, ResumeMatchesUninterruptedRun) {
    TempDir tmp;
    auto manifest = testutil::tiny_dataset(tmp / "data", 24);
    auto h = testutil::tiny_classifier();

    auto full_cfg = tiny_config(tmp / "full");
    auto full = train_generator(manifest, h, full_cfg);

    auto first_cfg = tiny_config(tmp / "part");
    first_cfg.epochs = 1;
    first_cfg.config_hash = training_config_hash(full_cfg);
    train_generator(manifest, h, first_cfg);
    auto resume_cfg = tiny_config(tmp / "part");
    resume_cfg.config_hash = training_config_hash(full_cfg);
    resume_cfg.resume_from = epoch_checkpoint_path(tmp / "part", 1);
    auto resumed = train_generator(manifest, h, resume_cfg);

    EXPECT_EQ(net_checksum(resumed.net), net_checksum(full.net));
    EXPECT_EQ(testutil::read_lines(resumed.log_path).size(), 1u + 2u * 3u);
}

TEST(Checkpoint, RoundTripPreservesOutputs) {
    TempDir tmp;
    torch::manual_seed(2);
    GeneratorNet net(GeneratorSpec{4, 2});
    net->eval();
    CheckpointMeta meta;
    meta.generator = GeneratorSpec{4, 2};
    meta.config_hash = "abc";
    meta.surrogate_id = "s";
    save_checkpoint(net, meta, tmp / "g.pt");
    auto loaded = load_checkpoint(tmp / "g.pt");
    EXPECT_EQ(net_checksum(loaded.net), net_checksum(net));
    EXPECT_EQ(loaded.meta.config_hash, "abc");
    torch::NoGradGuard no_grad;
    auto x = torch::rand({1, 3, 16, 16});
    EXPECT_TRUE(torch::equal(generator_forward(loaded.net, x), generator_forward(net, x)));
}

TEST(Checkpoint, HashMismatchWarnsOnly) {
    TempDir tmp;
    GeneratorNet net(GeneratorSpec{4, 1});
    CheckpointMeta meta;
    meta.generator = GeneratorSpec{4, 1};
    meta.config_hash = "abc";
    save_checkpoint(net, meta, tmp / "g.pt");
    ScopedLogCapture logs;
    EXPECT_NO_THROW(load_checkpoint(tmp / "g.pt", std::string("def")));
    EXPECT_EQ(logs.count(LogLevel::warning), 1u);
    EXPECT_TRUE(logs.contains("config hash"));
}

TEST(Checkpoint, CorruptedFileIsAnError) {
    TempDir tmp;
    GeneratorNet net(GeneratorSpec{4, 1});
    CheckpointMeta meta;
    meta.generator = GeneratorSpec{4, 1};
    save_checkpoint(net, meta, tmp / "g.pt");
    testutil::write_text(tmp / "g.pt", "garbage bytes");
    EXPECT_THROW(load_checkpoint(tmp / "g.pt"), Error);
    EXPECT_THROW(load_checkpoint(tmp / "missing.pt"), Error);
}

TEST(TrainConfig, ValidateNamesKeys) {
    TrainConfig cfg;
    cfg.learning_rate = 0.0;
    try {
        cfg.validate();
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.key(), "train.learning_rate");
    }
    cfg = TrainConfig{};
    cfg.epochs = 0;
    EXPECT_THROW(cfg.validate(), Error);
    cfg = TrainConfig{};
    cfg.mode.kind = AttackMode::Kind::targeted;
    EXPECT_THROW(cfg.validate(), Error);
}

TEST(TrainGenerator, SurrogateSizeMismatch) {
    TempDir tmp;
    auto manifest = testutil::tiny_dataset(tmp / "data", 8);
    auto h = testutil::tiny_classifier(32);
    EXPECT_THROW(train_generator(manifest, h, tiny_config(tmp / "c")), Error);
}
