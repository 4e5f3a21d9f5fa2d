#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fer/checkpoint.hpp"
#include "fer/synth.hpp"
#include "fer/training.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace fer;

namespace {

TrainConfig quick_config(std::size_t epochs, std::size_t batch = 8)
{
    TrainConfig c;
    c.preset = "tiny";
    c.epochs = epochs;
    c.batch_size = batch;
    c.seed = 3;
    c.augment.expansion = 1;
    return c;
}

}  // namespace

// --- cross-entropy --------------------------------------------------------------

TEST(CrossEntropy, UniformProbabilitiesGiveLogK)
{
    const TensorD p(Shape{2, 7}, 1.0 / 7.0);
    const std::vector<std::size_t> labels{0, 6};
    const auto r = cross_entropy(p, labels);
    EXPECT_NEAR(r.loss, std::log(7.0), 1e-14);
}

TEST(CrossEntropy, ConfidentCorrectIsZeroAndZeroProbabilityIsClamped)
{
    TensorD p(Shape{1, 3}, std::vector<double>{0.0, 1.0, 0.0});
    const std::vector<std::size_t> right{1};
    EXPECT_EQ(cross_entropy(p, right).loss, 0.0);
    const std::vector<std::size_t> wrong{0};
    EXPECT_NEAR(cross_entropy(p, wrong).loss, -std::log(1e-12), 1e-9);
}

TEST(CrossEntropy, MatchesLongDoubleReference)
{
    KeyedRng rng{21};
    for (int c = 0; c < 20; ++c) {
        const std::size_t n = 1 + rng.below(6);
        const TensorD logits = testing_support::random_tensor(rng, {n, 7}, -4.0, 4.0);
        std::vector<std::size_t> labels(n);
        for (auto& l : labels) {
            l = rng.below(7);
        }
        const auto r = cross_entropy(softmax(logits), labels);
        const auto ref = oracle::cross_entropy_reference(testing_support::to_vector(logits), n, 7, labels);
        EXPECT_NEAR(r.loss, static_cast<double>(ref.loss), 1e-10);
        for (std::size_t i = 0; i < n * 7; ++i) {
            EXPECT_NEAR(r.grad_logits[i], static_cast<double>(ref.grad[i]), 1e-10);
        }
    }
}

TEST(CrossEntropy, RejectsBadLabels)
{
    const TensorD p(Shape{2, 3}, 1.0 / 3.0);
    const std::vector<std::size_t> out_of_range{0, 3};
    EXPECT_THROW(cross_entropy(p, out_of_range), std::invalid_argument);
    const std::vector<std::size_t> too_few{0};
    EXPECT_THROW(cross_entropy(p, too_few), std::invalid_argument);
}

// --- Adam ---------------------------------------------------------------------------

TEST(Adam, ZeroGradientLeavesParametersUnchanged)
{
    LayerParams<double> params;
    params.emplace("w", TensorD(Shape{3}, std::vector<double>{1, -2, 3}));
    params.at("w").ensure_grad();
    AdamState<double> state;
    adam_step(params, state, AdamConfig{});
    EXPECT_EQ(params.at("w"), TensorD(Shape{3}, std::vector<double>{1, -2, 3}));
    EXPECT_EQ(state.t, 1u);
}

TEST(Adam, FirstStepMovesByLearningRate)
{
    LayerParams<double> params;
    params.emplace("w", TensorD(Shape{2}, std::vector<double>{0.5, 0.5}));
    auto g = params.at("w").ensure_grad();
    g[0] = 3.0;
    g[1] = -1e-3;
    AdamState<double> state;
    adam_step(params, state, AdamConfig{});
    EXPECT_NEAR(params.at("w")[0], 0.5 - 1e-3, 1e-10);
    EXPECT_NEAR(params.at("w")[1], 0.5 + 1e-3, 1e-7);
}

TEST(Adam, MatchesReferenceOverSeveralSteps)
{
    KeyedRng rng{22};
    LayerParams<double> params;
    params.emplace("a", testing_support::random_tensor(rng, {4}));
    params.emplace("b", testing_support::random_tensor(rng, {2, 3}));
    std::vector<double> ra = testing_support::to_vector(params.at("a"));
    std::vector<double> rb = testing_support::to_vector(params.at("b"));
    oracle::ReferenceAdam ref_a{0.01};
    oracle::ReferenceAdam ref_b{0.01};
    AdamConfig cfg;
    cfg.learning_rate = 0.01;
    AdamState<double> state;
    for (int step = 0; step < 5; ++step) {
        std::vector<double> ga(4), gb(6);
        for (auto& v : ga) {
            v = rng.uniform(-1, 1);
        }
        for (auto& v : gb) {
            v = rng.uniform(-1, 1);
        }
        std::copy(ga.begin(), ga.end(), params.at("a").ensure_grad().begin());
        std::copy(gb.begin(), gb.end(), params.at("b").ensure_grad().begin());
        adam_step(params, state, cfg);
        ref_a.step(ra, ga);
        ref_b.step(rb, gb);
    }
    EXPECT_LT(testing_support::max_scaled_diff(params.at("a").data(), ra), 1e-12);
    EXPECT_LT(testing_support::max_scaled_diff(params.at("b").data(), rb), 1e-12);
}

TEST(Adam, NonFiniteGradientRejectedWithoutSideEffects)
{
    LayerParams<double> params;
    params.emplace("a", TensorD(Shape{2}, 1.0));
    params.emplace("b", TensorD(Shape{2}, 1.0));
    params.at("a").ensure_grad()[0] = 1.0;
    params.at("b").ensure_grad()[1] = std::nan("");
    AdamState<double> state;
    EXPECT_THROW(adam_step(params, state, AdamConfig{}), std::invalid_argument);
    EXPECT_EQ(params.at("a"), TensorD(Shape{2}, 1.0));
    EXPECT_EQ(state.t, 0u);
    EXPECT_TRUE(state.moments.empty());
}

TEST(Adam, MissingGradientRejected)
{
    LayerParams<double> params;
    params.emplace("a", TensorD(Shape{2}, 1.0));
    AdamState<double> state;
    EXPECT_THROW(adam_step(params, state, AdamConfig{}), std::invalid_argument);
}

TEST(Adam, InvalidConfigRejected)
{
    AdamConfig c;
    c.beta1 = 1.0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = {};
    c.learning_rate = 0.0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
}

// --- training loop --------------------------------------------------------------

TEST(EpochOrder, IsSeededPermutation)
{
    const auto a = epoch_order(50, 1, 1);
    auto sorted = a;
    std::sort(sorted.begin(), sorted.end());
    std::vector<std::size_t> iota(50);
    std::iota(iota.begin(), iota.end(), 0);
    EXPECT_EQ(sorted, iota);
    EXPECT_EQ(a, epoch_order(50, 1, 1));
    EXPECT_NE(a, epoch_order(50, 1, 2));
    EXPECT_NE(a, epoch_order(50, 2, 1));
}

TEST(AugmentedVariant, ExpansionOneIsIdentity)
{
    const Dataset d = make_synthetic_dataset(3, 0);
    AugmentSpec spec;
    spec.expansion = 1;
    for (std::size_t e = 1; e < 5; ++e) {
        const MultimodalSample s = augmented_variant(d[2], spec, e);
        EXPECT_EQ(s.image, d[2].image);
        EXPECT_EQ(s.hog, d[2].hog);
    }
}

TEST(AugmentedVariant, RecomputesHogForTransformedImages)
{
    const Dataset d = make_synthetic_dataset(1, 0);
    AugmentSpec spec;
    bool changed = false;
    for (std::size_t e = 1; e < 10; ++e) {
        const MultimodalSample s = augmented_variant(d[0], spec, e);
        EXPECT_EQ(s.hog, extract_hog(s.image));
        EXPECT_EQ(s.label, d[0].label);
        changed = changed || !(s.image == d[0].image);
    }
    EXPECT_TRUE(changed);
}

TEST(Train, ConfigValidation)
{
    TrainConfig c = quick_config(0);
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = quick_config(1, 1);
    EXPECT_THROW(c.validate(), std::invalid_argument);
    FerNetwork<float> net(ArchConfig::tiny(), 0);
    const Dataset one = make_synthetic_dataset(1, 0);
    EXPECT_THROW(train(net, one, nullptr, quick_config(1)), std::invalid_argument);
    EXPECT_THROW(train(net, Dataset{}, nullptr, quick_config(1)), std::invalid_argument);
}

TEST(Train, OneEpochTakesCeilNOverBatchSteps)
{
    const Dataset data = make_synthetic_dataset(20, 0);
    FerNetwork<float> net(ArchConfig::tiny(), 0);
    const TrainResult r = train(net, data, nullptr, quick_config(1, 8));
    EXPECT_EQ(r.optimizer_steps, 3u);
    ASSERT_EQ(r.history.size(), 1u);
    EXPECT_EQ(r.history[0].epoch, 1u);
    EXPECT_TRUE(std::isnan(r.history[0].val_acc));

    // A lone trailing sample cannot be batch-normalized and is skipped.
    const Dataset odd = make_synthetic_dataset(17, 0);
    FerNetwork<float> net2(ArchConfig::tiny(), 0);
    EXPECT_EQ(train(net2, odd, nullptr, quick_config(1, 8)).optimizer_steps, 2u);
}

TEST(Train, DeterministicForFixedSeed)
{
    const Dataset data = make_synthetic_dataset(16, 5);
    TrainConfig cfg = quick_config(3);
    cfg.augment.expansion = 5;
    FerNetwork<float> a(ArchConfig::tiny(), cfg.seed);
    FerNetwork<float> b(ArchConfig::tiny(), cfg.seed);
    const TrainResult ra = train(a, data, &data, cfg);
    const TrainResult rb = train(b, data, &data, cfg);
    ASSERT_EQ(ra.history.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(ra.history[i].loss, rb.history[i].loss);
        EXPECT_EQ(ra.history[i].val_acc, rb.history[i].val_acc);
    }
    EXPECT_EQ(save_checkpoint(a), save_checkpoint(b));
}

TEST(Train, CallbackSeesEveryEpoch)
{
    const Dataset data = make_synthetic_dataset(8, 0);
    FerNetwork<float> net(ArchConfig::tiny(), 0);
    std::vector<std::size_t> seen;
    const TrainResult r = train(net, data, nullptr, quick_config(4), [&](const EpochRecord& e) { seen.push_back(e.epoch); });
    EXPECT_EQ(seen, (std::vector<std::size_t>{1, 2, 3, 4}));
    EXPECT_EQ(r.history.size(), 4u);
    EXPECT_FALSE(r.diverged);
}

TEST(Train, LossDecreasesOnFixedBatch)
{
    const Dataset data = make_synthetic_dataset(16, 1);
    FerNetwork<double> net(ArchConfig::tiny(), 2);
    TrainConfig cfg = quick_config(30, 16);
    const TrainResult r = train(net, data, nullptr, cfg);
    EXPECT_LT(r.history.back().loss, 0.5 * r.history.front().loss);
}

TEST(Train, DivergenceRestoresLastGoodEpoch)
{
    const Dataset data = make_synthetic_dataset(16, 1);
    FerNetwork<double> net(ArchConfig::tiny(), 2);
    TrainConfig cfg = quick_config(20, 16);
    cfg.adam.learning_rate = 1e300;
    const TrainResult r = train(net, data, nullptr, cfg);
    ASSERT_TRUE(r.diverged);
    EXPECT_EQ(r.history.size() + 1, r.diverged_epoch);
    for (const auto& [name, t] : net.params()) {
        for (double v : t.data()) {
            ASSERT_TRUE(std::isfinite(v)) << name;
        }
    }
}

TEST(Train, AccuracyHelper)
{
    const Dataset data = make_synthetic_dataset(7, 0);
    FerNetwork<double> net(ArchConfig::tiny(), 0);
    for (auto& [name, t] : net.params()) {
        if (name.starts_with("head.fc2.")) {
            t.fill(0.0);
        }
    }
    net.params().at("head.fc2.bias")[3] = 10.0;
    // Every sample is predicted as class 3; one of the 7 labels is 3.
    EXPECT_NEAR(dataset_accuracy(net, data), 1.0 / 7.0, 1e-15);
}
