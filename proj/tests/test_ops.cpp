#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "fer/ops.hpp"
#include "fer/rng.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace fer;
using testing_support::max_scaled_diff;
using testing_support::random_tensor;
using testing_support::to_vector;

// --- conv2d -----------------------------------------------------------------

TEST(Conv2d, ZeroInputGivesZeroOutput)
{
    KeyedRng rng{1};
    const TensorD x(Shape{1, 4, 4});
    const TensorD w = random_tensor(rng, {1, 1, 3, 3});
    const TensorD b(Shape{1});
    const TensorD y = conv2d(x, w, &b);
    EXPECT_EQ(y.shape(), (Shape{1, 4, 4}));
    for (double v : y.data()) {
        EXPECT_EQ(v, 0.0);
    }
}

TEST(Conv2d, DeltaKernelIsIdentity)
{
    KeyedRng rng{2};
    const TensorD x = random_tensor(rng, {1, 5, 5});
    TensorD w(Shape{1, 1, 3, 3});
    w[4] = 1.0;
    EXPECT_EQ(conv2d(x, w), x);
}

TEST(Conv2d, MatchesLoopOracle)
{
    KeyedRng rng{3};
    for (int c = 0; c < 40; ++c) {
        const std::size_t n = 1 + rng.below(2);
        const std::size_t cin = 1 + rng.below(3);
        const std::size_t cout = 1 + rng.below(3);
        const std::size_t k = rng.below(2) == 0 ? 3 : 7;
        const std::size_t h = 3 + rng.below(6);
        const std::size_t w = 3 + rng.below(6);
        const TensorD x = random_tensor(rng, {n, cin, h, w});
        const TensorD wt = random_tensor(rng, {cout, cin, k, k});
        const TensorD b = random_tensor(rng, {cout});
        const std::vector<double> bias = to_vector(b);
        const std::vector<double> ref = oracle::conv2d_loops(to_vector(x), n, cin, h, w, to_vector(wt), cout, k, &bias);
        EXPECT_LT(max_scaled_diff(conv2d(x, wt, &b).data(), ref), 1e-12);
    }
}

TEST(Conv2d, SingleSampleMatchesBatch)
{
    KeyedRng rng{4};
    const TensorD x = random_tensor(rng, {2, 6, 6});
    const TensorD w = random_tensor(rng, {3, 2, 3, 3});
    const TensorD single = conv2d(x, w);
    const TensorD batch = conv2d(x.reshaped({1, 2, 6, 6}), w);
    EXPECT_EQ(single.shape(), (Shape{3, 6, 6}));
    EXPECT_EQ(single.data().size(), batch.data().size());
    EXPECT_TRUE(std::equal(single.data().begin(), single.data().end(), batch.data().begin()));
}

TEST(Conv2d, RejectsMismatchedChannelsAndEvenKernels)
{
    EXPECT_THROW(conv2d(TensorD(Shape{1, 2, 4, 4}), TensorD(Shape{1, 3, 3, 3})), ShapeError);
    EXPECT_THROW(conv2d(TensorD(Shape{1, 1, 4, 4}), TensorD(Shape{1, 1, 2, 2})), ShapeError);
    const TensorD bad_bias(Shape{2});
    EXPECT_THROW(conv2d(TensorD(Shape{1, 1, 4, 4}), TensorD(Shape{1, 1, 3, 3}), &bad_bias), ShapeError);
}

// --- pooling ----------------------------------------------------------------

TEST(MaxPool, TakesWindowMaxima)
{
    const TensorD x(Shape{1, 2, 4},
                    std::vector<double>{1, 5, 2, 0,
                                        3, 4, 8, 7});
    const PoolResult<double> r = maxpool2d(x);
    EXPECT_EQ(r.output.shape(), (Shape{1, 1, 2}));
    EXPECT_DOUBLE_EQ(r.output[0], 5.0);
    EXPECT_DOUBLE_EQ(r.output[1], 8.0);
}

TEST(MaxPool, TiesGoToFirstInScanOrder)
{
    const TensorD x(Shape{1, 2, 2}, std::vector<double>{2, 2, 2, 2});
    const PoolResult<double> r = maxpool2d(x);
    ASSERT_EQ(r.argmax.size(), 1u);
    EXPECT_EQ(r.argmax[0], 0u);
    const TensorD g = maxpool2d_backward(x.shape(), r.argmax, TensorD(Shape{1, 1, 1}, 1.0));
    EXPECT_EQ(to_vector(g), (std::vector<double>{1, 0, 0, 0}));
}

TEST(MaxPool, RejectsOddSpatialSize)
{
    EXPECT_THROW(maxpool2d(TensorD(Shape{1, 3, 4})), ShapeError);
    EXPECT_THROW(maxpool2d(TensorD(Shape{1, 4, 5})), ShapeError);
}

TEST(GlobalPool, AverageAndMax)
{
    const TensorD x(Shape{2, 1, 2}, std::vector<double>{1, 3, -4, -2});
    const PoolResult<double> avg = global_pool(x, PoolKind::Avg);
    const PoolResult<double> mx = global_pool(x, PoolKind::Max);
    EXPECT_EQ(avg.output.shape(), (Shape{2}));
    EXPECT_DOUBLE_EQ(avg.output[0], 2.0);
    EXPECT_DOUBLE_EQ(avg.output[1], -3.0);
    EXPECT_DOUBLE_EQ(mx.output[0], 3.0);
    EXPECT_DOUBLE_EQ(mx.output[1], -2.0);
}

TEST(ChannelPool, ReducesAcrossChannels)
{
    const TensorD x(Shape{1, 2, 1, 2}, std::vector<double>{1, -1, 3, -3});
    const PoolResult<double> avg = channel_pool(x, PoolKind::Avg);
    const PoolResult<double> mx = channel_pool(x, PoolKind::Max);
    EXPECT_EQ(avg.output.shape(), (Shape{1, 1, 1, 2}));
    EXPECT_DOUBLE_EQ(avg.output[0], 2.0);
    EXPECT_DOUBLE_EQ(avg.output[1], -2.0);
    EXPECT_DOUBLE_EQ(mx.output[0], 3.0);
    EXPECT_DOUBLE_EQ(mx.output[1], -1.0);
}

// --- batch norm ---------------------------------------------------------------

TEST(BatchNorm, TrainModeStandardizesEachChannel)
{
    KeyedRng rng{5};
    const TensorD x = random_tensor(rng, {6, 2, 3, 3}, -3.0, 5.0);
    const TensorD gamma(Shape{2}, 1.0);
    const TensorD beta(Shape{2}, 0.0);
    TensorD rm(Shape{2}, 0.0);
    TensorD rv(Shape{2}, 1.0);
    const TensorD y = batchnorm(x, gamma, beta, rm, rv, Mode::Train);
    for (std::size_t c = 0; c < 2; ++c) {
        double sum = 0.0;
        double sq = 0.0;
        for (std::size_t n = 0; n < 6; ++n) {
            for (std::size_t i = 0; i < 9; ++i) {
                const double v = y[(n * 2 + c) * 9 + i];
                sum += v;
                sq += v * v;
            }
        }
        EXPECT_NEAR(sum / 54.0, 0.0, 1e-12);
        EXPECT_NEAR(sq / 54.0, 1.0, 1e-4);  // biased variance, shrunk by eps
    }
}

TEST(BatchNorm, RunningStatisticsUseMomentumAndUnbiasedVariance)
{
    const TensorD x(Shape{4, 1}, std::vector<double>{1, 2, 3, 6});
    const TensorD gamma(Shape{1}, 1.0);
    const TensorD beta(Shape{1}, 0.0);
    TensorD rm(Shape{1}, 0.0);
    TensorD rv(Shape{1}, 1.0);
    batchnorm(x, gamma, beta, rm, rv, Mode::Train);
    // mean 3, unbiased variance (4 + 1 + 0 + 9) / 3
    EXPECT_NEAR(rm[0], 0.9 * 0.0 + 0.1 * 3.0, 1e-15);
    EXPECT_NEAR(rv[0], 0.9 * 1.0 + 0.1 * (14.0 / 3.0), 1e-15);
}

TEST(BatchNorm, InferModeUsesRunningStatistics)
{
    const TensorD x(Shape{1, 2}, std::vector<double>{3.0, -1.0});
    const TensorD gamma(Shape{2}, std::vector<double>{2.0, 1.0});
    const TensorD beta(Shape{2}, std::vector<double>{0.5, 0.0});
    TensorD rm(Shape{2}, std::vector<double>{1.0, 0.0});
    TensorD rv(Shape{2}, std::vector<double>{4.0, 1.0});
    const TensorD y = batchnorm(x, gamma, beta, rm, rv, Mode::Infer);
    EXPECT_NEAR(y[0], 2.0 * (3.0 - 1.0) / std::sqrt(4.0 + 1e-5) + 0.5, 1e-12);
    EXPECT_NEAR(y[1], -1.0 / std::sqrt(1.0 + 1e-5), 1e-12);
    EXPECT_DOUBLE_EQ(rm[0], 1.0);  // untouched
}

TEST(BatchNorm, SingleSampleTrainModeRejected)
{
    const TensorD gamma(Shape{2}, 1.0);
    const TensorD beta(Shape{2}, 0.0);
    TensorD rm(Shape{2}, 0.0);
    TensorD rv(Shape{2}, 1.0);
    EXPECT_THROW(batchnorm(TensorD(Shape{1, 2}), gamma, beta, rm, rv, Mode::Train), std::invalid_argument);
    EXPECT_NO_THROW(batchnorm(TensorD(Shape{1, 2}), gamma, beta, rm, rv, Mode::Infer));
}

// --- dense --------------------------------------------------------------------

TEST(Dense, IdentityWeightZeroBiasIsIdentity)
{
    KeyedRng rng{6};
    const TensorD x = random_tensor(rng, {3, 4});
    TensorD w(Shape{4, 4});
    for (std::size_t i = 0; i < 4; ++i) {
        w[i * 4 + i] = 1.0;
    }
    const TensorD b(Shape{4});
    EXPECT_EQ(dense(x, w, &b), x);
}

TEST(Dense, ZeroWeightGivesBroadcastBias)
{
    const TensorD x(Shape{2, 3}, 7.0);
    const TensorD w(Shape{2, 3});
    const TensorD b(Shape{2}, std::vector<double>{0.25, -1.5});
    const TensorD y = dense(x, w, &b);
    EXPECT_EQ(to_vector(y), (std::vector<double>{0.25, -1.5, 0.25, -1.5}));
}

TEST(Dense, MatchesLoopOracle)
{
    KeyedRng rng{7};
    for (int c = 0; c < 40; ++c) {
        const std::size_t n = 1 + rng.below(4);
        const std::size_t din = 1 + rng.below(40);
        const std::size_t dout = 1 + rng.below(10);
        const TensorD x = random_tensor(rng, {n, din});
        const TensorD w = random_tensor(rng, {dout, din});
        const TensorD b = random_tensor(rng, {dout});
        const std::vector<double> bias = to_vector(b);
        const auto ref = oracle::dense_loops(to_vector(x), n, din, to_vector(w), dout, &bias);
        EXPECT_LT(max_scaled_diff(dense(x, w, &b).data(), ref), 1e-12);
    }
}

TEST(Dense, RejectsWidthMismatch)
{
    EXPECT_THROW(dense(TensorD(Shape{2, 3}), TensorD(Shape{4, 5})), ShapeError);
}

// --- activations ----------------------------------------------------------------

TEST(Relu, GradientAtZeroIsZero)
{
    const TensorD x(Shape{3}, std::vector<double>{-1.0, 0.0, 2.0});
    const TensorD g = relu_backward(x, TensorD(Shape{3}, 1.0));
    EXPECT_EQ(to_vector(g), (std::vector<double>{0.0, 0.0, 1.0}));
    EXPECT_EQ(to_vector(relu(x)), (std::vector<double>{0.0, 0.0, 2.0}));
}

TEST(Sigmoid, StableAtExtremes)
{
    const TensorD x(Shape{4}, std::vector<double>{-800.0, -1.0, 0.0, 800.0});
    const TensorD y = sigmoid(x);
    EXPECT_EQ(y[0], 0.0);
    EXPECT_NEAR(y[1], 1.0 / (1.0 + std::exp(1.0)), 1e-15);
    EXPECT_EQ(y[2], 0.5);
    EXPECT_EQ(y[3], 1.0);
}

TEST(Softmax, RowsSumToOneWithoutOverflow)
{
    const TensorD x(Shape{2, 3}, std::vector<double>{1000.0, 1001.0, 1002.0, -5.0, 0.0, 5.0});
    const TensorD p = softmax(x);
    for (std::size_t r = 0; r < 2; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < 3; ++j) {
            EXPECT_TRUE(std::isfinite(p[r * 3 + j]));
            s += p[r * 3 + j];
        }
        EXPECT_NEAR(s, 1.0, 1e-15);
    }
    // Shift invariance: row 0 equals softmax(0, 1, 2).
    const TensorD q = softmax(TensorD(Shape{1, 3}, std::vector<double>{0.0, 1.0, 2.0}));
    for (std::size_t j = 0; j < 3; ++j) {
        EXPECT_NEAR(p[j], q[j], 1e-15);
    }
}

// --- structural ops --------------------------------------------------------------

TEST(Concat, SplitInvertsConcat)
{
    KeyedRng rng{8};
    const TensorD a = random_tensor(rng, {2, 3});
    const TensorD b = random_tensor(rng, {2, 1});
    const TensorD c = random_tensor(rng, {2, 4});
    const TensorD fused = concat_features<double>({&a, &b, &c});
    EXPECT_EQ(fused.shape(), (Shape{2, 8}));
    EXPECT_DOUBLE_EQ(fused[3], b[0]);
    const std::vector<TensorD> parts = split_features(fused, {3, 1, 4});
    EXPECT_EQ(parts[0], a);
    EXPECT_EQ(parts[1], b);
    EXPECT_EQ(parts[2], c);
    EXPECT_THROW(split_features(fused, {3, 3}), ShapeError);
}

TEST(BroadcastMul, ChannelAndSpatialMaps)
{
    const TensorD f(Shape{1, 2, 1, 2}, std::vector<double>{1, 2, 3, 4});
    const TensorD channel(Shape{1, 2, 1, 1}, std::vector<double>{10, 100});
    EXPECT_EQ(to_vector(broadcast_mul(channel, f)), (std::vector<double>{10, 20, 300, 400}));
    const TensorD spatial(Shape{1, 1, 1, 2}, std::vector<double>{-1, 0.5});
    EXPECT_EQ(to_vector(broadcast_mul(spatial, f)), (std::vector<double>{-1, 1, -3, 2}));
    EXPECT_THROW(broadcast_mul(TensorD(Shape{1, 2, 1, 2}), f), ShapeError);
}
