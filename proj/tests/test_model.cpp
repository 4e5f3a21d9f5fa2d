#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <set>

#include "fer/model.hpp"
#include "fer/rng.hpp"
#include "fer/synth.hpp"

using namespace fer;

TEST(Arch, PaperPresetWidths)
{
    const ArchConfig a = ArchConfig::paper();
    EXPECT_NO_THROW(a.validate());
    EXPECT_EQ(a.conv_channels, (std::array<std::size_t, 3>{32, 64, 128}));
    EXPECT_EQ(a.cnn_fc, (std::vector<std::size_t>{4096, 1024, 128}));
    EXPECT_EQ(a.lnn_fc, (std::vector<std::size_t>{1024, 128}));
    EXPECT_EQ(a.hnn_fc, (std::vector<std::size_t>{4096, 1024, 128}));
    EXPECT_EQ(a.feature_width(), 128u);
    EXPECT_EQ(a.fused_width(), 384u);
    EXPECT_EQ(a.head_hidden, 384u);
    EXPECT_EQ(a.flatten_width(), 128u * 6 * 6);
}

TEST(Arch, PresetLookupAndValidation)
{
    EXPECT_EQ(ArchConfig::preset("tiny").name, "tiny");
    EXPECT_THROW(ArchConfig::preset("huge"), std::invalid_argument);
    ArchConfig bad = ArchConfig::tiny();
    bad.conv_channels[0] = 6;  // not divisible by the reduction ratio
    EXPECT_THROW(bad.validate(), std::invalid_argument);
    bad = ArchConfig::tiny();
    bad.lnn_fc.back() = 31;  // branch widths must agree for fusion
    EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(Arch, LayoutIsSortedAndUnique)
{
    const auto layout = parameter_layout(ArchConfig::tiny());
    std::set<std::string> seen;
    for (std::size_t i = 0; i < layout.size(); ++i) {
        EXPECT_TRUE(seen.insert(layout[i].name).second);
        if (i > 0) {
            EXPECT_LT(layout[i - 1].name, layout[i].name);
        }
    }
    EXPECT_TRUE(seen.count("head.fc2.bias"));
    EXPECT_FALSE(seen.count("cnn.fc3.bias"));  // feeds batch norm in the head
}

TEST(Model, PaperPresetShapes)
{
    const Dataset data = make_synthetic_dataset(2, 1);
    const FerNetwork<float> net(ArchConfig::paper(), 0);
    const NetworkInput<float> in = assemble_input<float>(data);
    EXPECT_EQ(in.images.shape(), (Shape{2, 1, 48, 48}));
    EXPECT_EQ(in.landmarks.shape(), (Shape{2, 136}));
    EXPECT_EQ(in.hog.shape(), (Shape{2, 900}));

    const ForwardTrace<float> t = net.forward(in);
    ASSERT_EQ(t.cnn.blocks.size(), 3u);
    const std::array<std::size_t, 3> sides{48, 24, 12};
    for (std::size_t b = 0; b < 3; ++b) {
        EXPECT_EQ(t.cnn.blocks[b].input.dim(2), sides[b]);
        EXPECT_EQ(t.cnn.blocks[b].pool_input_shape[2], sides[b]);
    }
    EXPECT_EQ(t.cnn.flatten_shape, (Shape{2, 128, 6, 6}));
    EXPECT_EQ(t.f1.shape(), (Shape{2, 128}));
    EXPECT_EQ(t.f2.shape(), (Shape{2, 128}));
    EXPECT_EQ(t.f3.shape(), (Shape{2, 128}));
    EXPECT_EQ(t.fused.shape(), (Shape{2, 384}));
    EXPECT_EQ(t.probs.shape(), (Shape{2, 7}));
    for (std::size_t r = 0; r < 2; ++r) {
        double s = 0.0;
        for (std::size_t k = 0; k < 7; ++k) {
            s += t.probs[r * 7 + k];
        }
        EXPECT_NEAR(s, 1.0, 1e-5);
    }
}

TEST(Model, FuseIsColumnConcatenation)
{
    const TensorD a(Shape{2, 2}, std::vector<double>{1, 2, 3, 4});
    const TensorD b(Shape{2, 1}, std::vector<double>{5, 6});
    const TensorD c(Shape{2, 1}, std::vector<double>{7, 8});
    const TensorD f = fuse(a, b, c);
    EXPECT_EQ(f, TensorD(Shape{2, 4}, std::vector<double>{1, 2, 5, 7, 3, 4, 6, 8}));
}

TEST(Model, CbamWithZeroWeightsQuartersTheFeature)
{
    FerNetwork<double> net(ArchConfig::tiny(), 3);
    for (auto& [name, t] : net.params()) {
        if (name.starts_with("cnn.cbam1.")) {
            t.fill(0.0);
        }
    }
    KeyedRng rng{4};
    TensorD f(Shape{2, 8, 6, 6});
    for (std::size_t i = 0; i < f.size(); ++i) {
        f[i] = rng.uniform(-2.0, 2.0);
    }
    const TensorD out = net.cbam_apply(0, f);
    for (std::size_t i = 0; i < f.size(); ++i) {
        EXPECT_DOUBLE_EQ(out[i], 0.25 * f[i]);
    }
}

TEST(Model, InitializationIsSeeded)
{
    const FerNetwork<double> a(ArchConfig::tiny(), 5);
    const FerNetwork<double> b(ArchConfig::tiny(), 5);
    const FerNetwork<double> c(ArchConfig::tiny(), 6);
    EXPECT_EQ(a.params(), b.params());
    EXPECT_NE(a.params().at("cnn.conv1.weight"), c.params().at("cnn.conv1.weight"));
    // Batch norm starts as the identity transform.
    for (double g : a.params().at("lnn.fc1.bn.gamma").data()) {
        EXPECT_EQ(g, 1.0);
    }
    for (double v : a.buffers().at("lnn.fc1.bn.running_var").data()) {
        EXPECT_EQ(v, 1.0);
    }
}

TEST(Model, InferModeIsBatchInvariant)
{
    const Dataset data = make_synthetic_dataset(5, 2);
    const FerNetwork<double> net(ArchConfig::tiny(), 1);
    const TensorD all = net.forward_full(assemble_input<double>(data));
    for (std::size_t i = 0; i < data.size(); ++i) {
        const TensorD one = net.forward_full(assemble_input<double>(std::span(&data[i], 1)));
        for (std::size_t k = 0; k < 7; ++k) {
            EXPECT_NEAR(one[k], all[i * 7 + k], 1e-14);
        }
    }
    const TensorD chunked = predict_probabilities(net, std::span<const MultimodalSample>(data), 2);
    EXPECT_EQ(chunked.shape(), all.shape());
    for (std::size_t i = 0; i < all.size(); ++i) {
        EXPECT_NEAR(chunked[i], all[i], 1e-14);
    }
}

TEST(Model, TrainModeUpdatesRunningStatistics)
{
    const Dataset data = make_synthetic_dataset(4, 2);
    FerNetwork<double> net(ArchConfig::tiny(), 1);
    const LayerParams<double> before = net.buffers();
    net.forward(assemble_input<double>(data), Mode::Train);
    EXPECT_NE(net.buffers().at("cnn.conv1.bn.running_mean"), before.at("cnn.conv1.bn.running_mean"));
    const FerNetwork<double> frozen = net;
    frozen.forward_full(assemble_input<double>(data));
    EXPECT_EQ(frozen.buffers(), net.buffers());
}

TEST(Model, ZeroInputGivesFiniteProbabilities)
{
    Dataset data = make_synthetic_dataset(2, 0);
    for (auto& s : data) {
        s.image = GrayImage();
        s.hog.assign(kHogDim, 0.0);
    }
    const FerNetwork<float> net(ArchConfig::tiny(), 0);
    const Tensor p = net.forward_full(assemble_input<float>(data));
    for (float v : p.data()) {
        EXPECT_TRUE(std::isfinite(v));
    }
}

TEST(Model, FloatAndDoubleAgree)
{
    const Dataset data = make_synthetic_dataset(3, 8);
    const FerNetwork<double> d(ArchConfig::tiny(), 2);
    const FerNetwork<float> f = d.converted<float>();
    const TensorD pd = d.forward_full(assemble_input<double>(data));
    const Tensor pf = f.forward_full(assemble_input<float>(data));
    for (std::size_t i = 0; i < pd.size(); ++i) {
        EXPECT_NEAR(pf[i], pd[i], 1e-4);
    }
}

TEST(Model, AdoptingTensorsChecksLayout)
{
    const FerNetwork<double> net(ArchConfig::tiny(), 0);
    LayerParams<double> params = net.params();
    params.erase("head.fc2.bias");
    EXPECT_THROW(FerNetwork<double>(ArchConfig::tiny(), params, net.buffers()), std::invalid_argument);
    params = net.params();
    params.at("head.fc2.bias") = TensorD(Shape{8});
    EXPECT_THROW(FerNetwork<double>(ArchConfig::tiny(), params, net.buffers()), std::exception);
}

TEST(Predict, ArgmaxTiesTowardLowestIndex)
{
    const std::vector<double> p{0.1, 0.3, 0.3, 0.3, 0.0, 0.0, 0.0};
    const Prediction pred = predict_expression<double>(p);
    EXPECT_EQ(pred.class_index, 1u);
    EXPECT_EQ(pred.class_name(), "Disgust");
    const std::vector<double> q{0.0, 0.0, 0.0, 0.9, 0.1, 0.0, 0.0};
    EXPECT_EQ(predict_expression<double>(q).class_name(), "Happy");
}

TEST(Predict, RejectsNanAndEmpty)
{
    const std::vector<double> p{0.5, std::numeric_limits<double>::quiet_NaN(), 0.5};
    EXPECT_THROW(predict_expression<double>(p), std::invalid_argument);
    EXPECT_THROW(predict_expression<double>(std::span<const double>{}), std::invalid_argument);
}

TEST(Predict, NamesForOtherClassCounts)
{
    Prediction p;
    p.probabilities = {0.2, 0.8};
    p.class_index = 1;
    EXPECT_EQ(p.class_name(), "class1");
}
