#pragma once

// The multimodal expression network: an image CNN with three CBAM-attended
// conv blocks, a landmark MLP (LNN), a HOG MLP (HNN), concatenation fusion and
// a two-layer softmax classifier.

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fer/dataset.hpp"
#include "fer/ops.hpp"
#include "fer/tensor.hpp"

namespace fer {

inline constexpr std::size_t kNumClasses = 7;
inline constexpr std::array<std::string_view, kNumClasses> kExpressionNames = {
    "Angry", "Disgust", "Fear", "Happy", "Sad", "Surprise", "Neutral"};

struct ArchConfig {
    std::string name;
    std::array<std::size_t, 3> conv_channels{};
    std::vector<std::size_t> cnn_fc;
    std::vector<std::size_t> lnn_fc;
    std::vector<std::size_t> hnn_fc;
    std::size_t head_hidden = 0;
    std::size_t num_classes = kNumClasses;
    std::size_t cbam_reduction = 8;
    std::size_t cbam_kernel = 7;

    /// Conv 32/64/128, FC 4096/1024/128 (image and HOG), 1024/128
    /// (landmarks), head 384 -> 7.
    static ArchConfig paper();
    /// Same topology at desk scale: conv 8/16/32, FC 256/64/32.
    static ArchConfig tiny();
    /// "paper" or "tiny"; throws otherwise.
    static ArchConfig preset(std::string_view name);

    std::size_t feature_width() const { return cnn_fc.back(); }
    std::size_t fused_width() const { return 3 * feature_width(); }
    std::size_t flatten_width() const;

    /// Throws std::invalid_argument on an inconsistent configuration, e.g. a
    /// channel count not divisible by the CBAM reduction ratio.
    void validate() const;
};

enum class ParamInit { Kaiming, LeCun, Zero, One };

struct ParamSpec {
    std::string name;
    Shape shape;
    ParamInit init = ParamInit::Zero;
    std::size_t fan_in = 1;
    bool trainable = true;  // false for batch-norm running statistics
};

/// Every tensor the architecture owns, sorted by name.
std::vector<ParamSpec> parameter_layout(const ArchConfig& arch);

// ---------------------------------------------------------------------------

/// A batch of the three modalities: images N x 1 x 48 x 48, normalized
/// landmarks N x 136, HOG N x 900.
template <typename T>
struct NetworkInput {
    BasicTensor<T> images;
    BasicTensor<T> landmarks;
    BasicTensor<T> hog;

    std::size_t batch() const { return images.empty() ? 0 : images.dim(0); }
};

template <typename T>
NetworkInput<T> assemble_input(std::span<const MultimodalSample> samples);

// Saved intermediates for the backward pass.

template <typename T>
struct DenseTrace {
    BasicTensor<T> input;
    BasicTensor<T> pre_activation;  // batch-norm output, only for bn+relu layers
    BatchNormCache<T> bn;
};

template <typename T>
struct CbamTrace {
    BasicTensor<T> input;
    PoolResult<T> avg_pool;
    PoolResult<T> max_pool;
    std::array<DenseTrace<T>, 2> avg_hidden;  // mlp1 input / pre-relu per path
    std::array<DenseTrace<T>, 2> max_hidden;
    BasicTensor<T> channel_gate;  // N x C x 1 x 1
    BasicTensor<T> refined;       // F'
    PoolResult<T> spatial_avg;
    PoolResult<T> spatial_max;
    BasicTensor<T> stacked;       // N x 2 x H x W
    BasicTensor<T> spatial_gate;  // N x 1 x H x W
};

template <typename T>
struct ConvBlockTrace {
    BasicTensor<T> input;
    BatchNormCache<T> bn;
    BasicTensor<T> pre_activation;
    CbamTrace<T> cbam;
    Shape pool_input_shape;
    std::vector<std::size_t> pool_argmax;
};

template <typename T>
struct CnnTrace {
    std::vector<ConvBlockTrace<T>> blocks;
    Shape flatten_shape;
    std::vector<DenseTrace<T>> fc;
};

template <typename T>
struct ForwardTrace {
    CnnTrace<T> cnn;
    std::vector<DenseTrace<T>> lnn;
    std::vector<DenseTrace<T>> hnn;
    std::vector<DenseTrace<T>> head;
    BasicTensor<T> f1, f2, f3;
    BasicTensor<T> fused;
    BasicTensor<T> logits;
    BasicTensor<T> probs;
};

/// Digest of every discrete branch taken in a forward pass (ReLU gates and
/// all max-pooling argmaxes).
template <typename T>
std::uint64_t activation_pattern(const ForwardTrace<T>& trace);

/// Column-block concatenation (F1, F2, F3).
template <typename T>
BasicTensor<T> fuse(const BasicTensor<T>& f1, const BasicTensor<T>& f2, const BasicTensor<T>& f3);

// ---------------------------------------------------------------------------

template <typename T>
class FerNetwork {
public:
    /// Fresh network with seeded initialization.
    FerNetwork(ArchConfig arch, std::uint64_t seed);

    /// Adopts existing tensors; their names and shapes must match the layout.
    FerNetwork(ArchConfig arch, LayerParams<T> params, LayerParams<T> buffers);

    const ArchConfig& arch() const { return arch_; }
    LayerParams<T>& params() { return params_; }
    const LayerParams<T>& params() const { return params_; }
    LayerParams<T>& buffers() { return buffers_; }
    const LayerParams<T>& buffers() const { return buffers_; }

    std::size_t parameter_count() const;
    void zero_grad();

    /// Train mode normalizes with batch statistics and updates the running
    /// ones; the const overloads always run in infer mode.
    BasicTensor<T> cnn_forward(const BasicTensor<T>& images, Mode mode, CnnTrace<T>* trace = nullptr);
    BasicTensor<T> cnn_forward(const BasicTensor<T>& images) const;
    BasicTensor<T> lnn_forward(const BasicTensor<T>& landmarks, Mode mode,
                               std::vector<DenseTrace<T>>* trace = nullptr);
    BasicTensor<T> lnn_forward(const BasicTensor<T>& landmarks) const;
    BasicTensor<T> hnn_forward(const BasicTensor<T>& hog, Mode mode, std::vector<DenseTrace<T>>* trace = nullptr);
    BasicTensor<T> hnn_forward(const BasicTensor<T>& hog) const;

    /// Head logits (FC + bn + relu, FC); classify() adds the softmax.
    BasicTensor<T> classify_logits(const BasicTensor<T>& fused, Mode mode,
                                   std::vector<DenseTrace<T>>* trace = nullptr);
    BasicTensor<T> classify(const BasicTensor<T>& fused) const;

    /// One CBAM block (index 0..2) applied to an N x C x H x W feature map.
    BasicTensor<T> cbam_apply(std::size_t block, const BasicTensor<T>& feature, CbamTrace<T>* trace = nullptr) const;
    /// Accumulates parameter gradients; returns the gradient w.r.t. the feature.
    BasicTensor<T> cbam_backward(std::size_t block, const CbamTrace<T>& trace, const BasicTensor<T>& grad_output);

    ForwardTrace<T> forward(const NetworkInput<T>& input, Mode mode);
    ForwardTrace<T> forward(const NetworkInput<T>& input) const;

    /// classify(fuse(cnn, lnn, hnn)) in infer mode: N x num_classes probabilities.
    BasicTensor<T> forward_full(const NetworkInput<T>& input) const;

    /// Backpropagates d(loss)/d(logits) and accumulates into every trainable
    /// parameter's gradient slot.
    void backward(const ForwardTrace<T>& trace, const BasicTensor<T>& grad_logits);

    template <typename U>
    FerNetwork<U> converted() const
    {
        LayerParams<U> p;
        LayerParams<U> b;
        for (const auto& [name, t] : params_) {
            p.emplace(name, t.template cast<U>());
        }
        for (const auto& [name, t] : buffers_) {
            b.emplace(name, t.template cast<U>());
        }
        return FerNetwork<U>(arch_, std::move(p), std::move(b));
    }

private:
    struct DenseSpec {
        std::string name;
        bool bn_relu;
        bool bias;
    };

    // `updates` is non-null only in train mode.
    BasicTensor<T> run_dense_chain(const std::vector<DenseSpec>& chain, const BasicTensor<T>& x,
                                   LayerParams<T>* updates, std::vector<DenseTrace<T>>* trace) const;
    BasicTensor<T> backward_dense_chain(const std::vector<DenseSpec>& chain, const std::vector<DenseTrace<T>>& trace,
                                        BasicTensor<T> grad);
    BasicTensor<T> run_cnn(const BasicTensor<T>& images, LayerParams<T>* updates, CnnTrace<T>* trace) const;
    BasicTensor<T> run_batchnorm(const std::string& prefix, const BasicTensor<T>& x, LayerParams<T>* updates,
                                 BatchNormCache<T>* cache) const;
    ForwardTrace<T> run(const NetworkInput<T>& input, LayerParams<T>* updates) const;

    void check_layout();
    const BasicTensor<T>& param(const std::string& name) const;
    void accumulate_grad(const std::string& name, const BasicTensor<T>& grad);

    ArchConfig arch_;
    LayerParams<T> params_;
    LayerParams<T> buffers_;
    std::vector<DenseSpec> cnn_fc_, lnn_fc_, hnn_fc_, head_fc_;
};

/// Infer-mode probabilities for a sample list, evaluated in chunks.
template <typename T>
BasicTensor<T> predict_probabilities(const FerNetwork<T>& net, std::span<const MultimodalSample> samples,
                                     std::size_t chunk = 128);

// ---------------------------------------------------------------------------

struct Prediction {
    std::vector<double> probabilities;
    std::size_t class_index = 0;

    /// Expression name for 7-class models, otherwise "class<k>".
    std::string class_name() const;
};

/// Argmax with ties toward the lowest index; NaN is rejected.
template <typename T>
Prediction predict_expression(std::span<const T> probs);

}  // namespace fer
