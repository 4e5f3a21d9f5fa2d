#pragma once

// Differentiable layer operations. Every forward has a matching *_backward
// that maps an upstream gradient to gradients of its operands. Spatial ops
// take either a single sample (C x H x W) or a batch (N x C x H x W); the
// output keeps the input's rank.

#include <cstddef>
#include <vector>

#include "fer/tensor.hpp"

namespace fer {

enum class Mode { Train, Infer };

// ---------------------------------------------------------------------------
// Convolution: odd square kernel, stride 1, zero padding k/2 ("same" output).

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                      const BasicTensor<T>* bias = nullptr);

template <typename T>
struct Conv2dGrads {
    BasicTensor<T> input;
    BasicTensor<T> weight;
    BasicTensor<T> bias;  // empty when the forward had no bias
};

template <typename T>
Conv2dGrads<T> conv2d_backward(const BasicTensor<T>& input, const BasicTensor<T>& weight, bool has_bias,
                               const BasicTensor<T>& grad_output);

// ---------------------------------------------------------------------------
// Pooling.

/// Output plus the flat input index that produced each output cell.
template <typename T>
struct PoolResult {
    BasicTensor<T> output;
    std::vector<std::size_t> argmax;
};

/// 2x2 window, stride 2. Ties resolve to the first element in scan order.
template <typename T>
PoolResult<T> maxpool2d(const BasicTensor<T>& input);

template <typename T>
BasicTensor<T> maxpool2d_backward(const Shape& input_shape, const std::vector<std::size_t>& argmax,
                                  const BasicTensor<T>& grad_output);

enum class PoolKind { Avg, Max };

/// Spatial reduction per channel: C x H x W -> C, or N x C x H x W -> N x C.
template <typename T>
PoolResult<T> global_pool(const BasicTensor<T>& input, PoolKind kind);

template <typename T>
BasicTensor<T> global_pool_backward(const Shape& input_shape, PoolKind kind,
                                    const std::vector<std::size_t>& argmax,
                                    const BasicTensor<T>& grad_output);

/// Reduction across channels: N x C x H x W -> N x 1 x H x W.
template <typename T>
PoolResult<T> channel_pool(const BasicTensor<T>& input, PoolKind kind);

template <typename T>
BasicTensor<T> channel_pool_backward(const Shape& input_shape, PoolKind kind,
                                     const std::vector<std::size_t>& argmax,
                                     const BasicTensor<T>& grad_output);

// ---------------------------------------------------------------------------
// Batch normalization over N (and H, W for 4-D input) per channel.

struct BatchNormOptions {
    double epsilon = 1e-5;
    double momentum = 0.9;  // running = momentum * running + (1 - momentum) * batch
};

template <typename T>
struct BatchNormCache {
    Mode mode = Mode::Infer;
    BasicTensor<T> normalized;
    std::vector<T> inv_std;
};

/// Running stats are updated in place in train mode and read in infer mode.
template <typename T>
BasicTensor<T> batchnorm(const BasicTensor<T>& input, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                         BasicTensor<T>& running_mean, BasicTensor<T>& running_var, Mode mode,
                         BatchNormCache<T>* cache = nullptr, const BatchNormOptions& options = {});

/// Infer-mode batchnorm with read-only running statistics.
template <typename T>
BasicTensor<T> batchnorm_infer(const BasicTensor<T>& input, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                               const BasicTensor<T>& running_mean, const BasicTensor<T>& running_var,
                               BatchNormCache<T>* cache = nullptr, const BatchNormOptions& options = {});

template <typename T>
struct BatchNormGrads {
    BasicTensor<T> input;
    BasicTensor<T> gamma;
    BasicTensor<T> beta;
};

template <typename T>
BatchNormGrads<T> batchnorm_backward(const BatchNormCache<T>& cache, const BasicTensor<T>& gamma,
                                     const BasicTensor<T>& grad_output);

// ---------------------------------------------------------------------------
// Fully connected: N x D_in times (D_out x D_in)^T plus bias.

template <typename T>
BasicTensor<T> dense(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                     const BasicTensor<T>* bias = nullptr);

template <typename T>
struct DenseGrads {
    BasicTensor<T> input;
    BasicTensor<T> weight;
    BasicTensor<T> bias;  // empty when the forward had no bias
};

template <typename T>
DenseGrads<T> dense_backward(const BasicTensor<T>& input, const BasicTensor<T>& weight, bool has_bias,
                             const BasicTensor<T>& grad_output);

// ---------------------------------------------------------------------------
// Elementwise activations.

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input);

/// Gate is 1 where input > 0 and 0 elsewhere (including exactly 0).
template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& input, const BasicTensor<T>& grad_output);

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& input);

template <typename T>
BasicTensor<T> sigmoid_backward(const BasicTensor<T>& output, const BasicTensor<T>& grad_output);

/// Row-wise softmax of an N x K matrix, max-subtracted.
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& logits);

template <typename T>
BasicTensor<T> softmax_backward(const BasicTensor<T>& probs, const BasicTensor<T>& grad_output);

// ---------------------------------------------------------------------------
// Structural ops.

/// Column-block concatenation of N x D_k matrices in argument order.
template <typename T>
BasicTensor<T> concat_features(const std::vector<const BasicTensor<T>*>& parts);

template <typename T>
std::vector<BasicTensor<T>> split_features(const BasicTensor<T>& grad_output, const std::vector<std::size_t>& widths);

/// Broadcast product of an attention map with a feature map. The map is
/// [N x] C x 1 x 1 (channel) or [N x] 1 x H x W (spatial).
template <typename T>
BasicTensor<T> broadcast_mul(const BasicTensor<T>& map, const BasicTensor<T>& feature);

template <typename T>
struct BroadcastMulGrads {
    BasicTensor<T> map;
    BasicTensor<T> feature;
};

template <typename T>
BroadcastMulGrads<T> broadcast_mul_backward(const BasicTensor<T>& map, const BasicTensor<T>& feature,
                                            const BasicTensor<T>& grad_output);

/// Elementwise a + b for equal shapes.
template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// dst += src elementwise; shapes must hold the same number of values.
template <typename T>
void accumulate(std::span<T> dst, std::span<const T> src);

}  // namespace fer
