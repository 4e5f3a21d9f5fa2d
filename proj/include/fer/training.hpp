#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fer/dataset.hpp"
#include "fer/features.hpp"
#include "fer/model.hpp"

namespace fer {

inline constexpr double kProbabilityClamp = 1e-12;

template <typename T>
struct CrossEntropyResult {
    double loss = 0.0;
    BasicTensor<T> grad_logits;  // (probs - onehot) / N
};

/// Mean categorical cross-entropy over softmax rows; probabilities are
/// clamped to 1e-12 before the log.
template <typename T>
CrossEntropyResult<T> cross_entropy(const BasicTensor<T>& probs, std::span<const std::size_t> labels);

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    void validate() const;
};

template <typename T>
struct AdamState {
    struct Moments {
        BasicTensor<T> m;
        BasicTensor<T> v;
    };
    std::map<std::string, Moments> moments;
    std::uint64_t t = 0;
};

/// One bias-corrected Adam update using each parameter's gradient slot.
/// A missing, mis-shaped or non-finite gradient throws before anything is
/// modified.
template <typename T>
void adam_step(LayerParams<T>& params, AdamState<T>& state, const AdamConfig& config);

struct TrainConfig {
    AdamConfig adam;
    std::size_t epochs = 500;
    std::size_t batch_size = 64;
    std::uint64_t seed = 0;
    std::string preset = "paper";
    /// Each epoch every sample is replaced by one of `augment.expansion`
    /// variants; expansion 1 trains on the originals only.
    AugmentSpec augment;

    void validate() const;
};

struct EpochRecord {
    std::size_t epoch = 0;   // 1-based
    double loss = 0.0;       // sample-weighted mean of the mini-batch losses
    double train_acc = 0.0;  // infer-mode accuracy on the un-augmented training set
    double val_acc = 0.0;    // NaN without a validation set
};

struct TrainResult {
    std::vector<EpochRecord> history;
    std::uint64_t optimizer_steps = 0;
    bool diverged = false;
    std::size_t diverged_epoch = 0;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Seeded mini-batch training. On a non-finite loss the network is restored
/// to the state at the end of the last completed epoch and the result is
/// flagged as diverged.
template <typename T>
TrainResult train(FerNetwork<T>& net, const Dataset& train_set, const Dataset* val_set, const TrainConfig& config,
                  const EpochCallback& on_epoch = {});

/// Fraction of samples whose argmax prediction equals the label.
template <typename T>
double dataset_accuracy(const FerNetwork<T>& net, const Dataset& data);

/// The permutation used for a given epoch.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch);

/// The augmented variant of a sample used in a given epoch.
MultimodalSample augmented_variant(const MultimodalSample& sample, const AugmentSpec& spec, std::size_t epoch);

}  // namespace fer
