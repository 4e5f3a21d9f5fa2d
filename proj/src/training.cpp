#include "fer/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "fer/rng.hpp"

namespace fer {
namespace {

constexpr std::uint64_t kShuffleStream = 0x53485546464c45ULL;  // "SHUFFLE"
constexpr std::uint64_t kVariantStream = 0x56415249414e54ULL;  // "VARIANT"

template <typename T>
bool all_finite(std::span<T> values)
{
    return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
}

}  // namespace

template <typename T>
CrossEntropyResult<T> cross_entropy(const BasicTensor<T>& probs, std::span<const std::size_t> labels)
{
    if (probs.rank() != 2) {
        throw ShapeError("cross_entropy: expected N x K probabilities, got " + shape_to_string(probs.shape()));
    }
    const std::size_t n = probs.dim(0);
    const std::size_t k = probs.dim(1);
    if (labels.size() != n) {
        throw std::invalid_argument("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                                    std::to_string(n) + " rows");
    }
    CrossEntropyResult<T> out{0.0, probs};
    const double inv_n = 1.0 / static_cast<double>(n);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] >= k) {
            throw std::invalid_argument("cross_entropy: label " + std::to_string(labels[i]) + " out of range");
        }
        const double p = std::max(static_cast<double>(probs[i * k + labels[i]]), kProbabilityClamp);
        total -= std::log(p);
        for (std::size_t j = 0; j < k; ++j) {
            const double onehot = j == labels[i] ? 1.0 : 0.0;
            out.grad_logits[i * k + j] = static_cast<T>((static_cast<double>(probs[i * k + j]) - onehot) * inv_n);
        }
    }
    out.loss = total * inv_n;
    return out;
}

void AdamConfig::validate() const
{
    if (!(learning_rate > 0.0)) {
        throw std::invalid_argument("adam: learning rate must be positive");
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
        throw std::invalid_argument("adam: beta1 and beta2 must lie in [0, 1)");
    }
    if (!(epsilon > 0.0)) {
        throw std::invalid_argument("adam: epsilon must be positive");
    }
}

template <typename T>
void adam_step(LayerParams<T>& params, AdamState<T>& state, const AdamConfig& config)
{
    config.validate();
    for (const auto& [name, p] : params) {
        if (!p.has_grad()) {
            throw std::invalid_argument("adam_step: parameter '" + name + "' has no gradient");
        }
        if (!all_finite(p.grad())) {
            throw std::invalid_argument("adam_step: non-finite gradient for '" + name + "'");
        }
        const auto it = state.moments.find(name);
        if (it != state.moments.end() && it->second.m.shape() != p.shape()) {
            throw ShapeError("adam_step: optimizer state for '" + name + "' does not match the parameter");
        }
    }

    state.t += 1;
    const double t = static_cast<double>(state.t);
    const double c1 = 1.0 - std::pow(config.beta1, t);
    const double c2 = 1.0 - std::pow(config.beta2, t);
    for (auto& [name, p] : params) {
        auto [it, fresh] = state.moments.try_emplace(name);
        if (fresh) {
            it->second.m = BasicTensor<T>(p.shape());
            it->second.v = BasicTensor<T>(p.shape());
        }
        T* m = it->second.m.raw();
        T* v = it->second.v.raw();
        const auto g = p.grad();
        T* theta = p.raw();
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double gi = static_cast<double>(g[i]);
            const double mi = config.beta1 * static_cast<double>(m[i]) + (1.0 - config.beta1) * gi;
            const double vi = config.beta2 * static_cast<double>(v[i]) + (1.0 - config.beta2) * gi * gi;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            const double step = config.learning_rate * (mi / c1) / (std::sqrt(vi / c2) + config.epsilon);
            theta[i] = static_cast<T>(static_cast<double>(theta[i]) - step);
        }
    }
}

void TrainConfig::validate() const
{
    adam.validate();
    if (epochs < 1) {
        throw std::invalid_argument("train: epochs must be at least 1");
    }
    if (batch_size < 2) {
        throw std::invalid_argument("train: batch size must be at least 2 (batch norm needs two samples)");
    }
    augment.validate();
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch)
{
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    KeyedRng rng{seed, kShuffleStream, epoch};
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = rng.below(i);
        std::swap(order[i - 1], order[j]);
    }
    return order;
}

MultimodalSample augmented_variant(const MultimodalSample& sample, const AugmentSpec& spec, std::size_t epoch)
{
    if (spec.expansion <= 1) {
        return sample;
    }
    KeyedRng rng{spec.seed, kVariantStream, sample.id, epoch};
    const std::size_t draw = rng.below(spec.expansion);
    if (draw == 0) {
        return sample;
    }
    auto [image, landmarks] = augment_sample(sample.image, sample.landmarks, spec, sample.id, draw);
    return make_sample(sample.id, std::move(image), landmarks, sample.label, sample.split);
}

template <typename T>
double dataset_accuracy(const FerNetwork<T>& net, const Dataset& data)
{
    if (data.empty()) {
        throw std::invalid_argument("dataset_accuracy: empty dataset");
    }
    const BasicTensor<T> probs = predict_probabilities(net, std::span<const MultimodalSample>(data));
    const std::size_t k = probs.dim(1);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const Prediction p = predict_expression(std::span<const T>(probs.raw() + i * k, k));
        correct += p.class_index == data[i].label ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

template <typename T>
TrainResult train(FerNetwork<T>& net, const Dataset& train_set, const Dataset* val_set, const TrainConfig& config,
                  const EpochCallback& on_epoch)
{
    config.validate();
    if (train_set.empty()) {
        throw std::invalid_argument("train: empty training set");
    }
    if (train_set.size() < 2) {
        throw std::invalid_argument("train: batch norm needs at least 2 training samples");
    }
    for (const MultimodalSample& s : train_set) {
        if (s.label >= net.arch().num_classes) {
            throw std::invalid_argument("train: sample " + std::to_string(s.id) + " has label " +
                                        std::to_string(s.label));
        }
    }

    TrainResult result;
    AdamState<T> adam;
    LayerParams<T> good_params = net.params();
    LayerParams<T> good_buffers = net.buffers();
    const std::size_t n = train_set.size();

    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        const std::vector<std::size_t> order = epoch_order(n, config.seed, epoch);
        double loss_sum = 0.0;
        std::size_t trained = 0;
        bool finite = true;
        for (std::size_t start = 0; start < n && finite; start += config.batch_size) {
            const std::size_t count = std::min(config.batch_size, n - start);
            if (count < 2) {
                // Train-mode batch norm needs two samples; a lone remainder is skipped.
                continue;
            }
            Dataset batch;
            std::vector<std::size_t> labels;
            batch.reserve(count);
            for (std::size_t i = start; i < start + count; ++i) {
                batch.push_back(augmented_variant(train_set[order[i]], config.augment, epoch));
                labels.push_back(batch.back().label);
            }
            const NetworkInput<T> input = assemble_input<T>(std::span<const MultimodalSample>(batch));
            const ForwardTrace<T> trace = net.forward(input, Mode::Train);
            const CrossEntropyResult<T> ce = cross_entropy(trace.probs, labels);
            if (!std::isfinite(ce.loss)) {
                finite = false;
                break;
            }
            net.zero_grad();
            net.backward(trace, ce.grad_logits);
            try {
                adam_step(net.params(), adam, config.adam);
            } catch (const std::invalid_argument&) {
                finite = false;
                break;
            }
            ++result.optimizer_steps;
            loss_sum += ce.loss * static_cast<double>(count);
            trained += count;
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.loss = trained == 0 ? 0.0 : loss_sum / static_cast<double>(trained);
        rec.val_acc = std::numeric_limits<double>::quiet_NaN();
        if (finite) {
            finite = std::all_of(net.params().begin(), net.params().end(),
                                 [](const auto& kv) { return all_finite(kv.second.data()); });
        }
        if (finite) {
            try {
                rec.train_acc = dataset_accuracy(net, train_set);
                if (val_set != nullptr && !val_set->empty()) {
                    rec.val_acc = dataset_accuracy(net, *val_set);
                }
            } catch (const std::invalid_argument&) {
                finite = false;  // NaN probabilities from overflowing activations
            }
        }
        if (!finite) {
            net.params() = good_params;
            net.buffers() = good_buffers;
            result.diverged = true;
            result.diverged_epoch = epoch;
            break;
        }
        result.history.push_back(rec);
        if (on_epoch) {
            on_epoch(rec);
        }
        good_params = net.params();
        good_buffers = net.buffers();
    }
    net.zero_grad();
    return result;
}

#define FER_INSTANTIATE_TRAINING(T)                                                                         \
    template CrossEntropyResult<T> cross_entropy(const BasicTensor<T>&, std::span<const std::size_t>);      \
    template void adam_step(LayerParams<T>&, AdamState<T>&, const AdamConfig&);                             \
    template double dataset_accuracy(const FerNetwork<T>&, const Dataset&);                                 \
    template TrainResult train(FerNetwork<T>&, const Dataset&, const Dataset*, const TrainConfig&, const EpochCallback&);

FER_INSTANTIATE_TRAINING(float)
FER_INSTANTIATE_TRAINING(double)

#undef FER_INSTANTIATE_TRAINING

}  // namespace fer
