#include "fer/gradcheck_suite.hpp"

#include <chrono>
#include <functional>
#include <map>
#include <stdexcept>

#include "fer/model.hpp"
#include "fer/ops.hpp"
#include "fer/rng.hpp"
#include "fer/synth.hpp"
#include "fer/training.hpp"

namespace fer {
namespace {

using Check = std::function<GradCheckReport(KeyedRng&, const GradCheckSuiteOptions&)>;

TensorD random_tensor(KeyedRng& rng, Shape shape, double lo = -1.0, double hi = 1.0)
{
    TensorD t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) {
        t[i] = rng.uniform(lo, hi);
    }
    return t;
}

/// sum(proj * y): a random linear functional of a layer output.
double project(const TensorD& proj, const TensorD& y)
{
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        s += proj[i] * y[i];
    }
    return s;
}

void mix(std::uint64_t& h, std::uint64_t v)
{
    h = splitmix64(h ^ v);
}

std::uint64_t sign_pattern(const TensorD& t)
{
    std::uint64_t h = 0;
    for (std::size_t i = 0; i < t.size(); ++i) {
        mix(h, t[i] > 0.0 ? 2 * i + 1 : 2 * i);
    }
    return h;
}

std::uint64_t index_pattern(const std::vector<std::size_t>& v)
{
    std::uint64_t h = 0;
    for (std::size_t x : v) {
        mix(h, x);
    }
    return h;
}

/// Target whose analytic gradient lives in `grad`; coordinates are assigned
/// later by distribute().
GradCheckTarget target(std::string name, TensorD& values, const TensorD& grad)
{
    return {std::move(name), values.data(), grad.data(), {}};
}

/// Spreads `points` random coordinates round-robin over the targets so small
/// tensors such as biases are always covered.
void distribute(std::vector<GradCheckTarget>& targets, std::size_t points, KeyedRng& rng)
{
    for (std::size_t p = 0; p < points; ++p) {
        GradCheckTarget& t = targets[p % targets.size()];
        t.indices.push_back(rng.below(t.values.size()));
    }
}

GradCheckReport check_smooth(std::vector<GradCheckTarget>& targets, const std::function<double()>& objective,
                             std::size_t points, KeyedRng& rng)
{
    distribute(targets, points, rng);
    return grad_check(objective, targets);
}

GradCheckReport check_piecewise(std::vector<GradCheckTarget>& targets,
                                const std::function<PiecewiseValue()>& objective, std::size_t points,
                                KeyedRng& rng)
{
    distribute(targets, points, rng);
    return grad_check_piecewise(objective, targets);
}

GradCheckReport conv_check(KeyedRng& rng, std::size_t points, std::size_t cin, std::size_t cout, std::size_t k,
                           std::size_t side)
{
    TensorD x = random_tensor(rng, {2, cin, side, side});
    TensorD w = random_tensor(rng, {cout, cin, k, k});
    TensorD b = random_tensor(rng, {cout});
    const TensorD proj = random_tensor(rng, {2, cout, side, side});
    const Conv2dGrads<double> g = conv2d_backward(x, w, true, proj);
    std::vector<GradCheckTarget> t{target("input", x, g.input), target("weight", w, g.weight),
                                   target("bias", b, g.bias)};
    return check_smooth(t, [&] { return project(proj, conv2d(x, w, &b)); }, points, rng);
}

GradCheckReport batchnorm_check(KeyedRng& rng, std::size_t points, const Shape& shape, Mode mode)
{
    const std::size_t c = shape[1];
    TensorD x = random_tensor(rng, shape, -2.0, 2.0);
    TensorD gamma = random_tensor(rng, {c}, 0.5, 1.5);
    TensorD beta = random_tensor(rng, {c});
    const TensorD mean = random_tensor(rng, {c});
    const TensorD var = random_tensor(rng, {c}, 0.5, 2.0);
    const TensorD proj = random_tensor(rng, shape);
    auto run = [&](BatchNormCache<double>* cache) {
        TensorD rm = mean;
        TensorD rv = var;
        return batchnorm(x, gamma, beta, rm, rv, mode, cache);
    };
    BatchNormCache<double> cache;
    run(&cache);
    const BatchNormGrads<double> g = batchnorm_backward(cache, gamma, proj);
    std::vector<GradCheckTarget> t{target("input", x, g.input), target("gamma", gamma, g.gamma),
                                   target("beta", beta, g.beta)};
    return check_smooth(t, [&] { return project(proj, run(nullptr)); }, points, rng);
}

GradCheckReport pool_check(KeyedRng& rng, std::size_t points, const Shape& shape,
                           const std::function<PoolResult<double>(const TensorD&)>& forward,
                           const std::function<TensorD(const PoolResult<double>&, const TensorD&)>& backward)
{
    TensorD x = random_tensor(rng, shape);
    const PoolResult<double> base = forward(x);
    const TensorD proj = random_tensor(rng, base.output.shape());
    const TensorD g = backward(base, proj);
    std::vector<GradCheckTarget> t{target("input", x, g)};
    return check_piecewise(
        t,
        [&] {
            const PoolResult<double> r = forward(x);
            return PiecewiseValue{project(proj, r.output), index_pattern(r.argmax)};
        },
        points, rng);
}

GradCheckReport broadcast_check(KeyedRng& rng, std::size_t points, const Shape& map_shape)
{
    TensorD m = random_tensor(rng, map_shape);
    TensorD f = random_tensor(rng, {2, 3, 4, 4});
    const TensorD proj = random_tensor(rng, f.shape());
    const BroadcastMulGrads<double> g = broadcast_mul_backward(m, f, proj);
    std::vector<GradCheckTarget> t{target("map", m, g.map), target("feature", f, g.feature)};
    return check_smooth(t, [&] { return project(proj, broadcast_mul(m, f)); }, points, rng);
}

/// Random N x C x 6 x 6 feature through CBAM block 0 of a tiny network.
GradCheckReport cbam_check(KeyedRng& rng, const GradCheckSuiteOptions& opt)
{
    FerNetwork<double> net(ArchConfig::tiny(), opt.seed);
    for (auto& [name, p] : net.params()) {
        if (name.starts_with("cnn.cbam1.")) {
            for (std::size_t i = 0; i < p.size(); ++i) {
                p[i] += rng.uniform(-0.3, 0.3);  // move biases off zero
            }
        }
    }
    const std::size_t c = net.arch().conv_channels[0];
    TensorD x = random_tensor(rng, {2, c, 6, 6});
    CbamTrace<double> trace;
    const TensorD y = net.cbam_apply(0, x, &trace);
    const TensorD proj = random_tensor(rng, y.shape());
    net.zero_grad();
    const TensorD gx = net.cbam_backward(0, trace, proj);

    std::vector<GradCheckTarget> t{target("feature", x, gx)};
    for (auto& [name, p] : net.params()) {
        if (name.starts_with("cnn.cbam1.")) {
            t.push_back({name, p.data(), p.grad(), {}});
        }
    }
    return check_piecewise(
        t,
        [&] {
            CbamTrace<double> tr;
            const TensorD out = net.cbam_apply(0, x, &tr);
            std::uint64_t h = sign_pattern(tr.avg_hidden[0].pre_activation);
            mix(h, sign_pattern(tr.max_hidden[0].pre_activation));
            mix(h, index_pattern(tr.max_pool.argmax));
            mix(h, index_pattern(tr.spatial_max.argmax));
            return PiecewiseValue{project(proj, out), h};
        },
        opt.points, rng);
}

/// Cross-entropy of the tiny network on synthetic samples, train-mode batch
/// norm, with respect to every trainable tensor.
GradCheckReport network_check(KeyedRng& rng, const GradCheckSuiteOptions& opt)
{
    FerNetwork<double> net(ArchConfig::tiny(), opt.seed);
    for (auto& [name, p] : net.params()) {
        if (name.ends_with(".bias") || name.ends_with(".beta")) {
            for (std::size_t i = 0; i < p.size(); ++i) {
                p[i] += rng.uniform(-0.1, 0.1);
            }
        }
    }
    const Dataset data = make_synthetic_dataset(opt.network_batch, opt.seed);
    const NetworkInput<double> input = assemble_input<double>(std::span<const MultimodalSample>(data));
    std::vector<std::size_t> labels;
    for (const MultimodalSample& s : data) {
        labels.push_back(s.label);
    }

    const ForwardTrace<double> trace = net.forward(input, Mode::Train);
    const CrossEntropyResult<double> ce = cross_entropy(trace.probs, labels);
    net.zero_grad();
    net.backward(trace, ce.grad_logits);

    std::vector<GradCheckTarget> t;
    for (auto& [name, p] : net.params()) {
        t.push_back({name, p.data(), p.grad(), {}});
    }
    const std::size_t points = std::max(opt.points, 2 * t.size());
    return check_piecewise(
        t,
        [&] {
            const ForwardTrace<double> tr = net.forward(input, Mode::Train);
            return PiecewiseValue{cross_entropy(tr.probs, labels).loss, activation_pattern(tr)};
        },
        points, rng);
}

const std::map<std::string, Check, std::less<>>& registry()
{
    static const std::map<std::string, Check, std::less<>> checks = {
        {"conv2d_3x3", [](KeyedRng& r, const GradCheckSuiteOptions& o) { return conv_check(r, o.points, 3, 4, 3, 6); }},
        {"conv2d_7x7", [](KeyedRng& r, const GradCheckSuiteOptions& o) { return conv_check(r, o.points, 2, 1, 7, 8); }},
        {"maxpool2d",
         [](KeyedRng& r, const GradCheckSuiteOptions& o) {
             return pool_check(
                 r, o.points, {2, 3, 6, 6}, [](const TensorD& x) { return maxpool2d(x); },
                 [&](const PoolResult<double>& p, const TensorD& g) {
                     return maxpool2d_backward(Shape{2, 3, 6, 6}, p.argmax, g);
                 });
         }},
        {"global_avg_pool",
         [](KeyedRng& r, const GradCheckSuiteOptions& o) {
             return pool_check(
                 r, o.points, {2, 3, 4, 4}, [](const TensorD& x) { return global_pool(x, PoolKind::Avg); },
                 [](const PoolResult<double>& p, const TensorD& g) {
                     return global_pool_backward(Shape{2, 3, 4, 4}, PoolKind::Avg, p.argmax, g);
                 });
         }},
        {"global_max_pool",
         [](KeyedRng& r, const GradCheckSuiteOptions& o) {
             return pool_check(
                 r, o.points, {2, 3, 4, 4}, [](const TensorD& x) { return global_pool(x, PoolKind::Max); },
                 [](const PoolResult<double>& p, const TensorD& g) {
                     return global_pool_backward(Shape{2, 3, 4, 4}, PoolKind::Max, p.argmax, g);
                 });
         }},
        {"channel_avg_pool",
         [](KeyedRng& r, const GradCheckSuiteOptions& o) {
             return pool_check(
                 r, o.points, {2, 4, 5, 5}, [](const TensorD& x) { return channel_pool(x, PoolKind::Avg); },
                 [](const PoolResult<double>& p, const TensorD& g) {
                     return channel_pool_backward(Shape{2, 4, 5, 5}, PoolKind::Avg, p.argmax, g);
                 });
         }},
        {"channel_max_pool",
         [](KeyedRng& r, const GradCheckSuiteOptions& o) {
             return pool_check(
                 r, o.points, {2, 4, 5, 5}, [](const TensorD& x) { return channel_pool(x, PoolKind::Max); },
                 [](const PoolResult<double>& p, const TensorD& g) {
                     return channel_pool_backward(Shape{2, 4, 5, 5}, PoolKind::Max, p.argmax, g);
                 });
         }},
        {"batchnorm_train_4d",
         [](KeyedRng& r, const GradCheckSuiteOptions& o) { return batchnorm_check(r, o.points, {4, 3, 3, 3}, Mode::Train); }},
        {"batchnorm_train_2d",
         [](KeyedRng& r, const GradCheckSuiteOptions& o) { return batchnorm_check(r, o.points, {5, 6}, Mode::Train); }},
        {"batchnorm_infer",
         [](KeyedRng& r, const GradCheckSuiteOptions& o) { return batchnorm_check(r, o.points, {3, 4}, Mode::Infer); }},
        {"dense",
         [](KeyedRng& r, const GradCheckSuiteOptions& o) {
             TensorD x = random_tensor(r, {3, 7});
             TensorD w = random_tensor(r, {5, 7});
             TensorD b = random_tensor(r, {5});
             const TensorD proj = random_tensor(r, {3, 5});
             const DenseGrads<double> g = dense_backward(x, w, true, proj);
             std::vector<GradCheckTarget> t{target("input", x, g.input), target("weight", w, g.weight),
                                            target("bias", b, g.bias)};
             return check_smooth(t, [&] { return project(proj, dense(x, w, &b)); }, o.points, r);
         }},
        {"relu",
         [](KeyedRng& r, const GradCheckSuiteOptions& o) {
             TensorD x = random_tensor(r, {3, 8});
             const TensorD proj = random_tensor(r, {3, 8});
             const TensorD g = relu_backward(x, proj);
             std::vector<GradCheckTarget> t{target("input", x, g)};
             return check_piecewise(
                 t, [&] { return PiecewiseValue{project(proj, relu(x)), sign_pattern(x)}; }, o.points, r);
         }},
        {"sigmoid",
         [](KeyedRng& r, const GradCheckSuiteOptions& o) {
             TensorD x = random_tensor(r, {3, 8}, -4.0, 4.0);
             const TensorD proj = random_tensor(r, {3, 8});
             const TensorD g = sigmoid_backward(sigmoid(x), proj);
             std::vector<GradCheckTarget> t{target("input", x, g)};
             return check_smooth(t, [&] { return project(proj, sigmoid(x)); }, o.points, r);
         }},
        {"softmax",
         [](KeyedRng& r, const GradCheckSuiteOptions& o) {
             TensorD x = random_tensor(r, {4, 7}, -3.0, 3.0);
             const TensorD proj = random_tensor(r, {4, 7});
             const TensorD g = softmax_backward(softmax(x), proj);
             std::vector<GradCheckTarget> t{target("logits", x, g)};
             return check_smooth(t, [&] { return project(proj, softmax(x)); }, o.points, r);
         }},
        {"softmax_cross_entropy",
         [](KeyedRng& r, const GradCheckSuiteOptions& o) {
             TensorD x = random_tensor(r, {4, 7}, -3.0, 3.0);
             std::vector<std::size_t> labels;
             for (std::size_t i = 0; i < 4; ++i) {
                 labels.push_back(r.below(7));
             }
             const CrossEntropyResult<double> ce = cross_entropy(softmax(x), labels);
             std::vector<GradCheckTarget> t{target("logits", x, ce.grad_logits)};
             return check_smooth(t, [&] { return cross_entropy(softmax(x), labels).loss; }, o.points, r);
         }},
        {"broadcast_mul_channel",
         [](KeyedRng& r, const GradCheckSuiteOptions& o) { return broadcast_check(r, o.points, {2, 3, 1, 1}); }},
        {"broadcast_mul_spatial",
         [](KeyedRng& r, const GradCheckSuiteOptions& o) { return broadcast_check(r, o.points, {2, 1, 4, 4}); }},
        {"concat",
         [](KeyedRng& r, const GradCheckSuiteOptions& o) {
             TensorD a = random_tensor(r, {2, 3});
             TensorD b = random_tensor(r, {2, 4});
             TensorD c = random_tensor(r, {2, 2});
             const TensorD proj = random_tensor(r, {2, 9});
             const std::vector<TensorD> g = split_features(proj, {3, 4, 2});
             std::vector<GradCheckTarget> t{target("f1", a, g[0]), target("f2", b, g[1]), target("f3", c, g[2])};
             return check_smooth(t, [&] { return project(proj, fuse(a, b, c)); }, o.points, r);
         }},
        {"cbam", [](KeyedRng& r, const GradCheckSuiteOptions& o) { return cbam_check(r, o); }},
        {"network", [](KeyedRng& r, const GradCheckSuiteOptions& o) { return network_check(r, o); }},
    };
    return checks;
}

}  // namespace

std::vector<std::string> gradcheck_layers()
{
    std::vector<std::string> names;
    for (const auto& [name, check] : registry()) {
        if (name != "network") {
            names.push_back(name);
        }
    }
    names.push_back("network");
    return names;
}

LayerCheck run_layer_check(std::string_view layer, const GradCheckSuiteOptions& options)
{
    const auto it = registry().find(layer);
    if (it == registry().end()) {
        throw std::invalid_argument("unknown gradient-check layer '" + std::string(layer) + "'");
    }
    KeyedRng rng{options.seed, fnv1a(layer)};
    LayerCheck out;
    out.layer = std::string(layer);
    out.tolerance = layer == "network" ? kNetworkTolerance : kLayerTolerance;
    const auto start = std::chrono::steady_clock::now();
    out.report = it->second(rng, options);
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return out;
}

std::vector<LayerCheck> run_gradcheck_suite(const GradCheckSuiteOptions& options)
{
    std::vector<LayerCheck> out;
    for (const std::string& layer : gradcheck_layers()) {
        out.push_back(run_layer_check(layer, options));
    }
    return out;
}

}  // namespace fer
