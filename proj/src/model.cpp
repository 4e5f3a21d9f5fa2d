#include "fer/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "fer/rng.hpp"

namespace fer {
namespace {

std::string idx(std::size_t i) { return std::to_string(i + 1); }

struct ChainLayer {
    std::string name;
    std::size_t in;
    std::size_t out;
    bool bn_relu;
    bool bias;
};

// Layer list of an FC chain. All but the last layer are followed by batch
// norm + relu. A layer carries a bias only when no batch norm follows it
// linearly: sub-network outputs feed the head's first batch norm, so only the
// final head layer has one.
std::vector<ChainLayer> chain_layers(const std::string& prefix, std::size_t in, const std::vector<std::size_t>& widths,
                                     bool final_bias)
{
    std::vector<ChainLayer> out;
    for (std::size_t j = 0; j < widths.size(); ++j) {
        const bool last = j + 1 == widths.size();
        out.push_back({prefix + ".fc" + idx(j), in, widths[j], !last, last && final_bias});
        in = widths[j];
    }
    return out;
}

std::vector<ChainLayer> all_chains(const ArchConfig& a, std::vector<ChainLayer>* cnn, std::vector<ChainLayer>* lnn,
                                   std::vector<ChainLayer>* hnn, std::vector<ChainLayer>* head)
{
    *cnn = chain_layers("cnn", a.flatten_width(), a.cnn_fc, false);
    *lnn = chain_layers("lnn", kLandmarkDim, a.lnn_fc, false);
    *hnn = chain_layers("hnn", kHogDim, a.hnn_fc, false);
    *head = chain_layers("head", a.fused_width(), {a.head_hidden, a.num_classes}, true);
    std::vector<ChainLayer> all;
    for (const auto* chain : {cnn, lnn, hnn, head}) {
        all.insert(all.end(), chain->begin(), chain->end());
    }
    return all;
}

void add_batchnorm(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t channels)
{
    out.push_back({prefix + ".gamma", {channels}, ParamInit::One, 1, true});
    out.push_back({prefix + ".beta", {channels}, ParamInit::Zero, 1, true});
    out.push_back({prefix + ".running_mean", {channels}, ParamInit::Zero, 1, false});
    out.push_back({prefix + ".running_var", {channels}, ParamInit::One, 1, false});
}

void mix_bits(std::uint64_t& h, std::uint64_t v)
{
    h = splitmix64(h ^ v);
}

template <typename T>
void mix_signs(std::uint64_t& h, const BasicTensor<T>& t)
{
    std::uint64_t word = 0;
    std::size_t bit = 0;
    for (std::size_t i = 0; i < t.size(); ++i) {
        word |= static_cast<std::uint64_t>(t[i] > T{0}) << bit;
        if (++bit == 64) {
            mix_bits(h, word);
            word = 0;
            bit = 0;
        }
    }
    mix_bits(h, word);
}

void mix_indices(std::uint64_t& h, const std::vector<std::size_t>& v)
{
    for (std::size_t i : v) {
        mix_bits(h, i);
    }
}

template <typename T>
void mix_dense(std::uint64_t& h, const std::vector<DenseTrace<T>>& chain)
{
    for (const DenseTrace<T>& tr : chain) {
        mix_signs(h, tr.pre_activation);
    }
}

template <typename T>
BasicTensor<T> stack_channels(const BasicTensor<T>& a, const BasicTensor<T>& b)
{
    // a, b: N x 1 x H x W -> N x 2 x H x W
    const std::size_t n = a.dim(0);
    const std::size_t plane = a.dim(2) * a.dim(3);
    BasicTensor<T> out(Shape{n, 2, a.dim(2), a.dim(3)});
    for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(a.raw() + i * plane, plane, out.raw() + (2 * i) * plane);
        std::copy_n(b.raw() + i * plane, plane, out.raw() + (2 * i + 1) * plane);
    }
    return out;
}

template <typename T>
std::pair<BasicTensor<T>, BasicTensor<T>> unstack_channels(const BasicTensor<T>& g)
{
    const std::size_t n = g.dim(0);
    const std::size_t plane = g.dim(2) * g.dim(3);
    BasicTensor<T> a(Shape{n, 1, g.dim(2), g.dim(3)});
    BasicTensor<T> b(Shape{n, 1, g.dim(2), g.dim(3)});
    for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(g.raw() + (2 * i) * plane, plane, a.raw() + i * plane);
        std::copy_n(g.raw() + (2 * i + 1) * plane, plane, b.raw() + i * plane);
    }
    return {std::move(a), std::move(b)};
}

template <typename T>
void add_into(BasicTensor<T>& dst, const BasicTensor<T>& src)
{
    accumulate(dst.data(), src.data());
}

}  // namespace

// ---------------------------------------------------------------------------

ArchConfig ArchConfig::paper()
{
    ArchConfig a;
    a.name = "paper";
    a.conv_channels = {32, 64, 128};
    a.cnn_fc = {4096, 1024, 128};
    a.lnn_fc = {1024, 128};
    a.hnn_fc = {4096, 1024, 128};
    a.head_hidden = 384;
    return a;
}

ArchConfig ArchConfig::tiny()
{
    ArchConfig a;
    a.name = "tiny";
    a.conv_channels = {8, 16, 32};
    a.cnn_fc = {256, 64, 32};
    a.lnn_fc = {64, 32};
    a.hnn_fc = {256, 64, 32};
    a.head_hidden = 96;
    return a;
}

ArchConfig ArchConfig::preset(std::string_view name)
{
    if (name == "paper") {
        return paper();
    }
    if (name == "tiny") {
        return tiny();
    }
    throw std::invalid_argument("unknown architecture preset '" + std::string(name) + "' (expected paper|tiny)");
}

std::size_t ArchConfig::flatten_width() const
{
    const std::size_t side = kImageSide / 8;
    return conv_channels[2] * side * side;
}

void ArchConfig::validate() const
{
    if (cnn_fc.empty() || lnn_fc.empty() || hnn_fc.empty()) {
        throw std::invalid_argument("ArchConfig: every sub-network needs at least one FC layer");
    }
    if (cnn_fc.back() != lnn_fc.back() || cnn_fc.back() != hnn_fc.back()) {
        throw std::invalid_argument("ArchConfig: sub-network output widths must agree");
    }
    if (cbam_reduction == 0 || cbam_kernel % 2 == 0) {
        throw std::invalid_argument("ArchConfig: CBAM reduction must be positive and its kernel odd");
    }
    for (std::size_t c : conv_channels) {
        if (c == 0 || c % cbam_reduction != 0) {
            throw std::invalid_argument("ArchConfig: conv channels " + std::to_string(c) +
                                        " not divisible by CBAM reduction " + std::to_string(cbam_reduction));
        }
    }
    if (head_hidden == 0 || num_classes < 2) {
        throw std::invalid_argument("ArchConfig: head needs a hidden width and at least two classes");
    }
    for (const auto* widths : {&cnn_fc, &lnn_fc, &hnn_fc}) {
        if (std::find(widths->begin(), widths->end(), std::size_t{0}) != widths->end()) {
            throw std::invalid_argument("ArchConfig: FC widths must be positive");
        }
    }
}

std::vector<ParamSpec> parameter_layout(const ArchConfig& arch)
{
    arch.validate();
    std::vector<ParamSpec> out;
    std::size_t cin = 1;
    const std::size_t k = arch.cbam_kernel;
    for (std::size_t b = 0; b < 3; ++b) {
        const std::size_t c = arch.conv_channels[b];
        const std::string conv = "cnn.conv" + idx(b);
        out.push_back({conv + ".weight", {c, cin, 3, 3}, ParamInit::Kaiming, cin * 9, true});
        add_batchnorm(out, conv + ".bn", c);
        const std::string cbam = "cnn.cbam" + idx(b);
        const std::size_t hidden = c / arch.cbam_reduction;
        out.push_back({cbam + ".mlp1.weight", {hidden, c}, ParamInit::Kaiming, c, true});
        out.push_back({cbam + ".mlp1.bias", {hidden}, ParamInit::Zero, 1, true});
        out.push_back({cbam + ".mlp2.weight", {c, hidden}, ParamInit::LeCun, hidden, true});
        out.push_back({cbam + ".mlp2.bias", {c}, ParamInit::Zero, 1, true});
        out.push_back({cbam + ".spatial.weight", {1, 2, k, k}, ParamInit::LeCun, 2 * k * k, true});
        out.push_back({cbam + ".spatial.bias", {1}, ParamInit::Zero, 1, true});
        cin = c;
    }
    std::vector<ChainLayer> cnn, lnn, hnn, head;
    for (const ChainLayer& l : all_chains(arch, &cnn, &lnn, &hnn, &head)) {
        if (l.bn_relu) {
            out.push_back({l.name + ".weight", {l.out, l.in}, ParamInit::Kaiming, l.in, true});
            add_batchnorm(out, l.name + ".bn", l.out);
        } else {
            out.push_back({l.name + ".weight", {l.out, l.in}, ParamInit::LeCun, l.in, true});
            if (l.bias) {
                out.push_back({l.name + ".bias", {l.out}, ParamInit::Zero, 1, true});
            }
        }
    }
    std::sort(out.begin(), out.end(), [](const ParamSpec& a, const ParamSpec& b) { return a.name < b.name; });
    return out;
}

// ---------------------------------------------------------------------------

template <typename T>
NetworkInput<T> assemble_input(std::span<const MultimodalSample> samples)
{
    if (samples.empty()) {
        throw std::invalid_argument("assemble_input: empty batch");
    }
    const std::size_t n = samples.size();
    NetworkInput<T> in{BasicTensor<T>(Shape{n, 1, kImageSide, kImageSide}), BasicTensor<T>(Shape{n, kLandmarkDim}),
                       BasicTensor<T>(Shape{n, kHogDim})};
    for (std::size_t i = 0; i < n; ++i) {
        const MultimodalSample& s = samples[i];
        if (s.hog.size() != kHogDim) {
            throw std::invalid_argument("assemble_input: sample " + std::to_string(s.id) +
                                        " is missing its HOG modality");
        }
        const auto px = s.image.pixels();
        std::transform(px.begin(), px.end(), in.images.raw() + i * kImagePixels,
                       [](double v) { return static_cast<T>(v); });
        const std::vector<double> lm = normalize_landmarks(s.landmarks);
        std::transform(lm.begin(), lm.end(), in.landmarks.raw() + i * kLandmarkDim,
                       [](double v) { return static_cast<T>(v); });
        std::transform(s.hog.begin(), s.hog.end(), in.hog.raw() + i * kHogDim,
                       [](double v) { return static_cast<T>(v); });
    }
    return in;
}

template <typename T>
BasicTensor<T> fuse(const BasicTensor<T>& f1, const BasicTensor<T>& f2, const BasicTensor<T>& f3)
{
    return concat_features<T>({&f1, &f2, &f3});
}

template <typename T>
std::uint64_t activation_pattern(const ForwardTrace<T>& trace)
{
    std::uint64_t h = 0x2545f4914f6cdd1dULL;
    for (const ConvBlockTrace<T>& b : trace.cnn.blocks) {
        mix_signs(h, b.pre_activation);
        mix_signs(h, b.cbam.avg_hidden[0].pre_activation);
        mix_signs(h, b.cbam.max_hidden[0].pre_activation);
        mix_indices(h, b.cbam.max_pool.argmax);
        mix_indices(h, b.cbam.spatial_max.argmax);
        mix_indices(h, b.pool_argmax);
    }
    mix_dense(h, trace.cnn.fc);
    mix_dense(h, trace.lnn);
    mix_dense(h, trace.hnn);
    mix_dense(h, trace.head);
    return h;
}

// ---------------------------------------------------------------------------

template <typename T>
FerNetwork<T>::FerNetwork(ArchConfig arch, std::uint64_t seed) : arch_(std::move(arch))
{
    for (const ParamSpec& spec : parameter_layout(arch_)) {
        BasicTensor<T> t(spec.shape);
        switch (spec.init) {
        case ParamInit::Zero:
            break;
        case ParamInit::One:
            t.fill(T{1});
            break;
        case ParamInit::Kaiming:
        case ParamInit::LeCun: {
            const double gain = spec.init == ParamInit::Kaiming ? 2.0 : 1.0;
            const double stddev = std::sqrt(gain / static_cast<double>(spec.fan_in));
            KeyedRng rng{seed, fnv1a(spec.name)};
            for (std::size_t i = 0; i < t.size(); ++i) {
                t[i] = static_cast<T>(stddev * rng.normal());
            }
            break;
        }
        }
        (spec.trainable ? params_ : buffers_).emplace(spec.name, std::move(t));
    }
    check_layout();
}

template <typename T>
FerNetwork<T>::FerNetwork(ArchConfig arch, LayerParams<T> params, LayerParams<T> buffers)
    : arch_(std::move(arch)), params_(std::move(params)), buffers_(std::move(buffers))
{
    check_layout();
}

template <typename T>
void FerNetwork<T>::check_layout()
{
    const std::vector<ParamSpec> layout = parameter_layout(arch_);
    std::size_t trainable = 0;
    for (const ParamSpec& spec : layout) {
        const LayerParams<T>& store = spec.trainable ? params_ : buffers_;
        const auto it = store.find(spec.name);
        if (it == store.end()) {
            throw std::invalid_argument("FerNetwork: missing tensor '" + spec.name + "'");
        }
        if (it->second.shape() != spec.shape) {
            throw ShapeError("FerNetwork: tensor '" + spec.name + "' has shape " +
                             shape_to_string(it->second.shape()) + ", expected " + shape_to_string(spec.shape));
        }
        trainable += spec.trainable ? 1 : 0;
    }
    if (params_.size() != trainable || buffers_.size() != layout.size() - trainable) {
        throw std::invalid_argument("FerNetwork: unexpected extra tensors for architecture '" + arch_.name + "'");
    }
    std::vector<ChainLayer> cnn, lnn, hnn, head;
    all_chains(arch_, &cnn, &lnn, &hnn, &head);
    auto to_specs = [](const std::vector<ChainLayer>& layers) {
        std::vector<DenseSpec> out;
        for (const ChainLayer& l : layers) {
            out.push_back({l.name, l.bn_relu, l.bias});
        }
        return out;
    };
    cnn_fc_ = to_specs(cnn);
    lnn_fc_ = to_specs(lnn);
    hnn_fc_ = to_specs(hnn);
    head_fc_ = to_specs(head);
}

template <typename T>
std::size_t FerNetwork<T>::parameter_count() const
{
    std::size_t n = 0;
    for (const auto& [name, t] : params_) {
        n += t.size();
    }
    return n;
}

template <typename T>
void FerNetwork<T>::zero_grad()
{
    for (auto& [name, t] : params_) {
        t.ensure_grad();
        t.zero_grad();
    }
}

template <typename T>
const BasicTensor<T>& FerNetwork<T>::param(const std::string& name) const
{
    const auto it = params_.find(name);
    if (it == params_.end()) {
        throw std::out_of_range("FerNetwork: no parameter '" + name + "'");
    }
    return it->second;
}

template <typename T>
void FerNetwork<T>::accumulate_grad(const std::string& name, const BasicTensor<T>& grad)
{
    BasicTensor<T>& p = params_.at(name);
    accumulate(p.ensure_grad(), grad.data());
}

template <typename T>
BasicTensor<T> FerNetwork<T>::run_batchnorm(const std::string& prefix, const BasicTensor<T>& x,
                                            LayerParams<T>* updates, BatchNormCache<T>* cache) const
{
    const BasicTensor<T>& gamma = param(prefix + ".gamma");
    const BasicTensor<T>& beta = param(prefix + ".beta");
    if (updates != nullptr) {
        return batchnorm(x, gamma, beta, updates->at(prefix + ".running_mean"), updates->at(prefix + ".running_var"),
                         Mode::Train, cache);
    }
    return batchnorm_infer(x, gamma, beta, buffers_.at(prefix + ".running_mean"),
                           buffers_.at(prefix + ".running_var"), cache);
}

template <typename T>
BasicTensor<T> FerNetwork<T>::run_dense_chain(const std::vector<DenseSpec>& chain, const BasicTensor<T>& input,
                                              LayerParams<T>* updates, std::vector<DenseTrace<T>>* trace) const
{
    if (trace != nullptr) {
        trace->clear();
    }
    BasicTensor<T> x = input;
    for (const DenseSpec& layer : chain) {
        DenseTrace<T> tr;
        BasicTensor<T> y;
        const BasicTensor<T>& w = param(layer.name + ".weight");
        if (layer.bn_relu) {
            BasicTensor<T> u = run_batchnorm(layer.name + ".bn", dense(x, w), updates, trace ? &tr.bn : nullptr);
            y = relu(u);
            if (trace != nullptr) {
                tr.pre_activation = std::move(u);
            }
        } else {
            y = dense(x, w, layer.bias ? &param(layer.name + ".bias") : nullptr);
        }
        if (trace != nullptr) {
            tr.input = std::move(x);
            trace->push_back(std::move(tr));
        }
        x = std::move(y);
    }
    return x;
}

template <typename T>
BasicTensor<T> FerNetwork<T>::backward_dense_chain(const std::vector<DenseSpec>& chain,
                                                   const std::vector<DenseTrace<T>>& trace, BasicTensor<T> grad)
{
    for (std::size_t i = chain.size(); i-- > 0;) {
        const DenseSpec& layer = chain[i];
        const DenseTrace<T>& tr = trace.at(i);
        const BasicTensor<T>& w = param(layer.name + ".weight");
        if (layer.bn_relu) {
            grad = relu_backward(tr.pre_activation, grad);
            BatchNormGrads<T> bg = batchnorm_backward(tr.bn, param(layer.name + ".bn.gamma"), grad);
            accumulate_grad(layer.name + ".bn.gamma", bg.gamma);
            accumulate_grad(layer.name + ".bn.beta", bg.beta);
            grad = std::move(bg.input);
        }
        DenseGrads<T> dg = dense_backward(tr.input, w, layer.bias, grad);
        accumulate_grad(layer.name + ".weight", dg.weight);
        if (layer.bias) {
            accumulate_grad(layer.name + ".bias", dg.bias);
        }
        grad = std::move(dg.input);
    }
    return grad;
}

// ---------------------------------------------------------------------------

template <typename T>
BasicTensor<T> FerNetwork<T>::cbam_apply(std::size_t block, const BasicTensor<T>& feature, CbamTrace<T>* trace) const
{
    if (feature.rank() != 4) {
        throw ShapeError("cbam_apply: expected N x C x H x W, got " + shape_to_string(feature.shape()));
    }
    const std::string prefix = "cnn.cbam" + idx(block);
    const BasicTensor<T>& w1 = param(prefix + ".mlp1.weight");
    const BasicTensor<T>& b1 = param(prefix + ".mlp1.bias");
    const BasicTensor<T>& w2 = param(prefix + ".mlp2.weight");
    const BasicTensor<T>& b2 = param(prefix + ".mlp2.bias");
    const std::size_t n = feature.dim(0);
    const std::size_t c = feature.dim(1);

    // Channel attention: shared MLP over the avg- and max-pooled descriptors.
    auto mlp = [&](const BasicTensor<T>& v, std::array<DenseTrace<T>, 2>* tr) {
        BasicTensor<T> pre = dense(v, w1, &b1);
        BasicTensor<T> hidden = relu(pre);
        BasicTensor<T> out = dense(hidden, w2, &b2);
        if (tr != nullptr) {
            (*tr)[0].input = v;
            (*tr)[0].pre_activation = std::move(pre);
            (*tr)[1].input = std::move(hidden);
        }
        return out;
    };
    PoolResult<T> avg = global_pool(feature, PoolKind::Avg);
    PoolResult<T> mx = global_pool(feature, PoolKind::Max);
    BasicTensor<T> logits = add(mlp(avg.output, trace ? &trace->avg_hidden : nullptr),
                                mlp(mx.output, trace ? &trace->max_hidden : nullptr));
    BasicTensor<T> channel_gate = sigmoid(logits).reshaped({n, c, 1, 1});
    BasicTensor<T> refined = broadcast_mul(channel_gate, feature);

    // Spatial attention: conv over the stacked channel-mean and channel-max maps.
    PoolResult<T> savg = channel_pool(refined, PoolKind::Avg);
    PoolResult<T> smax = channel_pool(refined, PoolKind::Max);
    BasicTensor<T> stacked = stack_channels(savg.output, smax.output);
    BasicTensor<T> spatial_gate =
        sigmoid(conv2d(stacked, param(prefix + ".spatial.weight"), &param(prefix + ".spatial.bias")));
    BasicTensor<T> out = broadcast_mul(spatial_gate, refined);

    if (trace != nullptr) {
        trace->input = feature;
        trace->avg_pool = std::move(avg);
        trace->max_pool = std::move(mx);
        trace->channel_gate = std::move(channel_gate);
        trace->refined = std::move(refined);
        trace->spatial_avg = std::move(savg);
        trace->spatial_max = std::move(smax);
        trace->stacked = std::move(stacked);
        trace->spatial_gate = std::move(spatial_gate);
    }
    return out;
}

template <typename T>
BasicTensor<T> FerNetwork<T>::cbam_backward(std::size_t block, const CbamTrace<T>& tr,
                                            const BasicTensor<T>& grad_output)
{
    const std::string prefix = "cnn.cbam" + idx(block);
    const std::size_t n = tr.input.dim(0);
    const std::size_t c = tr.input.dim(1);

    BroadcastMulGrads<T> spatial = broadcast_mul_backward(tr.spatial_gate, tr.refined, grad_output);
    BasicTensor<T> g_slogits = sigmoid_backward(tr.spatial_gate, spatial.map);
    Conv2dGrads<T> cg = conv2d_backward(tr.stacked, param(prefix + ".spatial.weight"), true, g_slogits);
    accumulate_grad(prefix + ".spatial.weight", cg.weight);
    accumulate_grad(prefix + ".spatial.bias", cg.bias);
    auto [g_savg, g_smax] = unstack_channels(cg.input);
    BasicTensor<T> g_refined = std::move(spatial.feature);
    add_into(g_refined, channel_pool_backward(tr.refined.shape(), PoolKind::Avg, {}, g_savg));
    add_into(g_refined, channel_pool_backward(tr.refined.shape(), PoolKind::Max, tr.spatial_max.argmax, g_smax));

    BroadcastMulGrads<T> channel = broadcast_mul_backward(tr.channel_gate, tr.input, g_refined);
    BasicTensor<T> g_logits = sigmoid_backward(tr.channel_gate, channel.map).reshaped({n, c});

    const BasicTensor<T>& w1 = param(prefix + ".mlp1.weight");
    const BasicTensor<T>& w2 = param(prefix + ".mlp2.weight");
    auto mlp_backward = [&](const std::array<DenseTrace<T>, 2>& path) {
        DenseGrads<T> d2 = dense_backward(path[1].input, w2, true, g_logits);
        accumulate_grad(prefix + ".mlp2.weight", d2.weight);
        accumulate_grad(prefix + ".mlp2.bias", d2.bias);
        DenseGrads<T> d1 = dense_backward(path[0].input, w1, true, relu_backward(path[0].pre_activation, d2.input));
        accumulate_grad(prefix + ".mlp1.weight", d1.weight);
        accumulate_grad(prefix + ".mlp1.bias", d1.bias);
        return std::move(d1.input);
    };
    BasicTensor<T> g_avg = mlp_backward(tr.avg_hidden);
    BasicTensor<T> g_max = mlp_backward(tr.max_hidden);

    BasicTensor<T> g_input = std::move(channel.feature);
    add_into(g_input, global_pool_backward(tr.input.shape(), PoolKind::Avg, {}, g_avg));
    add_into(g_input, global_pool_backward(tr.input.shape(), PoolKind::Max, tr.max_pool.argmax, g_max));
    return g_input;
}

// ---------------------------------------------------------------------------

template <typename T>
BasicTensor<T> FerNetwork<T>::run_cnn(const BasicTensor<T>& images, LayerParams<T>* updates, CnnTrace<T>* trace) const
{
    if (images.rank() != 4 || images.dim(1) != 1 || images.dim(2) != kImageSide || images.dim(3) != kImageSide) {
        throw ShapeError("cnn_forward: expected N x 1 x 48 x 48 images, got " + shape_to_string(images.shape()));
    }
    if (trace != nullptr) {
        trace->blocks.clear();
    }
    const std::size_t n = images.dim(0);
    BasicTensor<T> x = images;
    for (std::size_t b = 0; b < 3; ++b) {
        const std::string conv = "cnn.conv" + idx(b);
        ConvBlockTrace<T> bt;
        BasicTensor<T> u =
            run_batchnorm(conv + ".bn", conv2d(x, param(conv + ".weight")), updates, trace ? &bt.bn : nullptr);
        BasicTensor<T> attended = cbam_apply(b, relu(u), trace ? &bt.cbam : nullptr);
        PoolResult<T> pooled = maxpool2d(attended);
        if (trace != nullptr) {
            bt.input = std::move(x);
            bt.pre_activation = std::move(u);
            bt.pool_input_shape = attended.shape();
            bt.pool_argmax = std::move(pooled.argmax);
            trace->blocks.push_back(std::move(bt));
        }
        x = std::move(pooled.output);
    }
    if (trace != nullptr) {
        trace->flatten_shape = x.shape();
    }
    x.reshape({n, arch_.flatten_width()});
    return run_dense_chain(cnn_fc_, x, updates, trace ? &trace->fc : nullptr);
}

template <typename T>
BasicTensor<T> FerNetwork<T>::cnn_forward(const BasicTensor<T>& images, Mode mode, CnnTrace<T>* trace)
{
    return run_cnn(images, mode == Mode::Train ? &buffers_ : nullptr, trace);
}

template <typename T>
BasicTensor<T> FerNetwork<T>::cnn_forward(const BasicTensor<T>& images) const
{
    return run_cnn(images, nullptr, nullptr);
}

namespace {

template <typename T>
void require_width(const BasicTensor<T>& x, std::size_t width, const char* op)
{
    if (x.rank() != 2 || x.dim(1) != width) {
        throw ShapeError(std::string(op) + ": expected N x " + std::to_string(width) + " input, got " +
                         shape_to_string(x.shape()));
    }
}

}  // namespace

template <typename T>
BasicTensor<T> FerNetwork<T>::lnn_forward(const BasicTensor<T>& landmarks, Mode mode,
                                          std::vector<DenseTrace<T>>* trace)
{
    require_width(landmarks, kLandmarkDim, "lnn_forward");
    return run_dense_chain(lnn_fc_, landmarks, mode == Mode::Train ? &buffers_ : nullptr, trace);
}

template <typename T>
BasicTensor<T> FerNetwork<T>::lnn_forward(const BasicTensor<T>& landmarks) const
{
    require_width(landmarks, kLandmarkDim, "lnn_forward");
    return run_dense_chain(lnn_fc_, landmarks, nullptr, nullptr);
}

template <typename T>
BasicTensor<T> FerNetwork<T>::hnn_forward(const BasicTensor<T>& hog, Mode mode, std::vector<DenseTrace<T>>* trace)
{
    require_width(hog, kHogDim, "hnn_forward");
    return run_dense_chain(hnn_fc_, hog, mode == Mode::Train ? &buffers_ : nullptr, trace);
}

template <typename T>
BasicTensor<T> FerNetwork<T>::hnn_forward(const BasicTensor<T>& hog) const
{
    require_width(hog, kHogDim, "hnn_forward");
    return run_dense_chain(hnn_fc_, hog, nullptr, nullptr);
}

template <typename T>
BasicTensor<T> FerNetwork<T>::classify_logits(const BasicTensor<T>& fused, Mode mode,
                                              std::vector<DenseTrace<T>>* trace)
{
    require_width(fused, arch_.fused_width(), "classify");
    return run_dense_chain(head_fc_, fused, mode == Mode::Train ? &buffers_ : nullptr, trace);
}

template <typename T>
BasicTensor<T> FerNetwork<T>::classify(const BasicTensor<T>& fused) const
{
    require_width(fused, arch_.fused_width(), "classify");
    return softmax(run_dense_chain(head_fc_, fused, nullptr, nullptr));
}

template <typename T>
ForwardTrace<T> FerNetwork<T>::run(const NetworkInput<T>& input, LayerParams<T>* updates) const
{
    const std::size_t n = input.batch();
    if (n == 0 || input.landmarks.empty() || input.hog.empty() || input.landmarks.dim(0) != n ||
        input.hog.dim(0) != n) {
        throw std::invalid_argument("forward: every sample needs image, landmark and HOG inputs");
    }
    require_width(input.landmarks, kLandmarkDim, "lnn_forward");
    require_width(input.hog, kHogDim, "hnn_forward");
    ForwardTrace<T> tr;
    tr.f1 = run_cnn(input.images, updates, &tr.cnn);
    tr.f2 = run_dense_chain(lnn_fc_, input.landmarks, updates, &tr.lnn);
    tr.f3 = run_dense_chain(hnn_fc_, input.hog, updates, &tr.hnn);
    tr.fused = fuse(tr.f1, tr.f2, tr.f3);
    tr.logits = run_dense_chain(head_fc_, tr.fused, updates, &tr.head);
    tr.probs = softmax(tr.logits);
    return tr;
}

template <typename T>
ForwardTrace<T> FerNetwork<T>::forward(const NetworkInput<T>& input, Mode mode)
{
    return run(input, mode == Mode::Train ? &buffers_ : nullptr);
}

template <typename T>
ForwardTrace<T> FerNetwork<T>::forward(const NetworkInput<T>& input) const
{
    return run(input, nullptr);
}

template <typename T>
BasicTensor<T> FerNetwork<T>::forward_full(const NetworkInput<T>& input) const
{
    const std::size_t n = input.batch();
    if (n == 0 || input.landmarks.empty() || input.hog.empty() || input.landmarks.dim(0) != n ||
        input.hog.dim(0) != n) {
        throw std::invalid_argument("forward_full: every sample needs image, landmark and HOG inputs");
    }
    const BasicTensor<T> f1 = cnn_forward(input.images);
    const BasicTensor<T> f2 = lnn_forward(input.landmarks);
    const BasicTensor<T> f3 = hnn_forward(input.hog);
    return classify(fuse(f1, f2, f3));
}

template <typename T>
void FerNetwork<T>::backward(const ForwardTrace<T>& trace, const BasicTensor<T>& grad_logits)
{
    BasicTensor<T> g_fused = backward_dense_chain(head_fc_, trace.head, grad_logits);
    const std::size_t w = arch_.feature_width();
    std::vector<BasicTensor<T>> parts = split_features(g_fused, {w, w, w});
    backward_dense_chain(lnn_fc_, trace.lnn, std::move(parts[1]));
    backward_dense_chain(hnn_fc_, trace.hnn, std::move(parts[2]));

    BasicTensor<T> g = backward_dense_chain(cnn_fc_, trace.cnn.fc, std::move(parts[0]));
    g.reshape(trace.cnn.flatten_shape);
    for (std::size_t b = trace.cnn.blocks.size(); b-- > 0;) {
        const ConvBlockTrace<T>& bt = trace.cnn.blocks[b];
        const std::string conv = "cnn.conv" + idx(b);
        g = maxpool2d_backward(bt.pool_input_shape, bt.pool_argmax, g);
        g = cbam_backward(b, bt.cbam, g);
        g = relu_backward(bt.pre_activation, g);
        BatchNormGrads<T> bg = batchnorm_backward(bt.bn, param(conv + ".bn.gamma"), g);
        accumulate_grad(conv + ".bn.gamma", bg.gamma);
        accumulate_grad(conv + ".bn.beta", bg.beta);
        Conv2dGrads<T> cg = conv2d_backward(bt.input, param(conv + ".weight"), false, bg.input);
        accumulate_grad(conv + ".weight", cg.weight);
        g = std::move(cg.input);
    }
}

template <typename T>
BasicTensor<T> predict_probabilities(const FerNetwork<T>& net, std::span<const MultimodalSample> samples,
                                     std::size_t chunk)
{
    if (samples.empty()) {
        throw std::invalid_argument("predict_probabilities: no samples");
    }
    if (chunk == 0) {
        throw std::invalid_argument("predict_probabilities: chunk must be positive");
    }
    const std::size_t k = net.arch().num_classes;
    BasicTensor<T> out(Shape{samples.size(), k});
    for (std::size_t start = 0; start < samples.size(); start += chunk) {
        const auto part = samples.subspan(start, std::min(chunk, samples.size() - start));
        const BasicTensor<T> probs = net.forward_full(assemble_input<T>(part));
        std::copy(probs.data().begin(), probs.data().end(), out.raw() + start * k);
    }
    return out;
}

// ---------------------------------------------------------------------------

std::string Prediction::class_name() const
{
    if (probabilities.size() == kNumClasses) {
        return std::string(kExpressionNames[class_index]);
    }
    return "class" + std::to_string(class_index);
}

template <typename T>
Prediction predict_expression(std::span<const T> probs)
{
    if (probs.empty()) {
        throw std::invalid_argument("predict_expression: empty probability row");
    }
    Prediction p;
    p.probabilities.reserve(probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i) {
        if (std::isnan(probs[i])) {
            throw std::invalid_argument("predict_expression: NaN probability at index " + std::to_string(i));
        }
        p.probabilities.push_back(static_cast<double>(probs[i]));
        if (probs[i] > probs[p.class_index]) {
            p.class_index = i;
        }
    }
    return p;
}

#define FER_INSTANTIATE_MODEL(T)                                                                   \
    template class FerNetwork<T>;                                                                  \
    template NetworkInput<T> assemble_input<T>(std::span<const MultimodalSample>);                 \
    template BasicTensor<T> fuse(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&); \
    template std::uint64_t activation_pattern(const ForwardTrace<T>&);                             \
    template Prediction predict_expression(std::span<const T>);                                    \
    template BasicTensor<T> predict_probabilities(const FerNetwork<T>&, std::span<const MultimodalSample>, std::size_t);

FER_INSTANTIATE_MODEL(float)
FER_INSTANTIATE_MODEL(double)

#undef FER_INSTANTIATE_MODEL

}  // namespace fer
