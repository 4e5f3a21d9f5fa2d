#include "fer/ops.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace fer {
namespace {

struct Dims4 {
    std::size_t n, c, h, w;
    std::size_t plane() const { return h * w; }
};

// Views a C x H x W or N x C x H x W shape as four dimensions.
Dims4 as_dims4(const Shape& shape, const char* op)
{
    if (shape.size() == 3) {
        return {1, shape[0], shape[1], shape[2]};
    }
    if (shape.size() == 4) {
        return {shape[0], shape[1], shape[2], shape[3]};
    }
    throw ShapeError(std::string(op) + ": expected C x H x W or N x C x H x W input, got " + shape_to_string(shape));
}

Shape with_channels(const Shape& like, std::size_t channels, std::size_t h, std::size_t w)
{
    if (like.size() == 3) {
        return {channels, h, w};
    }
    return {like[0], channels, h, w};
}

void require_same_shape(const Shape& a, const Shape& b, const char* op)
{
    if (a != b) {
        throw ShapeError(std::string(op) + ": shape " + shape_to_string(a) + " does not match " + shape_to_string(b));
    }
}

}  // namespace

// ---------------------------------------------------------------------------

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight, const BasicTensor<T>* bias)
{
    const Dims4 in = as_dims4(input.shape(), "conv2d");
    if (weight.rank() != 4 || weight.dim(2) != weight.dim(3) || weight.dim(2) % 2 == 0) {
        throw ShapeError("conv2d: weight must be C_out x C_in x k x k with odd k, got " +
                         shape_to_string(weight.shape()));
    }
    if (weight.dim(1) != in.c) {
        throw ShapeError("conv2d: input has " + std::to_string(in.c) + " channels but weight " +
                         shape_to_string(weight.shape()) + " expects " + std::to_string(weight.dim(1)));
    }
    const std::size_t cout = weight.dim(0);
    const std::size_t k = weight.dim(2);
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
    if (bias != nullptr && (bias->rank() != 1 || bias->dim(0) != cout)) {
        throw ShapeError("conv2d: bias must have " + std::to_string(cout) + " entries, got " +
                         shape_to_string(bias->shape()));
    }

    BasicTensor<T> out(with_channels(input.shape(), cout, in.h, in.w));
    const auto H = static_cast<std::ptrdiff_t>(in.h);
    const auto W = static_cast<std::ptrdiff_t>(in.w);
    for (std::size_t n = 0; n < in.n; ++n) {
        for (std::size_t co = 0; co < cout; ++co) {
            T* dst = out.raw() + (n * cout + co) * in.plane();
            if (bias != nullptr) {
                std::fill(dst, dst + in.plane(), (*bias)[co]);
            }
            for (std::size_t ci = 0; ci < in.c; ++ci) {
                const T* src = input.raw() + (n * in.c + ci) * in.plane();
                const T* wk = weight.raw() + (co * in.c + ci) * k * k;
                for (std::size_t ky = 0; ky < k; ++ky) {
                    const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
                    for (std::size_t kx = 0; kx < k; ++kx) {
                        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
                        const T wv = wk[ky * k + kx];
                        const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -dx);
                        const std::ptrdiff_t x1 = std::min<std::ptrdiff_t>(W, W - dx);
                        for (std::ptrdiff_t y = std::max<std::ptrdiff_t>(0, -dy); y < std::min(H, H - dy); ++y) {
                            T* drow = dst + y * W;
                            const T* srow = src + (y + dy) * W + dx;
                            for (std::ptrdiff_t x = x0; x < x1; ++x) {
                                drow[x] += wv * srow[x];
                            }
                        }
                    }
                }
            }
        }
    }
    return out;
}

template <typename T>
Conv2dGrads<T> conv2d_backward(const BasicTensor<T>& input, const BasicTensor<T>& weight, bool has_bias,
                               const BasicTensor<T>& grad_output)
{
    const Dims4 in = as_dims4(input.shape(), "conv2d_backward");
    const std::size_t cout = weight.dim(0);
    const std::size_t k = weight.dim(2);
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
    require_same_shape(grad_output.shape(), with_channels(input.shape(), cout, in.h, in.w), "conv2d_backward");

    Conv2dGrads<T> g{BasicTensor<T>(input.shape()), BasicTensor<T>(weight.shape()), {}};
    if (has_bias) {
        g.bias = BasicTensor<T>(Shape{cout});
    }
    const auto H = static_cast<std::ptrdiff_t>(in.h);
    const auto W = static_cast<std::ptrdiff_t>(in.w);
    for (std::size_t n = 0; n < in.n; ++n) {
        for (std::size_t co = 0; co < cout; ++co) {
            const T* gout = grad_output.raw() + (n * cout + co) * in.plane();
            if (has_bias) {
                T acc = 0;
                for (std::size_t i = 0; i < in.plane(); ++i) {
                    acc += gout[i];
                }
                g.bias[co] += acc;
            }
            for (std::size_t ci = 0; ci < in.c; ++ci) {
                const T* src = input.raw() + (n * in.c + ci) * in.plane();
                T* gin = g.input.raw() + (n * in.c + ci) * in.plane();
                const T* wk = weight.raw() + (co * in.c + ci) * k * k;
                T* gwk = g.weight.raw() + (co * in.c + ci) * k * k;
                for (std::size_t ky = 0; ky < k; ++ky) {
                    const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
                    for (std::size_t kx = 0; kx < k; ++kx) {
                        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
                        const T wv = wk[ky * k + kx];
                        const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -dx);
                        const std::ptrdiff_t x1 = std::min<std::ptrdiff_t>(W, W - dx);
                        T wacc = 0;
                        for (std::ptrdiff_t y = std::max<std::ptrdiff_t>(0, -dy); y < std::min(H, H - dy); ++y) {
                            const T* grow = gout + y * W;
                            const T* srow = src + (y + dy) * W + dx;
                            T* girow = gin + (y + dy) * W + dx;
                            T racc = 0;
#pragma omp simd reduction(+ : racc)
                            for (std::ptrdiff_t x = x0; x < x1; ++x) {
                                racc += grow[x] * srow[x];
                            }
                            wacc += racc;
                            for (std::ptrdiff_t x = x0; x < x1; ++x) {
                                girow[x] += wv * grow[x];
                            }
                        }
                        gwk[ky * k + kx] += wacc;
                    }
                }
            }
        }
    }
    return g;
}

// ---------------------------------------------------------------------------

template <typename T>
PoolResult<T> maxpool2d(const BasicTensor<T>& input)
{
    const Dims4 in = as_dims4(input.shape(), "maxpool2d");
    if (in.h % 2 != 0 || in.w % 2 != 0) {
        throw ShapeError("maxpool2d: spatial size must be even, got " + shape_to_string(input.shape()));
    }
    const std::size_t oh = in.h / 2;
    const std::size_t ow = in.w / 2;
    PoolResult<T> r{BasicTensor<T>(with_channels(input.shape(), in.c, oh, ow)), {}};
    r.argmax.resize(r.output.size());
    std::size_t o = 0;
    for (std::size_t nc = 0; nc < in.n * in.c; ++nc) {
        const std::size_t base = nc * in.plane();
        for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t x = 0; x < ow; ++x, ++o) {
                std::size_t best = base + (2 * y) * in.w + 2 * x;
                for (std::size_t dy = 0; dy < 2; ++dy) {
                    for (std::size_t dx = 0; dx < 2; ++dx) {
                        const std::size_t idx = base + (2 * y + dy) * in.w + 2 * x + dx;
                        if (input[idx] > input[best]) {
                            best = idx;
                        }
                    }
                }
                r.output[o] = input[best];
                r.argmax[o] = best;
            }
        }
    }
    return r;
}

template <typename T>
BasicTensor<T> maxpool2d_backward(const Shape& input_shape, const std::vector<std::size_t>& argmax,
                                  const BasicTensor<T>& grad_output)
{
    if (argmax.size() != grad_output.size()) {
        throw ShapeError("maxpool2d_backward: argmax/gradient size mismatch");
    }
    BasicTensor<T> g(input_shape);
    for (std::size_t o = 0; o < argmax.size(); ++o) {
        g[argmax[o]] += grad_output[o];
    }
    return g;
}

template <typename T>
PoolResult<T> global_pool(const BasicTensor<T>& input, PoolKind kind)
{
    const Dims4 in = as_dims4(input.shape(), "global_pool");
    Shape out_shape = input.rank() == 3 ? Shape{in.c} : Shape{in.n, in.c};
    PoolResult<T> r{BasicTensor<T>(out_shape), {}};
    if (kind == PoolKind::Max) {
        r.argmax.resize(in.n * in.c);
    }
    const std::size_t plane = in.plane();
    for (std::size_t nc = 0; nc < in.n * in.c; ++nc) {
        const T* src = input.raw() + nc * plane;
        if (kind == PoolKind::Avg) {
            T acc = 0;
            for (std::size_t i = 0; i < plane; ++i) {
                acc += src[i];
            }
            r.output[nc] = acc / static_cast<T>(plane);
        } else {
            std::size_t best = 0;
            for (std::size_t i = 1; i < plane; ++i) {
                if (src[i] > src[best]) {
                    best = i;
                }
            }
            r.output[nc] = src[best];
            r.argmax[nc] = nc * plane + best;
        }
    }
    return r;
}

template <typename T>
BasicTensor<T> global_pool_backward(const Shape& input_shape, PoolKind kind, const std::vector<std::size_t>& argmax,
                                    const BasicTensor<T>& grad_output)
{
    const Dims4 in = as_dims4(input_shape, "global_pool_backward");
    if (grad_output.size() != in.n * in.c) {
        throw ShapeError("global_pool_backward: gradient has wrong size");
    }
    BasicTensor<T> g(input_shape);
    const std::size_t plane = in.plane();
    for (std::size_t nc = 0; nc < in.n * in.c; ++nc) {
        if (kind == PoolKind::Avg) {
            const T share = grad_output[nc] / static_cast<T>(plane);
            std::fill(g.raw() + nc * plane, g.raw() + (nc + 1) * plane, share);
        } else {
            g[argmax[nc]] += grad_output[nc];
        }
    }
    return g;
}

template <typename T>
PoolResult<T> channel_pool(const BasicTensor<T>& input, PoolKind kind)
{
    const Dims4 in = as_dims4(input.shape(), "channel_pool");
    const std::size_t plane = in.plane();
    PoolResult<T> r{BasicTensor<T>(with_channels(input.shape(), 1, in.h, in.w)), {}};
    if (kind == PoolKind::Max) {
        r.argmax.resize(in.n * plane);
    }
    for (std::size_t n = 0; n < in.n; ++n) {
        const T* src = input.raw() + n * in.c * plane;
        T* dst = r.output.raw() + n * plane;
        if (kind == PoolKind::Avg) {
            for (std::size_t c = 0; c < in.c; ++c) {
                for (std::size_t i = 0; i < plane; ++i) {
                    dst[i] += src[c * plane + i];
                }
            }
            const T scale = T{1} / static_cast<T>(in.c);
            for (std::size_t i = 0; i < plane; ++i) {
                dst[i] *= scale;
            }
        } else {
            std::size_t* arg = r.argmax.data() + n * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                std::size_t best = 0;
                for (std::size_t c = 1; c < in.c; ++c) {
                    if (src[c * plane + i] > src[best * plane + i]) {
                        best = c;
                    }
                }
                dst[i] = src[best * plane + i];
                arg[i] = (n * in.c + best) * plane + i;
            }
        }
    }
    return r;
}

template <typename T>
BasicTensor<T> channel_pool_backward(const Shape& input_shape, PoolKind kind, const std::vector<std::size_t>& argmax,
                                     const BasicTensor<T>& grad_output)
{
    const Dims4 in = as_dims4(input_shape, "channel_pool_backward");
    const std::size_t plane = in.plane();
    if (grad_output.size() != in.n * plane) {
        throw ShapeError("channel_pool_backward: gradient has wrong size");
    }
    BasicTensor<T> g(input_shape);
    for (std::size_t n = 0; n < in.n; ++n) {
        const T* gout = grad_output.raw() + n * plane;
        if (kind == PoolKind::Avg) {
            const T scale = T{1} / static_cast<T>(in.c);
            for (std::size_t c = 0; c < in.c; ++c) {
                T* dst = g.raw() + (n * in.c + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) {
                    dst[i] = gout[i] * scale;
                }
            }
        } else {
            for (std::size_t i = 0; i < plane; ++i) {
                g[argmax[n * plane + i]] += gout[i];
            }
        }
    }
    return g;
}

// ---------------------------------------------------------------------------

namespace {

struct ChannelLayout {
    std::size_t n, c, inner;  // value (n, c, i) lives at (n * c_total + c) * inner + i
};

ChannelLayout channel_layout(const Shape& shape)
{
    if (shape.size() == 2) {
        return {shape[0], shape[1], 1};
    }
    if (shape.size() == 4) {
        return {shape[0], shape[1], shape[2] * shape[3]};
    }
    throw ShapeError("batchnorm: expected N x C or N x C x H x W input, got " + shape_to_string(shape));
}

}  // namespace

namespace {

// Train mode updates *running_mean / *running_var; infer mode reads them.
template <typename T>
BasicTensor<T> batchnorm_impl(const BasicTensor<T>& input, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                              const BasicTensor<T>& running_mean, const BasicTensor<T>& running_var,
                              BasicTensor<T>* update_mean, BasicTensor<T>* update_var, Mode mode,
                              BatchNormCache<T>* cache, const BatchNormOptions& options)
{
    const ChannelLayout L = channel_layout(input.shape());
    for (const BasicTensor<T>* t : {&gamma, &beta, &running_mean, &running_var}) {
        if (t->rank() != 1 || t->dim(0) != L.c) {
            throw ShapeError("batchnorm: per-channel tensors must have " + std::to_string(L.c) + " entries, got " +
                             shape_to_string(t->shape()));
        }
    }
    if (mode == Mode::Train && L.n < 2) {
        throw std::invalid_argument("batchnorm: train mode needs a batch of at least 2 samples");
    }

    BasicTensor<T> normalized(input.shape());
    std::vector<T> inv_std(L.c);
    const double count = static_cast<double>(L.n * L.inner);
    for (std::size_t c = 0; c < L.c; ++c) {
        double mean = 0.0;
        double var = 0.0;
        if (mode == Mode::Train) {
            for (std::size_t n = 0; n < L.n; ++n) {
                const T* src = input.raw() + (n * L.c + c) * L.inner;
                for (std::size_t i = 0; i < L.inner; ++i) {
                    mean += static_cast<double>(src[i]);
                }
            }
            mean /= count;
            for (std::size_t n = 0; n < L.n; ++n) {
                const T* src = input.raw() + (n * L.c + c) * L.inner;
                for (std::size_t i = 0; i < L.inner; ++i) {
                    const double d = static_cast<double>(src[i]) - mean;
                    var += d * d;
                }
            }
            var /= count;
            const double m = options.momentum;
            (*update_mean)[c] = static_cast<T>(m * static_cast<double>(running_mean[c]) + (1.0 - m) * mean);
            (*update_var)[c] = static_cast<T>(m * static_cast<double>(running_var[c]) +
                                              (1.0 - m) * var * count / (count - 1.0));
        } else {
            mean = static_cast<double>(running_mean[c]);
            var = static_cast<double>(running_var[c]);
        }
        const double istd = 1.0 / std::sqrt(var + options.epsilon);
        inv_std[c] = static_cast<T>(istd);
        for (std::size_t n = 0; n < L.n; ++n) {
            const std::size_t off = (n * L.c + c) * L.inner;
            for (std::size_t i = 0; i < L.inner; ++i) {
                normalized[off + i] = static_cast<T>((static_cast<double>(input[off + i]) - mean) * istd);
            }
        }
    }

    BasicTensor<T> out(input.shape());
    for (std::size_t n = 0; n < L.n; ++n) {
        for (std::size_t c = 0; c < L.c; ++c) {
            const std::size_t off = (n * L.c + c) * L.inner;
            for (std::size_t i = 0; i < L.inner; ++i) {
                out[off + i] = gamma[c] * normalized[off + i] + beta[c];
            }
        }
    }
    if (cache != nullptr) {
        cache->mode = mode;
        cache->normalized = std::move(normalized);
        cache->inv_std = std::move(inv_std);
    }
    return out;
}

}  // namespace

template <typename T>
BasicTensor<T> batchnorm(const BasicTensor<T>& input, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                         BasicTensor<T>& running_mean, BasicTensor<T>& running_var, Mode mode,
                         BatchNormCache<T>* cache, const BatchNormOptions& options)
{
    return batchnorm_impl(input, gamma, beta, running_mean, running_var, &running_mean, &running_var, mode, cache,
                          options);
}

template <typename T>
BasicTensor<T> batchnorm_infer(const BasicTensor<T>& input, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                               const BasicTensor<T>& running_mean, const BasicTensor<T>& running_var,
                               BatchNormCache<T>* cache, const BatchNormOptions& options)
{
    return batchnorm_impl<T>(input, gamma, beta, running_mean, running_var, nullptr, nullptr, Mode::Infer, cache,
                             options);
}

template <typename T>
BatchNormGrads<T> batchnorm_backward(const BatchNormCache<T>& cache, const BasicTensor<T>& gamma,
                                     const BasicTensor<T>& grad_output)
{
    require_same_shape(grad_output.shape(), cache.normalized.shape(), "batchnorm_backward");
    const ChannelLayout L = channel_layout(grad_output.shape());
    BatchNormGrads<T> g{BasicTensor<T>(grad_output.shape()), BasicTensor<T>(Shape{L.c}), BasicTensor<T>(Shape{L.c})};
    const T count = static_cast<T>(L.n * L.inner);
    for (std::size_t c = 0; c < L.c; ++c) {
        T sum_g = 0;
        T sum_gx = 0;
        for (std::size_t n = 0; n < L.n; ++n) {
            const std::size_t off = (n * L.c + c) * L.inner;
            for (std::size_t i = 0; i < L.inner; ++i) {
                sum_g += grad_output[off + i];
                sum_gx += grad_output[off + i] * cache.normalized[off + i];
            }
        }
        g.beta[c] = sum_g;
        g.gamma[c] = sum_gx;
        const T scale = gamma[c] * cache.inv_std[c];
        for (std::size_t n = 0; n < L.n; ++n) {
            const std::size_t off = (n * L.c + c) * L.inner;
            for (std::size_t i = 0; i < L.inner; ++i) {
                if (cache.mode == Mode::Train) {
                    g.input[off + i] =
                        scale * (grad_output[off + i] - sum_g / count - cache.normalized[off + i] * sum_gx / count);
                } else {
                    g.input[off + i] = scale * grad_output[off + i];
                }
            }
        }
    }
    return g;
}

// ---------------------------------------------------------------------------

template <typename T>
BasicTensor<T> dense(const BasicTensor<T>& input, const BasicTensor<T>& weight, const BasicTensor<T>* bias)
{
    if (input.rank() != 2 || weight.rank() != 2 || input.dim(1) != weight.dim(1)) {
        throw ShapeError("dense: input " + shape_to_string(input.shape()) + " incompatible with weight " +
                         shape_to_string(weight.shape()));
    }
    const std::size_t batch = input.dim(0);
    const std::size_t din = weight.dim(1);
    const std::size_t dout = weight.dim(0);
    if (bias != nullptr && (bias->rank() != 1 || bias->dim(0) != dout)) {
        throw ShapeError("dense: bias must have " + std::to_string(dout) + " entries, got " +
                         shape_to_string(bias->shape()));
    }
    BasicTensor<T> out(Shape{batch, dout});
    for (std::size_t n = 0; n < batch; ++n) {
        const T* x = input.raw() + n * din;
        for (std::size_t o = 0; o < dout; ++o) {
            const T* w = weight.raw() + o * din;
            T acc = 0;
#pragma omp simd reduction(+ : acc)
            for (std::size_t i = 0; i < din; ++i) {
                acc += x[i] * w[i];
            }
            out[n * dout + o] = bias != nullptr ? acc + (*bias)[o] : acc;
        }
    }
    return out;
}

template <typename T>
DenseGrads<T> dense_backward(const BasicTensor<T>& input, const BasicTensor<T>& weight, bool has_bias,
                             const BasicTensor<T>& grad_output)
{
    const std::size_t batch = input.dim(0);
    const std::size_t din = weight.dim(1);
    const std::size_t dout = weight.dim(0);
    require_same_shape(grad_output.shape(), Shape{batch, dout}, "dense_backward");
    DenseGrads<T> g{BasicTensor<T>(input.shape()), BasicTensor<T>(weight.shape()), {}};
    if (has_bias) {
        g.bias = BasicTensor<T>(Shape{dout});
    }
    for (std::size_t n = 0; n < batch; ++n) {
        const T* x = input.raw() + n * din;
        T* gx = g.input.raw() + n * din;
        for (std::size_t o = 0; o < dout; ++o) {
            const T go = grad_output[n * dout + o];
            if (has_bias) {
                g.bias[o] += go;
            }
            if (go == T{0}) {
                continue;
            }
            const T* w = weight.raw() + o * din;
            T* gw = g.weight.raw() + o * din;
            for (std::size_t i = 0; i < din; ++i) {
                gx[i] += go * w[i];
                gw[i] += go * x[i];
            }
        }
    }
    return g;
}

// ---------------------------------------------------------------------------

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input)
{
    BasicTensor<T> out(input.shape());
    for (std::size_t i = 0; i < input.size(); ++i) {
        out[i] = input[i] > T{0} ? input[i] : T{0};
    }
    return out;
}

template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& input, const BasicTensor<T>& grad_output)
{
    require_same_shape(input.shape(), grad_output.shape(), "relu_backward");
    BasicTensor<T> g(input.shape());
    for (std::size_t i = 0; i < input.size(); ++i) {
        g[i] = input[i] > T{0} ? grad_output[i] : T{0};
    }
    return g;
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& input)
{
    BasicTensor<T> out(input.shape());
    for (std::size_t i = 0; i < input.size(); ++i) {
        const T x = input[i];
        if (x >= T{0}) {
            out[i] = T{1} / (T{1} + std::exp(-x));
        } else {
            const T e = std::exp(x);
            out[i] = e / (T{1} + e);
        }
    }
    return out;
}

template <typename T>
BasicTensor<T> sigmoid_backward(const BasicTensor<T>& output, const BasicTensor<T>& grad_output)
{
    require_same_shape(output.shape(), grad_output.shape(), "sigmoid_backward");
    BasicTensor<T> g(output.shape());
    for (std::size_t i = 0; i < output.size(); ++i) {
        g[i] = grad_output[i] * output[i] * (T{1} - output[i]);
    }
    return g;
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& logits)
{
    if (logits.rank() != 2) {
        throw ShapeError("softmax: expected N x K logits, got " + shape_to_string(logits.shape()));
    }
    const std::size_t rows = logits.dim(0);
    const std::size_t k = logits.dim(1);
    BasicTensor<T> out(logits.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* z = logits.raw() + r * k;
        T* p = out.raw() + r * k;
        const T peak = *std::max_element(z, z + k);
        T sum = 0;
        for (std::size_t i = 0; i < k; ++i) {
            p[i] = std::exp(z[i] - peak);
            sum += p[i];
        }
        for (std::size_t i = 0; i < k; ++i) {
            p[i] /= sum;
        }
    }
    return out;
}

template <typename T>
BasicTensor<T> softmax_backward(const BasicTensor<T>& probs, const BasicTensor<T>& grad_output)
{
    require_same_shape(probs.shape(), grad_output.shape(), "softmax_backward");
    const std::size_t rows = probs.dim(0);
    const std::size_t k = probs.dim(1);
    BasicTensor<T> g(probs.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* p = probs.raw() + r * k;
        const T* go = grad_output.raw() + r * k;
        T dot = 0;
        for (std::size_t i = 0; i < k; ++i) {
            dot += p[i] * go[i];
        }
        for (std::size_t i = 0; i < k; ++i) {
            g[r * k + i] = p[i] * (go[i] - dot);
        }
    }
    return g;
}

// ---------------------------------------------------------------------------

template <typename T>
BasicTensor<T> concat_features(const std::vector<const BasicTensor<T>*>& parts)
{
    if (parts.empty()) {
        throw ShapeError("concat_features: need at least one part");
    }
    const std::size_t batch = parts.front()->dim(0);
    std::size_t total = 0;
    for (const BasicTensor<T>* p : parts) {
        if (p->rank() != 2 || p->dim(0) != batch) {
            throw ShapeError("concat_features: part " + shape_to_string(p->shape()) + " does not have batch size " +
                             std::to_string(batch));
        }
        total += p->dim(1);
    }
    BasicTensor<T> out(Shape{batch, total});
    for (std::size_t n = 0; n < batch; ++n) {
        T* dst = out.raw() + n * total;
        for (const BasicTensor<T>* p : parts) {
            const std::size_t w = p->dim(1);
            std::copy_n(p->raw() + n * w, w, dst);
            dst += w;
        }
    }
    return out;
}

template <typename T>
std::vector<BasicTensor<T>> split_features(const BasicTensor<T>& grad_output, const std::vector<std::size_t>& widths)
{
    std::size_t total = 0;
    for (std::size_t w : widths) {
        total += w;
    }
    if (grad_output.rank() != 2 || grad_output.dim(1) != total) {
        throw ShapeError("split_features: " + shape_to_string(grad_output.shape()) + " does not split into width " +
                         std::to_string(total));
    }
    const std::size_t batch = grad_output.dim(0);
    std::vector<BasicTensor<T>> parts;
    parts.reserve(widths.size());
    std::size_t offset = 0;
    for (std::size_t w : widths) {
        BasicTensor<T> part(Shape{batch, w});
        for (std::size_t n = 0; n < batch; ++n) {
            std::copy_n(grad_output.raw() + n * total + offset, w, part.raw() + n * w);
        }
        parts.push_back(std::move(part));
        offset += w;
    }
    return parts;
}

namespace {

enum class MapKind { Channel, Spatial };

MapKind classify_map(const Shape& map, const Shape& feature)
{
    if (feature.size() != map.size() || (feature.size() != 3 && feature.size() != 4)) {
        throw ShapeError("broadcast_mul: map " + shape_to_string(map) + " cannot broadcast onto " +
                         shape_to_string(feature));
    }
    const std::size_t off = feature.size() - 3;
    if (off == 1 && map[0] != feature[0]) {
        throw ShapeError("broadcast_mul: batch mismatch between map " + shape_to_string(map) + " and feature " +
                         shape_to_string(feature));
    }
    if (map[off] == feature[off] && map[off + 1] == 1 && map[off + 2] == 1) {
        return MapKind::Channel;
    }
    if (map[off] == 1 && map[off + 1] == feature[off + 1] && map[off + 2] == feature[off + 2]) {
        return MapKind::Spatial;
    }
    throw ShapeError("broadcast_mul: map " + shape_to_string(map) + " is neither C x 1 x 1 nor 1 x H x W for " +
                     shape_to_string(feature));
}

}  // namespace

template <typename T>
BasicTensor<T> broadcast_mul(const BasicTensor<T>& map, const BasicTensor<T>& feature)
{
    const MapKind kind = classify_map(map.shape(), feature.shape());
    const Dims4 f = as_dims4(feature.shape(), "broadcast_mul");
    const std::size_t plane = f.plane();
    BasicTensor<T> out(feature.shape());
    for (std::size_t n = 0; n < f.n; ++n) {
        for (std::size_t c = 0; c < f.c; ++c) {
            const std::size_t off = (n * f.c + c) * plane;
            if (kind == MapKind::Channel) {
                const T m = map[n * f.c + c];
                for (std::size_t i = 0; i < plane; ++i) {
                    out[off + i] = m * feature[off + i];
                }
            } else {
                const T* m = map.raw() + n * plane;
                for (std::size_t i = 0; i < plane; ++i) {
                    out[off + i] = m[i] * feature[off + i];
                }
            }
        }
    }
    return out;
}

template <typename T>
BroadcastMulGrads<T> broadcast_mul_backward(const BasicTensor<T>& map, const BasicTensor<T>& feature,
                                            const BasicTensor<T>& grad_output)
{
    const MapKind kind = classify_map(map.shape(), feature.shape());
    require_same_shape(feature.shape(), grad_output.shape(), "broadcast_mul_backward");
    const Dims4 f = as_dims4(feature.shape(), "broadcast_mul_backward");
    const std::size_t plane = f.plane();
    BroadcastMulGrads<T> g{BasicTensor<T>(map.shape()), BasicTensor<T>(feature.shape())};
    for (std::size_t n = 0; n < f.n; ++n) {
        for (std::size_t c = 0; c < f.c; ++c) {
            const std::size_t off = (n * f.c + c) * plane;
            if (kind == MapKind::Channel) {
                const T m = map[n * f.c + c];
                T acc = 0;
                for (std::size_t i = 0; i < plane; ++i) {
                    g.feature[off + i] = m * grad_output[off + i];
                    acc += grad_output[off + i] * feature[off + i];
                }
                g.map[n * f.c + c] = acc;
            } else {
                const T* m = map.raw() + n * plane;
                T* gm = g.map.raw() + n * plane;
                for (std::size_t i = 0; i < plane; ++i) {
                    g.feature[off + i] = m[i] * grad_output[off + i];
                    gm[i] += grad_output[off + i] * feature[off + i];
                }
            }
        }
    }
    return g;
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b)
{
    require_same_shape(a.shape(), b.shape(), "add");
    BasicTensor<T> out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) {
        out[i] = a[i] + b[i];
    }
    return out;
}

template <typename T>
void accumulate(std::span<T> dst, std::span<const T> src)
{
    if (dst.size() != src.size()) {
        throw ShapeError("accumulate: " + std::to_string(dst.size()) + " vs " + std::to_string(src.size()) +
                         " values");
    }
    for (std::size_t i = 0; i < dst.size(); ++i) {
        dst[i] += src[i];
    }
}

// ---------------------------------------------------------------------------

#define FER_INSTANTIATE_OPS(T)                                                                                     \
    template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>*);           \
    template Conv2dGrads<T> conv2d_backward(const BasicTensor<T>&, const BasicTensor<T>&, bool,                    \
                                            const BasicTensor<T>&);                                                \
    template PoolResult<T> maxpool2d(const BasicTensor<T>&);                                                       \
    template BasicTensor<T> maxpool2d_backward(const Shape&, const std::vector<std::size_t>&, const BasicTensor<T>&); \
    template PoolResult<T> global_pool(const BasicTensor<T>&, PoolKind);                                           \
    template BasicTensor<T> global_pool_backward(const Shape&, PoolKind, const std::vector<std::size_t>&,          \
                                                 const BasicTensor<T>&);                                           \
    template PoolResult<T> channel_pool(const BasicTensor<T>&, PoolKind);                                          \
    template BasicTensor<T> channel_pool_backward(const Shape&, PoolKind, const std::vector<std::size_t>&,         \
                                                  const BasicTensor<T>&);                                          \
    template BasicTensor<T> batchnorm(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,          \
                                      BasicTensor<T>&, BasicTensor<T>&, Mode, BatchNormCache<T>*,                  \
                                      const BatchNormOptions&);                                                    \
    template BasicTensor<T> batchnorm_infer(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,    \
                                            const BasicTensor<T>&, const BasicTensor<T>&, BatchNormCache<T>*,      \
                                            const BatchNormOptions&);                                              \
    template BatchNormGrads<T> batchnorm_backward(const BatchNormCache<T>&, const BasicTensor<T>&,                 \
                                                  const BasicTensor<T>&);                                          \
    template BasicTensor<T> dense(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>*);            \
    template DenseGrads<T> dense_backward(const BasicTensor<T>&, const BasicTensor<T>&, bool,                      \
                                          const BasicTensor<T>&);                                                  \
    template BasicTensor<T> relu(const BasicTensor<T>&);                                                           \
    template BasicTensor<T> relu_backward(const BasicTensor<T>&, const BasicTensor<T>&);                          \
    template BasicTensor<T> sigmoid(const BasicTensor<T>&);                                                        \
    template BasicTensor<T> sigmoid_backward(const BasicTensor<T>&, const BasicTensor<T>&);                       \
    template BasicTensor<T> softmax(const BasicTensor<T>&);                                                        \
    template BasicTensor<T> softmax_backward(const BasicTensor<T>&, const BasicTensor<T>&);                       \
    template BasicTensor<T> concat_features(const std::vector<const BasicTensor<T>*>&);                           \
    template std::vector<BasicTensor<T>> split_features(const BasicTensor<T>&, const std::vector<std::size_t>&);   \
    template BasicTensor<T> broadcast_mul(const BasicTensor<T>&, const BasicTensor<T>&);                          \
    template BroadcastMulGrads<T> broadcast_mul_backward(const BasicTensor<T>&, const BasicTensor<T>&,             \
                                                         const BasicTensor<T>&);                                   \
    template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                                    \
    template void accumulate(std::span<T>, std::span<const T>);

FER_INSTANTIATE_OPS(float)
FER_INSTANTIATE_OPS(double)

#undef FER_INSTANTIATE_OPS

}  // namespace fer
