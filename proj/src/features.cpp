#include "fer/features.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "fer/rng.hpp"

namespace fer {
namespace {

constexpr double kFrameCenter = (static_cast<double>(kImageSide) - 1.0) / 2.0;

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

}  // namespace

GrayImage::GrayImage(std::vector<double> pixels) : pixels_(std::move(pixels))
{
    if (pixels_.size() != kImagePixels) {
        throw std::invalid_argument("GrayImage: expected " + std::to_string(kImagePixels) + " pixels, got " +
                                    std::to_string(pixels_.size()));
    }
    for (double v : pixels_) {
        if (!(v >= 0.0 && v <= 1.0)) {
            throw std::invalid_argument("GrayImage: intensity " + std::to_string(v) + " outside [0, 1]");
        }
    }
}

GrayImage preprocess_image(std::span<const std::uint8_t> raw, std::size_t width, std::size_t height)
{
    if (raw.empty() || width == 0 || height == 0) {
        throw std::invalid_argument("preprocess_image: empty input");
    }
    if (raw.size() != width * height) {
        throw std::invalid_argument("preprocess_image: " + std::to_string(raw.size()) + " bytes for a " +
                                    std::to_string(width) + "x" + std::to_string(height) + " image");
    }
    std::vector<double> out(kImagePixels);
    if (width == kImageSide && height == kImageSide) {
        std::transform(raw.begin(), raw.end(), out.begin(), [](std::uint8_t b) { return b / 255.0; });
        return GrayImage(std::move(out));
    }
    // Half-pixel-center mapping with edge clamping.
    const double sx = static_cast<double>(width) / kImageSide;
    const double sy = static_cast<double>(height) / kImageSide;
    auto src = [&](std::size_t x, std::size_t y) { return raw[y * width + x] / 255.0; };
    for (std::size_t y = 0; y < kImageSide; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(height - 1));
        const auto y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, height - 1);
        const double wy = fy - static_cast<double>(y0);
        for (std::size_t x = 0; x < kImageSide; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(width - 1));
            const auto x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, width - 1);
            const double wx = fx - static_cast<double>(x0);
            const double top = (1.0 - wx) * src(x0, y0) + wx * src(x1, y0);
            const double bottom = (1.0 - wx) * src(x0, y1) + wx * src(x1, y1);
            out[y * kImageSide + x] = clamp01((1.0 - wy) * top + wy * bottom);
        }
    }
    return GrayImage(std::move(out));
}

// ---------------------------------------------------------------------------

HogVector extract_hog(std::span<const double> pixels, std::size_t side, const HogParams& params)
{
    if (pixels.size() != side * side || side % params.cell_size != 0 ||
        params.cells_per_side(side) < params.block_cells) {
        throw std::invalid_argument("extract_hog: unsupported image geometry");
    }
    const std::size_t cells = params.cells_per_side(side);
    const double bin_width = 180.0 / static_cast<double>(params.bins);
    std::vector<double> hist(cells * cells * params.bins, 0.0);

    auto px = [&](std::size_t x, std::size_t y) { return pixels[y * side + x]; };
    for (std::size_t y = 0; y < side; ++y) {
        for (std::size_t x = 0; x < side; ++x) {
            const double gx = px(std::min(x + 1, side - 1), y) - px(x == 0 ? 0 : x - 1, y);
            const double gy = px(x, std::min(y + 1, side - 1)) - px(x, y == 0 ? 0 : y - 1);
            const double magnitude = std::hypot(gx, gy);
            if (magnitude == 0.0) {
                continue;
            }
            double angle = std::atan2(gy, gx) * 180.0 / std::numbers::pi;
            if (angle < 0.0) {
                angle += 180.0;
            }
            if (angle >= 180.0) {
                angle -= 180.0;
            }
            const double pos = angle / bin_width;
            const double lower = std::floor(pos);
            const double frac = pos - lower;
            const std::size_t b0 = static_cast<std::size_t>(lower) % params.bins;
            const std::size_t b1 = (b0 + 1) % params.bins;
            double* cell = hist.data() + ((y / params.cell_size) * cells + x / params.cell_size) * params.bins;
            cell[b0] += (1.0 - frac) * magnitude;
            cell[b1] += frac * magnitude;
        }
    }

    const std::size_t blocks = params.blocks_per_side(side);
    const std::size_t block_len = params.block_cells * params.block_cells * params.bins;
    HogVector out;
    out.reserve(blocks * blocks * block_len);
    std::vector<double> block(block_len);
    for (std::size_t by = 0; by < blocks; ++by) {
        for (std::size_t bx = 0; bx < blocks; ++bx) {
            std::size_t k = 0;
            for (std::size_t dy = 0; dy < params.block_cells; ++dy) {
                for (std::size_t dx = 0; dx < params.block_cells; ++dx) {
                    const double* cell = hist.data() + ((by + dy) * cells + bx + dx) * params.bins;
                    for (std::size_t b = 0; b < params.bins; ++b) {
                        block[k++] = cell[b];
                    }
                }
            }
            double sq = 0.0;
            for (double v : block) {
                sq += v * v;
            }
            const double norm = std::sqrt(sq + params.epsilon * params.epsilon);
            for (double v : block) {
                out.push_back(v / norm);
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------

std::vector<double> normalize_landmarks(const LandmarkSet& landmarks)
{
    double cx = 0.0;
    double cy = 0.0;
    for (const Point2& p : landmarks) {
        if (!std::isfinite(p.x) || !std::isfinite(p.y)) {
            throw std::invalid_argument("normalize_landmarks: non-finite coordinate");
        }
        cx += p.x;
        cy += p.y;
    }
    cx /= kLandmarkCount;
    cy /= kLandmarkCount;
    double spread = 0.0;
    for (const Point2& p : landmarks) {
        spread += (p.x - cx) * (p.x - cx) + (p.y - cy) * (p.y - cy);
    }
    const double rms = std::sqrt(spread / kLandmarkCount);
    if (!(rms > 0.0)) {
        throw std::invalid_argument("normalize_landmarks: all points coincide (zero spread)");
    }
    std::vector<double> out;
    out.reserve(kLandmarkDim);
    for (const Point2& p : landmarks) {
        out.push_back((p.x - cx) / rms);
        out.push_back((p.y - cy) / rms);
    }
    return out;
}

// ---------------------------------------------------------------------------

void AugmentSpec::validate() const
{
    if (!(max_translation >= 0.0) || !(max_rotation >= 0.0)) {
        throw std::invalid_argument("AugmentSpec: translation and rotation bounds must be non-negative");
    }
    if (expansion < 1) {
        throw std::invalid_argument("AugmentSpec: expansion factor must be at least 1");
    }
}

Point2 RigidTransform::apply(Point2 p) const
{
    const double a = angle_deg * std::numbers::pi / 180.0;
    const double c = std::cos(a);
    const double s = std::sin(a);
    const double dx = p.x - kFrameCenter;
    const double dy = p.y - kFrameCenter;
    return {c * dx - s * dy + kFrameCenter + tx, s * dx + c * dy + kFrameCenter + ty};
}

Point2 RigidTransform::apply_inverse(Point2 p) const
{
    const double a = angle_deg * std::numbers::pi / 180.0;
    const double c = std::cos(a);
    const double s = std::sin(a);
    const double dx = p.x - tx - kFrameCenter;
    const double dy = p.y - ty - kFrameCenter;
    return {c * dx + s * dy + kFrameCenter, -s * dx + c * dy + kFrameCenter};
}

RigidTransform sample_transform(const AugmentSpec& spec, std::uint64_t sample_id, std::size_t draw)
{
    spec.validate();
    if (draw == 0) {
        return {};
    }
    KeyedRng rng{spec.seed, sample_id, draw};
    RigidTransform t;
    t.tx = rng.uniform(-spec.max_translation, spec.max_translation);
    t.ty = rng.uniform(-spec.max_translation, spec.max_translation);
    t.angle_deg = rng.uniform(-spec.max_rotation, spec.max_rotation);
    return t;
}

GrayImage transform_image(const GrayImage& image, const RigidTransform& transform)
{
    if (transform.tx == 0.0 && transform.ty == 0.0 && transform.angle_deg == 0.0) {
        return image;
    }
    const auto side = static_cast<std::ptrdiff_t>(kImageSide);
    auto pixel = [&](std::ptrdiff_t x, std::ptrdiff_t y) {
        if (x < 0 || y < 0 || x >= side || y >= side) {
            return 0.0;
        }
        return image.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y));
    };
    std::vector<double> out(kImagePixels);
    for (std::ptrdiff_t y = 0; y < side; ++y) {
        for (std::ptrdiff_t x = 0; x < side; ++x) {
            const Point2 s = transform.apply_inverse({static_cast<double>(x), static_cast<double>(y)});
            const double fx = std::floor(s.x);
            const double fy = std::floor(s.y);
            const double wx = s.x - fx;
            const double wy = s.y - fy;
            const auto x0 = static_cast<std::ptrdiff_t>(fx);
            const auto y0 = static_cast<std::ptrdiff_t>(fy);
            const double top = (1.0 - wx) * pixel(x0, y0) + wx * pixel(x0 + 1, y0);
            const double bottom = (1.0 - wx) * pixel(x0, y0 + 1) + wx * pixel(x0 + 1, y0 + 1);
            out[static_cast<std::size_t>(y * side + x)] = clamp01((1.0 - wy) * top + wy * bottom);
        }
    }
    return GrayImage(std::move(out));
}

LandmarkSet transform_landmarks(const LandmarkSet& landmarks, const RigidTransform& transform)
{
    if (transform.tx == 0.0 && transform.ty == 0.0 && transform.angle_deg == 0.0) {
        return landmarks;
    }
    LandmarkSet out;
    std::transform(landmarks.begin(), landmarks.end(), out.begin(),
                   [&](const Point2& p) { return transform.apply(p); });
    return out;
}

std::pair<GrayImage, LandmarkSet> augment_sample(const GrayImage& image, const LandmarkSet& landmarks,
                                                 const AugmentSpec& spec, std::uint64_t sample_id,
                                                 std::size_t draw)
{
    const RigidTransform t = sample_transform(spec, sample_id, draw);
    return {transform_image(image, t), transform_landmarks(landmarks, t)};
}

}  // namespace fer
