#pragma once

// The three input modalities: a normalized 48x48 grayscale face, its HOG
// descriptor, and its 68-point landmark set, plus rigid augmentation.

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

namespace fer {

inline constexpr std::size_t kImageSide = 48;
inline constexpr std::size_t kImagePixels = kImageSide * kImageSide;
inline constexpr std::size_t kLandmarkCount = 68;
inline constexpr std::size_t kLandmarkDim = 2 * kLandmarkCount;

/// 48x48 intensities in [0, 1], row-major.
class GrayImage {
public:
    GrayImage() : pixels_(kImagePixels, 0.0) {}

    /// Throws std::invalid_argument unless there are exactly 2304 values in [0, 1].
    explicit GrayImage(std::vector<double> pixels);

    double at(std::size_t x, std::size_t y) const { return pixels_[y * kImageSide + x]; }
    std::span<const double> pixels() const { return pixels_; }

    friend bool operator==(const GrayImage&, const GrayImage&) = default;

private:
    std::vector<double> pixels_;
};

struct Point2 {
    double x = 0.0;
    double y = 0.0;
    friend bool operator==(const Point2&, const Point2&) = default;
};

/// 68 points in the pixel coordinates of the 48x48 frame.
using LandmarkSet = std::array<Point2, kLandmarkCount>;

using HogVector = std::vector<double>;

/// Scales 0-255 bytes to [0, 1] and bilinearly resizes to 48x48 when the
/// source has a different size.
GrayImage preprocess_image(std::span<const std::uint8_t> raw, std::size_t width, std::size_t height);

// ---------------------------------------------------------------------------
// HOG: centered [-1, 0, 1] gradients with replicated borders, 9 unsigned
// orientation bins centered at 0, 20, ..., 160 degrees with linear votes,
// 8x8-pixel cells, 2x2-cell blocks at a one-cell stride, L2 block norm.

struct HogParams {
    std::size_t cell_size = 8;
    std::size_t bins = 9;
    std::size_t block_cells = 2;
    double epsilon = 1e-6;

    std::size_t cells_per_side(std::size_t side) const { return side / cell_size; }
    std::size_t blocks_per_side(std::size_t side) const { return cells_per_side(side) - block_cells + 1; }
    std::size_t length(std::size_t side) const
    {
        const std::size_t b = blocks_per_side(side);
        return b * b * block_cells * block_cells * bins;
    }
};

inline constexpr std::size_t kHogDim = 900;

/// Accepts any finite intensities (not only [0, 1]).
HogVector extract_hog(std::span<const double> pixels, std::size_t side = kImageSide, const HogParams& params = {});

inline HogVector extract_hog(const GrayImage& image) { return extract_hog(image.pixels()); }

// ---------------------------------------------------------------------------

/// Centers on the centroid and scales by the RMS distance to it; flattened as
/// (x1, y1, ..., x68, y68). Throws when all points coincide.
std::vector<double> normalize_landmarks(const LandmarkSet& landmarks);

// ---------------------------------------------------------------------------

struct AugmentSpec {
    double max_translation = 4.0;  // pixels
    double max_rotation = 15.0;    // degrees
    std::size_t expansion = 30;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Rotation about the frame center (23.5, 23.5) followed by a translation.
struct RigidTransform {
    double tx = 0.0;
    double ty = 0.0;
    double angle_deg = 0.0;

    Point2 apply(Point2 p) const;
    Point2 apply_inverse(Point2 p) const;
};

/// The transform used for variant `draw` of sample `sample_id`. Variant 0 is
/// always the identity so the original sample is part of the expansion.
RigidTransform sample_transform(const AugmentSpec& spec, std::uint64_t sample_id, std::size_t draw);

/// Bilinear resample; pixels mapping outside the frame become 0.
GrayImage transform_image(const GrayImage& image, const RigidTransform& transform);

LandmarkSet transform_landmarks(const LandmarkSet& landmarks, const RigidTransform& transform);

std::pair<GrayImage, LandmarkSet> augment_sample(const GrayImage& image, const LandmarkSet& landmarks,
                                                 const AugmentSpec& spec, std::uint64_t sample_id,
                                                 std::size_t draw);

}  // namespace fer
