#pragma once

// Seeded desk-scale dataset with one bright tile per class in the image and a
// class-dependent mouth/brow displacement in the landmarks, so every modality
// separates the classes on its own.

#include <cstddef>
#include <cstdint>

#include "fer/dataset.hpp"

namespace fer {

/// A neutral 68-point face (jaw, brows, nose, eyes, mouth) in pixel
/// coordinates of the 48 x 48 frame.
LandmarkSet template_landmarks();

/// `count` samples, labels cycling 0..classes-1, ids 0..count-1. Pixel
/// values are multiples of 1/255 so they survive a CSV round trip exactly.
Dataset make_synthetic_dataset(std::size_t count = 64, std::uint64_t seed = 0, std::size_t classes = 7);

}  // namespace fer
