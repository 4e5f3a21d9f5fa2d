#include "fer/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "fer/rng.hpp"

namespace fer {
namespace {

constexpr std::uint64_t kSynthStream = 0x53594e5448ULL;  // "SYNTH"
constexpr std::size_t kTile = 16;

void arc(LandmarkSet& lm, std::size_t first, std::size_t count, double cx, double cy, double rx, double ry,
         double from_deg, double to_deg)
{
    for (std::size_t i = 0; i < count; ++i) {
        const double t = count == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(count - 1);
        const double a = (from_deg + t * (to_deg - from_deg)) * std::numbers::pi / 180.0;
        lm[first + i] = {cx + rx * std::cos(a), cy + ry * std::sin(a)};
    }
}

}  // namespace

LandmarkSet template_landmarks()
{
    LandmarkSet lm{};
    arc(lm, 0, 17, 23.5, 20.0, 19.0, 24.0, 180.0, 0.0);  // jaw, right to left through the chin
    for (std::size_t i = 0; i < 17; ++i) {
        lm[i].y = 20.0 + std::abs(lm[i].y - 20.0);
    }
    arc(lm, 17, 5, 14.0, 14.0, 6.0, 2.0, 180.0, 360.0);  // brows
    arc(lm, 22, 5, 33.0, 14.0, 6.0, 2.0, 180.0, 360.0);
    for (std::size_t i = 0; i < 4; ++i) {  // nose bridge
        lm[27 + i] = {23.5, 17.0 + 2.5 * static_cast<double>(i)};
    }
    for (std::size_t i = 0; i < 5; ++i) {  // nostrils
        lm[31 + i] = {19.5 + 2.0 * static_cast<double>(i), 28.5};
    }
    arc(lm, 36, 6, 14.5, 19.0, 4.0, 1.5, 180.0, 480.0);  // eyes
    arc(lm, 42, 6, 32.5, 19.0, 4.0, 1.5, 180.0, 480.0);
    arc(lm, 48, 12, 23.5, 36.0, 8.0, 3.0, 180.0, 510.0);  // outer lip
    arc(lm, 60, 8, 23.5, 36.0, 5.0, 1.5, 180.0, 495.0);   // inner lip
    return lm;
}

Dataset make_synthetic_dataset(std::size_t count, std::uint64_t seed, std::size_t classes)
{
    if (count == 0) {
        throw std::invalid_argument("make_synthetic_dataset: count must be positive");
    }
    if (classes == 0 || classes > 9) {
        throw std::invalid_argument("make_synthetic_dataset: between 1 and 9 classes are supported");
    }
    const LandmarkSet base = template_landmarks();
    Dataset data;
    data.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t label = i % classes;
        KeyedRng rng{seed, kSynthStream, i};

        // Class c lights tile c of a 3 x 3 grid.
        const std::size_t tile_row = label / 3;
        const std::size_t tile_col = label % 3;
        std::vector<std::uint8_t> raw(kImagePixels);
        for (std::size_t y = 0; y < kImageSide; ++y) {
            for (std::size_t x = 0; x < kImageSide; ++x) {
                const bool lit = y / kTile == tile_row && x / kTile == tile_col;
                const double v = (lit ? 0.8 : 0.2) + 0.05 * rng.normal();
                raw[y * kImageSide + x] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
            }
        }
        GrayImage image = preprocess_image(raw, kImageSide, kImageSide);

        // Mouth opens and brows lift in proportion to the class index.
        const double openness = static_cast<double>(label) - 0.5 * static_cast<double>(classes - 1);
        LandmarkSet lm = base;
        for (std::size_t p = 0; p < kLandmarkCount; ++p) {
            if (p >= 48) {
                lm[p].y += (lm[p].y - 36.0) * 0.35 * openness;
                lm[p].x += (lm[p].x - 23.5) * 0.08 * openness;
            } else if (p >= 17 && p < 27) {
                lm[p].y -= 0.6 * openness;
            }
            lm[p].x += 0.15 * rng.normal();
            lm[p].y += 0.15 * rng.normal();
        }
        data.push_back(make_sample(i, std::move(image), lm, label, Split::Train));
    }
    return data;
}

}  // namespace fer
