#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

#include "fer/features.hpp"

namespace fer {

/// FER2013 "Usage" column.
enum class Split { Train, PublicTest, FinalTest };

std::string_view split_name(Split split);

/// One face with all three modalities. `hog` is derived from `image`;
/// `landmarks` stay in raw pixel coordinates until batch assembly.
struct MultimodalSample {
    std::uint64_t id = 0;
    GrayImage image;
    LandmarkSet landmarks{};
    HogVector hog;
    std::size_t label = 0;
    Split split = Split::Train;

    friend bool operator==(const MultimodalSample&, const MultimodalSample&) = default;
};

MultimodalSample make_sample(std::uint64_t id, GrayImage image, const LandmarkSet& landmarks, std::size_t label,
                             Split split = Split::Train);

using Dataset = std::vector<MultimodalSample>;

Dataset filter_split(const Dataset& data, Split split);

}  // namespace fer
