#include "fer/dataset.hpp"

#include <utility>

namespace fer {

std::string_view split_name(Split split)
{
    switch (split) {
    case Split::Train:
        return "train";
    case Split::PublicTest:
        return "public-test";
    case Split::FinalTest:
        return "final-test";
    }
    return "unknown";
}

MultimodalSample make_sample(std::uint64_t id, GrayImage image, const LandmarkSet& landmarks, std::size_t label,
                             Split split)
{
    MultimodalSample s;
    s.id = id;
    s.hog = extract_hog(image);
    s.image = std::move(image);
    s.landmarks = landmarks;
    s.label = label;
    s.split = split;
    return s;
}

Dataset filter_split(const Dataset& data, Split split)
{
    Dataset out;
    for (const MultimodalSample& s : data) {
        if (s.split == split) {
            out.push_back(s);
        }
    }
    return out;
}

}  // namespace fer
