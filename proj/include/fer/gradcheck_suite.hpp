#pragma once

// Finite-difference verification of every layer's backward pass in 64-bit
// precision, plus an end-to-end check of the tiny network.

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "fer/grad_check.hpp"

namespace fer {

inline constexpr double kLayerTolerance = 1e-5;
inline constexpr double kNetworkTolerance = 1e-4;

struct GradCheckSuiteOptions {
    std::uint64_t seed = 0;
    std::size_t points = 100;        // sampled coordinates per layer
    std::size_t network_batch = 4;   // samples in the end-to-end check
};

struct LayerCheck {
    std::string layer;
    double tolerance = kLayerTolerance;
    GradCheckReport report;
    double seconds = 0.0;

    bool passed() const { return report.checked > 0 && report.max_rel_error < tolerance; }
};

std::vector<std::string> gradcheck_layers();

/// Throws std::invalid_argument for an unknown layer name.
LayerCheck run_layer_check(std::string_view layer, const GradCheckSuiteOptions& options = {});

std::vector<LayerCheck> run_gradcheck_suite(const GradCheckSuiteOptions& options = {});

}  // namespace fer
