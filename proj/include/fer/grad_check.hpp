#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace fer {

inline constexpr double kGradCheckStep = 1e-5;
inline constexpr double kGradCheckFloor = 1e-8;

/// |a - n| / max(|a|, |n|, 1e-8)
double relative_error(double analytic, double numeric);

/// One block of coordinates to perturb. `values` is modified in place during
/// the check and restored afterwards.
struct GradCheckTarget {
    std::string name;
    std::span<double> values;
    std::span<const double> analytic;
    std::vector<std::size_t> indices;  // empty means every coordinate
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst;
    std::size_t checked = 0;
    std::size_t skipped = 0;
};

/// An objective value together with a digest of the discrete branch choices
/// (ReLU gates, pooling argmaxes) taken while computing it.
struct PiecewiseValue {
    double value = 0.0;
    std::uint64_t pattern = 0;
};

/// Central differences against the analytic gradient for every listed
/// coordinate.
GradCheckReport grad_check(const std::function<double()>& objective, std::span<GradCheckTarget> targets,
                           double step = kGradCheckStep);

/// As above, but coordinates whose +/- step lands in a different branch
/// pattern than the base point are counted as skipped rather than compared.
GradCheckReport grad_check_piecewise(const std::function<PiecewiseValue()>& objective,
                                     std::span<GradCheckTarget> targets, double step = kGradCheckStep);

}  // namespace fer
