#include "fer/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace fer {

double relative_error(double analytic, double numeric)
{
    const double denom = std::max({std::abs(analytic), std::abs(numeric), kGradCheckFloor});
    return std::abs(analytic - numeric) / denom;
}

GradCheckReport grad_check(const std::function<double()>& objective, std::span<GradCheckTarget> targets,
                           double step)
{
    return grad_check_piecewise([&] { return PiecewiseValue{objective(), 0}; }, targets, step);
}

GradCheckReport grad_check_piecewise(const std::function<PiecewiseValue()>& objective,
                                     std::span<GradCheckTarget> targets, double step)
{
    GradCheckReport report;
    const std::uint64_t base_pattern = objective().pattern;
    for (GradCheckTarget& target : targets) {
        if (target.values.size() != target.analytic.size()) {
            throw std::invalid_argument("grad_check: target '" + target.name +
                                        "' has mismatched value/gradient lengths");
        }
        auto check_one = [&](std::size_t i) {
            double& x = target.values[i];
            const double saved = x;
            x = saved + step;
            const PiecewiseValue plus = objective();
            x = saved - step;
            const PiecewiseValue minus = objective();
            x = saved;
            if (plus.pattern != base_pattern || minus.pattern != base_pattern) {
                ++report.skipped;
                return;
            }
            const double numeric = (plus.value - minus.value) / (2.0 * step);
            const double err = relative_error(target.analytic[i], numeric);
            ++report.checked;
            if (report.worst.empty() || err > report.max_rel_error) {
                report.max_rel_error = err;
                report.worst = target.name + "[" + std::to_string(i) + "]";
            }
        };
        if (target.indices.empty()) {
            for (std::size_t i = 0; i < target.values.size(); ++i) {
                check_one(i);
            }
        } else {
            for (std::size_t i : target.indices) {
                check_one(i);
            }
        }
    }
    return report;
}

}  // namespace fer
