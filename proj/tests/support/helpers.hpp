#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "fer/rng.hpp"
#include "fer/tensor.hpp"

namespace testing_support {

inline fer::TensorD random_tensor(fer::KeyedRng& rng, fer::Shape shape, double lo = -1.0, double hi = 1.0)
{
    fer::TensorD t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) {
        t[i] = rng.uniform(lo, hi);
    }
    return t;
}

inline std::vector<double> to_vector(const fer::TensorD& t)
{
    return {t.data().begin(), t.data().end()};
}

/// max |a - b| / max(1, |b|)
inline double max_scaled_diff(std::span<const double> a, std::span<const double> b)
{
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, std::fabs(a[i] - b[i]) / std::max(1.0, std::fabs(b[i])));
    }
    return worst;
}

}  // namespace testing_support
