#pragma once

#include <cstddef>
#include <vector>

#include "popgraph/rng.hpp"
#include "popgraph/tensor.hpp"

namespace test_helpers {

inline std::vector<double> uniform_values(popgraph::Rng& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.next_uniform(lo, hi);
    return v;
}

inline popgraph::Tensor random_param(popgraph::Rng& rng, popgraph::Shape shape,
                                     double lo = -1.0, double hi = 1.0) {
    const std::size_t n = popgraph::shape_numel(shape);
    return popgraph::Tensor::param(std::move(shape), uniform_values(rng, n, lo, hi));
}

inline popgraph::Tensor random_const(popgraph::Rng& rng, popgraph::Shape shape,
                                     double lo = -1.0, double hi = 1.0) {
    const std::size_t n = popgraph::shape_numel(shape);
    return popgraph::Tensor::constant(std::move(shape), uniform_values(rng, n, lo, hi));
}

} // namespace test_helpers
