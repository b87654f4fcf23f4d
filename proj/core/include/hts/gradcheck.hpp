#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <vector>

#include "hts/tensor.hpp"

namespace hts {

struct FiniteDifferenceResult {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t coordinates_checked = 0;
  double worst_numeric = 0.0;
  double worst_analytic = 0.0;
};

/// Compares `analytic` against central differences of `f` around `theta`.
///
/// Error per coordinate is |(f(θ+h·e_i) − f(θ−h·e_i))/2h − g_i| / (|g_i| + 1e-8);
/// the maximum is returned. When `coordinates` is given only those flat
/// indices are probed. `f` must not retain references to its argument.
FiniteDifferenceResult finite_difference_check(
    const std::function<double(const TensorD&)>& f, const TensorD& theta,
    const TensorD& analytic, double h,
    const std::optional<std::vector<std::size_t>>& coordinates = std::nullopt);

}  // namespace hts
