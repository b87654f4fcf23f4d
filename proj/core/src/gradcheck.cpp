#include "hts/gradcheck.hpp"

#include <cmath>
#include <numeric>

namespace hts {

FiniteDifferenceResult finite_difference_check(
    const std::function<double(const TensorD&)>& f, const TensorD& theta,
    const TensorD& analytic, double h,
    const std::optional<std::vector<std::size_t>>& coordinates) {
  if (!(h > 0.0)) throw ContractError("finite difference step must be positive");
  if (analytic.size() != theta.size()) {
    throw DimensionError("analytic gradient " + shape_string(analytic.shape()) +
                         " does not match parameter " + shape_string(theta.shape()));
  }
  std::vector<std::size_t> probe;
  if (coordinates) {
    probe = *coordinates;
  } else {
    probe.resize(theta.size());
    std::iota(probe.begin(), probe.end(), std::size_t{0});
  }

  FiniteDifferenceResult result;
  TensorD work = theta;
  for (std::size_t i : probe) {
    if (i >= theta.size()) throw DimensionError("probe coordinate out of range");
    const double original = work[i];
    work[i] = original + h;
    const double up = f(work);
    work[i] = original - h;
    const double down = f(work);
    work[i] = original;
    const double numeric = (up - down) / (2.0 * h);
    const double err = std::abs(numeric - analytic[i]) / (std::abs(analytic[i]) + 1e-8);
    if (result.coordinates_checked == 0 || err > result.max_relative_error) {
      result.max_relative_error = err;
      result.worst_index = i;
      result.worst_numeric = numeric;
      result.worst_analytic = analytic[i];
    }
    ++result.coordinates_checked;
  }
  return result;
}

}  // namespace hts
