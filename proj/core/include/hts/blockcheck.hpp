#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "hts/model.hpp"

namespace hts::model {

struct BlockCheckOptions {
  std::size_t batch = 2;
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Coordinates probed per tensor; larger tensors are sampled.
  std::size_t max_coordinates = 64;
  std::uint64_t seed = 1;
};

struct TensorCheck {
  std::string name;
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
  /// Values at the worst coordinate.
  double numeric = 0.0;
  double analytic = 0.0;
};

struct BlockCheck {
  std::string block;
  std::vector<TensorCheck> tensors;
  double max_relative_error = 0.0;
  bool passed = false;

  /// Tensors whose error exceeds the tolerance.
  std::vector<std::string> failing(double tolerance) const;
};

/// Finite-difference checks (f64) of each model block and the full model:
/// attention, encoder, batch_norm, bilstm, sequencer, head_age8,
/// head_gender2, model. Block inputs are checked as "input".
std::vector<BlockCheck> check_blocks(const ModelSpec& spec, const BlockCheckOptions& options = {});

}  // namespace hts::model
