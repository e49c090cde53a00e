#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "convoher2/head.hpp"

namespace convoher2 {

struct GradientCheckOptions {
  double tolerance = 1e-3;
  double step = 1e-3;
  std::size_t coords_per_block = 32;
  // Heads with at most this many trainable parameters are checked on every
  // coordinate.
  std::size_t full_check_limit = 10'000;
  // Relative error is |a - n| / max(|a|, |n|, floor).
  double relative_floor = 1e-7;
  std::uint64_t seed = 0;
  Mode mode = Mode::Train;
  // Applied to the analytic gradients before comparison (fault injection).
  std::function<void(Head<double>::Gradients&)> tamper;
};

struct BlockCheck {
  std::string name;
  std::size_t coordinates_checked = 0;
  // Coordinates whose +-step perturbation flipped a ReLU and were replaced.
  std::size_t kinks_skipped = 0;
  double max_relative_error = 0.0;
  double max_abs_gradient = 0.0;
  bool passed = false;
};

struct GradientCheckReport {
  std::vector<BlockCheck> blocks;
  double max_relative_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

/// Compares Head::backward against central finite differences of the mean
/// cross-entropy for every trainable block. `x` is features x N, `targets`
/// classes x N. Throws NonFiniteGradient on NaN or Inf analytic gradients.
GradientCheckReport gradient_check(const Head<double>& head, const Eigen::MatrixXd& x, const Eigen::MatrixXd& targets,
                                   const GradientCheckOptions& options = {});

}  // namespace convoher2
