#include "convoher2/gradient_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "convoher2/error.hpp"
#include "convoher2/numerics_oracle.hpp"

namespace convoher2 {

GradientCheckReport gradient_check(const Head<double>& head, const Eigen::MatrixXd& x, const Eigen::MatrixXd& targets,
                                   const GradientCheckOptions& options) {
  if (x.cols() < 1) throw Error(ErrorCode::PreconditionViolation, "gradient check needs a non-empty batch");
  for (const auto& p : head.params()) {
    if (!p.value.allFinite()) throw Error(ErrorCode::PreconditionViolation, "head parameter '" + p.name + "' is not finite");
  }

  Head<double>::Cache cache;
  head.forward(x, options.mode, &cache);
  Head<double>::Gradients analytic = head.backward(cache, targets);
  const std::uint64_t base_signature = Head<double>::activation_signature(cache, head.spec());
  if (options.tamper) options.tamper(analytic);
  for (std::size_t b = 0; b < analytic.size(); ++b) {
    if (!analytic[b].allFinite()) {
      throw Error(ErrorCode::NonFiniteGradient,
                  "gradient of '" + head.params()[head.trainable_indices()[b]].name + "' is not finite");
    }
  }

  std::size_t trainable_total = 0;
  for (const auto& g : analytic) trainable_total += static_cast<std::size_t>(g.size());
  const bool full = trainable_total <= options.full_check_limit;

  Head<double> probe = head;
  std::mt19937_64 rng(options.seed);
  GradientCheckReport report;
  report.tolerance = options.tolerance;
  report.passed = true;

  for (std::size_t b = 0; b < analytic.size(); ++b) {
    const std::size_t param_index = head.trainable_indices()[b];
    Eigen::MatrixXd& value = probe.params()[param_index].value;
    const auto size = static_cast<std::size_t>(value.size());
    std::vector<std::size_t> coords(size);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    std::shuffle(coords.begin(), coords.end(), rng);
    const std::size_t wanted = full ? size : std::min(size, options.coords_per_block);

    BlockCheck block;
    block.name = head.params()[param_index].name;
    bool kinked = false;
    for (std::size_t c : coords) {
      if (block.coordinates_checked == wanted) break;
      const double original = value.data()[c];
      kinked = false;
      const oracle::ScalarFunction f = [&](std::span<const double> v) {
        value.data()[c] = v[0];
        Head<double>::Cache probe_cache;
        const Eigen::MatrixXd probs = probe.forward(x, options.mode, &probe_cache);
        if (Head<double>::activation_signature(probe_cache, probe.spec()) != base_signature) kinked = true;
        return Head<double>::loss(probs, targets);
      };
      const double at[1] = {original};
      const double numeric = oracle::finite_diff_grad(f, at, options.step)[0];
      value.data()[c] = original;
      if (kinked) {
        ++block.kinks_skipped;
        continue;
      }
      const double a = analytic[b].data()[c];
      const double denom = std::max({std::abs(a), std::abs(numeric), options.relative_floor});
      block.max_relative_error = std::max(block.max_relative_error, std::abs(a - numeric) / denom);
      block.max_abs_gradient = std::max(block.max_abs_gradient, std::abs(a));
      ++block.coordinates_checked;
    }
    const std::size_t achievable = std::min(wanted, size - block.kinks_skipped);
    block.passed = block.coordinates_checked > 0 && block.coordinates_checked == achievable &&
                   block.max_relative_error <= options.tolerance;
    report.passed = report.passed && block.passed;
    report.max_relative_error = std::max(report.max_relative_error, block.max_relative_error);
    report.blocks.push_back(std::move(block));
  }
  return report;
}

}  // namespace convoher2
