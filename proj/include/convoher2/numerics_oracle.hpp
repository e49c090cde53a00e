#pragma once

#include <functional>
#include <span>
#include <vector>

// Scalar double-precision reference implementations of the head's layers.
// Nothing here depends on Eigen or on the model code; the model's tests use
// these functions as ground truth.
namespace convoher2::oracle {

struct BatchNormParams {
  double gamma = 1.0;
  double beta = 0.0;
  double epsilon = 1e-3;
  double momentum = 0.99;
  double running_mean = 0.0;
  double running_var = 1.0;

  void validate() const;
};

struct BnTrainResult {
  std::vector<double> y;
  double batch_mean = 0.0;
  double batch_var = 0.0;  // population variance (divides by m)
  double running_mean = 0.0;
  double running_var = 0.0;
};

/// Normalizes one feature across a mini-batch with the batch statistics and
/// returns the updated running statistics without mutating `params`.
BnTrainResult bn_forward_train(std::span<const double> x, const BatchNormParams& params);

std::vector<double> bn_forward_infer(std::span<const double> x, const BatchNormParams& params);

std::vector<double> relu(std::span<const double> x);

/// Max-subtracted softmax.
std::vector<double> softmax(std::span<const double> z);

inline constexpr double kProbabilityClip = 1e-7;

/// -sum_k t_k ln(clip(p_k, 1e-7, 1)). Throws ShapeMismatch on length mismatch.
double cross_entropy(std::span<const double> p, std::span<const double> t);

using ScalarFunction = std::function<double(std::span<const double>)>;

/// Central differences (f(x + h e_k) - f(x - h e_k)) / 2h for every coordinate.
std::vector<double> finite_diff_grad(const ScalarFunction& f, std::span<const double> x, double h);

// ---------------------------------------------------------------------------
// Layer-by-layer replay of a head from exported weights.

struct DenseLayer {
  int in = 0;
  int out = 0;
  std::vector<double> weight;  // out x in, row-major
  std::vector<double> bias;    // out
  bool relu = false;
};

struct BatchNormLayer {
  std::vector<BatchNormParams> features;
};

struct Layer {
  enum class Kind { BatchNorm, Dense } kind = Kind::Dense;
  DenseLayer dense;
  BatchNormLayer bn;
};

/// Samples are rows (N x width). Returns N x 4 probabilities; the final layer
/// is followed by softmax. `train_mode` selects batch statistics for BN.
std::vector<std::vector<double>> replay_head(const std::vector<Layer>& layers,
                                             const std::vector<std::vector<double>>& inputs, bool train_mode);

}  // namespace convoher2::oracle
