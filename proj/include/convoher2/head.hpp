#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace convoher2 {

enum class LayerKind { BatchNorm, Dense };
enum class Activation { None, Relu, Softmax };
enum class Mode { Train, Infer };

struct LayerSpec {
  LayerKind kind = LayerKind::Dense;
  std::string name;
  int in = 0;
  int out = 0;
  Activation activation = Activation::None;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct HeadSpec {
  int input_dim = 0;
  std::vector<LayerSpec> layers;

  int output_dim() const { return layers.empty() ? input_dim : layers.back().out; }
  void validate() const;

  friend bool operator==(const HeadSpec&, const HeadSpec&) = default;
};

/// BN(d) -> Dense(d, 2048)+ReLU -> BN(2048) -> Dense(2048, 1536)+ReLU ->
/// BN(1536) -> Dense(1536, 1536)+ReLU -> BN(1536) -> Dense(1536, 4)+Softmax.
/// Layer names follow the Keras summary of the reference model. For other
/// input widths the first hidden layer is `input_dim` wide and the second
/// 3/4 of that, so build_head(8) is an 8 -> 8 -> 6 -> 6 -> 4 stack.
HeadSpec build_head(int input_dim = 2048);
HeadSpec build_head(int input_dim, int hidden1, int hidden2, int classes = 4);

/// A single Dense(input_dim -> classes)+Softmax layer.
HeadSpec dense_only_head(int input_dim, int classes = 4);

struct HeadInit {
  std::uint64_t seed = 0;
  // Multiplier on the fan-average uniform bound for the softmax layer's
  // kernel. Keeps initial predictions near uniform.
  double output_kernel_scale = 0.1;
  double bn_epsilon = 1e-3;
  double bn_momentum = 0.99;
};

/// Trainable classifier stack. Activations are column-major with one column
/// per sample (features x N).
template <typename Scalar>
class Head {
 public:
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  struct Param {
    std::string name;  // "<layer>/<kernel|bias|gamma|beta|moving_mean|moving_variance>"
    Matrix value;
    bool trainable = true;
  };

  struct Cache {
    Mode mode = Mode::Train;
    std::vector<Matrix> inputs;   // input of each layer
    std::vector<Matrix> outputs;  // output of each layer (post activation)
    std::vector<Matrix> xhat;     // BN layers only
    std::vector<Vector> inv_std;  // BN layers only
    std::vector<Vector> batch_mean;
    std::vector<Vector> batch_var;
  };

  // Gradients aligned with trainable_indices().
  using Gradients = std::vector<Matrix>;

  Head() = default;
  Head(HeadSpec spec, const HeadInit& init);
  // Validates names and shapes of `params` against `spec`; throws
  // TopologyMismatch on any disagreement.
  static Head from_params(HeadSpec spec, double bn_epsilon, double bn_momentum, std::vector<Param> params);

  const HeadSpec& spec() const noexcept { return spec_; }
  double bn_epsilon() const noexcept { return bn_epsilon_; }
  double bn_momentum() const noexcept { return bn_momentum_; }

  std::vector<Param>& params() noexcept { return params_; }
  const std::vector<Param>& params() const noexcept { return params_; }
  const std::vector<std::size_t>& trainable_indices() const noexcept { return trainable_; }

  const Matrix& kernel(std::size_t layer) const;
  const Matrix& bias(std::size_t layer) const;
  const Matrix& gamma(std::size_t layer) const;
  const Matrix& beta(std::size_t layer) const;
  const Matrix& moving_mean(std::size_t layer) const;
  const Matrix& moving_variance(std::size_t layer) const;

  /// Returns classes x N probabilities. Does not touch running statistics.
  Matrix forward(const Matrix& x, Mode mode, Cache* cache = nullptr) const;

  /// Mean clipped cross-entropy of probabilities against targets (both classes x N).
  static double loss(const Matrix& probabilities, const Matrix& targets);

  /// Gradient of loss(forward(x), targets) w.r.t. every trainable parameter.
  Gradients backward(const Cache& cache, const Matrix& targets) const;

  /// running <- momentum * running + (1 - momentum) * batch statistic.
  void update_running_stats(const Cache& cache);

  /// Hash of the ReLU on/off pattern recorded in `cache`.
  static std::uint64_t activation_signature(const Cache& cache, const HeadSpec& spec);

  template <typename Other>
  Head<Other> cast() const;

  std::uint64_t checksum() const;

 private:
  template <typename>
  friend class Head;

  void index_params();

  HeadSpec spec_;
  double bn_epsilon_ = 1e-3;
  double bn_momentum_ = 0.99;
  std::vector<Param> params_;
  std::vector<std::size_t> trainable_;
  std::vector<std::size_t> first_param_;  // per layer
};

extern template class Head<float>;
extern template class Head<double>;

template <typename Scalar>
template <typename Other>
Head<Other> Head<Scalar>::cast() const {
  Head<Other> out;
  out.spec_ = spec_;
  out.bn_epsilon_ = bn_epsilon_;
  out.bn_momentum_ = bn_momentum_;
  out.params_.reserve(params_.size());
  for (const auto& p : params_) out.params_.push_back({p.name, p.value.template cast<Other>(), p.trainable});
  out.index_params();
  return out;
}

std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t hash = 0xcbf29ce484222325ULL);

}  // namespace convoher2
