#include "convoher2/head.hpp"

#include <cmath>
#include <random>

#include "convoher2/error.hpp"
#include "convoher2/numerics_oracle.hpp"

namespace convoher2 {
namespace {

LayerSpec bn_layer(std::string name, int width) {
  return {LayerKind::BatchNorm, std::move(name), width, width, Activation::None};
}

LayerSpec dense_layer(std::string name, int in, int out, Activation act) {
  return {LayerKind::Dense, std::move(name), in, out, act};
}

std::string dense_name(int index) { return index == 0 ? "dense" : "dense_" + std::to_string(index); }

}  // namespace

std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t hash) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    hash ^= bytes[i];
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

void HeadSpec::validate() const {
  if (input_dim < 1) throw Error(ErrorCode::InvalidDim, "head input width must be positive");
  if (layers.empty()) throw Error(ErrorCode::InvalidDim, "head has no layers");
  int width = input_dim;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    if (l.in != width || l.out < 1) throw Error(ErrorCode::DimMismatch, "layer '" + l.name + "' width mismatch");
    if (l.kind == LayerKind::BatchNorm && (l.in != l.out || l.activation != Activation::None)) {
      throw Error(ErrorCode::DimMismatch, "batch norm layer '" + l.name + "' must preserve width");
    }
    const bool last = i + 1 == layers.size();
    if (last != (l.activation == Activation::Softmax)) {
      throw Error(ErrorCode::InvalidDim, "softmax must be the final layer's activation, and only there");
    }
    width = l.out;
  }
}

HeadSpec build_head(int input_dim) {
  if (input_dim < 1) throw Error(ErrorCode::InvalidDim, "head input width must be positive");
  if (input_dim == 2048) return build_head(2048, 2048, 1536);
  return build_head(input_dim, input_dim, std::max(1, input_dim * 3 / 4));
}

HeadSpec build_head(int input_dim, int hidden1, int hidden2, int classes) {
  if (input_dim < 1 || hidden1 < 1 || hidden2 < 1 || classes < 1) {
    throw Error(ErrorCode::InvalidDim, "head widths must be positive");
  }
  HeadSpec spec;
  spec.input_dim = input_dim;
  spec.layers = {
      bn_layer("batch_normalization_94", input_dim),
      dense_layer(dense_name(0), input_dim, hidden1, Activation::Relu),
      bn_layer("batch_normalization_95", hidden1),
      dense_layer(dense_name(1), hidden1, hidden2, Activation::Relu),
      bn_layer("batch_normalization_96", hidden2),
      dense_layer(dense_name(2), hidden2, hidden2, Activation::Relu),
      bn_layer("batch_normalization_97", hidden2),
      dense_layer(dense_name(3), hidden2, classes, Activation::Softmax),
  };
  return spec;
}

HeadSpec dense_only_head(int input_dim, int classes) {
  if (input_dim < 1 || classes < 1) throw Error(ErrorCode::InvalidDim, "head widths must be positive");
  HeadSpec spec;
  spec.input_dim = input_dim;
  spec.layers = {dense_layer(dense_name(0), input_dim, classes, Activation::Softmax)};
  return spec;
}

// ---------------------------------------------------------------------------

template <typename Scalar>
Head<Scalar>::Head(HeadSpec spec, const HeadInit& init)
    : spec_(std::move(spec)), bn_epsilon_(init.bn_epsilon), bn_momentum_(init.bn_momentum) {
  spec_.validate();
  if (!(bn_epsilon_ > 0.0)) throw Error(ErrorCode::PreconditionViolation, "BN epsilon must be positive");
  if (!(bn_momentum_ > 0.0 && bn_momentum_ < 1.0)) {
    throw Error(ErrorCode::PreconditionViolation, "BN momentum must lie in (0, 1)");
  }
  std::mt19937_64 rng(init.seed);
  auto uniform = [&rng](double limit) {
    return static_cast<Scalar>((static_cast<double>(rng() >> 11) * 0x1.0p-53 * 2.0 - 1.0) * limit);
  };

  for (const LayerSpec& l : spec_.layers) {
    if (l.kind == LayerKind::Dense) {
      double limit = std::sqrt(6.0 / static_cast<double>(l.in + l.out));
      if (l.activation == Activation::Softmax) limit *= init.output_kernel_scale;
      Matrix kernel(l.out, l.in);
      // Fill in (in, out) row-major order, the order a Keras kernel is stored in.
      for (int i = 0; i < l.in; ++i) {
        for (int o = 0; o < l.out; ++o) kernel(o, i) = uniform(limit);
      }
      params_.push_back({l.name + "/kernel", std::move(kernel), true});
      params_.push_back({l.name + "/bias", Matrix::Zero(l.out, 1), true});
    } else {
      params_.push_back({l.name + "/gamma", Matrix::Ones(l.out, 1), true});
      params_.push_back({l.name + "/beta", Matrix::Zero(l.out, 1), true});
      params_.push_back({l.name + "/moving_mean", Matrix::Zero(l.out, 1), false});
      params_.push_back({l.name + "/moving_variance", Matrix::Ones(l.out, 1), false});
    }
  }
  index_params();
}

template <typename Scalar>
Head<Scalar> Head<Scalar>::from_params(HeadSpec spec, double bn_epsilon, double bn_momentum,
                                       std::vector<Param> params) {
  HeadInit init;
  init.bn_epsilon = bn_epsilon;
  init.bn_momentum = bn_momentum;
  Head head(std::move(spec), init);
  if (params.size() != head.params_.size()) {
    throw Error(ErrorCode::TopologyMismatch, "expected " + std::to_string(head.params_.size()) + " arrays, got " +
                                                 std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Param& want = head.params_[i];
    const Param& got = params[i];
    if (got.name != want.name || got.value.rows() != want.value.rows() || got.value.cols() != want.value.cols()) {
      throw Error(ErrorCode::TopologyMismatch, "array '" + got.name + "' does not match expected '" + want.name + "'");
    }
    params[i].trainable = want.trainable;
  }
  head.params_ = std::move(params);
  return head;
}

template <typename Scalar>
void Head<Scalar>::index_params() {
  trainable_.clear();
  first_param_.clear();
  std::size_t cursor = 0;
  for (const LayerSpec& l : spec_.layers) {
    first_param_.push_back(cursor);
    cursor += l.kind == LayerKind::Dense ? 2 : 4;
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].trainable) trainable_.push_back(i);
  }
}

template <typename Scalar>
const typename Head<Scalar>::Matrix& Head<Scalar>::kernel(std::size_t layer) const {
  return params_[first_param_.at(layer)].value;
}
template <typename Scalar>
const typename Head<Scalar>::Matrix& Head<Scalar>::bias(std::size_t layer) const {
  return params_[first_param_.at(layer) + 1].value;
}
template <typename Scalar>
const typename Head<Scalar>::Matrix& Head<Scalar>::gamma(std::size_t layer) const {
  return params_[first_param_.at(layer)].value;
}
template <typename Scalar>
const typename Head<Scalar>::Matrix& Head<Scalar>::beta(std::size_t layer) const {
  return params_[first_param_.at(layer) + 1].value;
}
template <typename Scalar>
const typename Head<Scalar>::Matrix& Head<Scalar>::moving_mean(std::size_t layer) const {
  return params_[first_param_.at(layer) + 2].value;
}
template <typename Scalar>
const typename Head<Scalar>::Matrix& Head<Scalar>::moving_variance(std::size_t layer) const {
  return params_[first_param_.at(layer) + 3].value;
}

template <typename Scalar>
typename Head<Scalar>::Matrix Head<Scalar>::forward(const Matrix& x, Mode mode, Cache* cache) const {
  if (x.rows() != spec_.input_dim || x.cols() < 1) {
    throw Error(ErrorCode::ShapeError, "head expects " + std::to_string(spec_.input_dim) + " x N input, got " +
                                           std::to_string(x.rows()) + " x " + std::to_string(x.cols()));
  }
  const auto n = static_cast<Scalar>(x.cols());
  const auto eps = static_cast<Scalar>(bn_epsilon_);
  const std::size_t n_layers = spec_.layers.size();
  if (cache) {
    *cache = Cache{};
    cache->mode = mode;
    cache->inputs.resize(n_layers);
    cache->outputs.resize(n_layers);
    cache->xhat.resize(n_layers);
    cache->inv_std.resize(n_layers);
    cache->batch_mean.resize(n_layers);
    cache->batch_var.resize(n_layers);
  }

  Matrix act = x;
  for (std::size_t li = 0; li < n_layers; ++li) {
    const LayerSpec& l = spec_.layers[li];
    if (cache) cache->inputs[li] = act;
    if (l.kind == LayerKind::BatchNorm) {
      Vector mean;
      Vector var;
      if (mode == Mode::Train) {
        mean = act.rowwise().sum() / n;
        var = (act.colwise() - mean).array().square().rowwise().sum().matrix() / n;
      } else {
        mean = moving_mean(li);
        var = moving_variance(li);
      }
      const Vector inv_std = (var.array() + eps).rsqrt().matrix();
      Matrix xhat = ((act.colwise() - mean).array().colwise() * inv_std.array()).matrix();
      act = ((xhat.array().colwise() * gamma(li).col(0).array()).colwise() + beta(li).col(0).array()).matrix();
      if (cache) {
        cache->xhat[li] = std::move(xhat);
        cache->inv_std[li] = inv_std;
        cache->batch_mean[li] = std::move(mean);
        cache->batch_var[li] = std::move(var);
      }
    } else {
      Matrix z = kernel(li) * act;
      z.colwise() += bias(li).col(0);
      if (l.activation == Activation::Relu) {
        z = z.cwiseMax(Scalar(0));
      } else if (l.activation == Activation::Softmax) {
        const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> zmax = z.colwise().maxCoeff();
        z = (z.rowwise() - zmax).array().exp().matrix();
        const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> total = z.colwise().sum();
        z = (z.array().rowwise() / total.array()).matrix();
      }
      act = std::move(z);
    }
    if (cache) cache->outputs[li] = act;
  }
  return act;
}

template <typename Scalar>
double Head<Scalar>::loss(const Matrix& probabilities, const Matrix& targets) {
  if (probabilities.rows() != targets.rows() || probabilities.cols() != targets.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "probability and target shapes differ");
  }
  double total = 0.0;
  for (Eigen::Index j = 0; j < probabilities.cols(); ++j) {
    for (Eigen::Index k = 0; k < probabilities.rows(); ++k) {
      const double t = static_cast<double>(targets(k, j));
      if (t == 0.0) continue;
      const double p = std::clamp(static_cast<double>(probabilities(k, j)), oracle::kProbabilityClip, 1.0);
      total -= t * std::log(p);
    }
  }
  return total / static_cast<double>(probabilities.cols());
}

template <typename Scalar>
typename Head<Scalar>::Gradients Head<Scalar>::backward(const Cache& cache, const Matrix& targets) const {
  const std::size_t n_layers = spec_.layers.size();
  if (cache.outputs.size() != n_layers) throw Error(ErrorCode::PreconditionViolation, "backward needs a forward cache");
  const Matrix& probs = cache.outputs.back();
  if (targets.rows() != probs.rows() || targets.cols() != probs.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "target shape does not match the forward batch");
  }
  const auto n = static_cast<Scalar>(probs.cols());
  const auto clip = static_cast<Scalar>(oracle::kProbabilityClip);

  // dL/dz through the softmax of the clipped mean cross-entropy. For one-hot
  // targets with the true probability above the clip this is (p - t) / N.
  Matrix dp = Matrix::Zero(probs.rows(), probs.cols());
  for (Eigen::Index j = 0; j < probs.cols(); ++j) {
    for (Eigen::Index k = 0; k < probs.rows(); ++k) {
      if (targets(k, j) != Scalar(0) && probs(k, j) >= clip) dp(k, j) = -targets(k, j) / probs(k, j) / n;
    }
  }
  const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> weighted = (probs.array() * dp.array()).colwise().sum();
  Matrix grad = (probs.array() * (dp.array().rowwise() - weighted.array())).matrix();

  std::vector<Matrix> by_param(params_.size());
  for (std::size_t li = n_layers; li-- > 0;) {
    const LayerSpec& l = spec_.layers[li];
    const std::size_t base = first_param_[li];
    if (l.kind == LayerKind::Dense) {
      if (l.activation == Activation::Relu) {
        grad = (cache.outputs[li].array() > Scalar(0)).select(grad, Scalar(0));
      }
      by_param[base] = grad * cache.inputs[li].transpose();
      by_param[base + 1] = grad.rowwise().sum();
      if (li > 0) grad = kernel(li).transpose() * grad;
    } else {
      const Matrix& xhat = cache.xhat[li];
      by_param[base] = (grad.array() * xhat.array()).rowwise().sum().matrix();
      by_param[base + 1] = grad.rowwise().sum();
      if (li == 0) continue;
      const Matrix dxhat = (grad.array().colwise() * gamma(li).col(0).array()).matrix();
      const Vector& inv_std = cache.inv_std[li];
      if (cache.mode == Mode::Train) {
        const Vector sum_dxhat = dxhat.rowwise().sum();
        const Vector sum_dxhat_xhat = (dxhat.array() * xhat.array()).rowwise().sum().matrix();
        grad = ((((dxhat * n).colwise() - sum_dxhat).array() - xhat.array().colwise() * sum_dxhat_xhat.array())
                    .colwise() *
                (inv_std.array() / n))
                   .matrix();
      } else {
        grad = (dxhat.array().colwise() * inv_std.array()).matrix();
      }
    }
  }

  Gradients out;
  out.reserve(trainable_.size());
  for (std::size_t idx : trainable_) out.push_back(std::move(by_param[idx]));
  return out;
}

template <typename Scalar>
void Head<Scalar>::update_running_stats(const Cache& cache) {
  if (cache.mode != Mode::Train) return;
  const auto momentum = static_cast<Scalar>(bn_momentum_);
  for (std::size_t li = 0; li < spec_.layers.size(); ++li) {
    if (spec_.layers[li].kind != LayerKind::BatchNorm) continue;
    Matrix& mean = params_[first_param_[li] + 2].value;
    Matrix& var = params_[first_param_[li] + 3].value;
    mean = momentum * mean + (Scalar(1) - momentum) * cache.batch_mean[li];
    var = momentum * var + (Scalar(1) - momentum) * cache.batch_var[li];
  }
}

template <typename Scalar>
std::uint64_t Head<Scalar>::activation_signature(const Cache& cache, const HeadSpec& spec) {
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  for (std::size_t li = 0; li < spec.layers.size() && li < cache.outputs.size(); ++li) {
    if (spec.layers[li].activation != Activation::Relu) continue;
    const Matrix& out = cache.outputs[li];
    for (Eigen::Index i = 0; i < out.size(); ++i) {
      const unsigned char on = out.data()[i] > Scalar(0) ? 1 : 0;
      hash = fnv1a64(&on, 1, hash);
    }
  }
  return hash;
}

template <typename Scalar>
std::uint64_t Head<Scalar>::checksum() const {
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  for (const auto& p : params_) {
    hash = fnv1a64(p.name.data(), p.name.size(), hash);
    hash = fnv1a64(p.value.data(), static_cast<std::size_t>(p.value.size()) * sizeof(Scalar), hash);
  }
  return hash;
}

template class Head<float>;
template class Head<double>;

}  // namespace convoher2
