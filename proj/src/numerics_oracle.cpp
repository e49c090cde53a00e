#include "convoher2/numerics_oracle.hpp"

#include <algorithm>
#include <cmath>

#include "convoher2/error.hpp"

namespace convoher2::oracle {

void BatchNormParams::validate() const {
  if (!(epsilon > 0.0)) throw Error(ErrorCode::PreconditionViolation, "BN epsilon must be positive");
  if (!(running_var >= 0.0)) throw Error(ErrorCode::PreconditionViolation, "BN running variance must be non-negative");
}

BnTrainResult bn_forward_train(std::span<const double> x, const BatchNormParams& params) {
  if (x.empty()) throw Error(ErrorCode::PreconditionViolation, "BN batch must hold at least one value");
  if (!(params.epsilon >= 0.0) || !(params.running_var >= 0.0)) {
    throw Error(ErrorCode::PreconditionViolation, "BN parameters out of range");
  }
  const auto m = static_cast<double>(x.size());
  double sum = 0.0;
  for (double v : x) sum += v;
  const double mean = sum / m;
  double sq = 0.0;
  for (double v : x) sq += (v - mean) * (v - mean);
  const double var = sq / m;

  BnTrainResult r;
  r.batch_mean = mean;
  r.batch_var = var;
  const double denom = std::sqrt(var + params.epsilon);
  r.y.reserve(x.size());
  for (double v : x) {
    // A constant batch at epsilon = 0 has 0/0 here; its normalized value is 0.
    const double xhat = denom > 0.0 ? (v - mean) / denom : 0.0;
    r.y.push_back(params.gamma * xhat + params.beta);
  }
  r.running_mean = params.momentum * params.running_mean + (1.0 - params.momentum) * mean;
  r.running_var = params.momentum * params.running_var + (1.0 - params.momentum) * var;
  return r;
}

std::vector<double> bn_forward_infer(std::span<const double> x, const BatchNormParams& params) {
  const double denom = std::sqrt(params.running_var + params.epsilon);
  std::vector<double> y;
  y.reserve(x.size());
  for (double v : x) y.push_back(params.gamma * (v - params.running_mean) / denom + params.beta);
  return y;
}

std::vector<double> relu(std::span<const double> x) {
  std::vector<double> y(x.begin(), x.end());
  for (double& v : y) v = std::max(0.0, v);
  return y;
}

std::vector<double> softmax(std::span<const double> z) {
  if (z.empty()) return {};
  const double zmax = *std::max_element(z.begin(), z.end());
  std::vector<double> p;
  p.reserve(z.size());
  double total = 0.0;
  for (double v : z) {
    p.push_back(std::exp(v - zmax));
    total += p.back();
  }
  for (double& v : p) v /= total;
  return p;
}

double cross_entropy(std::span<const double> p, std::span<const double> t) {
  if (p.size() != t.size()) throw Error(ErrorCode::ShapeMismatch, "probability and target lengths differ");
  double loss = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    if (t[k] == 0.0) continue;
    loss -= t[k] * std::log(std::clamp(p[k], kProbabilityClip, 1.0));
  }
  return loss;
}

std::vector<double> finite_diff_grad(const ScalarFunction& f, std::span<const double> x, double h) {
  if (!(h > 0.0)) throw Error(ErrorCode::PreconditionViolation, "finite-difference step must be positive");
  std::vector<double> probe(x.begin(), x.end());
  std::vector<double> grad(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) {
    probe[k] = x[k] + h;
    const double up = f(probe);
    probe[k] = x[k] - h;
    const double down = f(probe);
    probe[k] = x[k];
    grad[k] = (up - down) / (2.0 * h);
  }
  return grad;
}

std::vector<std::vector<double>> replay_head(const std::vector<Layer>& layers,
                                             const std::vector<std::vector<double>>& inputs, bool train_mode) {
  if (inputs.empty()) throw Error(ErrorCode::PreconditionViolation, "replay needs at least one sample");
  std::vector<std::vector<double>> act = inputs;
  const std::size_t n = act.size();

  for (const Layer& layer : layers) {
    if (layer.kind == Layer::Kind::BatchNorm) {
      const std::size_t width = layer.bn.features.size();
      std::vector<double> column(n);
      for (std::size_t j = 0; j < width; ++j) {
        for (std::size_t i = 0; i < n; ++i) column[i] = act[i].at(j);
        const std::vector<double> y = train_mode ? bn_forward_train(column, layer.bn.features[j]).y
                                                 : bn_forward_infer(column, layer.bn.features[j]);
        for (std::size_t i = 0; i < n; ++i) act[i][j] = y[i];
      }
    } else {
      const DenseLayer& d = layer.dense;
      for (auto& row : act) {
        if (row.size() != static_cast<std::size_t>(d.in)) throw Error(ErrorCode::ShapeMismatch, "dense input width");
        std::vector<double> out(static_cast<std::size_t>(d.out));
        for (int o = 0; o < d.out; ++o) {
          double acc = d.bias[static_cast<std::size_t>(o)];
          for (int k = 0; k < d.in; ++k) {
            acc += d.weight[static_cast<std::size_t>(o) * d.in + k] * row[static_cast<std::size_t>(k)];
          }
          out[static_cast<std::size_t>(o)] = acc;
        }
        row = d.relu ? relu(out) : std::move(out);
      }
    }
  }
  for (auto& row : act) row = softmax(row);
  return act;
}

}  // namespace convoher2::oracle
