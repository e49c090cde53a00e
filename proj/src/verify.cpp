#include "convoher2/verify.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <ostream>
#include <random>
#include <sstream>

#include "convoher2/gradient_check.hpp"
#include "convoher2/head.hpp"
#include "convoher2/model.hpp"
#include "convoher2/numerics_oracle.hpp"

namespace convoher2 {
namespace {

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(3);
  s << std::scientific << v;
  return s.str();
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

VerificationCheck bound_check(std::string name, double error, double tolerance) {
  return {std::move(name), error <= tolerance, "max error " + fmt(error) + " (tolerance " + fmt(tolerance) + ")"};
}

Eigen::MatrixXd random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  return m;
}

Eigen::MatrixXd balanced_targets(int classes, Eigen::Index n) {
  Eigen::MatrixXd t = Eigen::MatrixXd::Zero(classes, n);
  for (Eigen::Index j = 0; j < n; ++j) t(j % classes, j) = 1.0;
  return t;
}

// Randomizes BN parameters and running statistics so the comparison is not
// carried by the identity initialization.
template <typename Scalar>
void perturb_bn(Head<Scalar>& head, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.5, 1.5);
  std::normal_distribution<double> n(0.0, 0.2);
  for (auto& p : head.params()) {
    const bool variance = p.name.ends_with("/moving_variance") || p.name.ends_with("/gamma");
    const bool shift = p.name.ends_with("/moving_mean") || p.name.ends_with("/beta");
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      if (variance) p.value.data()[i] = static_cast<Scalar>(u(rng));
      if (shift) p.value.data()[i] = static_cast<Scalar>(n(rng));
    }
  }
}

double head_vs_replay(const Head<float>& head, const Eigen::MatrixXd& x, Mode mode) {
  const auto layers = oracle_layers(head.spec(), export_flat(head), head.bn_epsilon(), head.bn_momentum());
  std::vector<std::vector<double>> rows(static_cast<std::size_t>(x.cols()));
  for (Eigen::Index j = 0; j < x.cols(); ++j) rows[j].assign(x.col(j).data(), x.col(j).data() + x.rows());
  const auto expected = oracle::replay_head(layers, rows, mode == Mode::Train);
  const Eigen::MatrixXf got = head.forward(x.cast<float>(), mode);
  double err = 0.0;
  for (Eigen::Index j = 0; j < got.cols(); ++j) {
    for (Eigen::Index k = 0; k < got.rows(); ++k) err = std::max(err, std::abs(got(k, j) - expected[j][k]));
  }
  return err;
}

}  // namespace

std::vector<VerificationCheck> run_verification(std::uint64_t seed) {
  std::vector<VerificationCheck> checks;
  std::mt19937_64 rng(seed);
  const std::vector<double> x123{1.0, 2.0, 3.0};

  {
    oracle::BatchNormParams p;
    p.epsilon = 0.0;
    const auto r = oracle::bn_forward_train(x123, p);
    checks.push_back(bound_check("bn_train_standardize", max_abs_diff(r.y, {-1.224745, 0.0, 1.224745}), 1e-6));
    p.gamma = 2.0;
    p.beta = 1.0;
    const auto affine = oracle::bn_forward_train(x123, p);
    checks.push_back(bound_check("bn_train_affine", max_abs_diff(affine.y, {-1.449490, 1.0, 3.449490}), 1e-6));

    oracle::BatchNormParams running;
    running.epsilon = 0.0;
    running.running_mean = 2.0;
    running.running_var = 2.0 / 3.0;
    const auto inferred = oracle::bn_forward_infer(x123, running);
    checks.push_back(bound_check("bn_infer_matches_batch_stats", max_abs_diff(inferred, r.y), 1e-12));
  }
  {
    const auto p = oracle::softmax(std::vector<double>{1.0, 2.0, 3.0});
    checks.push_back(bound_check("softmax_example", max_abs_diff(p, {0.090031, 0.244728, 0.665241}), 1e-6));

    std::normal_distribution<double> n(0.0, 5.0);
    double sum_err = 0.0;
    double shift_err = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
      std::vector<double> z(4);
      for (double& v : z) v = n(rng);
      const auto q = oracle::softmax(z);
      double s = 0.0;
      for (double v : q) s += v;
      sum_err = std::max(sum_err, std::abs(s - 1.0));
      const double c = n(rng) * 10.0;
      std::vector<double> shifted = z;
      for (double& v : shifted) v += c;
      shift_err = std::max(shift_err, max_abs_diff(q, oracle::softmax(shifted)));
    }
    checks.push_back(bound_check("softmax_sums_to_one", sum_err, 1e-12));
    checks.push_back(bound_check("softmax_shift_invariance", shift_err, 1e-12));
  }
  {
    const std::vector<double> uniform(4, 0.25);
    const std::vector<double> t{0.0, 0.0, 1.0, 0.0};
    checks.push_back(bound_check("cross_entropy_uniform", std::abs(oracle::cross_entropy(uniform, t) - std::log(4.0)), 1e-12));
    const std::vector<double> tiny{1e-9, 1.0 - 1e-9, 0.0, 0.0};
    const std::vector<double> t0{1.0, 0.0, 0.0, 0.0};
    checks.push_back(bound_check("cross_entropy_clip", std::abs(oracle::cross_entropy(tiny, t0) + std::log(1e-7)), 1e-9));

    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> z(4);
    for (double& v : z) v = n(rng);
    const oracle::ScalarFunction f = [&](std::span<const double> logits) {
      return oracle::cross_entropy(oracle::softmax(logits), t);
    };
    const auto numeric = oracle::finite_diff_grad(f, z, 1e-5);
    const auto p = oracle::softmax(z);
    double rel = 0.0;
    for (std::size_t k = 0; k < 4; ++k) {
      const double a = p[k] - t[k];
      rel = std::max(rel, std::abs(a - numeric[k]) / std::max({std::abs(a), std::abs(numeric[k]), 1e-12}));
    }
    checks.push_back(bound_check("softmax_cross_entropy_gradient", rel, 1e-6));
  }
  {
    HeadInit init;
    init.seed = seed + 1;
    Head<float> head(build_head(8), init);
    perturb_bn(head, rng);
    double train_err = 0.0;
    double infer_err = 0.0;
    for (int b = 0; b < 10; ++b) {
      const Eigen::MatrixXd x = random_matrix(8, 16, rng);
      train_err = std::max(train_err, head_vs_replay(head, x, Mode::Train));
      infer_err = std::max(infer_err, head_vs_replay(head, x, Mode::Infer));
    }
    checks.push_back(bound_check("head_matches_oracle_train", train_err, 1e-4));
    checks.push_back(bound_check("head_matches_oracle_infer", infer_err, 1e-4));
  }

  const auto grad_summary = [](const GradientCheckReport& r) {
    std::size_t coords = 0;
    for (const auto& b : r.blocks) coords += b.coordinates_checked;
    return "max relative error " + fmt(r.max_relative_error) + " over " + std::to_string(r.blocks.size()) +
           " blocks, " + std::to_string(coords) + " coordinates";
  };
  {
    HeadInit init;
    init.seed = seed + 2;
    Head<double> head(build_head(8), init);
    perturb_bn(head, rng);
    const Eigen::MatrixXd x = random_matrix(8, 12, rng);
    const Eigen::MatrixXd t = balanced_targets(4, 12);
    for (Mode mode : {Mode::Train, Mode::Infer}) {
      GradientCheckOptions opt;
      opt.mode = mode;
      opt.seed = seed;
      const auto r = gradient_check(head, x, t, opt);
      checks.push_back({mode == Mode::Train ? "gradient_check_head_train" : "gradient_check_head_infer", r.passed,
                        grad_summary(r)});
    }
    GradientCheckOptions bad;
    bad.seed = seed;
    bad.tamper = [](Head<double>::Gradients& g) {
      for (auto& m : g) m *= 2.0;
    };
    const auto r = gradient_check(head, x, t, bad);
    checks.push_back({"gradient_check_detects_fault", !r.passed,
                      "doubled gradients give max relative error " + fmt(r.max_relative_error)});
  }
  {
    HeadInit init;
    init.seed = seed + 3;
    init.output_kernel_scale = 1.0;
    const Head<double> head(dense_only_head(2048), init);
    const Eigen::MatrixXd x = random_matrix(2048, 4, rng);
    GradientCheckOptions opt;
    opt.seed = seed;
    const auto r = gradient_check(head, x, balanced_targets(4, 4), opt);
    checks.push_back({"gradient_check_dense_2048x4", r.passed, grad_summary(r)});
  }
  return checks;
}

bool print_verification(std::ostream& out, std::uint64_t seed) {
  bool all = true;
  for (const auto& c : run_verification(seed)) {
    out << (c.passed ? "PASS " : "FAIL ") << c.name << ": " << c.detail << '\n';
    all = all && c.passed;
  }
  return all;
}

}  // namespace convoher2
