#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "convoher2/error.hpp"
#include "convoher2/gradient_check.hpp"
#include "convoher2/model.hpp"
#include "convoher2/numerics_oracle.hpp"
#include "support.hpp"

using namespace convoher2;
using convoher2::fixtures::TempDir;

namespace {

template <typename F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an Error";
  return ErrorCode::PreconditionViolation;
}

Eigen::MatrixXd gaussian(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed, double sd = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, sd);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

Eigen::MatrixXd targets(int classes, Eigen::Index n) {
  Eigen::MatrixXd t = Eigen::MatrixXd::Zero(classes, n);
  for (Eigen::Index j = 0; j < n; ++j) t(j % classes, j) = 1.0;
  return t;
}

ModelHandle stub_model(std::uint64_t seed = 0) {
  HeadInit init;
  init.seed = seed;
  return compose(BackboneSpec::stub(2048, 17), build_head(2048), init);
}

}  // namespace

TEST(BuildHead, TableLayout) {
  const HeadSpec h = build_head();
  ASSERT_EQ(h.layers.size(), 8U);
  EXPECT_EQ(h.output_dim(), 4);
  const std::vector<std::string> names{"batch_normalization_94", "dense", "batch_normalization_95", "dense_1",
                                       "batch_normalization_96", "dense_2", "batch_normalization_97", "dense_3"};
  const std::vector<int> outs{2048, 2048, 2048, 1536, 1536, 1536, 1536, 4};
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_EQ(h.layers[i].name, names[i]);
    EXPECT_EQ(h.layers[i].out, outs[i]);
    EXPECT_EQ(h.layers[i].kind, i % 2 == 0 ? LayerKind::BatchNorm : LayerKind::Dense);
  }
  EXPECT_EQ(h.layers[1].activation, Activation::Relu);
  EXPECT_EQ(h.layers[7].activation, Activation::Softmax);
}

TEST(BuildHead, SmallWidthScales) {
  const ParamCount c = count_params(BackboneSpec::stub(8), build_head(8));
  EXPECT_EQ(c.layers[2].param_count, 32U);  // BN(8)
  EXPECT_EQ(c.layers[2].trainable_count, 16U);
  EXPECT_EQ(c.layers[3].param_count, 72U);  // Dense(8 -> 8)
  EXPECT_EQ(code_of([] { build_head(0); }), ErrorCode::InvalidDim);
}

TEST(CountParams, FullModelMatchesTable) {
  auto backbone = std::make_shared<PrecomputedBackbone>(BackboneSpec{}, FeatureStore(2048));
  const ModelHandle handle = compose(backbone, build_head());
  const ParamCount c = count_params(handle);
  EXPECT_EQ(c.total, 31'542'052U);
  EXPECT_EQ(c.trainable, 9'724'932U);
  EXPECT_EQ(c.non_trainable, 21'817'120U);
  EXPECT_EQ(c.layers[5].param_count, 3'147'264U);  // dense_1
  std::uint64_t head_trainable = 0;
  for (const auto& p : handle.head.params()) {
    if (p.trainable) head_trainable += static_cast<std::uint64_t>(p.value.size());
  }
  EXPECT_EQ(head_trainable, c.trainable);
  EXPECT_NE(format_summary(c).find("Total params: 31,542,052"), std::string::npos);
}

TEST(Compose, Guards) {
  EXPECT_EQ(code_of([] { compose(BackboneSpec::stub(16), build_head(2048)); }), ErrorCode::DimMismatch);
  BackboneSpec unfrozen = BackboneSpec::stub();
  unfrozen.frozen = false;
  EXPECT_EQ(code_of([&] { compose(unfrozen, build_head()); }), ErrorCode::ConfigurationError);
  EXPECT_EQ(code_of([] { compose(BackboneSpec{}, build_head()); }), ErrorCode::MissingWeights);
  BackboneSpec narrow;
  narrow.feature_dim = 1024;
  EXPECT_EQ(code_of([&] { narrow.validate(); }), ErrorCode::DimMismatch);
}

TEST(Backbone, StubFeaturesAreDeterministic) {
  const ModelHandle m = stub_model();
  const Batch b = fixtures::synthetic_batch(3, 64, 1);
  const Eigen::MatrixXf f1 = extract_features(m, b);
  const Eigen::MatrixXf f2 = extract_features(m, b);
  EXPECT_EQ(f1.rows(), 3);
  EXPECT_EQ(f1.cols(), 2048);
  EXPECT_TRUE(f1 == f2);
  const ModelHandle other = stub_model(5);
  EXPECT_EQ(m.backbone->checksum(), other.backbone->checksum());
}

TEST(Backbone, PrecomputedLooksUpByRecordId) {
  FeatureStore store(2048);
  std::vector<float> row(2048, 0.5F);
  store.put("img3_0", row);
  PrecomputedBackbone bb(BackboneSpec{}, store);
  const Batch b = fixtures::synthetic_batch(1, 16, 3);
  const Eigen::MatrixXf f = bb.extract(b);
  EXPECT_EQ(f(0, 0), 0.5F);
  const Batch missing = fixtures::synthetic_batch(2, 16, 3);
  EXPECT_EQ(code_of([&] { bb.extract(missing); }), ErrorCode::MissingFeature);
}

TEST(Forward, RowsAreDistributions) {
  const ModelHandle m = stub_model(2);
  const Batch b = fixtures::synthetic_batch(8, 64, 2);
  for (Mode mode : {Mode::Train, Mode::Infer}) {
    const Eigen::MatrixXf p = forward(m, b, mode);
    ASSERT_EQ(p.rows(), 8);
    ASSERT_EQ(p.cols(), 4);
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      EXPECT_NEAR(p.row(i).sum(), 1.0F, 1e-5);
      EXPECT_GT(p.row(i).minCoeff(), 0.0F);
    }
  }
}

TEST(Forward, InferIsBatchIndependent) {
  ModelHandle m = stub_model(3);
  // Move the running statistics away from their initial values first.
  const Batch warm = fixtures::synthetic_batch(16, 64, 8);
  Head<float>::Cache cache;
  m.head.forward(m.backbone->extract(warm), Mode::Train, &cache);
  m.head.update_running_stats(cache);

  const Batch b = fixtures::synthetic_batch(32, 64, 4);
  const Eigen::MatrixXf all = forward(m, b, Mode::Infer);
  for (std::size_t i : {0, 13, 31}) {
    Batch single;
    single.side = b.side;
    single.images.assign(b.image(i), b.image(i) + b.image_stride());
    single.scores = {b.scores[i]};
    single.labels = {b.labels[i]};
    single.record_ids = {b.record_ids[i]};
    const Eigen::MatrixXf one = forward(m, single, Mode::Infer);
    EXPECT_LE((one.row(0) - all.row(static_cast<Eigen::Index>(i))).cwiseAbs().maxCoeff(), 1e-5);
  }
}

TEST(Forward, CachedFeaturesMatchFullPath) {
  const ModelHandle m = stub_model(4);
  const Batch b = fixtures::synthetic_batch(6, 64, 5);
  const Eigen::MatrixXf feats = extract_features(m, b);
  const Eigen::MatrixXf via_cache = forward_features(m, feats.transpose(), Mode::Infer);
  const Eigen::MatrixXf direct = forward(m, b, Mode::Infer);
  EXPECT_LE((via_cache - direct).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(Forward, WrongWidthIsShapeError) {
  const ModelHandle m = stub_model();
  EXPECT_EQ(code_of([&] { m.head.forward(Eigen::MatrixXf::Zero(100, 2), Mode::Infer); }), ErrorCode::ShapeError);
}

// Independent replay through the scalar oracle using the flat export.
TEST(Forward, HeadMatchesOracleReplay) {
  HeadInit init;
  init.seed = 6;
  Head<float> head(build_head(64), init);
  const Eigen::MatrixXd x = gaussian(64, 10, 7);
  Head<float>::Cache cache;
  head.forward(x.cast<float>(), Mode::Train, &cache);
  head.update_running_stats(cache);

  const auto layers = oracle_layers(head.spec(), export_flat(head), head.bn_epsilon(), head.bn_momentum());
  std::vector<std::vector<double>> rows(10);
  for (int j = 0; j < 10; ++j) rows[j].assign(x.col(j).data(), x.col(j).data() + 64);
  for (Mode mode : {Mode::Train, Mode::Infer}) {
    const auto want = oracle::replay_head(layers, rows, mode == Mode::Train);
    const Eigen::MatrixXf got = head.forward(x.cast<float>(), mode);
    for (int j = 0; j < 10; ++j) {
      for (int k = 0; k < 4; ++k) EXPECT_NEAR(got(k, j), want[j][k], 1e-4);
    }
  }
}

TEST(Forward, RunningStatsMomentum) {
  HeadInit init;
  Head<double> head(build_head(4), init);
  const Eigen::MatrixXd x = gaussian(4, 9, 11);
  Head<double>::Cache cache;
  head.forward(x, Mode::Train, &cache);
  head.update_running_stats(cache);
  const Eigen::VectorXd mean = x.rowwise().mean();
  const Eigen::VectorXd var = (x.colwise() - mean).array().square().rowwise().mean();
  EXPECT_LE((head.moving_mean(0).col(0) - 0.01 * mean).cwiseAbs().maxCoeff(), 1e-12);
  const Eigen::VectorXd want_var = (0.99 + 0.01 * var.array()).matrix();
  EXPECT_LE((head.moving_variance(0).col(0) - want_var).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Init, FanAverageBoundsAndSeeding) {
  HeadInit init;
  init.seed = 9;
  const Head<float> a(build_head(2048), init);
  const Head<float> b(build_head(2048), init);
  EXPECT_EQ(a.checksum(), b.checksum());
  const double limit = std::sqrt(6.0 / (2048 + 2048));
  EXPECT_LE(a.kernel(1).cwiseAbs().maxCoeff(), limit);
  EXPECT_GT(a.kernel(1).cwiseAbs().maxCoeff(), 0.9 * limit);
  const double out_limit = 0.1 * std::sqrt(6.0 / (1536 + 4));
  EXPECT_LE(a.kernel(7).cwiseAbs().maxCoeff(), out_limit);
  EXPECT_EQ(a.gamma(0).minCoeff(), 1.0F);
  EXPECT_EQ(a.beta(0).maxCoeff(), 0.0F);
  EXPECT_EQ(a.bias(1).cwiseAbs().maxCoeff(), 0.0F);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  TempDir dir("ckpt");
  ModelHandle m = stub_model(12);
  const Batch warm = fixtures::synthetic_batch(8, 64, 12);
  Head<float>::Cache cache;
  m.head.forward(m.backbone->extract(warm), Mode::Train, &cache);
  m.head.update_running_stats(cache);

  CheckpointSidecar side;
  side.epoch = 3;
  side.monitored_loss = 0.5;
  side.config_hash = "abc";
  side.modality = StainModality::HE;
  save_checkpoint(m, dir / "m.ckpt", side);
  const ModelHandle back = load_checkpoint(dir / "m.ckpt", build_head());
  const Batch b = fixtures::synthetic_batch(5, 64, 13);
  EXPECT_TRUE(forward(m, b, Mode::Infer) == forward(back, b, Mode::Infer));
  EXPECT_EQ(back.head.checksum(), m.head.checksum());

  const CheckpointSidecar read = read_sidecar(dir / "m.ckpt");
  EXPECT_EQ(read.epoch, 3);
  EXPECT_EQ(read.config_hash, "abc");
  EXPECT_EQ(read.modality, StainModality::HE);
}

TEST(Checkpoint, TruncatedOrFlippedIsCorrupt) {
  TempDir dir("ckpt2");
  HeadInit init;
  const ModelHandle m = compose(BackboneSpec::stub(16), build_head(16), init);
  save_checkpoint(m, dir / "m.ckpt");
  const auto size = std::filesystem::file_size(dir / "m.ckpt");
  std::filesystem::copy_file(dir / "m.ckpt", dir / "flip.ckpt");
  {
    std::fstream f(dir / "flip.ckpt", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(static_cast<std::streamoff>(size / 2));
    f.put('\x5a');
  }
  std::filesystem::resize_file(dir / "m.ckpt", size - 9);
  EXPECT_EQ(code_of([&] { load_checkpoint(dir / "m.ckpt"); }), ErrorCode::CorruptCheckpoint);
  EXPECT_EQ(code_of([&] { load_checkpoint(dir / "flip.ckpt"); }), ErrorCode::CorruptCheckpoint);
  EXPECT_EQ(code_of([&] { load_checkpoint(dir / "absent.ckpt"); }), ErrorCode::IoError);
}

TEST(Checkpoint, TopologyMismatch) {
  TempDir dir("ckpt3");
  HeadInit init;
  const ModelHandle narrow = compose(BackboneSpec::stub(2048), build_head(2048, 1536, 1536), init);
  save_checkpoint(narrow, dir / "n.ckpt");
  EXPECT_EQ(code_of([&] { load_checkpoint(dir / "n.ckpt", build_head()); }), ErrorCode::TopologyMismatch);
}

TEST(FlatExport, RoundTrip) {
  TempDir dir("flat");
  HeadInit init;
  init.seed = 2;
  const Head<float> head(build_head(12), init);
  write_flat_export(head, dir / "w.json");
  const auto arrays = read_flat_export(dir / "w.json");
  const auto direct = export_flat(head);
  ASSERT_EQ(arrays.size(), direct.size());
  for (std::size_t i = 0; i < arrays.size(); ++i) {
    EXPECT_EQ(arrays[i].name, direct[i].name);
    EXPECT_EQ(arrays[i].shape, direct[i].shape);
    EXPECT_EQ(arrays[i].data, direct[i].data);
  }
  // Kernels are exported as [in, out].
  EXPECT_EQ(direct[4].name, "dense/kernel");
  EXPECT_EQ(direct[4].shape, (std::vector<std::size_t>{12, 12}));
}

TEST(GradientCheck, DenseOnlyHeadPasses) {
  HeadInit init;
  init.seed = 1;
  init.output_kernel_scale = 1.0;
  const Head<double> head(dense_only_head(2048), init);
  GradientCheckOptions opt;
  const auto r = gradient_check(head, gaussian(2048, 4, 2), targets(4, 4), opt);
  EXPECT_TRUE(r.passed) << r.max_relative_error;
  // 8196 trainable values fall under the full-check limit.
  ASSERT_EQ(r.blocks.size(), 2U);
  EXPECT_EQ(r.blocks[0].coordinates_checked, 8192U);
  EXPECT_EQ(r.blocks[1].coordinates_checked, 4U);
}

TEST(GradientCheck, CorruptedGradientFails) {
  HeadInit init;
  const Head<double> head(build_head(6), init);
  GradientCheckOptions opt;
  opt.tamper = [](Head<double>::Gradients& g) { g[0] *= 2.0; };
  const auto r = gradient_check(head, gaussian(6, 8, 3), targets(4, 8), opt);
  EXPECT_FALSE(r.passed);
  EXPECT_FALSE(r.blocks[0].passed);
}

TEST(GradientCheck, NonFiniteGradientThrows) {
  HeadInit init;
  const Head<double> head(build_head(6), init);
  GradientCheckOptions opt;
  opt.tamper = [](Head<double>::Gradients& g) { g[1](0, 0) = std::nan(""); };
  EXPECT_EQ(code_of([&] { gradient_check(head, gaussian(6, 8, 3), targets(4, 8), opt); }),
            ErrorCode::NonFiniteGradient);
}

TEST(GradientCheck, DeadReluUnitsHaveZeroGradient) {
  // Dense -> ReLU -> Dense with a strongly negative first bias: every hidden
  // unit is off, so the first layer's gradient is exactly zero.
  HeadSpec spec;
  spec.input_dim = 5;
  spec.layers = {{LayerKind::Dense, "dense", 5, 3, Activation::Relu}, {LayerKind::Dense, "dense_1", 3, 4, Activation::Softmax}};
  HeadInit init;
  Head<double> head(spec, init);
  for (auto& p : head.params()) {
    if (p.name == "dense/bias") p.value.setConstant(-100.0);
  }
  const Eigen::MatrixXd x = Eigen::MatrixXd::Zero(5, 4);
  Head<double>::Cache cache;
  head.forward(x, Mode::Train, &cache);
  const auto g = head.backward(cache, targets(4, 4));
  EXPECT_EQ(g[0].cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(g[1].cwiseAbs().maxCoeff(), 0.0);
  // The output bias gradient is exactly zero at uniform predictions, so a
  // small step keeps the O(h^2) truncation term below the relative floor.
  GradientCheckOptions opt;
  opt.step = 1e-5;
  const auto r = gradient_check(head, x, targets(4, 4), opt);
  EXPECT_TRUE(r.passed) << r.max_relative_error;
}

TEST(GradientCheck, FullHeadBothModes) {
  HeadInit init;
  init.seed = 4;
  const Head<double> head(build_head(8), init);
  for (Mode mode : {Mode::Train, Mode::Infer}) {
    GradientCheckOptions opt;
    opt.mode = mode;
    const auto r = gradient_check(head, gaussian(8, 12, 5), targets(4, 12), opt);
    EXPECT_TRUE(r.passed) << r.max_relative_error;
    EXPECT_LE(r.max_relative_error, 1e-3);
  }
}
