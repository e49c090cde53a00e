#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "convoher2/error.hpp"
#include "convoher2/trainer.hpp"
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

struct CachedSet {
  FeatureStore store{16};
  std::vector<LabeledSample> train;
  std::vector<LabeledSample> val;
};

CachedSet random_cached(std::size_t n_train, std::size_t n_val, int dim, std::uint64_t seed) {
  CachedSet s;
  s.store = FeatureStore(dim);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n;
  for (std::size_t i = 0; i < n_train + n_val; ++i) {
    std::vector<float> row(static_cast<std::size_t>(dim));
    for (float& v : row) v = n(rng);
    const std::string id = "s" + std::to_string(i);
    s.store.put(id, row);
    (i < n_train ? s.train : s.val).push_back({id, Her2Score::from_index(static_cast<int>(i % 4))});
  }
  return s;
}

ModelHandle small_model(int dim, std::uint64_t seed = 0) {
  HeadInit init;
  init.seed = seed;
  return compose(BackboneSpec::stub(dim), build_head(dim), init);
}

TrainConfig quick_config(int epochs, Monitor monitor = Monitor::TrainLoss) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 8;
  c.learning_rate = 1e-3;
  c.checkpoint_monitor = monitor;
  c.seed = 3;
  return c;
}

}  // namespace

TEST(TrainConfig, DefaultsAndValidation) {
  const TrainConfig c;
  EXPECT_EQ(c.learning_rate, 1e-4);
  EXPECT_EQ(c.batch_size, 256U);
  EXPECT_EQ(c.epochs, 200);
  EXPECT_EQ(c.beta1, 0.9);
  EXPECT_EQ(c.beta2, 0.999);
  EXPECT_EQ(c.adam_epsilon, 1e-7);
  EXPECT_EQ(c.checkpoint_monitor, Monitor::ValLoss);
  TrainConfig bad;
  bad.learning_rate = 0.0;
  EXPECT_THROW(bad.validate(), Error);
  bad = TrainConfig{};
  bad.batch_size = 0;
  EXPECT_THROW(bad.validate(), Error);
  bad = TrainConfig{};
  bad.epochs = -1;
  EXPECT_THROW(bad.validate(), Error);
}

TEST(StepsPerEpoch, ReferenceConfiguration) {
  EXPECT_EQ(steps_per_epoch(3896, 256), 16U);
  EXPECT_EQ(steps_per_epoch(977, 256), 4U);
}

// Reference Adam written out in double precision for a single scalar.
TEST(Adam, MatchesScalarReference) {
  HeadSpec spec;
  spec.input_dim = 1;
  spec.layers = {{LayerKind::Dense, "dense", 1, 1, Activation::Softmax}};
  Head<float> head(spec, HeadInit{});
  head.params()[0].value(0, 0) = 1.0F;
  AdamOptimizer adam(0.1, 0.9, 0.999, 1e-7);
  double p = 1.0, m = 0.0, v = 0.0;
  const std::vector<double> grads{0.5, -0.2, 0.3, 0.0, 1.5};
  for (std::size_t t = 1; t <= grads.size(); ++t) {
    const double g = grads[t - 1];
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double lr_t = 0.1 * std::sqrt(1.0 - std::pow(0.999, t)) / (1.0 - std::pow(0.9, t));
    p -= lr_t * m / (std::sqrt(v) + 1e-7);
    Head<float>::Gradients gr{Eigen::MatrixXf::Constant(1, 1, static_cast<float>(g)), Eigen::MatrixXf::Zero(1, 1)};
    adam.step(head.params(), head.trainable_indices(), gr);
    EXPECT_NEAR(head.params()[0].value(0, 0), p, 1e-6) << "step " << t;
  }
  EXPECT_EQ(adam.iterations(), grads.size());
}

TEST(Train, ZeroEpochsWritesNothing) {
  TempDir dir("zero");
  ModelHandle m = small_model(16);
  const CachedSet data = random_cached(8, 0, 16, 1);
  TrainOptions opt;
  opt.checkpoint_path = dir / "c.ckpt";
  const TrainResult r = train_on_cached_features(m, data.store, data.train, {}, quick_config(0), opt);
  EXPECT_TRUE(r.history.epochs.empty());
  EXPECT_TRUE(r.checkpoints.empty());
  EXPECT_FALSE(std::filesystem::exists(dir / "c.ckpt"));
}

TEST(Train, CheckpointsStrictlyImproveAndHistoryPersists) {
  TempDir dir("mono");
  ModelHandle m = small_model(16, 2);
  const CachedSet data = random_cached(24, 8, 16, 2);
  TrainOptions opt;
  opt.checkpoint_path = dir / "best.ckpt";
  opt.history_path = dir / "history.ndjson";
  opt.config_hash = "feedface";
  const std::uint64_t frozen = m.backbone->checksum();
  const TrainResult r = train_on_cached_features(m, data.store, data.train, data.val, quick_config(15, Monitor::ValLoss), opt);

  ASSERT_EQ(r.history.epochs.size(), 15U);
  ASSERT_FALSE(r.checkpoints.empty());
  for (std::size_t i = 1; i < r.checkpoints.size(); ++i) {
    EXPECT_LT(r.checkpoints[i].monitored_loss, r.checkpoints[i - 1].monitored_loss);
    EXPECT_GT(r.checkpoints[i].epoch, r.checkpoints[i - 1].epoch);
  }
  double best = 1e300;
  int best_epoch = 0;
  for (const auto& e : r.history.epochs) {
    ASSERT_TRUE(e.val_loss);
    if (*e.val_loss < best) {
      best = *e.val_loss;
      best_epoch = e.epoch;
    }
    EXPECT_GE(e.train_accuracy, 0.0);
    EXPECT_LE(e.train_accuracy, 1.0);
    EXPECT_GE(e.train_loss, 0.0);
  }
  EXPECT_EQ(r.history.best_monitored_loss, best);
  EXPECT_EQ(r.history.best_epoch, best_epoch);
  EXPECT_EQ(r.best()->epoch, best_epoch);

  const CheckpointSidecar side = read_sidecar(dir / "best.ckpt");
  EXPECT_EQ(side.epoch, best_epoch);
  EXPECT_EQ(side.monitored_loss, best);
  EXPECT_EQ(side.config_hash, "feedface");

  const auto history = read_history(dir / "history.ndjson");
  ASSERT_EQ(history.size(), 15U);
  for (std::size_t i = 0; i < history.size(); ++i) {
    EXPECT_EQ(history[i].train_loss, r.history.epochs[i].train_loss);
    EXPECT_EQ(history[i].val_accuracy, r.history.epochs[i].val_accuracy);
  }
  EXPECT_EQ(m.backbone->checksum(), frozen);
}

TEST(Train, ValMonitorNeedsValidationData) {
  ModelHandle m = small_model(16);
  const CachedSet data = random_cached(8, 0, 16, 3);
  EXPECT_EQ(code_of([&] { train_on_cached_features(m, data.store, data.train, {}, quick_config(1, Monitor::ValLoss)); }),
            ErrorCode::ConfigurationError);
}

TEST(Train, MissingFeatures) {
  ModelHandle m = small_model(16);
  const FeatureStore empty(16);
  const std::vector<LabeledSample> samples{{"nobody", Her2Score::from_index(1)}};
  EXPECT_EQ(code_of([&] { train_on_cached_features(m, empty, samples, {}, quick_config(1)); }),
            ErrorCode::MissingFeature);
}

TEST(Train, NonFiniteLossKeepsLastCheckpoint) {
  TempDir dir("nan");
  ModelHandle m = small_model(16, 4);
  CachedSet data = random_cached(8, 0, 16, 4);
  TrainOptions opt;
  opt.checkpoint_path = dir / "best.ckpt";
  train_on_cached_features(m, data.store, data.train, {}, quick_config(2), opt);
  const std::uint64_t saved = load_checkpoint(dir / "best.ckpt").head.checksum();

  std::vector<float> poison(16, std::numeric_limits<float>::quiet_NaN());
  data.store.put(data.train[0].sample_id, poison);
  EXPECT_EQ(code_of([&] { train_on_cached_features(m, data.store, data.train, {}, quick_config(2), opt); }),
            ErrorCode::NonFiniteLoss);
  EXPECT_EQ(load_checkpoint(dir / "best.ckpt").head.checksum(), saved);
}

TEST(Train, SameSeedSameTrajectory) {
  const CachedSet data = random_cached(20, 4, 16, 5);
  ModelHandle a = small_model(16, 6);
  ModelHandle b = small_model(16, 6);
  const auto ra = train_on_cached_features(a, data.store, data.train, data.val, quick_config(4));
  const auto rb = train_on_cached_features(b, data.store, data.train, data.val, quick_config(4));
  EXPECT_TRUE(same_trajectory(ra.history, rb.history));
  EXPECT_EQ(a.head.checksum(), b.head.checksum());
}

TEST(Train, ImageAndCachedPathsAgree) {
  TempDir dir("paths");
  fixtures::CorpusLayout layout;
  layout.train.fill(3);
  layout.test.fill(1);
  layout.side = 32;
  fixtures::write_corpus(dir.path(), layout);
  const DatasetManifest manifest = scan_dataset(dir.path(), StainModality::IHC);

  HeadInit init;
  init.seed = 7;
  ModelHandle img = compose(BackboneSpec::stub(2048, 1), build_head(2048), init);
  ModelHandle cached = compose(BackboneSpec::stub(2048, 1), build_head(2048), init);
  FeatureStore store(2048);
  extract_to_store(cached, manifest, store);
  EXPECT_EQ(store.size(), manifest.size());

  TrainConfig cfg = quick_config(1);
  cfg.learning_rate = 1e-4;
  const auto r_img = train(img, manifest, &manifest, cfg);
  const auto r_cached = train_on_cached_features(cached, store, labeled_samples(manifest, Split::Train),
                                                 labeled_samples(manifest, Split::Test), cfg);
  EXPECT_NEAR(r_img.history.epochs[0].train_loss, r_cached.history.epochs[0].train_loss, 1e-5);
  EXPECT_NEAR(*r_img.history.epochs[0].val_loss, *r_cached.history.epochs[0].val_loss, 1e-5);
}

TEST(Train, EmptyTrainSplit) {
  TempDir dir("empty");
  fixtures::CorpusLayout layout;
  layout.test.fill(1);
  fixtures::write_corpus(dir.path(), layout);
  const DatasetManifest manifest = scan_dataset(dir.path(), StainModality::HE);
  ModelHandle m = small_model(2048);
  EXPECT_EQ(code_of([&] { train(m, manifest, &manifest, quick_config(1)); }), ErrorCode::EmptySplit);
}

TEST(Evaluate, UniformModelLossIsLnFour) {
  const Eigen::MatrixXf uniform = Eigen::MatrixXf::Constant(10, 4, 0.25F);
  std::vector<int> labels;
  for (int i = 0; i < 10; ++i) labels.push_back(i % 4);
  const SplitEvaluation ev = evaluate_probabilities(uniform, labels);
  EXPECT_NEAR(ev.loss, 1.386294, 1e-6);
}

TEST(Evaluate, PerfectPredictionsAccuracyOne) {
  Eigen::MatrixXf p = Eigen::MatrixXf::Zero(8, 4);
  std::vector<int> labels;
  for (int i = 0; i < 8; ++i) {
    labels.push_back((i * 3) % 4);
    p(i, labels.back()) = 1.0F;
  }
  const SplitEvaluation ev = evaluate_probabilities(p, labels);
  EXPECT_EQ(ev.accuracy, 1.0);
  EXPECT_EQ(ev.correct, 8U);
  EXPECT_EQ(ev.loss, 0.0);
}

TEST(Evaluate, SplitInManifestOrder) {
  TempDir dir("evalsplit");
  fixtures::CorpusLayout layout;
  layout.train.fill(1);
  layout.test.fill(2);
  fixtures::write_corpus(dir.path(), layout);
  const DatasetManifest manifest = scan_dataset(dir.path(), StainModality::HE);
  const ModelHandle m = small_model(2048);
  const SplitEvaluation ev = evaluate_split(m, manifest, Split::Test, 3);
  const auto records = manifest.records_in(Split::Test);
  ASSERT_EQ(ev.sample_ids.size(), records.size());
  for (std::size_t i = 0; i < records.size(); ++i) EXPECT_EQ(ev.sample_ids[i], records[i].sample_id);
  EXPECT_EQ(ev.accuracy, static_cast<double>(ev.correct) / static_cast<double>(records.size()));

  fixtures::CorpusLayout no_test;
  no_test.train.fill(1);
  TempDir dir2("evalsplit2");
  fixtures::write_corpus(dir2.path(), no_test);
  const DatasetManifest train_only = scan_dataset(dir2.path(), StainModality::HE);
  EXPECT_EQ(code_of([&] { evaluate_split(m, train_only, Split::Test); }), ErrorCode::EmptySplit);
}
