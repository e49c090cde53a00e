#include "convoher2/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "convoher2/error.hpp"

namespace convoher2 {
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct FeatureBatch {
  Eigen::MatrixXf features;  // feature_dim x N
  Eigen::MatrixXf targets;   // classes x N
  std::vector<int> labels;
};

using BatchSink = std::function<void(const FeatureBatch&)>;
// Visits every training batch of the given 1-based epoch.
using EpochSource = std::function<void(int epoch, const BatchSink&)>;
using Evaluator = std::function<SplitEvaluation()>;

Eigen::MatrixXf targets_for(const std::vector<int>& labels, int classes) {
  Eigen::MatrixXf t = Eigen::MatrixXf::Zero(classes, static_cast<Eigen::Index>(labels.size()));
  for (std::size_t j = 0; j < labels.size(); ++j) t(labels[j], static_cast<Eigen::Index>(j)) = 1.0F;
  return t;
}

FeatureBatch from_images(const ModelHandle& handle, const Batch& batch) {
  FeatureBatch fb;
  fb.features = handle.backbone->extract(batch);
  for (const auto& s : batch.scores) fb.labels.push_back(s.index());
  fb.targets = targets_for(fb.labels, handle.head.spec().output_dim());
  return fb;
}

FeatureBatch from_store(const FeatureStore& store, const std::vector<LabeledSample>& samples,
                        const std::vector<std::size_t>& order, std::size_t begin, std::size_t count, int classes) {
  FeatureBatch fb;
  fb.features.resize(store.dim(), static_cast<Eigen::Index>(count));
  for (std::size_t j = 0; j < count; ++j) {
    const LabeledSample& s = samples[order[begin + j]];
    const auto row = store.get(s.sample_id);
    fb.features.col(static_cast<Eigen::Index>(j)) = Eigen::Map<const Eigen::VectorXf>(row.data(), store.dim());
    fb.labels.push_back(s.score.index());
  }
  fb.targets = targets_for(fb.labels, classes);
  return fb;
}

std::size_t count_correct(const Eigen::MatrixXf& probs_by_column, const std::vector<int>& labels) {
  std::size_t correct = 0;
  for (Eigen::Index j = 0; j < probs_by_column.cols(); ++j) {
    Eigen::Index arg = 0;
    probs_by_column.col(j).maxCoeff(&arg);
    if (arg == labels[static_cast<std::size_t>(j)]) ++correct;
  }
  return correct;
}

TrainResult run_training(ModelHandle& handle, std::size_t train_count, const EpochSource& source,
                         const std::optional<Evaluator>& evaluate_val, const TrainConfig& config,
                         const TrainOptions& options) {
  config.validate();
  if (train_count == 0) throw Error(ErrorCode::EmptySplit, "no training samples");
  if (config.checkpoint_monitor == Monitor::ValLoss && !evaluate_val) {
    throw Error(ErrorCode::ConfigurationError, "checkpoint_monitor=val_loss needs a validation split");
  }

  std::ofstream history_out;
  if (!options.history_path.empty()) {
    history_out.open(options.history_path, std::ios::trunc);
    if (!history_out) throw Error(ErrorCode::IoError, "cannot write history " + options.history_path.string());
  }

  AdamOptimizer adam(config.learning_rate, config.beta1, config.beta2, config.adam_epsilon);
  TrainResult result;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    double loss_sum = 0.0;
    std::size_t correct = 0;
    std::size_t seen = 0;

    source(epoch, [&](const FeatureBatch& batch) {
      Head<float>::Cache cache;
      const Eigen::MatrixXf probs = handle.head.forward(batch.features, Mode::Train, &cache);
      const double loss = Head<float>::loss(probs, batch.targets);
      if (!std::isfinite(loss)) {
        throw Error(ErrorCode::NonFiniteLoss, "non-finite training loss at epoch " + std::to_string(epoch));
      }
      const auto grads = handle.head.backward(cache, batch.targets);
      adam.step(handle.head.params(), handle.head.trainable_indices(), grads);
      handle.head.update_running_stats(cache);

      const auto n = static_cast<std::size_t>(batch.features.cols());
      loss_sum += loss * static_cast<double>(n);
      correct += count_correct(probs, batch.labels);
      seen += n;
    });

    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = loss_sum / static_cast<double>(seen);
    m.train_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
    if (evaluate_val) {
      const SplitEvaluation val = (*evaluate_val)();
      if (!std::isfinite(val.loss)) {
        throw Error(ErrorCode::NonFiniteLoss, "non-finite validation loss at epoch " + std::to_string(epoch));
      }
      m.val_loss = val.loss;
      m.val_accuracy = val.accuracy;
    }
    m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

    const double monitored = config.checkpoint_monitor == Monitor::ValLoss ? *m.val_loss : m.train_loss;
    if (monitored < result.history.best_monitored_loss) {
      result.history.best_monitored_loss = monitored;
      result.history.best_epoch = epoch;
      CheckpointMeta meta{options.checkpoint_path, epoch, monitored, options.config_hash};
      if (!options.checkpoint_path.empty()) {
        CheckpointSidecar sidecar;
        sidecar.epoch = epoch;
        sidecar.monitored_loss = monitored;
        sidecar.config_hash = options.config_hash;
        sidecar.modality = config.modality;
        save_checkpoint(handle, options.checkpoint_path, sidecar);
      }
      result.checkpoints.push_back(std::move(meta));
    }

    result.history.epochs.push_back(m);
    if (history_out.is_open()) {
      write_history_record(history_out, m);
      history_out.flush();
    }
    if (options.on_epoch) options.on_epoch(m);
  }
  return result;
}

}  // namespace

std::string_view to_string(Monitor monitor) { return monitor == Monitor::ValLoss ? "val_loss" : "train_loss"; }

Monitor parse_monitor(std::string_view token) {
  if (token == "val_loss") return Monitor::ValLoss;
  if (token == "train_loss") return Monitor::TrainLoss;
  throw Error(ErrorCode::TypeError, "monitor must be train_loss or val_loss, got '" + std::string(token) + "'");
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw Error(ErrorCode::PreconditionViolation, "learning_rate must be positive");
  }
  if (batch_size < 1) throw Error(ErrorCode::PreconditionViolation, "batch_size must be at least 1");
  if (epochs < 0) throw Error(ErrorCode::PreconditionViolation, "epochs must be non-negative");
  if (optimizer != "adam") throw Error(ErrorCode::ConfigurationError, "only the adam optimizer is supported");
  if (loss != "categorical_cross_entropy") {
    throw Error(ErrorCode::ConfigurationError, "only categorical_cross_entropy is supported");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(adam_epsilon > 0.0)) {
    throw Error(ErrorCode::PreconditionViolation, "Adam moment parameters out of range");
  }
}

bool same_trajectory(const TrainHistory& a, const TrainHistory& b) {
  if (a.epochs.size() != b.epochs.size() || a.best_epoch != b.best_epoch) return false;
  if (!(a.best_monitored_loss == b.best_monitored_loss)) return false;
  for (std::size_t i = 0; i < a.epochs.size(); ++i) {
    const auto& x = a.epochs[i];
    const auto& y = b.epochs[i];
    if (x.epoch != y.epoch || x.train_loss != y.train_loss || x.train_accuracy != y.train_accuracy ||
        x.val_loss != y.val_loss || x.val_accuracy != y.val_accuracy) {
      return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------

AdamOptimizer::AdamOptimizer(double learning_rate, double beta1, double beta2, double epsilon)
    : lr_(learning_rate), beta1_(beta1), beta2_(beta2), epsilon_(epsilon) {}

void AdamOptimizer::step(std::vector<Head<float>::Param>& params, const std::vector<std::size_t>& trainable,
                         const Head<float>::Gradients& gradients) {
  if (gradients.size() != trainable.size()) throw Error(ErrorCode::ShapeMismatch, "gradient count mismatch");
  if (m_.empty()) {
    for (std::size_t idx : trainable) {
      m_.push_back(Eigen::MatrixXf::Zero(params[idx].value.rows(), params[idx].value.cols()));
      v_.push_back(Eigen::MatrixXf::Zero(params[idx].value.rows(), params[idx].value.cols()));
    }
  }
  ++iterations_;
  const auto t = static_cast<double>(iterations_);
  const auto lr_t = static_cast<float>(lr_ * std::sqrt(1.0 - std::pow(beta2_, t)) / (1.0 - std::pow(beta1_, t)));
  const auto b1 = static_cast<float>(beta1_);
  const auto b2 = static_cast<float>(beta2_);
  const auto eps = static_cast<float>(epsilon_);
  // 1 - beta rounded once from double; 1.0F - 0.999F is off by 5e-5 relative.
  const auto c1 = static_cast<float>(1.0 - beta1_);
  const auto c2 = static_cast<float>(1.0 - beta2_);
  for (std::size_t b = 0; b < trainable.size(); ++b) {
    const Eigen::MatrixXf& g = gradients[b];
    m_[b] = b1 * m_[b] + c1 * g;
    v_[b] = b2 * v_[b] + c2 * g.cwiseProduct(g);
    params[trainable[b]].value.array() -= lr_t * m_[b].array() / (v_[b].array().sqrt() + eps);
  }
}

std::size_t steps_per_epoch(std::size_t samples, std::size_t batch_size) {
  return batch_sizes(samples, batch_size).size();
}

// ---------------------------------------------------------------------------

TrainResult train(ModelHandle& handle, const DatasetManifest& train_set, const DatasetManifest* val_set,
                  const TrainConfig& config, const TrainOptions& options) {
  const std::size_t train_count = train_set.records_in(Split::Train).size();
  if (train_count == 0) throw Error(ErrorCode::EmptySplit, "training manifest has no train records");

  const EpochSource source = [&](int epoch, const BatchSink& sink) {
    BatchOptions bo;
    bo.split = Split::Train;
    bo.batch_size = config.batch_size;
    bo.shuffle_seed = config.seed;
    bo.epoch = static_cast<std::uint64_t>(epoch);
    bo.policy = options.augment;
    BatchStream stream(train_set, bo);
    while (auto batch = stream.next()) sink(from_images(handle, *batch));
  };

  std::optional<Evaluator> evaluator;
  if (val_set && !val_set->records_in(Split::Test).empty()) {
    evaluator = [&] { return evaluate_split(handle, *val_set, Split::Test, config.batch_size); };
  }
  return run_training(handle, train_count, source, evaluator, config, options);
}

std::vector<LabeledSample> labeled_samples(const DatasetManifest& manifest, Split split) {
  std::vector<LabeledSample> out;
  for (const auto& r : manifest.records()) {
    if (r.split == split) out.push_back({r.sample_id, r.score});
  }
  return out;
}

TrainResult train_on_cached_features(ModelHandle& handle, const FeatureStore& features,
                                     const std::vector<LabeledSample>& train_samples,
                                     const std::vector<LabeledSample>& val_samples, const TrainConfig& config,
                                     const TrainOptions& options) {
  if (features.dim() != handle.head.spec().input_dim) {
    throw Error(ErrorCode::DimMismatch, "cached feature width does not match the head");
  }
  for (const auto* group : {&train_samples, &val_samples}) {
    for (const auto& s : *group) {
      if (!features.contains(s.sample_id)) {
        throw Error(ErrorCode::MissingFeature, "no cached features for '" + s.sample_id + "'");
      }
    }
  }
  if (train_samples.empty()) throw Error(ErrorCode::EmptySplit, "no training samples");

  const int classes = handle.head.spec().output_dim();
  const EpochSource source = [&](int epoch, const BatchSink& sink) {
    const auto order = epoch_order(train_samples.size(), config.seed, static_cast<std::uint64_t>(epoch), true);
    std::size_t begin = 0;
    for (std::size_t n : batch_sizes(train_samples.size(), config.batch_size)) {
      sink(from_store(features, train_samples, order, begin, n, classes));
      begin += n;
    }
  };
  std::optional<Evaluator> evaluator;
  if (!val_samples.empty()) {
    evaluator = [&] { return evaluate_cached(handle, features, val_samples, config.batch_size); };
  }
  return run_training(handle, train_samples.size(), source, evaluator, config, options);
}

// ---------------------------------------------------------------------------

SplitEvaluation evaluate_probabilities(const Eigen::MatrixXf& probabilities, const std::vector<int>& labels) {
  if (static_cast<std::size_t>(probabilities.rows()) != labels.size()) {
    throw Error(ErrorCode::LengthMismatch, "probability rows and labels differ in count");
  }
  if (labels.empty()) throw Error(ErrorCode::EmptySplit, "nothing to evaluate");
  SplitEvaluation ev;
  const Eigen::MatrixXf by_column = probabilities.transpose();
  ev.loss = Head<float>::loss(by_column, targets_for(labels, static_cast<int>(probabilities.cols())));
  for (Eigen::Index i = 0; i < probabilities.rows(); ++i) {
    Eigen::Index arg = 0;
    probabilities.row(i).maxCoeff(&arg);
    ev.predictions.push_back(static_cast<int>(arg));
  }
  ev.labels = labels;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (ev.predictions[i] == labels[i]) ++ev.correct;
  }
  ev.accuracy = static_cast<double>(ev.correct) / static_cast<double>(labels.size());
  return ev;
}

namespace {

// Mean loss over batches weighted by batch size, predictions concatenated.
struct EvalAccumulator {
  double loss_sum = 0.0;
  SplitEvaluation total;

  void add(const SplitEvaluation& part, const std::vector<std::string>& ids) {
    loss_sum += part.loss * static_cast<double>(part.labels.size());
    total.correct += part.correct;
    total.predictions.insert(total.predictions.end(), part.predictions.begin(), part.predictions.end());
    total.labels.insert(total.labels.end(), part.labels.begin(), part.labels.end());
    total.sample_ids.insert(total.sample_ids.end(), ids.begin(), ids.end());
  }

  SplitEvaluation finish() {
    const auto n = static_cast<double>(total.labels.size());
    total.loss = loss_sum / n;
    total.accuracy = static_cast<double>(total.correct) / n;
    return std::move(total);
  }
};

}  // namespace

SplitEvaluation evaluate_split(const ModelHandle& handle, const DatasetManifest& manifest, Split split,
                               std::size_t batch_size) {
  const std::vector<ImageRecord> records = manifest.records_in(split);
  if (records.empty()) throw Error(ErrorCode::EmptySplit, "no records in split '" + std::string(to_string(split)) + "'");
  EvalAccumulator acc;
  std::size_t begin = 0;
  for (std::size_t n : batch_sizes(records.size(), batch_size)) {
    const Batch batch = load_batch(std::span<const ImageRecord>(records).subspan(begin, n));
    std::vector<int> labels;
    for (const auto& s : batch.scores) labels.push_back(s.index());
    acc.add(evaluate_probabilities(forward(handle, batch, Mode::Infer), labels), batch.record_ids);
    begin += n;
  }
  return acc.finish();
}

SplitEvaluation evaluate_cached(const ModelHandle& handle, const FeatureStore& features,
                                const std::vector<LabeledSample>& samples, std::size_t batch_size) {
  if (samples.empty()) throw Error(ErrorCode::EmptySplit, "nothing to evaluate");
  const auto order = epoch_order(samples.size(), 0, 0, false);
  const int classes = handle.head.spec().output_dim();
  EvalAccumulator acc;
  std::size_t begin = 0;
  for (std::size_t n : batch_sizes(samples.size(), batch_size)) {
    const FeatureBatch fb = from_store(features, samples, order, begin, n, classes);
    std::vector<std::string> ids;
    for (std::size_t j = 0; j < n; ++j) ids.push_back(samples[begin + j].sample_id);
    acc.add(evaluate_probabilities(forward_features(handle, fb.features, Mode::Infer), fb.labels), ids);
    begin += n;
  }
  return acc.finish();
}

void extract_to_store(const ModelHandle& handle, const DatasetManifest& manifest, FeatureStore& store,
                      std::size_t batch_size) {
  if (store.dim() != handle.backbone->spec().feature_dim) {
    throw Error(ErrorCode::DimMismatch, "feature store width does not match the backbone");
  }
  const auto& records = manifest.records();
  std::size_t begin = 0;
  for (std::size_t n : batch_sizes(records.size(), batch_size)) {
    const Batch batch = load_batch(std::span<const ImageRecord>(records).subspan(begin, n));
    const Eigen::MatrixXf feats = handle.backbone->extract(batch);
    for (std::size_t j = 0; j < n; ++j) {
      const auto col = feats.col(static_cast<Eigen::Index>(j));
      store.put(batch.record_ids[j], std::span<const float>(col.data(), static_cast<std::size_t>(col.size())));
    }
    begin += n;
  }
}

// ---------------------------------------------------------------------------

void write_history_record(std::ostream& out, const EpochMetrics& m) {
  json j = {{"epoch", m.epoch},
            {"train_loss", m.train_loss},
            {"train_accuracy", m.train_accuracy},
            {"val_loss", m.val_loss ? json(*m.val_loss) : json(nullptr)},
            {"val_accuracy", m.val_accuracy ? json(*m.val_accuracy) : json(nullptr)},
            {"wall_seconds", m.wall_seconds}};
  out << j.dump() << '\n';
}

std::vector<EpochMetrics> read_history(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot read history " + path.string());
  std::vector<EpochMetrics> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      EpochMetrics m;
      m.epoch = j.at("epoch").get<int>();
      m.train_loss = j.at("train_loss").get<double>();
      m.train_accuracy = j.at("train_accuracy").get<double>();
      if (!j.at("val_loss").is_null()) m.val_loss = j.at("val_loss").get<double>();
      if (!j.at("val_accuracy").is_null()) m.val_accuracy = j.at("val_accuracy").get<double>();
      m.wall_seconds = j.at("wall_seconds").get<double>();
      out.push_back(m);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::DecodeError, "bad history record: " + std::string(e.what()));
    }
  }
  return out;
}

}  // namespace convoher2
