#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "convoher2/feature_store.hpp"
#include "convoher2/ingest.hpp"
#include "convoher2/model.hpp"
#include "convoher2/preprocess.hpp"

namespace convoher2 {

enum class Monitor { TrainLoss, ValLoss };

std::string_view to_string(Monitor monitor);
Monitor parse_monitor(std::string_view token);

struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t batch_size = 256;
  int epochs = 200;
  std::string optimizer = "adam";
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-7;
  std::string loss = "categorical_cross_entropy";
  std::uint64_t seed = 0;
  Monitor checkpoint_monitor = Monitor::ValLoss;
  StainModality modality = StainModality::IHC;

  void validate() const;
};

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  std::optional<double> val_loss;
  std::optional<double> val_accuracy;
  double wall_seconds = 0.0;
};

struct TrainHistory {
  std::vector<EpochMetrics> epochs;
  int best_epoch = 0;
  double best_monitored_loss = std::numeric_limits<double>::infinity();
};

/// True when both histories hold the same per-epoch metrics and best
/// epoch; wall-clock time is ignored.
bool same_trajectory(const TrainHistory& a, const TrainHistory& b);

struct CheckpointMeta {
  std::filesystem::path path;
  int epoch = 0;
  double monitored_loss = 0.0;
  std::string config_hash;
};

struct TrainOptions {
  // Empty: no checkpoint is written, improvements are still recorded.
  std::filesystem::path checkpoint_path;
  // Empty: no history file. Otherwise one JSON record per epoch.
  std::filesystem::path history_path;
  // Applied on the image path only.
  AugmentPolicy augment = AugmentPolicy::disabled();
  std::string config_hash;
  std::function<void(const EpochMetrics&)> on_epoch;
};

struct TrainResult {
  TrainHistory history;
  // Every checkpoint written, in order; the last one is the best.
  std::vector<CheckpointMeta> checkpoints;

  std::optional<CheckpointMeta> best() const {
    if (checkpoints.empty()) return std::nullopt;
    return checkpoints.back();
  }
};

/// Keras-style Adam: bias correction folded into the step size, epsilon
/// added outside the square root.
class AdamOptimizer {
 public:
  AdamOptimizer(double learning_rate, double beta1, double beta2, double epsilon);

  void step(std::vector<Head<float>::Param>& params, const std::vector<std::size_t>& trainable,
            const Head<float>::Gradients& gradients);
  std::uint64_t iterations() const noexcept { return iterations_; }

 private:
  double lr_;
  double beta1_;
  double beta2_;
  double epsilon_;
  std::uint64_t iterations_ = 0;
  std::vector<Eigen::MatrixXf> m_;
  std::vector<Eigen::MatrixXf> v_;
};

std::size_t steps_per_epoch(std::size_t samples, std::size_t batch_size);

/// Full image path: decode, (augment), backbone, head. Each epoch e is
/// shuffled with seed + e. Throws NonFiniteLoss (previous checkpoint kept)
/// and EmptySplit.
TrainResult train(ModelHandle& handle, const DatasetManifest& train_set, const DatasetManifest* val_set,
                  const TrainConfig& config, const TrainOptions& options = {});

struct LabeledSample {
  std::string sample_id;
  Her2Score score;
};

std::vector<LabeledSample> labeled_samples(const DatasetManifest& manifest, Split split);

/// Same update rule as `train`, starting from cached backbone features.
/// Throws MissingFeature when a sample id is absent from the store.
TrainResult train_on_cached_features(ModelHandle& handle, const FeatureStore& features,
                                     const std::vector<LabeledSample>& train_samples,
                                     const std::vector<LabeledSample>& val_samples, const TrainConfig& config,
                                     const TrainOptions& options = {});

struct SplitEvaluation {
  double loss = 0.0;
  double accuracy = 0.0;
  std::size_t correct = 0;
  std::vector<int> predictions;
  std::vector<int> labels;
  std::vector<std::string> sample_ids;
};

/// Infer-mode pass over a split in manifest order.
SplitEvaluation evaluate_split(const ModelHandle& handle, const DatasetManifest& manifest, Split split,
                               std::size_t batch_size = 256);
SplitEvaluation evaluate_cached(const ModelHandle& handle, const FeatureStore& features,
                                const std::vector<LabeledSample>& samples, std::size_t batch_size = 256);
/// From N x classes probability rows.
SplitEvaluation evaluate_probabilities(const Eigen::MatrixXf& probabilities, const std::vector<int>& labels);

/// Fills `store` with backbone features for every record of `manifest`.
void extract_to_store(const ModelHandle& handle, const DatasetManifest& manifest, FeatureStore& store,
                      std::size_t batch_size = 64);

void write_history_record(std::ostream& out, const EpochMetrics& m);
std::vector<EpochMetrics> read_history(const std::filesystem::path& path);

}  // namespace convoher2
