#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "convoher2/ingest.hpp"
#include "convoher2/trainer.hpp"

namespace convoher2 {

inline constexpr int kNumCategories = 4;

/// Rows are the true category, columns the predicted one.
struct ConfusionMatrix {
  std::array<std::array<std::uint64_t, kNumCategories>, kNumCategories> counts{};

  std::uint64_t total() const;
  std::uint64_t trace() const;
  std::uint64_t row_sum(int k) const;
  std::uint64_t col_sum(int k) const;
  double accuracy() const;
};

/// Throws LengthMismatch or IndexOutOfRange.
ConfusionMatrix confusion(const std::vector<int>& predictions, const std::vector<int>& labels);

/// Non-negative fraction kept in lowest terms; compares exactly.
struct Ratio {
  std::uint64_t num = 0;
  std::uint64_t den = 1;

  static Ratio of(std::uint64_t num, std::uint64_t den);
  Ratio operator+(const Ratio& o) const;
  Ratio operator*(const Ratio& o) const;
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  friend bool operator==(const Ratio&, const Ratio&) = default;
};

struct CategoryMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  // Set when the denominator was zero and the value was reported as 0.
  bool precision_undefined = false;
  bool recall_undefined = false;
  std::uint64_t support = 0;
};

std::array<CategoryMetrics, kNumCategories> per_category(const ConfusionMatrix& m);

Ratio exact_accuracy(const ConfusionMatrix& m);
/// sum_k (support_k / N) * recall_k, evaluated in exact arithmetic.
Ratio support_weighted_recall(const ConfusionMatrix& m);

struct EvaluationReport {
  std::optional<StainModality> modality;
  std::uint64_t n_samples = 0;
  double accuracy = 0.0;
  double loss = 0.0;
  std::array<CategoryMetrics, kNumCategories> per_category{};
  ConfusionMatrix matrix;
  std::optional<CheckpointMeta> checkpoint;
  std::string created_at;
};

EvaluationReport make_report(const SplitEvaluation& evaluation, std::optional<StainModality> modality,
                             std::optional<CheckpointMeta> checkpoint = std::nullopt);

/// Infer-mode pass over `split` of `manifest`. Throws EmptySplit.
EvaluationReport full_report(const ModelHandle& handle, const DatasetManifest& manifest,
                             std::optional<CheckpointMeta> checkpoint = std::nullopt, Split split = Split::Test);

std::string report_json(const EvaluationReport& report);
void write_report(const EvaluationReport& report, const std::filesystem::path& path);

// ---------------------------------------------------------------------------

struct CurveFiles {
  std::filesystem::path accuracy_figure;
  std::filesystem::path loss_figure;
  std::vector<std::filesystem::path> series;
};

/// accuracy.png and loss.png plus one "epoch<TAB>value" file per series
/// (train_accuracy.tsv, val_accuracy.tsv, train_loss.tsv, val_loss.tsv).
/// Validation series are skipped when the history has no validation data.
/// Throws EmptyHistory.
CurveFiles curves(const std::vector<EpochMetrics>& history, const std::filesystem::path& out_dir);

using Series = std::vector<std::pair<int, double>>;
void write_series(const Series& series, const std::filesystem::path& path);
Series read_series(const std::filesystem::path& path);

// ---------------------------------------------------------------------------

struct ComparisonRow {
  std::string method_name;
  std::string dataset_name;
  double accuracy = 0.0;
};

/// Published reference results: SVM on MRI, DenseNet on ultrasound and
/// HASHI on HER2SC.
std::vector<ComparisonRow> default_baselines();

/// Markdown table of the baselines (optional) followed by `measured`.
/// Throws PreconditionViolation when the table would be empty or an accuracy
/// lies outside [0, 1].
std::string comparison_table(const std::vector<ComparisonRow>& measured, bool include_baselines = true);

}  // namespace convoher2
