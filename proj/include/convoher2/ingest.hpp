#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace convoher2 {

enum class StainModality { HE, IHC };

std::string_view to_string(StainModality modality);
// Accepts exactly "HE" or "IHC".
StainModality parse_modality(std::string_view token);

inline constexpr int kNumScores = 4;

/// HER2 score stage. The index is the class id used by every downstream
/// module (one-hot position, confusion-matrix row/column).
class Her2Score {
 public:
  constexpr Her2Score() = default;
  static Her2Score from_index(int index);
  static Her2Score from_label(std::string_view label);

  constexpr int index() const noexcept { return index_; }
  std::string_view label() const noexcept;

  friend constexpr bool operator==(Her2Score, Her2Score) = default;

 private:
  explicit constexpr Her2Score(int index) : index_(index) {}
  int index_ = 0;
};

enum class Split { Train, Test, Unsplit };

std::string_view to_string(Split split);
Split parse_split(std::string_view token);

struct ImageRecord {
  std::filesystem::path path;
  std::string sample_id;
  StainModality modality = StainModality::HE;
  Her2Score score;
  Split split = Split::Unsplit;
  int source_width_px = 0;
  int source_height_px = 0;

  friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
};

struct SplitCounts {
  std::size_t train = 0;
  std::size_t test = 0;
  std::size_t unsplit = 0;

  friend bool operator==(const SplitCounts&, const SplitCounts&) = default;
};

/// Captures the token between the final underscore and the extension,
/// e.g. "00012_train_3+.png" -> "3+".
inline constexpr std::string_view kDefaultLabelPattern = R"(_([^_./\\]+)\.[A-Za-z0-9]+$)";

class DatasetManifest {
 public:
  DatasetManifest(StainModality modality, std::vector<ImageRecord> records, std::uint64_t seed,
                  std::string pattern, std::size_t skipped = 0);

  StainModality modality() const noexcept { return modality_; }
  const std::vector<ImageRecord>& records() const noexcept { return records_; }
  const std::array<std::size_t, kNumScores>& class_counts() const noexcept { return class_counts_; }
  const SplitCounts& split_counts() const noexcept { return split_counts_; }
  std::uint64_t seed() const noexcept { return seed_; }
  const std::string& pattern() const noexcept { return pattern_; }
  // Files that looked like images but whose names did not parse.
  std::size_t skipped() const noexcept { return skipped_; }

  std::size_t size() const noexcept { return records_.size(); }
  std::vector<ImageRecord> records_in(Split split) const;

  void write(std::ostream& out) const;
  std::string serialize() const;
  void save(const std::filesystem::path& path) const;
  static DatasetManifest read(std::istream& in);
  static DatasetManifest load(const std::filesystem::path& path);

 private:
  StainModality modality_;
  std::vector<ImageRecord> records_;
  std::array<std::size_t, kNumScores> class_counts_{};
  SplitCounts split_counts_;
  std::uint64_t seed_;
  std::string pattern_;
  std::size_t skipped_;
};

Her2Score parse_label(std::string_view filename, std::string_view pattern = kDefaultLabelPattern);
std::string format_label(Her2Score score);

/// Sample id shared across modalities: the filename prefix before the label
/// capture, with trailing separators removed ("00012_train_3+.png" -> "00012_train").
std::string derive_sample_id(std::string_view filename, std::string_view pattern = kDefaultLabelPattern);

/// Walks `root` (descending into a `HE`/`IHC` child when one matches the
/// modality) and builds a path-sorted manifest. Records under a `train` or
/// `test` directory inherit that split.
DatasetManifest scan_dataset(const std::filesystem::path& root, StainModality modality,
                             std::string_view pattern = kDefaultLabelPattern);

struct SplitOptions {
  double train_fraction = 0.8;
  std::uint64_t seed = 0;
  bool stratified = true;
  bool force = false;
};

DatasetManifest split_manifest(const DatasetManifest& manifest, const SplitOptions& options);

/// Per-category train allocation used by stratified splits: floor of
/// fraction * size, with the remainder up to round(fraction * total) handed
/// out by largest fractional part (ties to the lower category).
std::array<std::size_t, kNumScores> stratified_allocation(
    const std::array<std::size_t, kNumScores>& category_sizes, double train_fraction);

struct ScoreMismatch {
  std::string sample_id;
  Her2Score he_score;
  Her2Score ihc_score;
};

struct PairingReport {
  std::size_t matched = 0;
  std::vector<ScoreMismatch> score_mismatches;
  std::vector<std::string> only_in_he;
  std::vector<std::string> only_in_ihc;

  bool ok() const noexcept {
    return score_mismatches.empty() && only_in_he.empty() && only_in_ihc.empty();
  }
};

PairingReport verify_pairing(const DatasetManifest& he, const DatasetManifest& ihc);

// Full-corpus distribution of the BCI benchmark (HER2 0, 1+, 2+, 3+).
inline constexpr std::array<std::size_t, kNumScores> kBciClassCounts{240, 1153, 2142, 1335};
inline constexpr SplitCounts kBciSplitCounts{3896, 977, 0};

struct DistributionCheck {
  std::array<std::size_t, kNumScores> observed{};
  std::array<std::size_t, kNumScores> expected{};
  std::size_t total_deviation = 0;  // sum of |observed - expected|
  std::size_t tolerance = 0;
  bool flagged = false;             // deviation above tolerance
};

DistributionCheck check_distribution(const DatasetManifest& manifest,
                                     const std::array<std::size_t, kNumScores>& expected = kBciClassCounts,
                                     std::size_t tolerance = 3);

}  // namespace convoher2
