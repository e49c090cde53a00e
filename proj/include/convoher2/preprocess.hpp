#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "convoher2/image_io.hpp"
#include "convoher2/ingest.hpp"

namespace convoher2 {

inline constexpr int kImageSide = 256;
inline constexpr int kChannels = 3;

enum class RangeTag { Raw0To255, NormalizedMinus1To1 };

/// Height x width x 3 array, interleaved channels, row-major.
struct ImageTensor {
  int height = 0;
  int width = 0;
  std::vector<float> data;
  RangeTag range = RangeTag::Raw0To255;

  std::size_t size() const noexcept { return data.size(); }
  float at(int y, int x, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * kChannels + c]; }

  friend bool operator==(const ImageTensor&, const ImageTensor&) = default;
};

using LabelVector = std::array<float, kNumScores>;

struct Batch {
  int side = kImageSide;
  // N images laid out back to back, each side x side x 3, normalized.
  std::vector<float> images;
  std::vector<LabelVector> labels;
  std::vector<Her2Score> scores;
  std::vector<std::string> record_ids;

  std::size_t size() const noexcept { return record_ids.size(); }
  std::size_t image_stride() const noexcept { return static_cast<std::size_t>(side) * side * kChannels; }
  const float* image(std::size_t i) const { return images.data() + i * image_stride(); }
};

struct AugmentPolicy {
  std::vector<int> rotation_degrees{0, 90, 180, 270};
  bool horizontal_flip = true;
  bool vertical_flip = false;
  double scale_min = 0.9;
  double scale_max = 1.1;
  bool enabled = true;

  static AugmentPolicy disabled();
  // Throws PreconditionViolation when the jitter interval excludes 1.0 or
  // no rotation is allowed.
  void validate() const;
};

ImageTensor from_rgb(const RgbImage& image);
RgbImage to_rgb(const ImageTensor& raw);

/// Decodes and bilinearly resizes to side x side x 3, range Raw0To255.
ImageTensor decode_resize(const std::filesystem::path& path, int side_px = kImageSide);
ImageTensor resize_bilinear(const ImageTensor& image, int side_px);

/// x / 127.5 - 1. Throws WrongRangeTag unless the input is raw.
ImageTensor normalize(const ImageTensor& raw);
ImageTensor denormalize(const ImageTensor& normalized);

LabelVector one_hot(Her2Score score);

ImageTensor augment(const ImageTensor& image, const AugmentPolicy& policy, std::mt19937_64& rng);

/// Decodes and normalizes `records` in order into one batch (no augmentation).
Batch load_batch(std::span<const ImageRecord> records, int side_px = kImageSide);

/// Visiting order for one pass. Shuffled passes use seed + epoch so any
/// epoch can be replayed in isolation; unshuffled passes are the identity.
std::vector<std::size_t> epoch_order(std::size_t count, std::uint64_t seed, std::uint64_t epoch, bool shuffle);

/// Sizes of consecutive batches covering `count` items; the final partial
/// batch is kept.
std::vector<std::size_t> batch_sizes(std::size_t count, std::size_t batch_size);

struct BatchOptions {
  Split split = Split::Train;
  std::size_t batch_size = 256;
  std::uint64_t shuffle_seed = 0;
  std::uint64_t epoch = 0;
  AugmentPolicy policy = AugmentPolicy::disabled();
  int side_px = kImageSide;
};

/// Lazily decodes one pass over a split. Train passes are shuffled and
/// augmented; test passes keep manifest order and are never augmented.
class BatchStream {
 public:
  BatchStream(const DatasetManifest& manifest, BatchOptions options);

  std::optional<Batch> next();
  std::size_t num_batches() const noexcept { return sizes_.size(); }
  std::size_t num_records() const noexcept { return records_.size(); }

 private:
  std::vector<ImageRecord> records_;
  BatchOptions options_;
  std::vector<std::size_t> order_;
  std::vector<std::size_t> sizes_;
  std::size_t batch_index_ = 0;
  std::size_t cursor_ = 0;
};

BatchStream make_batches(const DatasetManifest& manifest, BatchOptions options);

}  // namespace convoher2
