#include "convoher2/preprocess.hpp"

#include <algorithm>
#include <cmath>

#include <opencv2/core.hpp>
#include <opencv2/imgproc.hpp>

#include "convoher2/error.hpp"

namespace convoher2 {
namespace {

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

cv::Mat as_mat(ImageTensor& t) { return {t.height, t.width, CV_32FC3, t.data.data()}; }

cv::Mat as_mat(const ImageTensor& t) {
  return {t.height, t.width, CV_32FC3, const_cast<float*>(t.data.data())};
}

ImageTensor from_mat(const cv::Mat& m, RangeTag range) {
  ImageTensor out;
  out.height = m.rows;
  out.width = m.cols;
  out.range = range;
  out.data.resize(static_cast<std::size_t>(m.rows) * m.cols * kChannels);
  cv::Mat dst(m.rows, m.cols, CV_32FC3, out.data.data());
  m.copyTo(dst);
  return out;
}

cv::Mat rotate_degrees(const cv::Mat& src, int degrees) {
  const int d = ((degrees % 360) + 360) % 360;
  cv::Mat out;
  switch (d) {
    case 0: return src.clone();
    case 90: cv::rotate(src, out, cv::ROTATE_90_COUNTERCLOCKWISE); return out;
    case 180: cv::rotate(src, out, cv::ROTATE_180); return out;
    case 270: cv::rotate(src, out, cv::ROTATE_90_CLOCKWISE); return out;
    default: break;
  }
  const cv::Point2f centre(static_cast<float>(src.cols - 1) / 2.0F, static_cast<float>(src.rows - 1) / 2.0F);
  const cv::Mat transform = cv::getRotationMatrix2D(centre, d, 1.0);
  cv::warpAffine(src, out, transform, src.size(), cv::INTER_LINEAR, cv::BORDER_REFLECT_101);
  return out;
}

// Rescale by `scale` then centre-crop (or reflect-pad) back to the input size.
cv::Mat scale_jitter(const cv::Mat& src, double scale) {
  const int w = static_cast<int>(std::lround(src.cols * scale));
  const int h = static_cast<int>(std::lround(src.rows * scale));
  if (w == src.cols && h == src.rows) return src;
  cv::Mat scaled;
  cv::resize(src, scaled, cv::Size(std::max(w, 1), std::max(h, 1)), 0, 0, cv::INTER_LINEAR);
  const int pad_x = std::max(src.cols - scaled.cols, 0);
  const int pad_y = std::max(src.rows - scaled.rows, 0);
  if (pad_x > 0 || pad_y > 0) {
    cv::copyMakeBorder(scaled, scaled, pad_y / 2, pad_y - pad_y / 2, pad_x / 2, pad_x - pad_x / 2,
                       cv::BORDER_REFLECT_101);
  }
  const int x0 = (scaled.cols - src.cols) / 2;
  const int y0 = (scaled.rows - src.rows) / 2;
  return scaled(cv::Rect(x0, y0, src.cols, src.rows)).clone();
}

}  // namespace

AugmentPolicy AugmentPolicy::disabled() {
  AugmentPolicy p;
  p.enabled = false;
  return p;
}

void AugmentPolicy::validate() const {
  if (!enabled) return;
  if (rotation_degrees.empty()) throw Error(ErrorCode::PreconditionViolation, "augment policy has no rotations");
  if (!(scale_min <= 1.0 && 1.0 <= scale_max) || scale_min <= 0.0) {
    throw Error(ErrorCode::PreconditionViolation, "scale jitter interval must contain 1.0");
  }
}

ImageTensor from_rgb(const RgbImage& image) {
  ImageTensor t;
  t.height = image.height;
  t.width = image.width;
  t.range = RangeTag::Raw0To255;
  t.data.assign(image.pixels.begin(), image.pixels.end());
  return t;
}

RgbImage to_rgb(const ImageTensor& raw) {
  if (raw.range != RangeTag::Raw0To255) throw Error(ErrorCode::WrongRangeTag, "to_rgb expects a raw tensor");
  RgbImage image;
  image.width = raw.width;
  image.height = raw.height;
  image.pixels.resize(raw.data.size());
  std::transform(raw.data.begin(), raw.data.end(), image.pixels.begin(), [](float v) {
    return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
  });
  return image;
}

ImageTensor resize_bilinear(const ImageTensor& image, int side_px) {
  if (side_px < 1) throw Error(ErrorCode::InvalidDim, "resize side must be positive");
  if (image.width == side_px && image.height == side_px) return image;
  cv::Mat out;
  cv::resize(as_mat(image), out, cv::Size(side_px, side_px), 0, 0, cv::INTER_LINEAR);
  ImageTensor t = from_mat(out, image.range);
  if (t.range == RangeTag::Raw0To255) {
    for (float& v : t.data) v = std::clamp(v, 0.0F, 255.0F);
  }
  return t;
}

ImageTensor decode_resize(const std::filesystem::path& path, int side_px) {
  return resize_bilinear(from_rgb(decode_rgb(path)), side_px);
}

ImageTensor normalize(const ImageTensor& raw) {
  if (raw.range != RangeTag::Raw0To255) throw Error(ErrorCode::WrongRangeTag, "image is already normalized");
  ImageTensor out = raw;
  for (float& v : out.data) v = static_cast<float>(static_cast<double>(v) / 127.5 - 1.0);
  out.range = RangeTag::NormalizedMinus1To1;
  return out;
}

ImageTensor denormalize(const ImageTensor& normalized) {
  if (normalized.range != RangeTag::NormalizedMinus1To1) {
    throw Error(ErrorCode::WrongRangeTag, "image is not normalized");
  }
  ImageTensor out = normalized;
  for (float& v : out.data) v = static_cast<float>((static_cast<double>(v) + 1.0) * 127.5);
  out.range = RangeTag::Raw0To255;
  return out;
}

LabelVector one_hot(Her2Score score) {
  LabelVector v{};
  v[static_cast<std::size_t>(score.index())] = 1.0F;
  return v;
}

ImageTensor augment(const ImageTensor& image, const AugmentPolicy& policy, std::mt19937_64& rng) {
  if (!policy.enabled) return image;
  policy.validate();
  // Draw every decision up front so the stream position does not depend on
  // which transforms end up active.
  const auto rot_pick = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(policy.rotation_degrees.size()));
  const int degrees = policy.rotation_degrees[std::min(rot_pick, policy.rotation_degrees.size() - 1)];
  const bool hflip = uniform01(rng) < 0.5 && policy.horizontal_flip;
  const bool vflip = uniform01(rng) < 0.5 && policy.vertical_flip;
  const double scale = policy.scale_min + uniform01(rng) * (policy.scale_max - policy.scale_min);

  cv::Mat m = rotate_degrees(as_mat(image), degrees);
  if (hflip) cv::flip(m, m, 1);
  if (vflip) cv::flip(m, m, 0);
  m = scale_jitter(m, scale);
  ImageTensor out = from_mat(m, image.range);
  const float lo = image.range == RangeTag::Raw0To255 ? 0.0F : -1.0F;
  const float hi = image.range == RangeTag::Raw0To255 ? 255.0F : 1.0F;
  for (float& v : out.data) v = std::clamp(v, lo, hi);
  return out;
}

Batch load_batch(std::span<const ImageRecord> records, int side_px) {
  if (records.empty()) throw Error(ErrorCode::EmptySplit, "no records to batch");
  Batch batch;
  batch.side = side_px;
  batch.images.reserve(records.size() * batch.image_stride());
  for (const ImageRecord& r : records) {
    const ImageTensor img = normalize(decode_resize(r.path, side_px));
    batch.images.insert(batch.images.end(), img.data.begin(), img.data.end());
    batch.labels.push_back(one_hot(r.score));
    batch.scores.push_back(r.score);
    batch.record_ids.push_back(r.sample_id);
  }
  return batch;
}

std::vector<std::size_t> epoch_order(std::size_t count, std::uint64_t seed, std::uint64_t epoch, bool shuffle) {
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  if (!shuffle || count < 2) return order;
  std::mt19937_64 rng(seed + epoch);
  for (std::size_t i = count - 1; i > 0; --i) {
    const auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i + 1));
    std::swap(order[i], order[std::min(j, i)]);
  }
  return order;
}

std::vector<std::size_t> batch_sizes(std::size_t count, std::size_t batch_size) {
  if (batch_size == 0) throw Error(ErrorCode::PreconditionViolation, "batch size must be at least 1");
  std::vector<std::size_t> sizes(count / batch_size, batch_size);
  if (count % batch_size != 0) sizes.push_back(count % batch_size);
  return sizes;
}

BatchStream::BatchStream(const DatasetManifest& manifest, BatchOptions options)
    : records_(manifest.records_in(options.split)), options_(std::move(options)) {
  if (records_.empty()) {
    throw Error(ErrorCode::EmptySplit, "no records in split '" + std::string(to_string(options_.split)) + "'");
  }
  options_.policy.validate();
  const bool train = options_.split == Split::Train;
  order_ = epoch_order(records_.size(), options_.shuffle_seed, options_.epoch, train);
  sizes_ = batch_sizes(records_.size(), options_.batch_size);
}

std::optional<Batch> BatchStream::next() {
  if (batch_index_ >= sizes_.size()) return std::nullopt;
  const std::size_t n = sizes_[batch_index_++];
  const bool train = options_.split == Split::Train;

  Batch batch;
  batch.side = options_.side_px;
  batch.images.reserve(n * batch.image_stride());
  for (std::size_t i = 0; i < n; ++i, ++cursor_) {
    const ImageRecord& r = records_[order_[cursor_]];
    ImageTensor img = normalize(decode_resize(r.path, options_.side_px));
    if (train && options_.policy.enabled) {
      std::mt19937_64 rng(splitmix64(options_.shuffle_seed ^ splitmix64(options_.epoch) ^ splitmix64(cursor_ + 1)));
      img = augment(img, options_.policy, rng);
    }
    batch.images.insert(batch.images.end(), img.data.begin(), img.data.end());
    batch.labels.push_back(one_hot(r.score));
    batch.scores.push_back(r.score);
    batch.record_ids.push_back(r.sample_id);
  }
  return batch;
}

BatchStream make_batches(const DatasetManifest& manifest, BatchOptions options) {
  return BatchStream(manifest, std::move(options));
}

}  // namespace convoher2
