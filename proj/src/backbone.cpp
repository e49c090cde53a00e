#include "convoher2/backbone.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include "convoher2/error.hpp"
#include "convoher2/head.hpp"

namespace convoher2 {
namespace {

constexpr int kPooledDim = StubBackbone::kPoolGrid * StubBackbone::kPoolGrid * kChannels;

void check_batch(const Batch& batch) {
  if (batch.size() == 0) throw Error(ErrorCode::ShapeError, "empty batch");
  if (batch.side < StubBackbone::kPoolGrid || batch.images.size() != batch.size() * batch.image_stride()) {
    throw Error(ErrorCode::ShapeError, "batch image buffer does not hold N side x side x 3 images");
  }
}

}  // namespace

BackboneSpec BackboneSpec::stub(int feature_dim, std::uint64_t seed) {
  BackboneSpec spec;
  spec.architecture_id = "stub";
  spec.pretrain_corpus = "none";
  spec.feature_dim = feature_dim;
  spec.seed = seed;
  return spec;
}

void BackboneSpec::validate() const {
  if (!frozen) throw Error(ErrorCode::ConfigurationError, "the backbone must stay frozen");
  if (feature_dim < 1) throw Error(ErrorCode::InvalidDim, "backbone feature width must be positive");
  if (architecture_id == "inception_v3") {
    if (feature_dim != kInceptionV3FeatureDim) {
      throw Error(ErrorCode::DimMismatch, "inception_v3 produces 2048-wide features");
    }
  } else if (architecture_id != "stub") {
    throw Error(ErrorCode::ConfigurationError, "unknown backbone '" + architecture_id + "'");
  }
}

// ---------------------------------------------------------------------------

StubBackbone::StubBackbone(BackboneSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  projection_.resize(spec_.feature_dim, kPooledDim);
  std::mt19937_64 rng(spec_.seed);
  auto uniform = [&rng] { return (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53; };
  const double scale = 1.0 / std::sqrt(static_cast<double>(kPooledDim));
  for (Eigen::Index i = 0; i < projection_.size(); ++i) {
    const double r = std::sqrt(-2.0 * std::log(uniform()));
    projection_.data()[i] = static_cast<float>(scale * r * std::cos(2.0 * std::numbers::pi * uniform()));
  }
}

Eigen::MatrixXf StubBackbone::extract(const Batch& batch) const {
  check_batch(batch);
  const int side = batch.side;
  const auto n = static_cast<Eigen::Index>(batch.size());
  Eigen::MatrixXf pooled = Eigen::MatrixXf::Zero(kPooledDim, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const float* img = batch.image(static_cast<std::size_t>(j));
    for (int gy = 0; gy < kPoolGrid; ++gy) {
      const int y0 = gy * side / kPoolGrid;
      const int y1 = (gy + 1) * side / kPoolGrid;
      for (int gx = 0; gx < kPoolGrid; ++gx) {
        const int x0 = gx * side / kPoolGrid;
        const int x1 = (gx + 1) * side / kPoolGrid;
        double acc[kChannels] = {0.0, 0.0, 0.0};
        for (int y = y0; y < y1; ++y) {
          const float* row = img + static_cast<std::size_t>(y) * side * kChannels;
          for (int x = x0; x < x1; ++x) {
            for (int c = 0; c < kChannels; ++c) acc[c] += row[x * kChannels + c];
          }
        }
        const double area = static_cast<double>((y1 - y0) * (x1 - x0));
        for (int c = 0; c < kChannels; ++c) {
          pooled((gy * kPoolGrid + gx) * kChannels + c, j) = static_cast<float>(acc[c] / area);
        }
      }
    }
  }
  return projection_ * pooled;
}

std::uint64_t StubBackbone::checksum() const {
  return fnv1a64(projection_.data(), static_cast<std::size_t>(projection_.size()) * sizeof(float));
}

// ---------------------------------------------------------------------------

PrecomputedBackbone::PrecomputedBackbone(BackboneSpec spec, FeatureStore store)
    : spec_(std::move(spec)), store_(std::move(store)) {
  spec_.validate();
  if (store_.dim() != spec_.feature_dim) {
    throw Error(ErrorCode::DimMismatch, "feature store width " + std::to_string(store_.dim()) +
                                            " does not match backbone width " + std::to_string(spec_.feature_dim));
  }
}

Eigen::MatrixXf PrecomputedBackbone::extract(const Batch& batch) const {
  if (batch.size() == 0) throw Error(ErrorCode::ShapeError, "empty batch");
  Eigen::MatrixXf out(spec_.feature_dim, static_cast<Eigen::Index>(batch.size()));
  for (std::size_t j = 0; j < batch.size(); ++j) {
    const auto row = store_.get(batch.record_ids[j]);
    out.col(static_cast<Eigen::Index>(j)) = Eigen::Map<const Eigen::VectorXf>(row.data(), spec_.feature_dim);
  }
  return out;
}

std::uint64_t PrecomputedBackbone::checksum() const {
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  for (const auto& id : store_.ids()) {
    const auto row = store_.get(id);
    hash = fnv1a64(id.data(), id.size(), hash);
    hash = fnv1a64(row.data(), row.size() * sizeof(float), hash);
  }
  return hash;
}

std::shared_ptr<const Backbone> make_backbone(const BackboneSpec& spec) {
  spec.validate();
  if (spec.architecture_id == "stub") return std::make_shared<StubBackbone>(spec);
  std::error_code ec;
  if (spec.weights.empty() || !std::filesystem::is_regular_file(spec.weights, ec)) {
    throw Error(ErrorCode::MissingWeights,
                "inception_v3 needs a pretrained feature store; none found at '" + spec.weights.string() + "'");
  }
  return std::make_shared<PrecomputedBackbone>(spec, FeatureStore::load(spec.weights));
}

}  // namespace convoher2
