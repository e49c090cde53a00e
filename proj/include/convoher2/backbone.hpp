#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>

#include <Eigen/Core>

#include "convoher2/feature_store.hpp"
#include "convoher2/preprocess.hpp"

namespace convoher2 {

// Parameter count of Keras InceptionV3(include_top=False, pooling="avg").
inline constexpr std::uint64_t kInceptionV3Params = 21'802'784;
inline constexpr int kInceptionV3FeatureDim = 2048;

struct BackboneSpec {
  std::string architecture_id = "inception_v3";  // or "stub"
  std::string pretrain_corpus = "imagenet";
  int feature_dim = kInceptionV3FeatureDim;
  bool frozen = true;
  // inception_v3: feature store written by an external extractor.
  std::filesystem::path weights;
  // stub: seed of the random projection.
  std::uint64_t seed = 0;

  static BackboneSpec stub(int feature_dim = kInceptionV3FeatureDim, std::uint64_t seed = 0);
  void validate() const;

  friend bool operator==(const BackboneSpec&, const BackboneSpec&) = default;
};

/// Frozen image -> feature extractor. Implementations are immutable after
/// construction and safe to call concurrently.
class Backbone {
 public:
  virtual ~Backbone() = default;

  virtual const BackboneSpec& spec() const noexcept = 0;
  virtual std::uint64_t param_count() const noexcept = 0;
  // Keras-style summary row label, e.g. "inception_v3 (Functional)".
  virtual std::string summary_name() const = 0;
  /// feature_dim x N; column j belongs to batch sample j.
  virtual Eigen::MatrixXf extract(const Batch& batch) const = 0;
  virtual std::uint64_t checksum() const = 0;
};

/// Deterministic stand-in: 16x16 average pooling of the normalized image
/// (768 values) followed by a fixed-seed Gaussian projection to feature_dim.
class StubBackbone final : public Backbone {
 public:
  static constexpr int kPoolGrid = 16;

  explicit StubBackbone(BackboneSpec spec);

  const BackboneSpec& spec() const noexcept override { return spec_; }
  std::uint64_t param_count() const noexcept override { return static_cast<std::uint64_t>(projection_.size()); }
  std::string summary_name() const override { return "stub_projection (Functional)"; }
  Eigen::MatrixXf extract(const Batch& batch) const override;
  std::uint64_t checksum() const override;

  const Eigen::MatrixXf& projection() const noexcept { return projection_; }

 private:
  BackboneSpec spec_;
  Eigen::MatrixXf projection_;  // feature_dim x 768
};

/// Pretrained InceptionV3 consumed through features an external extractor
/// computed per sample id. Extraction is a lookup by batch record id.
class PrecomputedBackbone final : public Backbone {
 public:
  PrecomputedBackbone(BackboneSpec spec, FeatureStore store);

  const BackboneSpec& spec() const noexcept override { return spec_; }
  std::uint64_t param_count() const noexcept override { return kInceptionV3Params; }
  std::string summary_name() const override { return "inception_v3 (Functional)"; }
  Eigen::MatrixXf extract(const Batch& batch) const override;
  std::uint64_t checksum() const override;

  const FeatureStore& store() const noexcept { return store_; }

 private:
  BackboneSpec spec_;
  FeatureStore store_;
};

/// Throws ConfigurationError for unfrozen or unknown backbones and
/// MissingWeights when the pretrained feature store is absent.
std::shared_ptr<const Backbone> make_backbone(const BackboneSpec& spec);

}  // namespace convoher2
