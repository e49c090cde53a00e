#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "convoher2/backbone.hpp"
#include "convoher2/head.hpp"
#include "convoher2/ingest.hpp"
#include "convoher2/numerics_oracle.hpp"
#include "convoher2/preprocess.hpp"

namespace convoher2 {

struct ModelMetadata {
  std::string config_hash;
  std::string created_at;
  std::optional<StainModality> modality;
};

/// Frozen backbone plus trainable head. Only `head` is ever updated.
struct ModelHandle {
  std::shared_ptr<const Backbone> backbone;
  Head<float> head;
  ModelMetadata metadata;
};

ModelHandle compose(std::shared_ptr<const Backbone> backbone, HeadSpec head, const HeadInit& init = {});
ModelHandle compose(const BackboneSpec& backbone, HeadSpec head, const HeadInit& init = {});

struct LayerCount {
  std::string layer_name;    // "dense_1 (Dense)"
  std::string output_shape;  // "(None, 1536)"
  std::uint64_t param_count = 0;
  std::uint64_t trainable_count = 0;
};

struct ParamCount {
  std::uint64_t total = 0;
  std::uint64_t trainable = 0;
  std::uint64_t non_trainable = 0;
  std::vector<LayerCount> layers;
};

ParamCount count_params(const BackboneSpec& backbone, const HeadSpec& head);
ParamCount count_params(const ModelHandle& handle);
// Keras-style model summary table.
std::string format_summary(const ParamCount& counts);

/// N x classes probability rows.
Eigen::MatrixXf forward(const ModelHandle& handle, const Batch& batch, Mode mode);
/// N x feature_dim rows.
Eigen::MatrixXf extract_features(const ModelHandle& handle, const Batch& batch);
/// Head only, from backbone features laid out feature_dim x N. Returns N x classes.
Eigen::MatrixXf forward_features(const ModelHandle& handle, const Eigen::MatrixXf& features, Mode mode);

// ---------------------------------------------------------------------------
// Checkpoints

struct CheckpointSidecar {
  int epoch = 0;
  double monitored_loss = 0.0;
  std::string config_hash;
  std::optional<StainModality> modality;
  std::string created_at;
};

std::filesystem::path sidecar_path(const std::filesystem::path& checkpoint);

/// Binary checkpoint: magic "CVH2CKPT", uint32 version, a JSON topology
/// header, every head array as raw float32, and an FNV-1a trailer over all
/// preceding bytes. The sidecar JSON is written next to it.
void save_checkpoint(const ModelHandle& handle, const std::filesystem::path& path, const CheckpointSidecar& sidecar);
void save_checkpoint(const ModelHandle& handle, const std::filesystem::path& path);

/// Throws CorruptCheckpoint on a damaged file and TopologyMismatch when
/// `expected` is given and differs from the stored head. The backbone is
/// rebuilt from the stored spec unless `backbone` is supplied.
ModelHandle load_checkpoint(const std::filesystem::path& path, const std::optional<HeadSpec>& expected = std::nullopt,
                            std::shared_ptr<const Backbone> backbone = nullptr);
CheckpointSidecar read_sidecar(const std::filesystem::path& checkpoint);
std::string current_timestamp();

// ---------------------------------------------------------------------------
// Flat weight export for cross-implementation replay.

struct NamedArray {
  std::string name;
  std::vector<std::size_t> shape;  // kernels are [in, out], vectors [n]
  std::vector<double> data;        // row-major over `shape`
};

std::vector<NamedArray> export_flat(const Head<float>& head);
void write_flat_export(const Head<float>& head, const std::filesystem::path& path);
std::vector<NamedArray> read_flat_export(const std::filesystem::path& path);

/// Rebuilds the oracle's layer list from exported arrays.
std::vector<oracle::Layer> oracle_layers(const HeadSpec& spec, const std::vector<NamedArray>& arrays,
                                         double bn_epsilon, double bn_momentum);

}  // namespace convoher2
