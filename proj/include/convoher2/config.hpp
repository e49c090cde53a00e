#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "convoher2/trainer.hpp"

namespace convoher2 {

inline constexpr std::string_view kEnvPrefix = "CONVOHER2_";

/// Training hyper-parameters plus the settings the pipeline commands need.
struct PipelineConfig {
  TrainConfig train;
  std::filesystem::path data_root;
  std::filesystem::path out_dir = "runs";
  std::string backbone = "inception_v3";
  std::filesystem::path backbone_weights;
  std::uint64_t backbone_seed = 0;
  bool augment = true;
  int image_side = kImageSide;
  double train_fraction = 0.8;
  bool stratified = true;
  bool use_cached_features = false;
  std::filesystem::path feature_cache;
  std::string label_pattern{kDefaultLabelPattern};

  /// Every key as `key=value`, sorted by key.
  std::vector<std::string> resolved_lines() const;
  /// 16 hex digits of FNV-1a over resolved_lines().
  std::string config_hash() const;
};

using KeyValues = std::map<std::string, std::string>;

/// Recognized keys, sorted.
const std::vector<std::string>& config_keys();

/// Flat `key=value` text. Blank lines and lines starting with '#' are
/// skipped. Throws IoError, or TypeError on a line without '='.
KeyValues parse_config_text(std::string_view text);
KeyValues read_config_file(const std::filesystem::path& path);

/// Picks CONVOHER2_<KEY> entries for recognized keys out of a full
/// environment. Other variables, prefixed or not, are left alone.
KeyValues config_from_environment(const KeyValues& environment);
KeyValues current_environment();

/// Resolution order, strongest first: `flags`, environment, `file`,
/// built-in defaults. Throws UnknownKey for unrecognized file or flag keys
/// and TypeError for values that do not parse.
PipelineConfig load_config(const std::optional<std::filesystem::path>& file, const KeyValues& environment = {},
                           const KeyValues& flags = {});

}  // namespace convoher2
