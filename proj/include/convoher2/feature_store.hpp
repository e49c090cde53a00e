#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace convoher2 {

/// Backbone features keyed by sample id.
///
/// On disk: the 8-byte magic "CVH2FEAT", a little-endian uint32 version (1),
/// uint32 feature width, uint64 entry count, then per entry a uint32 id
/// length, the id bytes, and `width` float32 values. Entries are written in
/// id order so identical stores serialize identically.
class FeatureStore {
 public:
  explicit FeatureStore(int dim = 2048) : dim_(dim) {}

  int dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return rows_.size(); }
  bool contains(const std::string& id) const { return rows_.contains(id); }

  void put(const std::string& id, std::span<const float> features);
  // Throws MissingFeature for unknown ids.
  std::span<const float> get(const std::string& id) const;
  std::vector<std::string> ids() const;

  void save(const std::filesystem::path& path) const;
  static FeatureStore load(const std::filesystem::path& path);

 private:
  int dim_;
  std::map<std::string, std::vector<float>> rows_;
};

}  // namespace convoher2
