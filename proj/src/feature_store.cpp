#include "convoher2/feature_store.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include "convoher2/error.hpp"

namespace convoher2 {
namespace {

constexpr char kMagic[8] = {'C', 'V', 'H', '2', 'F', 'E', 'A', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put_raw(std::ostream& out, const T& value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get_raw(std::istream& in, const std::filesystem::path& path) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw Error(ErrorCode::DecodeError, "truncated feature store " + path.string());
  return value;
}

}  // namespace

void FeatureStore::put(const std::string& id, std::span<const float> features) {
  if (static_cast<int>(features.size()) != dim_) {
    throw Error(ErrorCode::ShapeError, "feature row for '" + id + "' has width " + std::to_string(features.size()) +
                                           ", store expects " + std::to_string(dim_));
  }
  rows_[id].assign(features.begin(), features.end());
}

std::span<const float> FeatureStore::get(const std::string& id) const {
  const auto it = rows_.find(id);
  if (it == rows_.end()) throw Error(ErrorCode::MissingFeature, "no cached features for '" + id + "'");
  return it->second;
}

std::vector<std::string> FeatureStore::ids() const {
  std::vector<std::string> out;
  out.reserve(rows_.size());
  for (const auto& [id, row] : rows_) out.push_back(id);
  return out;
}

void FeatureStore::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write feature store " + path.string());
  out.write(kMagic, sizeof(kMagic));
  put_raw(out, kVersion);
  put_raw(out, static_cast<std::uint32_t>(dim_));
  put_raw(out, static_cast<std::uint64_t>(rows_.size()));
  for (const auto& [id, row] : rows_) {
    put_raw(out, static_cast<std::uint32_t>(id.size()));
    out.write(id.data(), static_cast<std::streamsize>(id.size()));
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size() * sizeof(float)));
  }
  if (!out) throw Error(ErrorCode::IoError, "failed writing feature store " + path.string());
}

FeatureStore FeatureStore::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot read feature store " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw Error(ErrorCode::DecodeError, path.string() + " is not a feature store");
  }
  if (get_raw<std::uint32_t>(in, path) != kVersion) {
    throw Error(ErrorCode::DecodeError, "unsupported feature store version in " + path.string());
  }
  const auto dim = get_raw<std::uint32_t>(in, path);
  const auto count = get_raw<std::uint64_t>(in, path);
  if (dim == 0 || dim > (1U << 20)) throw Error(ErrorCode::DecodeError, "implausible feature width");
  FeatureStore store(static_cast<int>(dim));
  std::vector<float> row(dim);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = get_raw<std::uint32_t>(in, path);
    if (len > 4096) throw Error(ErrorCode::DecodeError, "implausible sample id length");
    std::string id(len, '\0');
    in.read(id.data(), len);
    in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size() * sizeof(float)));
    if (!in) throw Error(ErrorCode::DecodeError, "truncated feature store " + path.string());
    store.put(id, row);
  }
  return store;
}

}  // namespace convoher2
