#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "convoher2/backbone.hpp"
#include "convoher2/feature_store.hpp"
#include "convoher2/image_io.hpp"
#include "convoher2/ingest.hpp"
#include "convoher2/preprocess.hpp"

namespace convoher2::fixtures {

namespace fs = std::filesystem;

class TempDir {
 public:
  explicit TempDir(const std::string& tag = "t") {
    std::random_device rd;
    path_ = fs::temp_directory_path() / ("convoher2_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

// 8x8 grid of random colour blocks, so every image pools to distinct features.
inline RgbImage block_image(int side, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> colour(0, 255);
  constexpr int kGrid = 8;
  std::array<std::uint8_t, kGrid * kGrid * 3> blocks{};
  for (auto& b : blocks) b = static_cast<std::uint8_t>(colour(rng));
  RgbImage img{side, side, std::vector<std::uint8_t>(static_cast<std::size_t>(side) * side * 3)};
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      const int by = y * kGrid / side;
      const int bx = x * kGrid / side;
      for (int c = 0; c < 3; ++c) {
        img.pixels[(static_cast<std::size_t>(y) * side + x) * 3 + c] = blocks[(by * kGrid + bx) * 3 + c];
      }
    }
  }
  return img;
}

// In-memory batch of normalized block images with cycling labels.
inline Batch synthetic_batch(std::size_t n, int side, std::uint64_t seed) {
  Batch b;
  b.side = side;
  for (std::size_t i = 0; i < n; ++i) {
    const ImageTensor t = normalize(from_rgb(block_image(side, seed * 7919 + i)));
    b.images.insert(b.images.end(), t.data.begin(), t.data.end());
    const Her2Score s = Her2Score::from_index(static_cast<int>(i % 4));
    b.scores.push_back(s);
    b.labels.push_back(one_hot(s));
    b.record_ids.push_back("img" + std::to_string(seed) + "_" + std::to_string(i));
  }
  return b;
}

struct CorpusLayout {
  // Per split, images per HER2 category.
  std::array<std::size_t, 4> train{};
  std::array<std::size_t, 4> test{};
  int side = 16;
};

// Writes <root>/<MOD>/<split>/<id>_<split>_<score>.png for both modalities
// with matching ids and scores.
inline void write_corpus(const fs::path& root, const CorpusLayout& layout, std::uint64_t seed = 1) {
  std::size_t id = 0;
  for (const char* split : {"train", "test"}) {
    const auto& counts = std::string(split) == "train" ? layout.train : layout.test;
    for (int k = 0; k < 4; ++k) {
      for (std::size_t i = 0; i < counts[k]; ++i, ++id) {
        char name[64];
        std::snprintf(name, sizeof name, "%05zu_%s_%s.png", id, split, std::string(Her2Score::from_index(k).label()).c_str());
        const RgbImage img = block_image(layout.side, seed * 1'000'003 + id);
        for (const char* mod : {"HE", "IHC"}) {
          const fs::path dir = root / mod / split;
          fs::create_directories(dir);
          encode_rgb(dir / name, img);
        }
      }
    }
  }
}

}  // namespace convoher2::fixtures
