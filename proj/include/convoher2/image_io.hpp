#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

namespace convoher2 {

struct ImageSize {
  int width = 0;
  int height = 0;
};

// Reads dimensions from the PNG IHDR chunk or the first JPEG SOF marker
// without decoding pixel data. Empty when the header is not recognised.
std::optional<ImageSize> probe_image_size(const std::filesystem::path& path);

bool has_image_extension(const std::filesystem::path& path);

// Interleaved 8-bit RGB pixels, row-major.
struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;
};

// Throws IoError for missing/unreadable files and DecodeError for corrupt or
// truncated ones.
RgbImage decode_rgb(const std::filesystem::path& path);

// PNG or JPEG chosen by extension.
void encode_rgb(const std::filesystem::path& path, const RgbImage& image);

}  // namespace convoher2
