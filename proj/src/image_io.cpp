#include "convoher2/image_io.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <iterator>
#include <string>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "convoher2/error.hpp"

namespace convoher2 {
namespace {

std::string lower_extension(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext;
}

bool is_jpeg_extension(const std::string& ext) { return ext == ".jpg" || ext == ".jpeg"; }

std::uint32_t read_be32(const unsigned char* p) {
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | p[3];
}

std::uint16_t read_be16(const unsigned char* p) {
  return static_cast<std::uint16_t>((p[0] << 8) | p[1]);
}

std::optional<ImageSize> probe_png(std::istream& in) {
  std::array<unsigned char, 24> head{};
  in.read(reinterpret_cast<char*>(head.data()), head.size());
  if (in.gcount() != static_cast<std::streamsize>(head.size())) return std::nullopt;
  static constexpr std::array<unsigned char, 8> kSignature{0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
  if (!std::equal(kSignature.begin(), kSignature.end(), head.begin())) return std::nullopt;
  if (std::string(reinterpret_cast<const char*>(head.data() + 12), 4) != "IHDR") return std::nullopt;
  ImageSize size{static_cast<int>(read_be32(head.data() + 16)), static_cast<int>(read_be32(head.data() + 20))};
  if (size.width <= 0 || size.height <= 0) return std::nullopt;
  return size;
}

std::optional<ImageSize> probe_jpeg(std::istream& in) {
  unsigned char soi[2];
  in.read(reinterpret_cast<char*>(soi), 2);
  if (in.gcount() != 2 || soi[0] != 0xFF || soi[1] != 0xD8) return std::nullopt;
  for (;;) {
    int c = in.get();
    while (c != EOF && c != 0xFF) c = in.get();
    while (c == 0xFF) c = in.get();
    if (c == EOF) return std::nullopt;
    const int marker = c;
    // Standalone markers carry no length field.
    if (marker == 0x01 || (marker >= 0xD0 && marker <= 0xD7)) continue;
    unsigned char len_bytes[2];
    in.read(reinterpret_cast<char*>(len_bytes), 2);
    if (in.gcount() != 2) return std::nullopt;
    const std::uint16_t length = read_be16(len_bytes);
    if (length < 2) return std::nullopt;
    const bool is_sof = marker >= 0xC0 && marker <= 0xCF && marker != 0xC4 && marker != 0xC8 && marker != 0xCC;
    if (is_sof) {
      unsigned char sof[5];
      in.read(reinterpret_cast<char*>(sof), 5);
      if (in.gcount() != 5) return std::nullopt;
      ImageSize size{read_be16(sof + 3), read_be16(sof + 1)};
      if (size.width <= 0 || size.height <= 0) return std::nullopt;
      return size;
    }
    in.seekg(length - 2, std::ios::cur);
    if (!in) return std::nullopt;
  }
}

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

bool has_image_extension(const std::filesystem::path& path) {
  const std::string ext = lower_extension(path);
  return ext == ".png" || is_jpeg_extension(ext);
}

std::optional<ImageSize> probe_image_size(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  if (auto png = probe_png(in)) return png;
  in.clear();
  in.seekg(0);
  return probe_jpeg(in);
}

RgbImage decode_rgb(const std::filesystem::path& path) {
  std::error_code ec;
  if (!std::filesystem::is_regular_file(path, ec)) {
    throw Error(ErrorCode::IoError, "no such image file: " + path.string());
  }
  const std::vector<unsigned char> bytes = read_file(path);
  if (bytes.empty()) throw Error(ErrorCode::DecodeError, "empty file " + path.string());

  // libjpeg decodes truncated streams with a warning only; require the EOI marker.
  const bool jpeg = bytes.size() >= 2 && bytes[0] == 0xFF && bytes[1] == 0xD8;
  if (jpeg) {
    auto end = bytes.end();
    while (end != bytes.begin() && *(end - 1) == 0x00) --end;
    if (std::distance(bytes.begin(), end) < 4 || *(end - 2) != 0xFF || *(end - 1) != 0xD9) {
      throw Error(ErrorCode::DecodeError, "truncated JPEG stream: " + path.string());
    }
  }

  cv::Mat bgr = cv::imdecode(cv::Mat(1, static_cast<int>(bytes.size()), CV_8UC1,
                                     const_cast<unsigned char*>(bytes.data())),
                             cv::IMREAD_COLOR);
  if (bgr.empty()) throw Error(ErrorCode::DecodeError, "cannot decode " + path.string());

  RgbImage image;
  image.width = bgr.cols;
  image.height = bgr.rows;
  image.pixels.resize(static_cast<std::size_t>(bgr.cols) * bgr.rows * 3);
  cv::Mat rgb(bgr.rows, bgr.cols, CV_8UC3, image.pixels.data());
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  return image;
}

void encode_rgb(const std::filesystem::path& path, const RgbImage& image) {
  if (image.width <= 0 || image.height <= 0 ||
      image.pixels.size() != static_cast<std::size_t>(image.width) * image.height * 3) {
    throw Error(ErrorCode::ShapeError, "image buffer does not match its dimensions");
  }
  cv::Mat rgb(image.height, image.width, CV_8UC3, const_cast<std::uint8_t*>(image.pixels.data()));
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  bool written = false;
  try {
    written = cv::imwrite(path.string(), bgr);
  } catch (const cv::Exception& e) {
    throw Error(ErrorCode::IoError, "cannot write " + path.string() + ": " + e.what());
  }
  if (!written) throw Error(ErrorCode::IoError, "cannot write " + path.string());
}

}  // namespace convoher2
