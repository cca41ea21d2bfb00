#pragma once

// Raster I/O: PNG/TIFF micrographs in, 16-bit PNG label maps and 8-bit masks out,
// plus the run-length JSON mask format.

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "matseg/image.hpp"

namespace matseg {

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

enum class RasterFormat { png, tiff, unknown };

inline RasterFormat sniff_format(std::span<const std::uint8_t> b) {
  static constexpr std::array<std::uint8_t, 8> png = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (b.size() >= 8 && std::equal(png.begin(), png.end(), b.begin())) return RasterFormat::png;
  if (b.size() >= 4 && ((b[0] == 'I' && b[1] == 'I' && b[2] == 42 && b[3] == 0) ||
                        (b[0] == 'M' && b[1] == 'M' && b[2] == 0 && b[3] == 42)))
    return RasterFormat::tiff;
  return RasterFormat::unknown;
}

inline cv::Mat decode_raster(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("no such file: " + path.string());
  auto bytes = read_file(path);
  if (sniff_format(bytes) == RasterFormat::unknown)
    throw IoError("unsupported raster format (expected PNG or TIFF): " + path.string());
  cv::Mat img = cv::imdecode(bytes, cv::IMREAD_UNCHANGED);
  if (img.empty()) throw IoError("failed to decode " + path.string());
  if (img.cols < 1 || img.rows < 1) throw IoError("zero-dimension image: " + path.string());
  return img;
}

inline void encode_png(const std::filesystem::path& path, const cv::Mat& img) {
  std::vector<std::uint8_t> buf;
  if (!cv::imencode(".png", img, buf)) throw IoError("PNG encoding failed for " + path.string());
  write_file(path, buf);
}

}  // namespace detail

/// Loads an 8-bit grayscale or RGB micrograph. Alpha channels are dropped.
inline Micrograph load_micrograph(const std::filesystem::path& path) {
  cv::Mat img = detail::decode_raster(path);
  if (img.depth() != CV_8U) throw IoError("only 8-bit images are supported: " + path.string());
  cv::Mat rgb;
  switch (img.channels()) {
    case 1: rgb = img; break;
    case 3: cv::cvtColor(img, rgb, cv::COLOR_BGR2RGB); break;
    case 4: cv::cvtColor(img, rgb, cv::COLOR_BGRA2RGB); break;
    default: throw IoError("unsupported channel count in " + path.string());
  }
  if (!rgb.isContinuous()) rgb = rgb.clone();
  const int ch = rgb.channels();
  std::vector<std::uint8_t> px(rgb.data, rgb.data + rgb.total() * ch);
  return Micrograph(rgb.cols, rgb.rows, ch, std::move(px));
}

/// Writes a 1- or 3-channel micrograph as 8-bit PNG.
inline void save_micrograph(const Micrograph& img, const std::filesystem::path& path) {
  cv::Mat m(img.height(), img.width(), img.channels() == 1 ? CV_8UC1 : CV_8UC3,
            const_cast<std::uint8_t*>(img.pixels().data()));
  if (img.channels() == 3) {
    cv::Mat bgr;
    cv::cvtColor(m, bgr, cv::COLOR_RGB2BGR);
    detail::encode_png(path, bgr);
  } else {
    detail::encode_png(path, m);
  }
}

class LabelOverflow : public Error {
 public:
  explicit LabelOverflow(LabelMap::Label max)
      : Error("label " + std::to_string(max) + " does not fit a 16-bit raster") {}
};

/// Persists a label map as a 16-bit single-channel PNG.
inline void save_labelmap(const LabelMap& lm, const std::filesystem::path& path) {
  const auto max = lm.max_label();
  if (max >= 65536) throw LabelOverflow(max);
  cv::Mat m(lm.height(), lm.width(), CV_16UC1);
  auto labels = lm.labels();
  for (int y = 0; y < lm.height(); ++y) {
    auto* row = m.ptr<std::uint16_t>(y);
    for (int x = 0; x < lm.width(); ++x)
      row[x] = static_cast<std::uint16_t>(labels[static_cast<std::size_t>(y) * lm.width() + x]);
  }
  detail::encode_png(path, m);
}

/// Reads an 8- or 16-bit single-channel raster as labels.
inline LabelMap load_labelmap(const std::filesystem::path& path) {
  cv::Mat img = detail::decode_raster(path);
  if (img.channels() != 1) throw IoError("label raster must be single-channel: " + path.string());
  LabelMap lm(img.cols, img.rows);
  for (int y = 0; y < img.rows; ++y)
    for (int x = 0; x < img.cols; ++x) {
      if (img.depth() == CV_16U)
        lm.at(x, y) = img.at<std::uint16_t>(y, x);
      else if (img.depth() == CV_8U)
        lm.at(x, y) = img.at<std::uint8_t>(y, x);
      else
        throw IoError("label raster must be 8- or 16-bit: " + path.string());
    }
  return lm;
}

/// Writes a mask as an 8-bit PNG with set pixels at 255.
inline void save_mask(const BinaryMask& mask, const std::filesystem::path& path) {
  cv::Mat m(mask.height(), mask.width(), CV_8UC1, cv::Scalar(0));
  for (int y = 0; y < mask.height(); ++y)
    for (int x = 0; x < mask.width(); ++x)
      if (mask.get(x, y)) m.at<std::uint8_t>(y, x) = 255;
  detail::encode_png(path, m);
}

inline BinaryMask load_mask(const std::filesystem::path& path) {
  LabelMap lm = load_labelmap(path);
  return lm.foreground();
}

// ---------------------------------------------------------------------------
// Run-length encoding
// ---------------------------------------------------------------------------

/// Alternating off/on run lengths over row-major pixels, starting with an off run
/// (possibly zero). Runs sum to width * height.
inline std::vector<std::uint32_t> rle_encode(const BinaryMask& mask) {
  std::vector<std::uint32_t> runs;
  bool current = false;
  std::uint32_t run = 0;
  const std::size_t n = mask.size();
  for (std::size_t i = 0; i < n; ++i) {
    const bool v = mask.get(i);
    if (v != current) {
      runs.push_back(run);
      run = 0;
      current = v;
    }
    ++run;
  }
  runs.push_back(run);
  return runs;
}

inline BinaryMask rle_decode(int width, int height, std::span<const std::uint32_t> runs) {
  BinaryMask mask(width, height);
  std::size_t pos = 0;
  bool on = false;
  for (auto r : runs) {
    if (pos + r > mask.size()) throw std::invalid_argument("rle: runs exceed mask size");
    if (on)
      for (std::size_t i = pos; i < pos + r; ++i) mask.set(i);
    pos += r;
    on = !on;
  }
  if (pos != mask.size()) throw std::invalid_argument("rle: runs do not cover the mask");
  return mask;
}

inline nlohmann::json mask_to_json(const BinaryMask& mask) {
  return {{"width", mask.width()}, {"height", mask.height()}, {"rle", rle_encode(mask)}};
}

inline BinaryMask mask_from_json(const nlohmann::json& j) {
  const auto runs = j.at("rle").get<std::vector<std::uint32_t>>();
  return rle_decode(j.at("width").get<int>(), j.at("height").get<int>(), runs);
}

}  // namespace matseg
