#pragma once

// Core raster types shared by every stage of the pipeline.
//
// Pixel layout is row-major everywhere: (x, y) lives at index x + y * width.

#include <algorithm>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace matseg {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input image file could not be read or decoded.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Thresholding found fewer than two intensity classes.
class NoSeparation : public Error {
 public:
  NoSeparation() : Error("image has fewer than two distinct intensities") {}
};

// ---------------------------------------------------------------------------
// Micrograph
// ---------------------------------------------------------------------------

class Micrograph {
 public:
  Micrograph() = default;

  Micrograph(int width, int height, int channels, std::vector<std::uint8_t> pixels,
             std::optional<double> scale = std::nullopt)
      : width_(width), height_(height), channels_(channels), pixels_(std::move(pixels)),
        scale_(scale) {
    if (width < 1 || height < 1) throw std::invalid_argument("micrograph: zero dimension");
    if (channels != 1 && channels != 3)
      throw std::invalid_argument("micrograph: channels must be 1 or 3");
    if (pixels_.size() != static_cast<std::size_t>(width) * height * channels)
      throw std::invalid_argument("micrograph: pixel buffer size mismatch");
    if (scale_ && !(*scale_ > 0.0)) throw std::invalid_argument("micrograph: scale must be > 0");
  }

  /// Blank single-channel image.
  static Micrograph filled(int width, int height, std::uint8_t value = 0) {
    return Micrograph(width, height, 1,
                      std::vector<std::uint8_t>(static_cast<std::size_t>(width) * height, value));
  }

  int width() const { return width_; }
  int height() const { return height_; }
  int channels() const { return channels_; }
  std::optional<double> scale() const { return scale_; }
  void set_scale(std::optional<double> s) {
    if (s && !(*s > 0.0)) throw std::invalid_argument("micrograph: scale must be > 0");
    scale_ = s;
  }
  std::size_t pixel_count() const { return static_cast<std::size_t>(width_) * height_; }

  std::span<const std::uint8_t> pixels() const { return pixels_; }
  std::span<std::uint8_t> pixels() { return pixels_; }

  std::uint8_t at(int x, int y, int c = 0) const {
    return pixels_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c];
  }
  std::uint8_t& at(int x, int y, int c = 0) {
    return pixels_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c];
  }

  friend bool operator==(const Micrograph&, const Micrograph&) = default;

 private:
  int width_ = 0;
  int height_ = 0;
  int channels_ = 1;
  std::vector<std::uint8_t> pixels_;
  std::optional<double> scale_;
};

/// ITU-R 601 luminance, rounded half up; identity on 1-channel input.
inline Micrograph to_grayscale(const Micrograph& img) {
  if (img.channels() == 1) return img;
  std::vector<std::uint8_t> out(img.pixel_count());
  auto src = img.pixels();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::uint32_t r = src[3 * i], g = src[3 * i + 1], b = src[3 * i + 2];
    out[i] = static_cast<std::uint8_t>((299 * r + 587 * g + 114 * b + 500) / 1000);
  }
  return Micrograph(img.width(), img.height(), 1, std::move(out), img.scale());
}

// ---------------------------------------------------------------------------
// CropBox
// ---------------------------------------------------------------------------

/// Half-open pixel rectangle [x0, x1) x [y0, y1).
struct CropBox {
  int x0 = 0;
  int y0 = 0;
  int x1 = 0;
  int y1 = 0;
  int layer = 0;

  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
  bool empty() const { return x1 <= x0 || y1 <= y0; }
  bool contains(int x, int y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }

  static CropBox full(int width, int height) { return {0, 0, width, height, 0}; }

  friend bool operator==(const CropBox&, const CropBox&) = default;
};

inline CropBox intersect(const CropBox& a, const CropBox& b) {
  CropBox r{std::max(a.x0, b.x0), std::max(a.y0, b.y0), std::min(a.x1, b.x1),
            std::min(a.y1, b.y1), a.layer};
  if (r.empty()) r = {0, 0, 0, 0, a.layer};
  return r;
}

// ---------------------------------------------------------------------------
// BinaryMask
// ---------------------------------------------------------------------------

/// Bit-packed binary mask, 64 pixels per word in row-major order.
class BinaryMask {
 public:
  BinaryMask() = default;
  BinaryMask(int width, int height)
      : width_(width), height_(height), words_(word_count(width, height), 0) {
    if (width < 0 || height < 0) throw std::invalid_argument("mask: negative dimension");
  }

  /// Builds a mask from one byte per pixel (nonzero = set).
  static BinaryMask from_bytes(int width, int height, std::span<const std::uint8_t> bytes) {
    if (bytes.size() != static_cast<std::size_t>(width) * height)
      throw std::invalid_argument("mask: byte buffer size mismatch");
    BinaryMask m(width, height);
    for (std::size_t i = 0; i < bytes.size(); ++i)
      if (bytes[i]) m.words_[i >> 6] |= std::uint64_t{1} << (i & 63);
    return m;
  }

  int width() const { return width_; }
  int height() const { return height_; }
  std::size_t size() const { return static_cast<std::size_t>(width_) * height_; }

  bool get(std::size_t index) const { return (words_[index >> 6] >> (index & 63)) & 1u; }
  bool get(int x, int y) const { return get(static_cast<std::size_t>(y) * width_ + x); }
  void set(std::size_t index, bool v = true) {
    const std::uint64_t bit = std::uint64_t{1} << (index & 63);
    if (v)
      words_[index >> 6] |= bit;
    else
      words_[index >> 6] &= ~bit;
  }
  void set(int x, int y, bool v = true) { set(static_cast<std::size_t>(y) * width_ + x, v); }

  std::size_t area() const {
    std::size_t n = 0;
    for (auto w : words_) n += static_cast<std::size_t>(std::popcount(w));
    return n;
  }
  bool empty() const {
    return std::all_of(words_.begin(), words_.end(), [](std::uint64_t w) { return w == 0; });
  }

  std::span<const std::uint64_t> words() const { return words_; }

  std::vector<std::uint8_t> to_bytes() const {
    std::vector<std::uint8_t> out(size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = get(i) ? 1 : 0;
    return out;
  }

  /// Tight bounding box of set pixels; empty box when the mask is empty.
  CropBox bounds() const {
    int x0 = width_, y0 = height_, x1 = 0, y1 = 0;
    for (std::size_t wi = 0; wi < words_.size(); ++wi) {
      std::uint64_t w = words_[wi];
      while (w) {
        const std::size_t i = (wi << 6) + static_cast<std::size_t>(std::countr_zero(w));
        w &= w - 1;
        const int x = static_cast<int>(i % width_), y = static_cast<int>(i / width_);
        x0 = std::min(x0, x);
        x1 = std::max(x1, x + 1);
        y0 = std::min(y0, y);
        y1 = std::max(y1, y + 1);
      }
    }
    if (x1 == 0) return {};
    return {x0, y0, x1, y1, 0};
  }

  BinaryMask& operator|=(const BinaryMask& o) {
    require_same_frame(o);
    for (std::size_t i = 0; i < words_.size(); ++i) words_[i] |= o.words_[i];
    return *this;
  }
  BinaryMask& operator&=(const BinaryMask& o) {
    require_same_frame(o);
    for (std::size_t i = 0; i < words_.size(); ++i) words_[i] &= o.words_[i];
    return *this;
  }
  BinaryMask inverted() const {
    BinaryMask r = *this;
    for (auto& w : r.words_) w = ~w;
    r.clear_tail();
    return r;
  }

  void require_same_frame(const BinaryMask& o) const {
    if (o.width_ != width_ || o.height_ != height_)
      throw std::invalid_argument("mask: dimension mismatch");
  }

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;

 private:
  static std::size_t word_count(int w, int h) {
    return (static_cast<std::size_t>(std::max(w, 0)) * std::max(h, 0) + 63) / 64;
  }
  void clear_tail() {
    const std::size_t n = size();
    if (n % 64 && !words_.empty()) words_.back() &= (std::uint64_t{1} << (n % 64)) - 1;
  }

  int width_ = 0;
  int height_ = 0;
  std::vector<std::uint64_t> words_;
};

inline std::size_t intersection_area(const BinaryMask& a, const BinaryMask& b) {
  a.require_same_frame(b);
  auto wa = a.words(), wb = b.words();
  std::size_t n = 0;
  for (std::size_t i = 0; i < wa.size(); ++i)
    n += static_cast<std::size_t>(std::popcount(wa[i] & wb[i]));
  return n;
}

/// Copies `src` (frame of size box.width() x box.height()) into a full frame at the box origin.
inline BinaryMask paste(const BinaryMask& src, const CropBox& box, int width, int height) {
  BinaryMask out(width, height);
  for (int y = 0; y < src.height(); ++y)
    for (int x = 0; x < src.width(); ++x)
      if (src.get(x, y)) out.set(x + box.x0, y + box.y0);
  return out;
}

// ---------------------------------------------------------------------------
// LabelMap
// ---------------------------------------------------------------------------

/// Integer partition map; label 0 is background / unassigned.
class LabelMap {
 public:
  using Label = std::uint32_t;

  LabelMap() = default;
  LabelMap(int width, int height)
      : width_(width), height_(height), labels_(static_cast<std::size_t>(width) * height, 0) {
    if (width < 0 || height < 0) throw std::invalid_argument("labelmap: negative dimension");
  }
  LabelMap(int width, int height, std::vector<Label> labels)
      : width_(width), height_(height), labels_(std::move(labels)) {
    if (labels_.size() != static_cast<std::size_t>(width) * height)
      throw std::invalid_argument("labelmap: label buffer size mismatch");
  }

  int width() const { return width_; }
  int height() const { return height_; }
  std::size_t size() const { return labels_.size(); }

  Label at(int x, int y) const { return labels_[static_cast<std::size_t>(y) * width_ + x]; }
  Label& at(int x, int y) { return labels_[static_cast<std::size_t>(y) * width_ + x]; }
  Label operator[](std::size_t i) const { return labels_[i]; }
  Label& operator[](std::size_t i) { return labels_[i]; }

  std::span<const Label> labels() const { return labels_; }
  std::span<Label> labels() { return labels_; }

  Label max_label() const {
    return labels_.empty() ? 0 : *std::max_element(labels_.begin(), labels_.end());
  }

  BinaryMask foreground() const {
    BinaryMask m(width_, height_);
    for (std::size_t i = 0; i < labels_.size(); ++i)
      if (labels_[i]) m.set(i);
    return m;
  }

  friend bool operator==(const LabelMap&, const LabelMap&) = default;

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<Label> labels_;
};

// ---------------------------------------------------------------------------
// Prompts and scored masks
// ---------------------------------------------------------------------------

enum class PromptOrigin { centroid, grid, edge };

inline const char* to_string(PromptOrigin o) {
  switch (o) {
    case PromptOrigin::centroid: return "centroid";
    case PromptOrigin::grid: return "grid";
    case PromptOrigin::edge: return "edge";
  }
  return "?";
}

struct PromptPoint {
  int x = 0;
  int y = 0;
  PromptOrigin origin = PromptOrigin::grid;

  friend bool operator==(const PromptPoint&, const PromptPoint&) = default;
};

struct MaskOrigin {
  int crop_id = 0;
  PromptPoint prompt;

  friend bool operator==(const MaskOrigin&, const MaskOrigin&) = default;
};

struct ScoredMask {
  BinaryMask mask;
  double score = 0.0;
  MaskOrigin origin;

  friend bool operator==(const ScoredMask&, const ScoredMask&) = default;
};

}  // namespace matseg
