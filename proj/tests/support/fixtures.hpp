#pragma once

// Shared test helpers: random rasters, simple drawing, temp directories.

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "matseg/image.hpp"

namespace fixtures {

inline matseg::Micrograph random_gray(std::mt19937& rng, int w, int h, int lo = 0, int hi = 255) {
  std::uniform_int_distribution<int> d(lo, hi);
  std::vector<std::uint8_t> px(static_cast<std::size_t>(w) * h);
  for (auto& v : px) v = static_cast<std::uint8_t>(d(rng));
  return matseg::Micrograph(w, h, 1, std::move(px));
}

inline matseg::BinaryMask random_mask(std::mt19937& rng, int w, int h, double p = 0.5) {
  std::bernoulli_distribution d(p);
  matseg::BinaryMask m(w, h);
  for (std::size_t i = 0; i < m.size(); ++i)
    if (d(rng)) m.set(i);
  return m;
}

inline matseg::BinaryMask rect_mask(int w, int h, int x0, int y0, int x1, int y1) {
  matseg::BinaryMask m(w, h);
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) m.set(x, y);
  return m;
}

inline matseg::BinaryMask disk_mask(int w, int h, double cx, double cy, double r) {
  matseg::BinaryMask m(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r) m.set(x, y);
  return m;
}

/// Renders a mask as a gray image: `on` where set, `off` elsewhere.
inline matseg::Micrograph render(const matseg::BinaryMask& m, std::uint8_t on, std::uint8_t off) {
  std::vector<std::uint8_t> px(m.size());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = m.get(i) ? on : off;
  return matseg::Micrograph(m.width(), m.height(), 1, std::move(px));
}

/// Fresh, empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("matseg_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace fixtures
