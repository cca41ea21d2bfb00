#pragma once

// Rule-based segmentation primitives. They drive prompt placement and also serve
// as the comparison baselines.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <numeric>
#include <optional>
#include <queue>
#include <span>
#include <stdexcept>
#include <tuple>
#include <vector>

#include "matseg/image.hpp"

namespace matseg {

// ===========================================================================
// Otsu
// ===========================================================================

/// Which side of the threshold is foreground. `bright` keeps pixels >= t.
enum class Polarity { bright, dark };

inline const char* to_string(Polarity p) { return p == Polarity::bright ? "bright" : "dark"; }

struct OtsuResult {
  int threshold = 0;
  BinaryMask mask;
};

/// Otsu level from a 256-bin histogram: the t in [1, 255] maximising the
/// between-class variance of {< t} vs {>= t}. Ties resolve to the smallest t.
inline int otsu_level(std::span<const std::uint64_t, 256> hist) {
  std::int64_t total = 0, sum = 0;
  int distinct = 0;
  for (int v = 0; v < 256; ++v) {
    total += static_cast<std::int64_t>(hist[v]);
    sum += static_cast<std::int64_t>(hist[v]) * v;
    distinct += hist[v] ? 1 : 0;
  }
  if (distinct < 2) throw NoSeparation();

  // sigma_b^2 * N^2 = (N*S0 - n0*S)^2 / (n0 * n1); D is exact in 64-bit.
  std::int64_t n0 = 0, s0 = 0;
  double best = -1.0;
  int best_t = 1;
  for (int t = 1; t < 256; ++t) {
    n0 += static_cast<std::int64_t>(hist[t - 1]);
    s0 += static_cast<std::int64_t>(hist[t - 1]) * (t - 1);
    const std::int64_t n1 = total - n0;
    if (n0 == 0 || n1 == 0) continue;
    const double d = static_cast<double>(total * s0 - n0 * sum);
    const double crit = d * d / (static_cast<double>(n0) * static_cast<double>(n1));
    if (crit > best) {
      best = crit;
      best_t = t;
    }
  }
  return best_t;
}

inline std::array<std::uint64_t, 256> histogram(const Micrograph& gray) {
  std::array<std::uint64_t, 256> h{};
  for (auto v : gray.pixels()) ++h[v];
  return h;
}

inline OtsuResult otsu_threshold(const Micrograph& img, Polarity polarity = Polarity::bright) {
  const Micrograph gray = to_grayscale(img);
  const auto hist = histogram(gray);
  const int t = otsu_level(hist);
  BinaryMask mask(gray.width(), gray.height());
  auto px = gray.pixels();
  for (std::size_t i = 0; i < px.size(); ++i) {
    const bool above = px[i] >= t;
    if (above == (polarity == Polarity::bright)) mask.set(i);
  }
  return {t, std::move(mask)};
}

// ===========================================================================
// Adaptive threshold
// ===========================================================================

/// Bit set iff pixel > (mean over a window x window neighbourhood with replicated
/// borders) - offset. Comparison is done in exact integer arithmetic.
inline BinaryMask adaptive_threshold(const Micrograph& img, int window, int offset) {
  if (window < 3 || window % 2 == 0)
    throw std::invalid_argument("adaptive_threshold: window must be odd and >= 3");
  const Micrograph gray = to_grayscale(img);
  const int w = gray.width(), h = gray.height(), r = window / 2;
  const int pw = w + 2 * r, ph = h + 2 * r;

  // integral image over the replicate-padded frame
  std::vector<std::int64_t> integral(static_cast<std::size_t>(pw + 1) * (ph + 1), 0);
  auto I = [&](int x, int y) -> std::int64_t& {
    return integral[static_cast<std::size_t>(y) * (pw + 1) + x];
  };
  for (int y = 0; y < ph; ++y) {
    const int sy = std::clamp(y - r, 0, h - 1);
    std::int64_t row = 0;
    for (int x = 0; x < pw; ++x) {
      const int sx = std::clamp(x - r, 0, w - 1);
      row += gray.at(sx, sy);
      I(x + 1, y + 1) = I(x + 1, y) + row;
    }
  }

  const std::int64_t area = static_cast<std::int64_t>(window) * window;
  BinaryMask out(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      // window in padded coords: [x, x + window) x [y, y + window)
      const std::int64_t s = I(x + window, y + window) - I(x, y + window) -
                             I(x + window, y) + I(x, y);
      if (static_cast<std::int64_t>(gray.at(x, y)) * area > s - offset * area) out.set(x, y);
    }
  return out;
}

// ===========================================================================
// Gradients and Canny
// ===========================================================================

/// Canny parameters. Thresholds apply to the raw 3x3 Sobel L2 magnitude.
struct EdgeParams {
  double sigma = 1.4;
  double low = 50.0;
  double high = 100.0;

  void validate() const {
    if (!(sigma >= 0.0)) throw std::invalid_argument("canny: sigma must be >= 0");
    if (!(low >= 0.0) || !(low <= high))
      throw std::invalid_argument("canny: thresholds must satisfy 0 <= low <= high");
  }
};

/// Real-valued single-channel raster used by the gradient code.
struct FloatImage {
  int width = 0;
  int height = 0;
  std::vector<double> values;

  double at(int x, int y) const { return values[static_cast<std::size_t>(y) * width + x]; }
  double clamped(int x, int y) const {
    return at(std::clamp(x, 0, width - 1), std::clamp(y, 0, height - 1));
  }
};

inline FloatImage to_float(const Micrograph& img) {
  const Micrograph gray = to_grayscale(img);
  FloatImage f{gray.width(), gray.height(), {}};
  f.values.assign(gray.pixels().begin(), gray.pixels().end());
  return f;
}

/// Separable Gaussian blur, radius ceil(3 sigma), replicated borders. sigma 0 is a no-op.
inline FloatImage gaussian_blur(const FloatImage& in, double sigma) {
  if (sigma <= 0.0) return in;
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * r + 1);
  double norm = 0.0;
  for (int i = -r; i <= r; ++i) norm += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= norm;

  FloatImage tmp{in.width, in.height, std::vector<double>(in.values.size())};
  for (int y = 0; y < in.height; ++y)
    for (int x = 0; x < in.width; ++x) {
      double s = 0.0;
      for (int i = -r; i <= r; ++i) s += k[i + r] * in.clamped(x + i, y);
      tmp.values[static_cast<std::size_t>(y) * in.width + x] = s;
    }
  FloatImage out{in.width, in.height, std::vector<double>(in.values.size())};
  for (int y = 0; y < in.height; ++y)
    for (int x = 0; x < in.width; ++x) {
      double s = 0.0;
      for (int i = -r; i <= r; ++i) s += k[i + r] * tmp.clamped(x, y + i);
      out.values[static_cast<std::size_t>(y) * in.width + x] = s;
    }
  return out;
}

struct Gradient {
  int width = 0;
  int height = 0;
  std::vector<double> gx, gy, magnitude;
};

/// Response of the 3x3 Sobel operator to a unit-slope ramp.
inline constexpr double kSobelGain = 8.0;

/// 3x3 Sobel derivatives with replicated borders and their L2 magnitude.
inline Gradient sobel(const FloatImage& f) {
  Gradient g{f.width, f.height, {}, {}, {}};
  const std::size_t n = f.values.size();
  g.gx.resize(n);
  g.gy.resize(n);
  g.magnitude.resize(n);
  for (int y = 0; y < f.height; ++y)
    for (int x = 0; x < f.width; ++x) {
      const double a = f.clamped(x - 1, y - 1), b = f.clamped(x, y - 1), c = f.clamped(x + 1, y - 1);
      const double d = f.clamped(x - 1, y), e = f.clamped(x + 1, y);
      const double p = f.clamped(x - 1, y + 1), q = f.clamped(x, y + 1), s = f.clamped(x + 1, y + 1);
      const double gx = (c + 2 * e + s) - (a + 2 * d + p);
      const double gy = (p + 2 * q + s) - (a + 2 * b + c);
      const std::size_t i = static_cast<std::size_t>(y) * f.width + x;
      g.gx[i] = gx;
      g.gy[i] = gy;
      g.magnitude[i] = std::hypot(gx, gy);
    }
  return g;
}

/// Canny edge detector: Gaussian smoothing, Sobel gradients, non-maximum
/// suppression along the quantised gradient direction, hysteresis.
inline BinaryMask canny(const Micrograph& img, const EdgeParams& params = {}) {
  params.validate();
  const FloatImage smooth = gaussian_blur(to_float(img), params.sigma);
  const Gradient g = sobel(smooth);
  const int w = g.width, h = g.height;
  auto mag = [&](int x, int y) {
    if (x < 0 || y < 0 || x >= w || y >= h) return 0.0;
    return g.magnitude[static_cast<std::size_t>(y) * w + x];
  };

  constexpr double tan22 = 0.41421356237309503;  // tan(22.5 deg)
  constexpr double tan67 = 2.414213562373095;    // tan(67.5 deg)
  // 0 = suppressed, 1 = weak, 2 = strong
  std::vector<std::uint8_t> cls(static_cast<std::size_t>(w) * h, 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      const double m = g.magnitude[i];
      if (m < params.low || m == 0.0) continue;
      const double ax = std::abs(g.gx[i]), ay = std::abs(g.gy[i]);
      int dx, dy;
      if (ay <= ax * tan22) {
        dx = 1, dy = 0;
      } else if (ay >= ax * tan67) {
        dx = 0, dy = 1;
      } else {
        dx = 1;
        dy = (g.gx[i] > 0) == (g.gy[i] > 0) ? 1 : -1;
      }
      // strict on the backward side so plateaus of equal magnitude keep one pixel
      if (m > mag(x - dx, y - dy) && m >= mag(x + dx, y + dy))
        cls[i] = m >= params.high ? 2 : 1;
    }

  BinaryMask edges(w, h);
  std::vector<std::size_t> stack;
  for (std::size_t i = 0; i < cls.size(); ++i)
    if (cls[i] == 2) {
      edges.set(i);
      stack.push_back(i);
    }
  while (!stack.empty()) {
    const std::size_t i = stack.back();
    stack.pop_back();
    const int x = static_cast<int>(i % w), y = static_cast<int>(i / w);
    for (int oy = -1; oy <= 1; ++oy)
      for (int ox = -1; ox <= 1; ++ox) {
        const int nx = x + ox, ny = y + oy;
        if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
        const std::size_t j = static_cast<std::size_t>(ny) * w + nx;
        if (cls[j] == 1 && !edges.get(j)) {
          edges.set(j);
          stack.push_back(j);
        }
      }
  }
  return edges;
}

// ===========================================================================
// Distance transform
// ===========================================================================

namespace detail {

// Felzenszwalb-Huttenlocher lower envelope of parabolas, in place on one line.
inline void squared_distance_1d(std::span<double> f, std::vector<double>& d, std::vector<int>& v,
                                std::vector<double>& z) {
  const int n = static_cast<int>(f.size());
  constexpr double inf = std::numeric_limits<double>::infinity();
  d.resize(n);
  v.resize(n);
  z.resize(n + 1);
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] == inf) continue;
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -inf;
      z[1] = inf;
      continue;
    }
    // z[0] = -inf guarantees the loop stops at k = 0
    const auto meet = [&](int p) {
      return ((f[q] + double(q) * q) - (f[p] + double(p) * p)) / (2.0 * (q - p));
    };
    double s = meet(v[k]);
    while (s <= z[k]) s = meet(v[--k]);
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  if (k < 0) {
    std::fill(d.begin(), d.end(), inf);
  } else {
    int j = 0;
    for (int q = 0; q < n; ++q) {
      while (z[j + 1] < q) ++j;
      const double dq = q - v[j];
      d[q] = dq * dq + f[v[j]];
    }
  }
  std::copy(d.begin(), d.end(), f.begin());
}

}  // namespace detail

/// Exact squared Euclidean distance from every pixel to the nearest set pixel
/// of `targets` (infinity when `targets` is empty).
inline std::vector<double> squared_distance_to(const BinaryMask& targets) {
  const int w = targets.width(), h = targets.height();
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> grid(static_cast<std::size_t>(w) * h);
  for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = targets.get(i) ? 0.0 : inf;
  std::vector<double> d, z, line;
  std::vector<int> v;
  line.resize(h);
  for (int x = 0; x < w; ++x) {
    for (int y = 0; y < h; ++y) line[y] = grid[static_cast<std::size_t>(y) * w + x];
    detail::squared_distance_1d(line, d, v, z);
    for (int y = 0; y < h; ++y) grid[static_cast<std::size_t>(y) * w + x] = line[y];
  }
  for (int y = 0; y < h; ++y)
    detail::squared_distance_1d(std::span<double>(grid.data() + static_cast<std::size_t>(y) * w, w),
                                d, v, z);
  return grid;
}

/// Euclidean distance of each foreground pixel to the nearest background pixel;
/// pixels beyond the image border count as background.
inline std::vector<double> distance_transform(const BinaryMask& fg) {
  const int w = fg.width(), h = fg.height();
  BinaryMask bg(w + 2, h + 2);
  for (int y = 0; y < h + 2; ++y)
    for (int x = 0; x < w + 2; ++x)
      if (x == 0 || y == 0 || x == w + 1 || y == h + 1 || !fg.get(x - 1, y - 1)) bg.set(x, y);
  const auto padded = squared_distance_to(bg);
  std::vector<double> out(static_cast<std::size_t>(w) * h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      out[static_cast<std::size_t>(y) * w + x] =
          std::sqrt(padded[static_cast<std::size_t>(y + 1) * (w + 2) + x + 1]);
  return out;
}

// ===========================================================================
// Connected components
// ===========================================================================

struct Region {
  LabelMap::Label label = 0;
  std::size_t area = 0;
  double cx = 0.0;
  double cy = 0.0;
  CropBox bbox;
};

struct Components {
  LabelMap labels;
  std::vector<Region> regions;
};

/// Labels 1..k in order of each component's first pixel in raster scan.
inline Components connected_components(const BinaryMask& mask, int connectivity = 8) {
  if (connectivity != 4 && connectivity != 8)
    throw std::invalid_argument("connected_components: connectivity must be 4 or 8");
  const int w = mask.width(), h = mask.height();
  Components out{LabelMap(w, h), {}};
  std::vector<std::size_t> queue;
  for (std::size_t start = 0; start < mask.size(); ++start) {
    if (!mask.get(start) || out.labels[start]) continue;
    const auto label = static_cast<LabelMap::Label>(out.regions.size() + 1);
    Region r;
    r.label = label;
    r.bbox = {w, h, 0, 0, 0};
    double sx = 0.0, sy = 0.0;
    queue.assign(1, start);
    out.labels[start] = label;
    for (std::size_t qi = 0; qi < queue.size(); ++qi) {
      const std::size_t i = queue[qi];
      const int x = static_cast<int>(i % w), y = static_cast<int>(i / w);
      ++r.area;
      sx += x;
      sy += y;
      r.bbox.x0 = std::min(r.bbox.x0, x);
      r.bbox.y0 = std::min(r.bbox.y0, y);
      r.bbox.x1 = std::max(r.bbox.x1, x + 1);
      r.bbox.y1 = std::max(r.bbox.y1, y + 1);
      for (int oy = -1; oy <= 1; ++oy)
        for (int ox = -1; ox <= 1; ++ox) {
          if ((ox == 0 && oy == 0) || (connectivity == 4 && ox != 0 && oy != 0)) continue;
          const int nx = x + ox, ny = y + oy;
          if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
          const std::size_t j = static_cast<std::size_t>(ny) * w + nx;
          if (mask.get(j) && !out.labels[j]) {
            out.labels[j] = label;
            queue.push_back(j);
          }
        }
    }
    r.cx = sx / static_cast<double>(r.area);
    r.cy = sy / static_cast<double>(r.area);
    out.regions.push_back(r);
  }
  return out;
}

/// Per-label statistics for an arbitrary label map (labels need not be contiguous).
inline std::vector<Region> region_table(const LabelMap& lm) {
  std::vector<Region> table;
  std::vector<double> sx, sy;
  auto labels = lm.labels();
  const int w = lm.width();
  std::vector<std::size_t> slot(lm.max_label() + 1, 0);  // 1-based index into table
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto l = labels[i];
    if (!l) continue;
    const int x = static_cast<int>(i % w), y = static_cast<int>(i / w);
    if (!slot[l]) {
      table.push_back({l, 0, 0, 0, {x, y, x + 1, y + 1, 0}});
      sx.push_back(0);
      sy.push_back(0);
      slot[l] = table.size();
    }
    auto& r = table[slot[l] - 1];
    ++r.area;
    sx[slot[l] - 1] += x;
    sy[slot[l] - 1] += y;
    r.bbox.x0 = std::min(r.bbox.x0, x);
    r.bbox.y0 = std::min(r.bbox.y0, y);
    r.bbox.x1 = std::max(r.bbox.x1, x + 1);
    r.bbox.y1 = std::max(r.bbox.y1, y + 1);
  }
  for (std::size_t k = 0; k < table.size(); ++k) {
    table[k].cx = sx[k] / static_cast<double>(table[k].area);
    table[k].cy = sy[k] / static_cast<double>(table[k].area);
  }
  std::sort(table.begin(), table.end(),
            [](const Region& a, const Region& b) { return a.label < b.label; });
  return table;
}

// ===========================================================================
// Small-region removal
// ===========================================================================

struct SmallRegionCutoff {
  enum class Mode { absolute, relative } mode = Mode::relative;
  std::size_t min_area = 0;  // absolute mode
  double fraction = 0.1;     // relative mode: fraction of the median region area

  static SmallRegionCutoff absolute(std::size_t px) { return {Mode::absolute, px, 0.0}; }
  static SmallRegionCutoff relative(double f) { return {Mode::relative, 0, f}; }
};

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Zeroes regions whose area is below the cutoff; surviving labels are kept.
/// Relative mode re-evaluates the median on the survivors until nothing changes,
/// so the operation is idempotent.
inline LabelMap remove_small_regions(const LabelMap& lm, const SmallRegionCutoff& cutoff) {
  if (cutoff.mode == SmallRegionCutoff::Mode::relative &&
      !(cutoff.fraction > 0.0 && cutoff.fraction < 1.0))
    throw std::invalid_argument("remove_small_regions: fraction must be in (0, 1)");

  const auto regions = region_table(lm);
  std::vector<bool> alive(regions.size(), true);
  if (cutoff.mode == SmallRegionCutoff::Mode::absolute) {
    for (std::size_t k = 0; k < regions.size(); ++k)
      alive[k] = regions[k].area >= cutoff.min_area;
  } else {
    bool changed = true;
    while (changed) {
      changed = false;
      std::vector<double> areas;
      for (std::size_t k = 0; k < regions.size(); ++k)
        if (alive[k]) areas.push_back(static_cast<double>(regions[k].area));
      const double limit = cutoff.fraction * median(std::move(areas));
      for (std::size_t k = 0; k < regions.size(); ++k)
        if (alive[k] && static_cast<double>(regions[k].area) < limit) {
          alive[k] = false;
          changed = true;
        }
    }
  }

  std::vector<bool> drop(lm.max_label() + 1, false);
  for (std::size_t k = 0; k < regions.size(); ++k) drop[regions[k].label] = !alive[k];
  LabelMap out = lm;
  for (auto& l : out.labels())
    if (drop[l]) l = 0;
  return out;
}

// ===========================================================================
// Morphology
// ===========================================================================

enum class MorphOp { dilate, erode, close, open, skeletonize };

namespace detail {

// Square structuring element as two 1-D passes. `erode` treats pixels outside
// the image as set so that closing stays extensive at the border.
inline std::vector<std::uint8_t> box_filter(const std::vector<std::uint8_t>& in, int w, int h,
                                            int r, bool erode) {
  const int need = erode ? 2 * r + 1 : 1;
  std::vector<std::uint8_t> tmp(in.size()), out(in.size());
  auto pass = [&](const std::vector<std::uint8_t>& src, std::vector<std::uint8_t>& dst,
                  bool horizontal) {
    const int len = horizontal ? w : h, lines = horizontal ? h : w;
    for (int l = 0; l < lines; ++l) {
      auto idx = [&](int t) {
        return horizontal ? static_cast<std::size_t>(l) * w + t : static_cast<std::size_t>(t) * w + l;
      };
      auto val = [&](int t) -> int {
        if (t < 0 || t >= len) return erode ? 1 : 0;
        return src[idx(t)] ? 1 : 0;
      };
      int count = 0;
      for (int t = -r; t <= r; ++t) count += val(t);
      for (int t = 0; t < len; ++t) {
        dst[idx(t)] = count >= need ? 1 : 0;
        count += val(t + r + 1) - val(t - r);
      }
    }
  };
  pass(in, tmp, true);
  pass(tmp, out, false);
  return out;
}

inline std::vector<std::uint8_t> zhang_suen(std::vector<std::uint8_t> img, int w, int h) {
  auto px = [&](int x, int y) -> int {
    if (x < 0 || y < 0 || x >= w || y >= h) return 0;
    return img[static_cast<std::size_t>(y) * w + x];
  };
  std::vector<std::size_t> removal;
  bool changed = true;
  while (changed) {
    changed = false;
    for (int pass = 0; pass < 2; ++pass) {
      removal.clear();
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          if (!px(x, y)) continue;
          // P2..P9 clockwise from north
          const int p[8] = {px(x, y - 1),     px(x + 1, y - 1), px(x + 1, y), px(x + 1, y + 1),
                            px(x, y + 1),     px(x - 1, y + 1), px(x - 1, y), px(x - 1, y - 1)};
          const int b = p[0] + p[1] + p[2] + p[3] + p[4] + p[5] + p[6] + p[7];
          if (b < 2 || b > 6) continue;
          int a = 0;
          for (int k = 0; k < 8; ++k) a += (!p[k] && p[(k + 1) % 8]) ? 1 : 0;
          if (a != 1) continue;
          if (pass == 0 && (p[0] * p[2] * p[4] || p[2] * p[4] * p[6])) continue;
          if (pass == 1 && (p[0] * p[2] * p[6] || p[0] * p[4] * p[6])) continue;
          removal.push_back(static_cast<std::size_t>(y) * w + x);
        }
      for (auto i : removal) img[i] = 0;
      changed = changed || !removal.empty();
    }
  }
  return img;
}

}  // namespace detail

/// Binary morphology with a (2r+1)x(2r+1) square element; `skeletonize` thins to
/// a one-pixel-wide 8-connected medial structure (Zhang-Suen) and ignores the radius.
inline BinaryMask morphology(const BinaryMask& mask, MorphOp op, int radius = 1) {
  const int w = mask.width(), h = mask.height();
  if (op != MorphOp::skeletonize && radius < 1)
    throw std::invalid_argument("morphology: radius must be >= 1");
  auto bytes = mask.to_bytes();
  switch (op) {
    case MorphOp::dilate: bytes = detail::box_filter(bytes, w, h, radius, false); break;
    case MorphOp::erode: bytes = detail::box_filter(bytes, w, h, radius, true); break;
    case MorphOp::close:
      bytes = detail::box_filter(detail::box_filter(bytes, w, h, radius, false), w, h, radius, true);
      break;
    case MorphOp::open:
      bytes = detail::box_filter(detail::box_filter(bytes, w, h, radius, true), w, h, radius, false);
      break;
    case MorphOp::skeletonize: bytes = detail::zhang_suen(std::move(bytes), w, h); break;
  }
  return BinaryMask::from_bytes(w, h, bytes);
}

inline BinaryMask dilate(const BinaryMask& m, int r) { return morphology(m, MorphOp::dilate, r); }
inline BinaryMask erode(const BinaryMask& m, int r) { return morphology(m, MorphOp::erode, r); }
inline BinaryMask skeletonize(const BinaryMask& m) { return morphology(m, MorphOp::skeletonize); }

// ===========================================================================
// Watershed
// ===========================================================================

/// Marker-based priority flood over the Sobel gradient magnitude of `img`.
///
/// A pixel's flooding level is max(its own gradient, the level of the pixel that
/// reached it). Pixels are claimed in order of (level, geodesic step count,
/// label, pixel index), which makes plateaus split at the equidistant line
/// between competing markers. When `region` is given, pixels outside it are
/// never flooded and stay 0.
inline LabelMap watershed(const Micrograph& img, const LabelMap& markers,
                          const BinaryMask* region = nullptr) {
  const int w = img.width(), h = img.height();
  if (markers.width() != w || markers.height() != h)
    throw std::invalid_argument("watershed: marker frame mismatch");
  const Gradient g = sobel(to_float(img));

  using Entry = std::tuple<double, std::uint32_t, LabelMap::Label, std::size_t>;
  std::priority_queue<Entry, std::vector<Entry>, std::greater<>> heap;
  LabelMap out(w, h);
  bool any = false;
  for (std::size_t i = 0; i < markers.size(); ++i)
    if (markers[i] && (!region || region->get(i))) {
      out[i] = markers[i];
      heap.emplace(g.magnitude[i], 0u, markers[i], i);
      any = true;
    }
  if (!any) throw std::invalid_argument("watershed: no markers");

  constexpr int dx[4] = {1, -1, 0, 0};
  constexpr int dy[4] = {0, 0, 1, -1};
  while (!heap.empty()) {
    const auto [level, steps, label, i] = heap.top();
    heap.pop();
    const int x = static_cast<int>(i % w), y = static_cast<int>(i / w);
    for (int k = 0; k < 4; ++k) {
      const int nx = x + dx[k], ny = y + dy[k];
      if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
      const std::size_t j = static_cast<std::size_t>(ny) * w + nx;
      if (out[j] || (region && !region->get(j))) continue;
      out[j] = label;
      heap.emplace(std::max(level, g.magnitude[j]), steps + 1, label, j);
    }
  }
  return out;
}

/// Default watershed seeds: plateaus of local maxima of the foreground distance
/// transform, thinned so that accepted peaks are at least `min_distance` apart
/// (higher peaks first, ties in raster order).
inline LabelMap distance_peak_markers(const BinaryMask& fg, double min_distance = 5.0) {
  const int w = fg.width(), h = fg.height();
  const auto dist = distance_transform(fg);
  BinaryMask peaks(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double d = dist[static_cast<std::size_t>(y) * w + x];
      if (d <= 0.0) continue;
      bool is_max = true;
      for (int oy = -1; oy <= 1 && is_max; ++oy)
        for (int ox = -1; ox <= 1; ++ox) {
          const int nx = x + ox, ny = y + oy;
          if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
          if (dist[static_cast<std::size_t>(ny) * w + nx] > d) {
            is_max = false;
            break;
          }
        }
      if (is_max) peaks.set(x, y);
    }
  auto comps = connected_components(peaks, 8);

  struct Peak {
    double height;
    std::size_t first;
    Region region;
  };
  std::vector<Peak> order;
  for (const auto& r : comps.regions) {
    const std::size_t first = static_cast<std::size_t>(r.bbox.y0) * w;  // refined below
    std::size_t idx = first;
    while (comps.labels[idx] != r.label) ++idx;
    order.push_back({dist[idx], idx, r});
  }
  std::stable_sort(order.begin(), order.end(), [](const Peak& a, const Peak& b) {
    return a.height > b.height || (a.height == b.height && a.first < b.first);
  });
  std::vector<const Peak*> accepted;
  std::vector<LabelMap::Label> remap(comps.regions.size() + 1, 0);
  for (const auto& p : order) {
    bool ok = true;
    for (const auto* a : accepted)
      if (std::hypot(p.region.cx - a->region.cx, p.region.cy - a->region.cy) < min_distance) {
        ok = false;
        break;
      }
    if (!ok) continue;
    accepted.push_back(&p);
    remap[p.region.label] = static_cast<LabelMap::Label>(accepted.size());
  }
  LabelMap markers(w, h);
  for (std::size_t i = 0; i < markers.size(); ++i) markers[i] = remap[comps.labels[i]];
  return markers;
}

}  // namespace matseg
