#pragma once

// Structure-aware prompt points: centroids of a coarse pre-segmentation fused
// with an adaptively dense grid and a denser band along the image border.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "matseg/classical.hpp"
#include "matseg/image.hpp"

namespace matseg {

enum class PresegMode { polycrystalline, multiphase };
enum class GridMode { adaptive, native };

inline const char* to_string(PresegMode m) {
  return m == PresegMode::polycrystalline ? "polycrystalline" : "multiphase";
}
inline const char* to_string(GridMode m) { return m == GridMode::adaptive ? "adaptive" : "native"; }

struct PromptConfig {
  PresegMode mode = PresegMode::polycrystalline;
  GridMode grid = GridMode::adaptive;  // native: fixed 32x32 grid only
  bool use_centroids = true;
  double grid_alpha = 4.0;
  int grid_min_side = 8;
  int grid_max_side = 64;
  int edge_margin = 16;
  double edge_spacing_factor = 2.0;
  double min_separation = 8.0;

  // pre-segmentation
  Polarity polarity = Polarity::bright;
  EdgeParams edges;
  int edge_dilation = 1;
  SmallRegionCutoff cutoff;

  static constexpr int kNativeSide = 32;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const {
    auto fail = [](const std::string& key, const std::string& why) {
      throw std::invalid_argument(key + ": " + why);
    };
    if (!(grid_alpha > 0.0)) fail("prompt.grid_alpha", "must be > 0");
    if (grid_min_side < 1) fail("prompt.grid_min_side", "must be >= 1");
    if (grid_max_side < grid_min_side) fail("prompt.grid_max_side", "must be >= grid_min_side");
    if (edge_margin < 0) fail("prompt.edge_margin", "must be >= 0");
    if (!(edge_spacing_factor >= 1.0)) fail("prompt.edge_spacing_factor", "must be >= 1");
    if (!(min_separation >= 0.0)) fail("prompt.min_separation", "must be >= 0");
    if (edge_dilation < 0) fail("prompt.edge_dilation", "must be >= 0");
    try {
      edges.validate();
    } catch (const std::invalid_argument& e) {
      fail("prompt.canny", e.what());
    }
    if (cutoff.mode == SmallRegionCutoff::Mode::relative &&
        !(cutoff.fraction > 0.0 && cutoff.fraction < 1.0))
      fail("prompt.min_region_fraction", "must be in (0, 1)");
  }
};

// ---------------------------------------------------------------------------
// Pre-segmentation
// ---------------------------------------------------------------------------

struct Presegmentation {
  LabelMap labels;
  bool no_separation = false;  // Otsu found a single intensity; labels are empty
};

/// Multiphase: 8-connected components of the Otsu foreground. Polycrystalline:
/// 4-connected components of the complement of dilated Canny edges. Small
/// regions are removed in both cases.
inline Presegmentation presegment(const Micrograph& img, const PromptConfig& cfg) {
  const Micrograph gray = to_grayscale(img);
  Presegmentation out{LabelMap(gray.width(), gray.height()), false};
  LabelMap raw;
  if (cfg.mode == PresegMode::multiphase) {
    try {
      raw = connected_components(otsu_threshold(gray, cfg.polarity).mask, 8).labels;
    } catch (const NoSeparation&) {
      out.no_separation = true;
      return out;
    }
  } else {
    BinaryMask edges = canny(gray, cfg.edges);
    if (cfg.edge_dilation > 0) edges = dilate(edges, cfg.edge_dilation);
    raw = connected_components(edges.inverted(), 4).labels;
  }
  out.labels = remove_small_regions(raw, cfg.cutoff);
  return out;
}

// ---------------------------------------------------------------------------
// Point sets
// ---------------------------------------------------------------------------

/// One point per region at the round-half-down centroid, snapped to the nearest
/// region pixel (ties in raster order) when the centroid falls outside.
inline std::vector<PromptPoint> centroid_prompts(const LabelMap& lm) {
  std::vector<PromptPoint> out;
  for (const auto& r : region_table(lm)) {
    int x = static_cast<int>(std::ceil(r.cx - 0.5));
    int y = static_cast<int>(std::ceil(r.cy - 0.5));
    if (lm.at(x, y) != r.label) {
      double best = std::numeric_limits<double>::infinity();
      for (int yy = r.bbox.y0; yy < r.bbox.y1; ++yy)
        for (int xx = r.bbox.x0; xx < r.bbox.x1; ++xx) {
          if (lm.at(xx, yy) != r.label) continue;
          const double d = (xx - r.cx) * (xx - r.cx) + (yy - r.cy) * (yy - r.cy);
          if (d < best) {
            best = d;
            x = xx;
            y = yy;
          }
        }
    }
    out.push_back({x, y, PromptOrigin::centroid});
  }
  return out;
}

/// Grid side: clamp(ceil(sqrt(alpha * max(k, 1))), min, max); 32 in native mode.
inline int grid_side(int k_regions, const PromptConfig& cfg) {
  if (cfg.grid == GridMode::native) return PromptConfig::kNativeSide;
  const double raw = std::ceil(std::sqrt(cfg.grid_alpha * std::max(k_regions, 1)));
  return static_cast<int>(std::clamp(raw, static_cast<double>(cfg.grid_min_side),
                                     static_cast<double>(cfg.grid_max_side)));
}

namespace detail {
// round((i + 0.5) * len / s), half up, clamped into the frame
inline int grid_coord(int i, int len, int s) {
  const std::int64_t v = ((2 * std::int64_t{i} + 1) * len + s) / (2 * std::int64_t{s});
  return static_cast<int>(std::min<std::int64_t>(v, len - 1));
}
}  // namespace detail

/// s x s points at cell centres, row by row.
inline std::vector<PromptPoint> adaptive_grid(int width, int height, int k_regions,
                                              const PromptConfig& cfg) {
  if (width < 1 || height < 1) throw std::invalid_argument("adaptive_grid: empty frame");
  const int s = grid_side(k_regions, cfg);
  std::vector<PromptPoint> out;
  out.reserve(static_cast<std::size_t>(s) * s);
  for (int j = 0; j < s; ++j)
    for (int i = 0; i < s; ++i)
      out.push_back({detail::grid_coord(i, width, s), detail::grid_coord(j, height, s),
                     PromptOrigin::grid});
  return out;
}

/// Edge lattice spacing: interior grid spacing divided by the edge factor.
inline int edge_spacing(int width, int height, int side, const PromptConfig& cfg) {
  const double interior = static_cast<double>(std::min(width, height)) / side;
  return std::max(1, static_cast<int>(std::lround(interior / cfg.edge_spacing_factor)));
}

/// Square lattice of pitch `spacing`, offset by spacing / 2, restricted to the
/// band of pixels closer than `margin` to a border.
inline std::vector<PromptPoint> edge_densify(int width, int height, int margin, int spacing) {
  if (margin <= 0) return {};
  if (2 * margin >= std::min(width, height))
    throw std::invalid_argument("edge_densify: margin must be below half the shorter side");
  if (spacing < 1) throw std::invalid_argument("edge_densify: spacing must be >= 1");
  std::vector<PromptPoint> out;
  for (int y = spacing / 2; y < height; y += spacing)
    for (int x = spacing / 2; x < width; x += spacing) {
      const int d = std::min({x, y, width - 1 - x, height - 1 - y});
      if (d < margin) out.push_back({x, y, PromptOrigin::edge});
    }
  return out;
}

namespace detail {

// Bucketed point set answering "any point strictly closer than r?".
class SpatialHash {
 public:
  explicit SpatialHash(double r) : r_(r), cell_(std::max(1.0, r)) {}

  bool near(const PromptPoint& p) const {
    if (r_ <= 0.0) return false;
    const auto [cx, cy] = cell_of(p);
    for (std::int64_t dy = -1; dy <= 1; ++dy)
      for (std::int64_t dx = -1; dx <= 1; ++dx) {
        auto it = cells_.find(key(cx + dx, cy + dy));
        if (it == cells_.end()) continue;
        for (const auto& q : it->second) {
          const double ddx = p.x - q.x, ddy = p.y - q.y;
          if (ddx * ddx + ddy * ddy < r_ * r_) return true;
        }
      }
    return false;
  }

  void insert(const PromptPoint& p) {
    const auto [cx, cy] = cell_of(p);
    cells_[key(cx, cy)].push_back(p);
  }

 private:
  std::pair<std::int64_t, std::int64_t> cell_of(const PromptPoint& p) const {
    return {static_cast<std::int64_t>(std::floor(p.x / cell_)),
            static_cast<std::int64_t>(std::floor(p.y / cell_))};
  }
  static std::uint64_t key(std::int64_t x, std::int64_t y) {
    return (static_cast<std::uint64_t>(x) << 32) ^ static_cast<std::uint32_t>(y);
  }

  double r_;
  double cell_;
  std::unordered_map<std::uint64_t, std::vector<PromptPoint>> cells_;
};

inline std::vector<PromptPoint> raster_sorted(std::vector<PromptPoint> pts) {
  std::stable_sort(pts.begin(), pts.end(), [](const PromptPoint& a, const PromptPoint& b) {
    return a.y < b.y || (a.y == b.y && a.x < b.x);
  });
  return pts;
}

}  // namespace detail

/// Centroids always survive. Grid then edge points, each in raster order, are
/// dropped when strictly closer than `min_separation` to an already kept point.
inline std::vector<PromptPoint> fuse_prompts(const std::vector<PromptPoint>& centroids,
                                             const std::vector<PromptPoint>& grid,
                                             const std::vector<PromptPoint>& edge,
                                             double min_separation) {
  detail::SpatialHash kept(min_separation);
  std::vector<PromptPoint> out = detail::raster_sorted(centroids);
  for (const auto& p : out) kept.insert(p);
  for (const auto* set : {&grid, &edge})
    for (const auto& p : detail::raster_sorted(*set)) {
      if (kept.near(p)) continue;
      kept.insert(p);
      out.push_back(p);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Full generation
// ---------------------------------------------------------------------------

struct PromptSet {
  std::vector<PromptPoint> points;
  Presegmentation preseg;
  int grid_side = 0;
};

inline PromptSet generate_prompts(const Micrograph& img, const PromptConfig& cfg) {
  cfg.validate();
  const int w = img.width(), h = img.height();
  PromptSet out;
  if (cfg.grid == GridMode::native) {
    out.preseg.labels = LabelMap(w, h);
    out.grid_side = PromptConfig::kNativeSide;
    out.points = adaptive_grid(w, h, 0, cfg);
    return out;
  }
  out.preseg = presegment(img, cfg);
  const auto centroids = centroid_prompts(out.preseg.labels);
  out.grid_side = grid_side(static_cast<int>(centroids.size()), cfg);
  const auto grid = adaptive_grid(w, h, static_cast<int>(centroids.size()), cfg);
  const int margin = std::min(cfg.edge_margin, (std::min(w, h) - 1) / 2);
  const auto edge = edge_densify(w, h, margin, edge_spacing(w, h, out.grid_side, cfg));
  out.points = fuse_prompts(cfg.use_centroids ? centroids : std::vector<PromptPoint>{}, grid, edge,
                            cfg.min_separation);
  return out;
}

inline void write_prompts_csv(std::ostream& os, const std::vector<PromptPoint>& pts) {
  os << "x,y,origin\n";
  for (const auto& p : pts) os << p.x << ',' << p.y << ',' << to_string(p.origin) << '\n';
}

}  // namespace matseg
