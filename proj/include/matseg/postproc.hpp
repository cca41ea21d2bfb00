#pragma once

// Boundary and phase extraction from instance masks, region screening and
// per-region microstructure statistics.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>
#include <opencv2/imgproc.hpp>

#include "matseg/classical.hpp"
#include "matseg/image.hpp"

namespace matseg {

/// Pixels with a 4-neighbour carrying a different label (0 counts as a label);
/// the image border itself is not boundary.
inline BinaryMask label_to_boundary(const LabelMap& lm) {
  const int w = lm.width(), h = lm.height();
  BinaryMask out(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const auto l = lm.at(x, y);
      if ((x > 0 && lm.at(x - 1, y) != l) || (x + 1 < w && lm.at(x + 1, y) != l) ||
          (y > 0 && lm.at(x, y - 1) != l) || (y + 1 < h && lm.at(x, y + 1) != l))
        out.set(x, y);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Boundary clean-up
// ---------------------------------------------------------------------------

namespace detail {

// 8-neighbourhood P2..P9, clockwise from north.
constexpr int kRingX[8] = {0, 1, 1, 1, 0, -1, -1, -1};
constexpr int kRingY[8] = {-1, -1, 0, 1, 1, 1, 0, -1};

// Number of separate runs of set pixels around (x, y).
inline int crossing_number(const BinaryMask& m, int x, int y) {
  int ring[8];
  int set = 0;
  for (int k = 0; k < 8; ++k) {
    const int nx = x + kRingX[k], ny = y + kRingY[k];
    ring[k] = nx >= 0 && ny >= 0 && nx < m.width() && ny < m.height() && m.get(nx, ny);
    set += ring[k];
  }
  if (set == 8) return 0;
  int runs = 0;
  for (int k = 0; k < 8; ++k) runs += !ring[k] && ring[(k + 1) % 8];
  return runs;
}

}  // namespace detail

/// Removes branches of a one-pixel skeleton that end in an endpoint and are
/// shorter than `prune_len` pixels. A walk from an endpoint stops at the first
/// junction (three or more neighbour runs); the junction pixel is kept.
inline BinaryMask prune_spurs(const BinaryMask& skel, int prune_len) {
  if (prune_len <= 0) return skel;
  const int w = skel.width(), h = skel.height();
  BinaryMask out = skel;
  std::vector<std::size_t> path;
  BinaryMask visited(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!skel.get(x, y) || detail::crossing_number(skel, x, y) != 1) continue;
      path.clear();
      int cx = x, cy = y;
      visited = BinaryMask(w, h);
      while (true) {
        if (detail::crossing_number(skel, cx, cy) >= 3) break;
        path.push_back(static_cast<std::size_t>(cy) * w + cx);
        visited.set(cx, cy);
        if (static_cast<int>(path.size()) >= prune_len) break;
        // 4-neighbours first so diagonal shortcuts do not skip a pixel
        int next = -1;
        for (int pass = 0; pass < 2 && next < 0; ++pass)
          for (int k = pass; k < 8; k += 2) {
            const int nx = cx + detail::kRingX[k], ny = cy + detail::kRingY[k];
            if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
            if (skel.get(nx, ny) && !visited.get(nx, ny)) {
              next = k;
              break;
            }
          }
        if (next < 0) break;
        cx += detail::kRingX[next];
        cy += detail::kRingY[next];
      }
      if (static_cast<int>(path.size()) < prune_len)
        for (auto i : path) out.set(i, false);
    }
  return out;
}

/// Close, thin to a one-pixel skeleton, then prune short spurs.
inline BinaryMask boundary_postprocess(const BinaryMask& mask, int close_radius = 1,
                                       int prune_len = 5) {
  if (close_radius < 0) throw std::invalid_argument("boundary_postprocess: close_radius < 0");
  BinaryMask m = close_radius > 0 ? morphology(mask, MorphOp::close, close_radius) : mask;
  return prune_spurs(skeletonize(m), prune_len);
}

// ---------------------------------------------------------------------------
// Phase masks
// ---------------------------------------------------------------------------

/// Union of the selected masks (all when `selection` is null).
inline BinaryMask compose_phase_mask(const std::vector<ScoredMask>& masks, int width, int height,
                                     const std::vector<std::size_t>* selection = nullptr) {
  BinaryMask out(width, height);
  if (selection) {
    for (auto i : *selection) out |= masks.at(i).mask;
  } else {
    for (const auto& m : masks) out |= m.mask;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Region statistics
// ---------------------------------------------------------------------------

inline constexpr const char* kUnclassified = "unclassified";

struct RegionStats {
  LabelMap::Label label = 0;
  std::size_t area_px = 0;
  std::optional<double> area_um2;
  double cx = 0.0;
  double cy = 0.0;
  std::size_t perimeter_px = 0;
  double circularity = 0.0;
  double aspect_ratio = 1.0;
  double mean_intensity = 0.0;
  double ecd_px = 0.0;
  std::optional<double> ecd_um;
  std::string group = kUnclassified;
};

namespace detail {

// Outer contour length through boundary pixel centres, summed over the
// connected pieces of the region.
inline double contour_length(const cv::Mat& region) {
  std::vector<std::vector<cv::Point>> contours;
  cv::findContours(region, contours, cv::RETR_EXTERNAL, cv::CHAIN_APPROX_NONE);
  double len = 0.0;
  for (const auto& c : contours) len += cv::arcLength(c, true);
  return len;
}

}  // namespace detail

/// Statistics for every nonzero label, ordered by label. Perimeter counts the
/// 4-connected boundary steps (pixel edges shared with another label or the image
/// border). Circularity is 4 pi A / P^2 with P the pixel-centre contour length
/// plus pi (the half-pixel offset), capped at 1.1.
inline std::vector<RegionStats> compute_region_stats(const LabelMap& lm, const Micrograph& img,
                                                     std::optional<double> scale = std::nullopt) {
  if (img.width() != lm.width() || img.height() != lm.height())
    throw std::invalid_argument("compute_region_stats: frame mismatch");
  const Micrograph gray = to_grayscale(img);
  const int w = lm.width(), h = lm.height();
  const auto regions = region_table(lm);
  std::vector<std::size_t> slot(lm.max_label() + 1, 0);
  std::vector<RegionStats> out(regions.size());
  std::vector<double> intensity(regions.size(), 0.0);
  for (std::size_t k = 0; k < regions.size(); ++k) slot[regions[k].label] = k;

  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const auto l = lm.at(x, y);
      if (!l) continue;
      const auto k = slot[l];
      intensity[k] += gray.at(x, y);
      auto& p = out[k].perimeter_px;
      p += (x == 0 || lm.at(x - 1, y) != l) + (x + 1 == w || lm.at(x + 1, y) != l) +
           (y == 0 || lm.at(x, y - 1) != l) + (y + 1 == h || lm.at(x, y + 1) != l);
    }

  for (std::size_t k = 0; k < regions.size(); ++k) {
    const auto& r = regions[k];
    auto& s = out[k];
    s.label = r.label;
    s.area_px = r.area;
    s.cx = r.cx;
    s.cy = r.cy;
    s.mean_intensity = intensity[k] / static_cast<double>(r.area);
    const double a = static_cast<double>(r.area);
    s.ecd_px = 2.0 * std::sqrt(a / std::numbers::pi);
    const double bw = r.bbox.width(), bh = r.bbox.height();
    s.aspect_ratio = std::max(bw, bh) / std::min(bw, bh);

    cv::Mat sub(r.bbox.height() + 2, r.bbox.width() + 2, CV_8UC1, cv::Scalar(0));
    for (int y = r.bbox.y0; y < r.bbox.y1; ++y)
      for (int x = r.bbox.x0; x < r.bbox.x1; ++x)
        if (lm.at(x, y) == r.label) sub.at<std::uint8_t>(y - r.bbox.y0 + 1, x - r.bbox.x0 + 1) = 255;
    const double p = detail::contour_length(sub) + std::numbers::pi;
    s.circularity = std::min(1.1, 4.0 * std::numbers::pi * a / (p * p));

    if (scale) {
      s.area_um2 = a * *scale * *scale;
      s.ecd_um = s.ecd_px * *scale;
    }
  }
  return out;
}

/// Statistics of one binary mask treated as a single region with label 1.
inline RegionStats mask_stats(const BinaryMask& mask, const Micrograph& img,
                              std::optional<double> scale = std::nullopt) {
  LabelMap lm(mask.width(), mask.height());
  for (std::size_t i = 0; i < mask.size(); ++i) lm[i] = mask.get(i) ? 1 : 0;
  auto all = compute_region_stats(lm, img, scale);
  return all.empty() ? RegionStats{} : all.front();
}

// ---------------------------------------------------------------------------
// Screening
// ---------------------------------------------------------------------------

/// Inclusive bounds on region features; unset bounds always pass.
struct ScreenRule {
  std::string group;
  std::optional<double> min_intensity, max_intensity;
  std::optional<double> min_area, max_area;
  std::optional<double> min_circularity, max_circularity;
  std::optional<double> min_aspect, max_aspect;

  bool matches(const RegionStats& s) const {
    auto in = [](double v, const std::optional<double>& lo, const std::optional<double>& hi) {
      return (!lo || v >= *lo) && (!hi || v <= *hi);
    };
    return in(s.mean_intensity, min_intensity, max_intensity) &&
           in(static_cast<double>(s.area_px), min_area, max_area) &&
           in(s.circularity, min_circularity, max_circularity) &&
           in(s.aspect_ratio, min_aspect, max_aspect);
  }

  static ScreenRule from_json(const nlohmann::json& j) {
    ScreenRule r;
    static const std::vector<std::string> known = {
        "group",          "min_intensity",   "max_intensity",   "min_area", "max_area",
        "min_circularity", "max_circularity", "min_aspect",     "max_aspect"};
    for (const auto& [k, _] : j.items())
      if (std::find(known.begin(), known.end(), k) == known.end())
        throw std::invalid_argument("screen rule: unknown key " + k);
    r.group = j.at("group").get<std::string>();
    if (r.group.empty()) throw std::invalid_argument("screen rule: group must be nonempty");
    auto opt = [&](const char* key, std::optional<double>& dst) {
      if (j.contains(key)) dst = j.at(key).get<double>();
    };
    opt("min_intensity", r.min_intensity);
    opt("max_intensity", r.max_intensity);
    opt("min_area", r.min_area);
    opt("max_area", r.max_area);
    opt("min_circularity", r.min_circularity);
    opt("max_circularity", r.max_circularity);
    opt("min_aspect", r.min_aspect);
    opt("max_aspect", r.max_aspect);
    return r;
  }

  nlohmann::json to_json() const {
    nlohmann::json j{{"group", group}};
    auto put = [&](const char* key, const std::optional<double>& v) {
      if (v) j[key] = *v;
    };
    put("min_intensity", min_intensity);
    put("max_intensity", max_intensity);
    put("min_area", min_area);
    put("max_area", max_area);
    put("min_circularity", min_circularity);
    put("max_circularity", max_circularity);
    put("min_aspect", min_aspect);
    put("max_aspect", max_aspect);
    return j;
  }
};

/// First matching rule names the group; unmatched masks land in "unclassified".
inline std::map<std::string, std::vector<std::size_t>> screen_regions(
    const std::vector<ScoredMask>& masks, const Micrograph& img,
    const std::vector<ScreenRule>& rules) {
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < masks.size(); ++i) {
    const auto s = mask_stats(masks[i].mask, img);
    std::string g = kUnclassified;
    for (const auto& r : rules)
      if (r.matches(s)) {
        g = r.group;
        break;
      }
    groups[g].push_back(i);
  }
  return groups;
}

// ---------------------------------------------------------------------------
// Summary and export
// ---------------------------------------------------------------------------

struct StatsSummary {
  static constexpr int kBins = 16;

  std::size_t count = 0;
  double ecd_mean = 0.0;
  double ecd_median = 0.0;
  double ecd_std = 0.0;
  double ecd_max = 0.0;
  std::map<std::string, double> area_fraction;
  std::vector<std::size_t> histogram = std::vector<std::size_t>(kBins, 0);

  nlohmann::json to_json() const {
    return {{"count", count},
            {"ecd_px", {{"mean", ecd_mean}, {"median", ecd_median}, {"std", ecd_std}, {"max", ecd_max}}},
            {"area_fraction", area_fraction},
            {"histogram", {{"bins", kBins}, {"range", {0.0, ecd_max}}, {"counts", histogram}}}};
  }
};

/// Descriptive statistics of equivalent diameters (population std) and the
/// area fraction of each group relative to `total_px`.
inline StatsSummary summarize(const std::vector<RegionStats>& stats, std::size_t total_px) {
  StatsSummary s;
  s.count = stats.size();
  if (stats.empty()) return s;
  std::vector<double> d;
  for (const auto& r : stats) {
    d.push_back(r.ecd_px);
    if (total_px) s.area_fraction[r.group] += static_cast<double>(r.area_px) / total_px;
  }
  double sum = 0.0;
  for (double v : d) sum += v;
  s.ecd_mean = sum / static_cast<double>(d.size());
  double var = 0.0;
  for (double v : d) var += (v - s.ecd_mean) * (v - s.ecd_mean);
  s.ecd_std = std::sqrt(var / static_cast<double>(d.size()));
  s.ecd_max = *std::max_element(d.begin(), d.end());
  s.ecd_median = median(d);
  for (double v : d) {
    int bin = s.ecd_max > 0.0 ? static_cast<int>(v / s.ecd_max * StatsSummary::kBins) : 0;
    ++s.histogram[std::min(bin, StatsSummary::kBins - 1)];
  }
  return s;
}

inline void write_stats_csv(std::ostream& os, const std::vector<RegionStats>& stats) {
  os << "label,area_px,area_um2,cx,cy,perimeter_px,circularity,aspect_ratio,mean_intensity,"
        "ecd_px,ecd_um,group\n";
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return std::string(buf);
  };
  auto opt = [&](const std::optional<double>& v) { return v ? num(*v) : std::string(); };
  for (const auto& s : stats)
    os << s.label << ',' << s.area_px << ',' << opt(s.area_um2) << ',' << num(s.cx) << ','
       << num(s.cy) << ',' << s.perimeter_px << ',' << num(s.circularity) << ','
       << num(s.aspect_ratio) << ',' << num(s.mean_intensity) << ',' << num(s.ecd_px) << ','
       << opt(s.ecd_um) << ',' << s.group << '\n';
}

}  // namespace matseg
