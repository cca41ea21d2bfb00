#pragma once

// Evaluation suite: pair-counting Rand index / adjusted Rand index over
// partitions, pixel IoU, and tolerance-matched boundary precision/recall/F1.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "matseg/classical.hpp"
#include "matseg/image.hpp"
#include "matseg/postproc.hpp"

namespace matseg {

/// Pair counts over all unordered element pairs. `a` is the prediction, `b` the
/// reference: TP together in both, TN apart in both, FP together only in `a`,
/// FN together only in `b`.
struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;
  std::uint64_t tn = 0;

  std::uint64_t total() const { return tp + fp + fn + tn; }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

/// Contingency table between two labelings of the same elements.
struct Contingency {
  std::uint64_t n = 0;
  std::unordered_map<std::uint64_t, std::uint64_t> cells;  // (a << 32 | b) -> count
  std::unordered_map<std::uint32_t, std::uint64_t> rows;   // a label -> count
  std::unordered_map<std::uint32_t, std::uint64_t> cols;   // b label -> count

  /// When `skip_b_zero` is set, elements whose `b` label is 0 are left out.
  static Contingency build(std::span<const std::uint32_t> a, std::span<const std::uint32_t> b,
                           bool skip_b_zero) {
    if (a.size() != b.size()) throw std::invalid_argument("contingency: size mismatch");
    Contingency c;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (skip_b_zero && b[i] == 0) continue;
      ++c.n;
      ++c.cells[(std::uint64_t{a[i]} << 32) | b[i]];
      ++c.rows[a[i]];
      ++c.cols[b[i]];
    }
    return c;
  }
};

namespace detail {
inline std::uint64_t pairs(std::uint64_t k) { return k < 2 ? 0 : k * (k - 1) / 2; }
}  // namespace detail

inline ConfusionCounts pair_confusion(const Contingency& c) {
  std::uint64_t both = 0, in_a = 0, in_b = 0;
  for (const auto& [_, k] : c.cells) both += detail::pairs(k);
  for (const auto& [_, k] : c.rows) in_a += detail::pairs(k);
  for (const auto& [_, k] : c.cols) in_b += detail::pairs(k);
  ConfusionCounts out;
  out.tp = both;
  out.fp = in_a - both;
  out.fn = in_b - both;
  out.tn = detail::pairs(c.n) - out.tp - out.fp - out.fn;
  return out;
}

/// Pair confusion over two label lists; every element participates.
inline ConfusionCounts pair_confusion(std::span<const std::uint32_t> a,
                                      std::span<const std::uint32_t> b) {
  return pair_confusion(Contingency::build(a, b, false));
}

/// Pair confusion over label maps; pixels labelled 0 in the reference `b` are excluded.
inline ConfusionCounts pair_confusion(const LabelMap& a, const LabelMap& b) {
  if (a.width() != b.width() || a.height() != b.height())
    throw std::invalid_argument("pair_confusion: size mismatch");
  return pair_confusion(Contingency::build(a.labels(), b.labels(), true));
}

inline double rand_index(const ConfusionCounts& c) {
  if (c.total() == 0) throw std::invalid_argument("rand_index: fewer than two elements");
  return static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
}

/// Hubert-Arabie adjusted Rand index from a contingency table.
inline double adjusted_rand_index(const Contingency& c) {
  if (c.n < 2) throw std::invalid_argument("adjusted_rand_index: fewer than two elements");
  double index = 0.0, sum_a = 0.0, sum_b = 0.0;
  for (const auto& [_, k] : c.cells) index += static_cast<double>(detail::pairs(k));
  for (const auto& [_, k] : c.rows) sum_a += static_cast<double>(detail::pairs(k));
  for (const auto& [_, k] : c.cols) sum_b += static_cast<double>(detail::pairs(k));
  const double total = static_cast<double>(detail::pairs(c.n));
  const double expected = sum_a * sum_b / total;
  const double max = 0.5 * (sum_a + sum_b);
  if (max == expected) {
    // both partitions trivial; identical iff the table is a bijection
    const bool identical = c.cells.size() == c.rows.size() && c.cells.size() == c.cols.size();
    return identical ? 1.0 : 0.0;
  }
  return (index - expected) / (max - expected);
}

inline double adjusted_rand_index(std::span<const std::uint32_t> a,
                                  std::span<const std::uint32_t> b) {
  return adjusted_rand_index(Contingency::build(a, b, false));
}

/// ARI between label maps, excluding pixels labelled 0 in the reference `b`.
inline double adjusted_rand_index(const LabelMap& a, const LabelMap& b) {
  if (a.width() != b.width() || a.height() != b.height())
    throw std::invalid_argument("adjusted_rand_index: size mismatch");
  return adjusted_rand_index(Contingency::build(a.labels(), b.labels(), true));
}

/// Intersection over union; two empty masks score 1.
inline double iou(const BinaryMask& pred, const BinaryMask& gt) {
  pred.require_same_frame(gt);
  const auto inter = intersection_area(pred, gt);
  const auto uni = pred.area() + gt.area() - inter;
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

struct PrecisionRecall {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Pixels within `tolerance` (Euclidean) of any set pixel of `targets`.
inline BinaryMask within_distance(const BinaryMask& targets, double tolerance) {
  BinaryMask out(targets.width(), targets.height());
  if (tolerance <= 0.0) return targets;
  const auto d2 = squared_distance_to(targets);
  const double t2 = tolerance * tolerance;
  for (std::size_t i = 0; i < d2.size(); ++i)
    if (d2[i] <= t2) out.set(i);
  return out;
}

/// Boundary precision/recall/F1: a predicted pixel is correct when a reference
/// pixel lies within `tolerance`, and vice versa for recall.
inline PrecisionRecall boundary_prf(const BinaryMask& pred, const BinaryMask& gt,
                                    double tolerance) {
  pred.require_same_frame(gt);
  if (tolerance < 0.0) throw std::invalid_argument("boundary_prf: tolerance must be >= 0");
  const auto np = pred.area(), ng = gt.area();
  if (np == 0 && ng == 0) return {1.0, 1.0, 1.0};
  PrecisionRecall r;
  if (np > 0)
    r.precision = static_cast<double>(intersection_area(pred, within_distance(gt, tolerance))) /
                  static_cast<double>(np);
  if (ng > 0)
    r.recall = static_cast<double>(intersection_area(gt, within_distance(pred, tolerance))) /
               static_cast<double>(ng);
  const double s = r.precision + r.recall;
  r.f1 = s > 0.0 ? 2.0 * r.precision * r.recall / s : 0.0;
  return r;
}

// ---------------------------------------------------------------------------
// Per-image evaluation
// ---------------------------------------------------------------------------

enum class EvalKind { grain, phase };

inline const char* to_string(EvalKind k) { return k == EvalKind::grain ? "grain" : "phase"; }

/// A prediction or reference: either a partition or a binary raster. For grain
/// evaluation a binary raster is a boundary map; for phase it is the phase mask.
using Segmentation = std::variant<LabelMap, BinaryMask>;

/// 4-connected components of the non-boundary pixels.
inline LabelMap boundary_to_partition(const BinaryMask& boundary) {
  return connected_components(boundary.inverted(), 4).labels;
}

struct MetricRow {
  std::string image;
  EvalKind kind = EvalKind::grain;
  std::map<std::string, double> values;  // ARI, RI, IoU, F1, Recall, Precision
};

inline MetricRow evaluate_pair(const Segmentation& pred, const Segmentation& gt, EvalKind kind,
                               double tolerance = 2.0, std::string image = {}) {
  if (pred.index() != gt.index())
    throw std::invalid_argument("evaluate_pair: prediction and reference kinds differ");
  MetricRow row{std::move(image), kind, {}};
  if (kind == EvalKind::grain) {
    auto partition = [](const Segmentation& s) {
      return std::holds_alternative<LabelMap>(s) ? std::get<LabelMap>(s)
                                                 : boundary_to_partition(std::get<BinaryMask>(s));
    };
    auto boundary = [](const Segmentation& s) {
      return std::holds_alternative<BinaryMask>(s) ? std::get<BinaryMask>(s)
                                                   : label_to_boundary(std::get<LabelMap>(s));
    };
    const LabelMap p = partition(pred), g = partition(gt);
    const auto contingency = Contingency::build(p.labels(), g.labels(), true);
    row.values["ARI"] = contingency.n >= 2 ? adjusted_rand_index(contingency) : 0.0;
    row.values["RI"] = contingency.n >= 2 ? rand_index(pair_confusion(contingency)) : 0.0;
    const auto prf = boundary_prf(boundary(pred), boundary(gt), tolerance);
    row.values["Precision"] = prf.precision;
    row.values["Recall"] = prf.recall;
    row.values["F1"] = prf.f1;
  } else {
    auto mask = [](const Segmentation& s) {
      return std::holds_alternative<BinaryMask>(s) ? std::get<BinaryMask>(s)
                                                   : std::get<LabelMap>(s).foreground();
    };
    const BinaryMask p = mask(pred), g = mask(gt);
    const auto prf = boundary_prf(p, g, 0.0);
    row.values["IoU"] = iou(p, g);
    row.values["Precision"] = prf.precision;
    row.values["Recall"] = prf.recall;
    row.values["F1"] = prf.f1;
  }
  return row;
}

/// Per-image rows plus dataset means, serialised as CSV and JSON.
struct MetricReport {
  std::string dataset;
  std::vector<MetricRow> rows;

  std::map<std::string, double> means() const {
    std::map<std::string, double> sum;
    std::map<std::string, std::size_t> count;
    for (const auto& r : rows)
      for (const auto& [k, v] : r.values) {
        sum[k] += v;
        ++count[k];
      }
    for (auto& [k, v] : sum) v /= static_cast<double>(count[k]);
    return sum;
  }

  void write_csv(std::ostream& os) const {
    os << "image,metric,value\n";
    for (const auto& r : rows)
      for (const auto& [k, v] : r.values) os << r.image << ',' << k << ',' << fmt(v) << '\n';
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["dataset"] = dataset;
    j["images"] = rows.size();
    j["mean"] = means();
    auto& per = j["per_image"] = nlohmann::json::array();
    for (const auto& r : rows)
      per.push_back({{"image", r.image}, {"kind", to_string(r.kind)}, {"metrics", r.values}});
    return j;
  }

 private:
  static std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
  }
};

}  // namespace matseg
