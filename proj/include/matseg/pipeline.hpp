#pragma once

// End-to-end pipeline: prompts, crop pyramid, per-crop prompted prediction,
// two-stage NMS and merging into a label map.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "matseg/backend.hpp"
#include "matseg/image.hpp"
#include "matseg/io.hpp"
#include "matseg/prompts.hpp"

namespace matseg {

struct PipelineConfig {
  int crop_layers = 1;
  double crop_overlap = 0.34;
  double score_min = 0.8;
  double nms_iou = 0.7;
  std::size_t min_mask_area = 16;
  PromptConfig prompt;

  /// Throws std::invalid_argument naming the offending key.
  void validate() const {
    auto fail = [](const std::string& key, const std::string& why) {
      throw std::invalid_argument(key + ": " + why);
    };
    if (crop_layers < 0) fail("crop_layers", "must be >= 0");
    if (crop_layers > 6) fail("crop_layers", "must be <= 6");
    if (!(crop_overlap >= 0.0 && crop_overlap < 1.0)) fail("crop_overlap", "must be in [0, 1)");
    if (!(score_min >= 0.0 && score_min <= 1.0)) fail("score_min", "must be in [0, 1]");
    if (!(nms_iou > 0.0 && nms_iou <= 1.0)) fail("nms_iou", "must be in (0, 1]");
    prompt.validate();
  }
};

/// Failure inside one pipeline stage; `stage` names it.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what)
      : Error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

// ---------------------------------------------------------------------------
// Crops
// ---------------------------------------------------------------------------

namespace detail {
// crop length and origins along one axis
inline std::vector<std::pair<int, int>> axis_spans(int len, int n, double overlap) {
  const double raw = static_cast<double>(len) * (1.0 + overlap) / n;
  const int lc = std::min(len, static_cast<int>(std::ceil(raw - 1e-9)));
  std::vector<std::pair<int, int>> out;
  for (int j = 0; j < n; ++j) {
    const int o = n == 1 ? 0 : static_cast<int>(std::lround(static_cast<double>(j) * (len - lc) / (n - 1)));
    out.emplace_back(o, o + lc);
  }
  return out;
}
}  // namespace detail

/// Layer 0 is the full frame; layer i tiles each axis with 2^i overlapping crops.
/// Order: layer, then row, then column.
inline std::vector<CropBox> generate_crops(int width, int height, int layers, double overlap) {
  if (layers < 0) throw std::invalid_argument("generate_crops: layers must be >= 0");
  if (!(overlap >= 0.0 && overlap < 1.0))
    throw std::invalid_argument("generate_crops: overlap must be in [0, 1)");
  std::vector<CropBox> out{CropBox::full(width, height)};
  for (int layer = 1; layer <= layers; ++layer) {
    const int n = 1 << layer;
    const auto xs = detail::axis_spans(width, n, overlap);
    const auto ys = detail::axis_spans(height, n, overlap);
    for (const auto& [y0, y1] : ys)
      for (const auto& [x0, x1] : xs) out.push_back({x0, y0, x1, y1, layer});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Per-crop prediction
// ---------------------------------------------------------------------------

inline Micrograph crop_image(const Micrograph& img, const CropBox& c) {
  const int ch = img.channels();
  std::vector<std::uint8_t> px(static_cast<std::size_t>(c.width()) * c.height() * ch);
  auto src = img.pixels();
  for (int y = 0; y < c.height(); ++y)
    std::copy_n(src.begin() + (static_cast<std::size_t>(y + c.y0) * img.width() + c.x0) * ch,
                static_cast<std::size_t>(c.width()) * ch,
                px.begin() + static_cast<std::size_t>(y) * c.width() * ch);
  return Micrograph(c.width(), c.height(), ch, std::move(px), img.scale());
}

/// Runs every prompt inside `crop`, keeps the top candidate per prompt, drops
/// low scores and tiny masks, and returns masks in the full-image frame.
inline std::vector<ScoredMask> segment_crop(const Micrograph& img, const CropBox& crop, int crop_id,
                                            Backend& backend,
                                            const std::vector<PromptPoint>& prompts,
                                            const PipelineConfig& cfg) {
  std::vector<PromptPoint> inside;
  for (const auto& p : prompts)
    if (crop.contains(p.x, p.y)) inside.push_back(p);
  if (inside.empty()) return {};

  const auto emb = backend.encode(crop_image(img, crop), crop);
  std::vector<ScoredMask> out;
  for (const auto& p : inside) {
    auto outcome = backend.predict(emb, {p.x - crop.x0, p.y - crop.y0, p.origin});
    if (outcome.candidates.empty()) continue;
    const ScoredMask* best = &outcome.candidates.front();
    for (const auto& c : outcome.candidates)
      if (c.score > best->score) best = &c;
    if (best->score < cfg.score_min || best->mask.area() < cfg.min_mask_area) continue;
    out.push_back({paste(best->mask, crop, img.width(), img.height()), best->score,
                   MaskOrigin{crop_id, p}});
  }
  return out;
}

// ---------------------------------------------------------------------------
// NMS and merging
// ---------------------------------------------------------------------------

namespace detail {

struct MaskInfo {
  std::size_t area;
  CropBox box;
};

inline double mask_iou(const ScoredMask& a, const MaskInfo& ia, const ScoredMask& b,
                       const MaskInfo& ib) {
  if (intersect(ia.box, ib.box).empty()) return ia.area + ib.area == 0 ? 1.0 : 0.0;
  const auto inter = intersection_area(a.mask, b.mask);
  const auto uni = ia.area + ib.area - inter;
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace detail

/// Greedy hard NMS. Masks are ranked by descending score, then larger area, then
/// input position; a mask is kept iff its IoU with every kept mask is <= the
/// threshold. Kept masks are returned in rank order.
inline std::vector<ScoredMask> nms(const std::vector<ScoredMask>& masks, double iou_threshold) {
  if (!(iou_threshold > 0.0 && iou_threshold <= 1.0))
    throw std::invalid_argument("nms: threshold must be in (0, 1]");
  std::vector<detail::MaskInfo> info;
  info.reserve(masks.size());
  for (const auto& m : masks) info.push_back({m.mask.area(), m.mask.bounds()});
  std::vector<std::size_t> order(masks.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (masks[a].score != masks[b].score) return masks[a].score > masks[b].score;
    if (info[a].area != info[b].area) return info[a].area > info[b].area;
    return a < b;
  });
  std::vector<std::size_t> kept;
  for (auto i : order) {
    bool ok = true;
    for (auto k : kept)
      if (detail::mask_iou(masks[i], info[i], masks[k], info[k]) > iou_threshold) {
        ok = false;
        break;
      }
    if (ok) kept.push_back(i);
  }
  std::vector<ScoredMask> out;
  out.reserve(kept.size());
  for (auto k : kept) out.push_back(masks[k]);
  return out;
}

/// Each pixel takes label i + 1 of the first kept mask (rank order) covering it,
/// which is the highest score with ties to the lower index.
inline LabelMap label_masks(const std::vector<ScoredMask>& kept, int width, int height) {
  LabelMap lm(width, height);
  for (std::size_t k = 0; k < kept.size(); ++k) {
    const auto words = kept[k].mask.words();
    for (std::size_t wi = 0; wi < words.size(); ++wi) {
      std::uint64_t w = words[wi];
      while (w) {
        const std::size_t i = (wi << 6) + static_cast<std::size_t>(std::countr_zero(w));
        w &= w - 1;
        if (!lm[i]) lm[i] = static_cast<LabelMap::Label>(k + 1);
      }
    }
  }
  return lm;
}

struct SegmentationResult {
  std::vector<ScoredMask> masks;  // full-image frame, rank order
  LabelMap labelmap;
  std::vector<PromptPoint> prompts_used;
  Presegmentation preseg;
  std::map<std::string, double> timing_ms;
};

/// Cross-crop NMS over all per-crop survivors, then labelling.
inline SegmentationResult merge_and_label(const std::vector<std::vector<ScoredMask>>& per_crop,
                                          int width, int height, double nms_iou) {
  std::vector<ScoredMask> all;
  for (const auto& v : per_crop) all.insert(all.end(), v.begin(), v.end());
  SegmentationResult r;
  r.masks = nms(all, nms_iou);
  r.labelmap = label_masks(r.masks, width, height);
  return r;
}

// ---------------------------------------------------------------------------
// Full run
// ---------------------------------------------------------------------------

inline SegmentationResult segment_micrograph(const Micrograph& img, const PipelineConfig& cfg,
                                             Backend& backend) {
  using clock = std::chrono::steady_clock;
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw StageError("config", e.what());
  }
  std::map<std::string, double> timing;
  auto timed = [&](const std::string& stage, auto&& fn) {
    const auto t0 = clock::now();
    try {
      auto result = fn();
      timing[stage] = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
      return result;
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(stage, e.what());
    }
  };

  const auto prompts = timed("prompts", [&] { return generate_prompts(img, cfg.prompt); });
  const auto crops = timed("crops", [&] {
    return generate_crops(img.width(), img.height(), cfg.crop_layers, cfg.crop_overlap);
  });
  const auto per_crop = timed("predict", [&] {
    std::vector<std::vector<ScoredMask>> out;
    for (std::size_t c = 0; c < crops.size(); ++c) {
      try {
        out.push_back(nms(segment_crop(img, crops[c], static_cast<int>(c), backend,
                                       prompts.points, cfg),
                          cfg.nms_iou));
      } catch (const std::exception& e) {
        const auto& b = crops[c];
        throw Error("crop " + std::to_string(c) + " [" + std::to_string(b.x0) + "," +
                    std::to_string(b.y0) + "," + std::to_string(b.x1) + "," +
                    std::to_string(b.y1) + "): " + e.what());
      }
    }
    return out;
  });
  auto result = timed("merge", [&] {
    return merge_and_label(per_crop, img.width(), img.height(), cfg.nms_iou);
  });
  result.prompts_used = prompts.points;
  result.preseg = prompts.preseg;
  result.timing_ms = std::move(timing);
  return result;
}

/// Kept masks as RLE JSON with score and provenance.
inline nlohmann::json masks_to_json(const std::vector<ScoredMask>& masks) {
  auto arr = nlohmann::json::array();
  for (std::size_t i = 0; i < masks.size(); ++i) {
    const auto& m = masks[i];
    arr.push_back({{"label", i + 1},
                   {"score", m.score},
                   {"area", m.mask.area()},
                   {"crop", m.origin.crop_id},
                   {"prompt",
                    {{"x", m.origin.prompt.x},
                     {"y", m.origin.prompt.y},
                     {"origin", to_string(m.origin.prompt.origin)}}},
                   {"mask", mask_to_json(m.mask)}});
  }
  return arr;
}

}  // namespace matseg
