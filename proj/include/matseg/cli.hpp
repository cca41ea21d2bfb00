#pragma once

// Batch front end: run configuration, per-image outputs, manifests and the
// commands behind the matseg executable.

#include <algorithm>
#include <array>
#include <atomic>
#include <cctype>
#include <chrono>
#include <condition_variable>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "matseg/backend.hpp"
#include "matseg/classical.hpp"
#include "matseg/io.hpp"
#include "matseg/metrics.hpp"
#include "matseg/neural_backend.hpp"
#include "matseg/pipeline.hpp"
#include "matseg/postproc.hpp"
#include "matseg/prompts.hpp"

namespace matseg::cli {

namespace fs = std::filesystem;
using nlohmann::json;

#ifdef MATSEG_VERSION
inline constexpr const char* kVersion = MATSEG_VERSION;
#else
inline constexpr const char* kVersion = "0.0.0";
#endif

enum ExitCode { kOk = 0, kConfigError = 1, kImageFailures = 2 };

class ConfigError : public Error {
 public:
  using Error::Error;
};

enum class BackendKind { neural, oracle, baseline };
enum class BaselineMethod { otsu, adaptive, canny, watershed };

inline const char* to_string(BackendKind k) {
  switch (k) {
    case BackendKind::neural: return "neural";
    case BackendKind::oracle: return "oracle";
    default: return "baseline";
  }
}

inline const char* to_string(BaselineMethod m) {
  switch (m) {
    case BaselineMethod::otsu: return "otsu";
    case BaselineMethod::adaptive: return "adaptive";
    case BaselineMethod::canny: return "canny";
    default: return "watershed";
  }
}

inline std::optional<BaselineMethod> parse_baseline(const std::string& s) {
  for (auto m : {BaselineMethod::otsu, BaselineMethod::adaptive, BaselineMethod::canny,
                 BaselineMethod::watershed})
    if (s == to_string(m)) return m;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

namespace detail {

inline int as_int(const std::string& key, const json& v) {
  if (!v.is_number_integer()) throw ConfigError(key + ": expected an integer");
  return v.get<int>();
}
inline double as_number(const std::string& key, const json& v) {
  if (!v.is_number()) throw ConfigError(key + ": expected a number");
  return v.get<double>();
}
inline bool as_bool(const std::string& key, const json& v) {
  if (!v.is_boolean()) throw ConfigError(key + ": expected true or false");
  return v.get<bool>();
}
inline std::string as_string(const std::string& key, const json& v) {
  if (!v.is_string()) throw ConfigError(key + ": expected a string");
  return v.get<std::string>();
}

template <class E>
E as_choice(const std::string& key, const json& v, std::initializer_list<E> options) {
  const auto s = as_string(key, v);
  std::string names;
  for (auto o : options) {
    if (s == to_string(o)) return o;
    names += (names.empty() ? "" : "|") + std::string(to_string(o));
  }
  throw ConfigError(key + ": expected one of " + names + ", got '" + s + "'");
}

}  // namespace detail

/// Everything a run needs. Serialised as one JSON object with flat dotted keys;
/// unknown keys are errors.
struct RunConfig {
  PipelineConfig pipeline;

  BackendKind backend = BackendKind::neural;
  std::string model_dir;  // empty: MATSEG_MODEL_DIR
  std::string device = "cpu";
  std::string truth_dir;  // oracle: <stem>.png label maps

  BaselineMethod baseline = BaselineMethod::otsu;
  int adaptive_window = 31;
  int adaptive_offset = 5;
  double watershed_min_distance = 5.0;

  EvalKind kind = EvalKind::grain;
  std::optional<double> scale;  // micrometres per pixel
  double tolerance = 2.0;

  bool postproc = false;
  int close_radius = 1;
  int prune_len = 5;
  std::string phase_group;  // empty: every mask
  std::vector<ScreenRule> rules;

  std::string input_dir, output_dir;
  bool prompts_csv = false;

  static RunConfig from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    RunConfig c;
    for (const auto& [key, v] : j.items()) c.set(key, v);
    return c;
  }

  static RunConfig load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    json j;
    try {
      j = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    return from_json(j);
  }

  void set(const std::string& key, const json& v) {
    using namespace detail;
    auto& p = pipeline.prompt;
    if (key == "backend")
      backend = as_choice(key, v, {BackendKind::neural, BackendKind::oracle, BackendKind::baseline});
    else if (key == "backend.model_dir") model_dir = as_string(key, v);
    else if (key == "backend.device") device = as_string(key, v);
    else if (key == "backend.truth_dir") truth_dir = as_string(key, v);
    else if (key == "baseline.method")
      baseline = as_choice(key, v, {BaselineMethod::otsu, BaselineMethod::adaptive,
                                    BaselineMethod::canny, BaselineMethod::watershed});
    else if (key == "baseline.adaptive_window") adaptive_window = as_int(key, v);
    else if (key == "baseline.adaptive_offset") adaptive_offset = as_int(key, v);
    else if (key == "baseline.min_distance") watershed_min_distance = as_number(key, v);
    else if (key == "kind") kind = as_choice(key, v, {EvalKind::grain, EvalKind::phase});
    else if (key == "scale_um_per_px") scale = v.is_null() ? std::nullopt : std::optional(as_number(key, v));
    else if (key == "eval.tolerance") tolerance = as_number(key, v);
    else if (key == "io.input_dir") input_dir = as_string(key, v);
    else if (key == "io.output_dir") output_dir = as_string(key, v);
    else if (key == "io.prompts_csv") prompts_csv = as_bool(key, v);
    else if (key == "pipeline.crop_layers") pipeline.crop_layers = as_int(key, v);
    else if (key == "pipeline.crop_overlap") pipeline.crop_overlap = as_number(key, v);
    else if (key == "pipeline.score_min") pipeline.score_min = as_number(key, v);
    else if (key == "pipeline.nms_iou") pipeline.nms_iou = as_number(key, v);
    else if (key == "pipeline.min_mask_area") {
      const int a = as_int(key, v);
      if (a < 0) throw ConfigError(key + ": must be >= 0");
      pipeline.min_mask_area = static_cast<std::size_t>(a);
    } else if (key == "prompt.mode")
      p.mode = as_choice(key, v, {PresegMode::polycrystalline, PresegMode::multiphase});
    else if (key == "prompt.grid") p.grid = as_choice(key, v, {GridMode::adaptive, GridMode::native});
    else if (key == "prompt.use_centroids") p.use_centroids = as_bool(key, v);
    else if (key == "prompt.grid_alpha") p.grid_alpha = as_number(key, v);
    else if (key == "prompt.grid_min_side") p.grid_min_side = as_int(key, v);
    else if (key == "prompt.grid_max_side") p.grid_max_side = as_int(key, v);
    else if (key == "prompt.edge_margin") p.edge_margin = as_int(key, v);
    else if (key == "prompt.edge_spacing_factor") p.edge_spacing_factor = as_number(key, v);
    else if (key == "prompt.min_separation") p.min_separation = as_number(key, v);
    else if (key == "prompt.polarity") p.polarity = as_choice(key, v, {Polarity::bright, Polarity::dark});
    else if (key == "prompt.canny_sigma") p.edges.sigma = as_number(key, v);
    else if (key == "prompt.canny_low") p.edges.low = as_number(key, v);
    else if (key == "prompt.canny_high") p.edges.high = as_number(key, v);
    else if (key == "prompt.edge_dilation") p.edge_dilation = as_int(key, v);
    else if (key == "prompt.min_region_fraction") p.cutoff = SmallRegionCutoff::relative(as_number(key, v));
    else if (key == "prompt.min_region_area") {
      const int a = as_int(key, v);
      if (a < 0) throw ConfigError(key + ": must be >= 0");
      p.cutoff = SmallRegionCutoff::absolute(static_cast<std::size_t>(a));
    } else if (key == "postproc.enabled") postproc = as_bool(key, v);
    else if (key == "postproc.close_radius") close_radius = as_int(key, v);
    else if (key == "postproc.prune_len") prune_len = as_int(key, v);
    else if (key == "postproc.phase_group") phase_group = as_string(key, v);
    else if (key == "screening.rules") {
      if (!v.is_array()) throw ConfigError(key + ": expected an array of rules");
      rules.clear();
      for (std::size_t i = 0; i < v.size(); ++i) {
        try {
          rules.push_back(ScreenRule::from_json(v[i]));
        } catch (const std::exception& e) {
          throw ConfigError(key + "[" + std::to_string(i) + "]: " + e.what());
        }
      }
    } else
      throw ConfigError("unknown config key '" + key + "'");
  }

  /// Complete snapshot; from_json(to_json()) reproduces the config.
  json to_json() const {
    const auto& p = pipeline.prompt;
    json j;
    j["backend"] = to_string(backend);
    j["backend.model_dir"] = model_dir;
    j["backend.device"] = device;
    j["backend.truth_dir"] = truth_dir;
    j["baseline.method"] = to_string(baseline);
    j["baseline.adaptive_window"] = adaptive_window;
    j["baseline.adaptive_offset"] = adaptive_offset;
    j["baseline.min_distance"] = watershed_min_distance;
    j["kind"] = matseg::to_string(kind);
    j["scale_um_per_px"] = scale ? json(*scale) : json(nullptr);
    j["eval.tolerance"] = tolerance;
    j["io.input_dir"] = input_dir;
    j["io.output_dir"] = output_dir;
    j["io.prompts_csv"] = prompts_csv;
    j["pipeline.crop_layers"] = pipeline.crop_layers;
    j["pipeline.crop_overlap"] = pipeline.crop_overlap;
    j["pipeline.score_min"] = pipeline.score_min;
    j["pipeline.nms_iou"] = pipeline.nms_iou;
    j["pipeline.min_mask_area"] = pipeline.min_mask_area;
    j["prompt.mode"] = matseg::to_string(p.mode);
    j["prompt.grid"] = matseg::to_string(p.grid);
    j["prompt.use_centroids"] = p.use_centroids;
    j["prompt.grid_alpha"] = p.grid_alpha;
    j["prompt.grid_min_side"] = p.grid_min_side;
    j["prompt.grid_max_side"] = p.grid_max_side;
    j["prompt.edge_margin"] = p.edge_margin;
    j["prompt.edge_spacing_factor"] = p.edge_spacing_factor;
    j["prompt.min_separation"] = p.min_separation;
    j["prompt.polarity"] = matseg::to_string(p.polarity);
    j["prompt.canny_sigma"] = p.edges.sigma;
    j["prompt.canny_low"] = p.edges.low;
    j["prompt.canny_high"] = p.edges.high;
    j["prompt.edge_dilation"] = p.edge_dilation;
    if (p.cutoff.mode == SmallRegionCutoff::Mode::absolute)
      j["prompt.min_region_area"] = p.cutoff.min_area;
    else
      j["prompt.min_region_fraction"] = p.cutoff.fraction;
    j["postproc.enabled"] = postproc;
    j["postproc.close_radius"] = close_radius;
    j["postproc.prune_len"] = prune_len;
    j["postproc.phase_group"] = phase_group;
    auto& r = j["screening.rules"] = json::array();
    for (const auto& rule : rules) r.push_back(rule.to_json());
    return j;
  }

  /// Static checks; error messages start with the offending key.
  void validate() const {
    try {
      pipeline.validate();
    } catch (const std::invalid_argument& e) {
      const std::string what = e.what();
      throw ConfigError(what.rfind("prompt.", 0) == 0 ? what : "pipeline." + what);
    }
    if (device != "cpu" && device != "auto") throw ConfigError("backend.device: expected cpu or auto");
    if (adaptive_window < 3 || adaptive_window % 2 == 0)
      throw ConfigError("baseline.adaptive_window: must be odd and >= 3");
    if (!(watershed_min_distance > 0.0)) throw ConfigError("baseline.min_distance: must be > 0");
    if (scale && !(*scale > 0.0)) throw ConfigError("scale_um_per_px: must be > 0");
    if (!(tolerance >= 0.0)) throw ConfigError("eval.tolerance: must be >= 0");
    if (close_radius < 0) throw ConfigError("postproc.close_radius: must be >= 0");
    if (prune_len < 0) throw ConfigError("postproc.prune_len: must be >= 0");
    for (const auto& r : rules)
      if (r.group.empty() || r.group == kUnclassified)
        throw ConfigError("screening.rules: group must be a non-empty name other than '" +
                          std::string(kUnclassified) + "'");
  }
};

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

struct ImageRecord {
  std::string image;
  std::vector<std::string> outputs;
  std::map<std::string, double> timing_ms;
  json summary;
};

struct RunManifest {
  std::string command;
  json config;
  std::optional<std::int64_t> seed;
  std::vector<ImageRecord> images;
  std::vector<std::pair<std::string, std::string>> failures;  // image, error

  json to_json() const {
    json j;
    j["tool"] = "matseg";
    j["version"] = kVersion;
    j["command"] = command;
    j["config"] = config;
    j["seed"] = seed ? json(*seed) : json(nullptr);
    auto& imgs = j["images"] = json::array();
    for (const auto& r : images)
      imgs.push_back({{"image", r.image},
                      {"outputs", r.outputs},
                      {"timing_ms", r.timing_ms},
                      {"summary", r.summary}});
    auto& fails = j["failures"] = json::array();
    for (const auto& [img, err] : failures) fails.push_back({{"image", img}, {"error", err}});
    return j;
  }

  void write(const fs::path& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << to_json().dump(2) << '\n';
  }
};

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

/// Fixed 256-entry palette; labels index it through an integer hash so colours
/// do not depend on run order.
inline const std::array<std::array<std::uint8_t, 3>, 256>& palette() {
  static const auto table = [] {
    std::array<std::array<std::uint8_t, 3>, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t h = i * 0x9E3779B9u + 0x7F4A7C15u;
      h ^= h >> 16;
      h *= 0x85EBCA6Bu;
      h ^= h >> 13;
      // keep every colour away from black so it reads over dark grains
      t[i] = {static_cast<std::uint8_t>(64 + (h & 0xBF)),
              static_cast<std::uint8_t>(64 + ((h >> 8) & 0xBF)),
              static_cast<std::uint8_t>(64 + ((h >> 16) & 0xBF))};
    }
    return t;
  }();
  return table;
}

inline const std::array<std::uint8_t, 3>& label_color(LabelMap::Label label) {
  std::uint32_t h = label * 0x2C1B3C6Du;
  h ^= h >> 15;
  return palette()[h & 0xFF];
}

namespace detail {
inline Micrograph to_rgb(const Micrograph& img) {
  if (img.channels() == 3) return img;
  std::vector<std::uint8_t> px(img.pixel_count() * 3);
  auto src = img.pixels();
  for (std::size_t i = 0; i < img.pixel_count(); ++i) px[3 * i] = px[3 * i + 1] = px[3 * i + 2] = src[i];
  return Micrograph(img.width(), img.height(), 3, std::move(px), img.scale());
}
}  // namespace detail

/// Labelled pixels alpha-blended over the source; label 0 left as is.
inline Micrograph render_overlay(const Micrograph& img, const LabelMap& lm, double alpha = 0.45) {
  Micrograph out = detail::to_rgb(img);
  std::vector<std::uint8_t> px(out.pixels().begin(), out.pixels().end());
  for (std::size_t i = 0; i < lm.size(); ++i) {
    if (!lm[i]) continue;
    const auto& c = label_color(lm[i]);
    for (int k = 0; k < 3; ++k)
      px[3 * i + k] = static_cast<std::uint8_t>(std::lround((1.0 - alpha) * px[3 * i + k] + alpha * c[k]));
  }
  return Micrograph(out.width(), out.height(), 3, std::move(px), img.scale());
}

inline std::array<std::uint8_t, 3> origin_color(PromptOrigin o) {
  switch (o) {
    case PromptOrigin::centroid: return {230, 40, 40};
    case PromptOrigin::grid: return {40, 200, 60};
    default: return {50, 110, 240};
  }
}

/// Prompt points as 5x5 dots coloured by origin.
inline Micrograph render_prompts(const Micrograph& img, const std::vector<PromptPoint>& pts) {
  Micrograph out = detail::to_rgb(img);
  std::vector<std::uint8_t> px(out.pixels().begin(), out.pixels().end());
  for (const auto& p : pts) {
    const auto c = origin_color(p.origin);
    for (int dy = -2; dy <= 2; ++dy)
      for (int dx = -2; dx <= 2; ++dx) {
        const int x = p.x + dx, y = p.y + dy;
        if (x < 0 || y < 0 || x >= img.width() || y >= img.height()) continue;
        const std::size_t i = static_cast<std::size_t>(y) * img.width() + x;
        std::copy(c.begin(), c.end(), px.begin() + 3 * i);
      }
  }
  return Micrograph(out.width(), out.height(), 3, std::move(px), img.scale());
}

// ---------------------------------------------------------------------------
// Per-image processing
// ---------------------------------------------------------------------------

/// Classical label map for the baseline backend.
inline LabelMap baseline_labels(const Micrograph& img, const RunConfig& cfg) {
  const auto gray = to_grayscale(img);
  const auto& p = cfg.pipeline.prompt;
  switch (cfg.baseline) {
    case BaselineMethod::otsu:
      return connected_components(otsu_threshold(gray, p.polarity).mask, 8).labels;
    case BaselineMethod::adaptive:
      return connected_components(adaptive_threshold(gray, cfg.adaptive_window, cfg.adaptive_offset), 8)
          .labels;
    case BaselineMethod::canny: {
      auto edges = canny(gray, p.edges);
      if (p.edge_dilation > 0) edges = dilate(edges, p.edge_dilation);
      return connected_components(edges.inverted(), 4).labels;
    }
    default: {
      const auto fg = otsu_threshold(gray, p.polarity).mask;
      return watershed(gray, distance_peak_markers(fg, cfg.watershed_min_distance), &fg);
    }
  }
}

/// One mask per region of `lm`, score 1.
inline std::vector<ScoredMask> labels_to_masks(const LabelMap& lm) {
  const auto regions = region_table(lm);
  std::map<LabelMap::Label, std::size_t> slot;
  std::vector<ScoredMask> out;
  for (const auto& r : regions) {
    slot[r.label] = out.size();
    out.push_back({BinaryMask(lm.width(), lm.height()), 1.0,
                   MaskOrigin{0, {static_cast<int>(r.cx), static_cast<int>(r.cy), PromptOrigin::centroid}}});
  }
  for (std::size_t i = 0; i < lm.size(); ++i)
    if (lm[i]) out[slot[lm[i]]].mask.set(i);
  return out;
}

struct ImageOutputs {
  std::string stem;
  LabelMap labels;
  BinaryMask structure;  // boundary (grain) or phase mask
  std::string masks_json;
  Micrograph overlay;
  std::string stats_csv;
  std::optional<std::string> prompts_csv;
  std::map<std::string, double> timing_ms;
  json summary;
};

/// Post-processing, screening and statistics shared by every backend.
inline ImageOutputs finish_image(const Micrograph& img, std::string stem, const RunConfig& cfg,
                                 const std::vector<ScoredMask>& masks, LabelMap labels,
                                 const std::vector<PromptPoint>* prompts) {
  ImageOutputs out;
  out.stem = std::move(stem);
  const int w = img.width(), h = img.height();

  std::vector<std::string> group(masks.size(), kUnclassified);
  for (const auto& [g, idx] : screen_regions(masks, img, cfg.rules))
    for (auto i : idx) group[i] = g;

  if (cfg.kind == EvalKind::grain) {
    out.structure = label_to_boundary(labels);
    if (cfg.postproc) {
      out.structure = boundary_postprocess(out.structure, cfg.close_radius, cfg.prune_len);
      labels = boundary_to_partition(out.structure);
    }
  } else {
    std::vector<std::size_t> pick;
    for (std::size_t i = 0; i < masks.size(); ++i)
      if (cfg.phase_group.empty() || group[i] == cfg.phase_group) pick.push_back(i);
    out.structure = compose_phase_mask(masks, w, h, &pick);
    if (cfg.postproc && cfg.close_radius > 0)
      out.structure = morphology(out.structure, MorphOp::close, cfg.close_radius);
  }

  auto mj = masks_to_json(masks);
  for (std::size_t i = 0; i < masks.size(); ++i) mj[i]["group"] = group[i];
  out.masks_json = json{{"width", w}, {"height", h}, {"masks", mj}}.dump() + "\n";

  auto stats = compute_region_stats(labels, img, cfg.scale);
  for (auto& s : stats)
    for (const auto& r : cfg.rules)
      if (r.matches(s)) {
        s.group = r.group;
        break;
      }
  std::ostringstream csv;
  write_stats_csv(csv, stats);
  out.stats_csv = csv.str();
  out.summary = summarize(stats, img.pixel_count()).to_json();

  if (prompts && cfg.prompts_csv) {
    std::ostringstream pc;
    write_prompts_csv(pc, *prompts);
    out.prompts_csv = pc.str();
  }
  out.overlay = render_overlay(img, labels);
  out.labels = std::move(labels);
  return out;
}

/// Runs the configured backend on one image. `backend` is null for baselines.
inline ImageOutputs process_image(const Micrograph& img, const std::string& stem,
                                  const RunConfig& cfg, Backend* backend) {
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  if (cfg.backend == BackendKind::baseline) {
    auto lm = baseline_labels(img, cfg);
    const auto t1 = clock::now();
    const auto masks = labels_to_masks(lm);
    auto out = finish_image(img, stem, cfg, masks, std::move(lm), nullptr);
    out.timing_ms["baseline"] = std::chrono::duration<double, std::milli>(t1 - t0).count();
    out.timing_ms["postproc"] = std::chrono::duration<double, std::milli>(clock::now() - t1).count();
    return out;
  }
  auto r = segment_micrograph(img, cfg.pipeline, *backend);
  const auto t1 = clock::now();
  auto out = finish_image(img, stem, cfg, r.masks, std::move(r.labelmap), &r.prompts_used);
  out.timing_ms = r.timing_ms;
  out.timing_ms["postproc"] = std::chrono::duration<double, std::milli>(clock::now() - t1).count();
  return out;
}

inline std::vector<std::string> write_outputs(const ImageOutputs& o, const RunConfig& cfg,
                                              const fs::path& dir) {
  std::vector<std::string> names;
  auto put_text = [&](const std::string& name, const std::string& text) {
    std::ofstream f(dir / name, std::ios::binary);
    if (!f) throw IoError("cannot write " + (dir / name).string());
    f << text;
    names.push_back(name);
  };
  names.push_back(o.stem + "_labels.png");
  save_labelmap(o.labels, dir / names.back());
  names.push_back(o.stem + (cfg.kind == EvalKind::grain ? "_boundary.png" : "_phase.png"));
  save_mask(o.structure, dir / names.back());
  put_text(o.stem + "_masks.json", o.masks_json);
  names.push_back(o.stem + "_overlay.png");
  save_micrograph(o.overlay, dir / names.back());
  put_text(o.stem + "_stats.csv", o.stats_csv);
  if (o.prompts_csv) put_text(o.stem + "_prompts.csv", *o.prompts_csv);
  return names;
}

// ---------------------------------------------------------------------------
// Batch runner
// ---------------------------------------------------------------------------

inline bool is_image_file(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".tif" || ext == ".tiff" || ext == ".jpg" || ext == ".jpeg" ||
         ext == ".bmp";
}

/// Image files directly inside `dir`, sorted by name.
inline std::vector<fs::path> list_images(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && is_image_file(e.path())) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

/// Runs work(i, worker) on `jobs` threads and hands results to collect(i, r) on
/// the calling thread in index order.
template <class R, class Work, class Collect>
void run_ordered(std::size_t n, int jobs, Work work, Collect collect) {
  jobs = std::max(1, std::min<int>(jobs, static_cast<int>(std::max<std::size_t>(n, 1))));
  std::vector<std::optional<R>> slots(n);
  std::mutex mu;
  std::condition_variable ready;
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (int t = 0; t < jobs; ++t)
    pool.emplace_back([&, t] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        R r = work(i, t);
        std::lock_guard lock(mu);
        slots[i] = std::move(r);
        ready.notify_all();
      }
    });
  for (std::size_t i = 0; i < n; ++i) {
    std::unique_lock lock(mu);
    ready.wait(lock, [&] { return slots[i].has_value(); });
    R r = std::move(*slots[i]);
    slots[i].reset();
    lock.unlock();
    collect(i, std::move(r));
  }
  for (auto& th : pool) th.join();
}

struct Options {
  int jobs = 1;
  std::optional<std::int64_t> seed;
  std::string model_dir;  // --model-dir
};

namespace detail {

inline fs::path resolve_model_dir(const RunConfig& cfg, const Options& opt) {
  if (!opt.model_dir.empty()) return opt.model_dir;
  if (!cfg.model_dir.empty()) return cfg.model_dir;
  if (auto d = default_model_dir()) return *d;
  throw ConfigError("backend.model_dir: no model directory (set --model-dir or MATSEG_MODEL_DIR)");
}

inline void require_dir(const std::string& key, const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ConfigError(key + ": directory not found: " + dir.string());
}

}  // namespace detail

/// segment and baseline: per-image outputs plus manifest.json in `out_dir`.
inline int run_batch(const std::string& command, RunConfig cfg, const fs::path& in_dir,
                     const fs::path& out_dir, const Options& opt, std::ostream& log,
                     std::ostream& err) {
  std::unique_ptr<Backend> shared;
  std::vector<fs::path> images;
  try {
    cfg.input_dir = in_dir.string();
    cfg.output_dir = out_dir.string();
    cfg.validate();
    detail::require_dir("io.input_dir", in_dir);
    if (cfg.backend == BackendKind::neural) {
      const auto dir = detail::resolve_model_dir(cfg, opt);
      cfg.model_dir = dir.string();
      try {
        shared = load_neural_backend(ModelPaths::in_dir(dir), cfg.device);
      } catch (const BackendError& e) {
        throw ConfigError(std::string("backend.model_dir: ") + e.what());
      }
    } else if (cfg.backend == BackendKind::oracle) {
      detail::require_dir("backend.truth_dir", cfg.truth_dir);
    }
    images = list_images(in_dir);
    fs::create_directories(out_dir);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kConfigError;
  }

  std::vector<std::unique_ptr<Backend>> workers(static_cast<std::size_t>(std::max(1, opt.jobs)));
  if (shared) {
    workers[0] = std::move(shared);
    for (std::size_t t = 1; t < workers.size(); ++t) workers[t] = workers[0]->clone();
  }

  RunManifest manifest;
  manifest.command = command;
  manifest.config = cfg.to_json();
  manifest.seed = opt.seed;
  using Result = std::variant<ImageOutputs, std::string>;
  run_ordered<Result>(
      images.size(), opt.jobs,
      [&](std::size_t i, int t) -> Result {
        try {
          const auto img = load_micrograph(images[i]);
          const auto stem = images[i].stem().string();
          if (cfg.backend == BackendKind::oracle) {
            const auto truth_path = fs::path(cfg.truth_dir) / (stem + ".png");
            if (!fs::exists(truth_path)) throw IoError("no truth label map " + truth_path.string());
            OracleBackend oracle(load_labelmap(truth_path));
            return process_image(img, stem, cfg, &oracle);
          }
          return process_image(img, stem, cfg, workers[static_cast<std::size_t>(t)].get());
        } catch (const std::exception& e) {
          return std::string(e.what());
        }
      },
      [&](std::size_t i, Result r) {
        const auto name = images[i].filename().string();
        if (auto* msg = std::get_if<std::string>(&r)) {
          manifest.failures.emplace_back(name, *msg);
          return;
        }
        auto& o = std::get<ImageOutputs>(r);
        try {
          ImageRecord rec{name, write_outputs(o, cfg, out_dir), o.timing_ms, o.summary};
          manifest.images.push_back(std::move(rec));
          log << name << ": " << o.labels.max_label() << " labels\n";
        } catch (const std::exception& e) {
          manifest.failures.emplace_back(name, e.what());
        }
      });

  manifest.write(out_dir / "manifest.json");
  log << "processed " << manifest.images.size() << " of " << images.size() << " images\n";
  if (manifest.failures.empty()) return kOk;
  for (const auto& [name, what] : manifest.failures) err << "failed: " << name << ": " << what << '\n';
  return kImageFailures;
}

inline int cmd_segment(const RunConfig& cfg, const fs::path& in_dir, const fs::path& out_dir,
                       const Options& opt, std::ostream& log, std::ostream& err) {
  return run_batch("segment", cfg, in_dir, out_dir, opt, log, err);
}

inline int cmd_baseline(const std::string& method, RunConfig cfg, const fs::path& in_dir,
                        const fs::path& out_dir, const Options& opt, std::ostream& log,
                        std::ostream& err) {
  const auto m = parse_baseline(method);
  if (!m) {
    err << "error: unknown baseline method '" << method << "' (otsu|adaptive|canny|watershed)\n";
    return kConfigError;
  }
  cfg.backend = BackendKind::baseline;
  cfg.baseline = *m;
  return run_batch("baseline", std::move(cfg), in_dir, out_dir, opt, log, err);
}

/// Prompt CSV plus an overlay with origin-coloured points.
inline int cmd_prompts(const RunConfig& cfg, const fs::path& image, const fs::path& out_dir,
                       std::ostream& log, std::ostream& err) {
  try {
    cfg.validate();
    fs::create_directories(out_dir);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kConfigError;
  }
  try {
    const auto img = load_micrograph(image);
    const auto set = generate_prompts(img, cfg.pipeline.prompt);
    const auto stem = image.stem().string();
    {
      std::ofstream f(out_dir / (stem + "_prompts.csv"), std::ios::binary);
      if (!f) throw IoError("cannot write prompts CSV in " + out_dir.string());
      write_prompts_csv(f, set.points);
    }
    save_micrograph(render_prompts(img, set.points), out_dir / (stem + "_prompts.png"));
    std::map<PromptOrigin, std::size_t> count;
    for (const auto& p : set.points) ++count[p.origin];
    log << stem << ": " << set.points.size() << " prompts (centroid " << count[PromptOrigin::centroid]
        << ", grid " << count[PromptOrigin::grid] << ", edge " << count[PromptOrigin::edge] << ")\n";
    return kOk;
  } catch (const std::exception& e) {
    err << "failed: " << image.filename().string() << ": " << e.what() << '\n';
    return kImageFailures;
  }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

namespace detail {

/// 8-bit raster holding only 0 and 255 with some 255: a boundary map.
inline bool is_boundary_raster(const fs::path& path) {
  const auto lm = load_labelmap(path);
  bool any = false;
  for (auto l : lm.labels()) {
    if (l != 0 && l != 255) return false;
    any = any || l == 255;
  }
  return any && lm.max_label() == 255;
}

}  // namespace detail

/// Pairs <stem>.png references in `gt_dir` with <stem>_labels.png (grain),
/// <stem>_boundary.png (grain, boundary references) or <stem>_phase.png
/// (phase) predictions in `pred_dir`.
inline int cmd_evaluate(const fs::path& pred_dir, const fs::path& gt_dir, EvalKind kind,
                        double tolerance, const fs::path& out_dir, std::ostream& log,
                        std::ostream& err) {
  std::vector<fs::path> refs;
  try {
    detail::require_dir("pred_dir", pred_dir);
    detail::require_dir("gt_dir", gt_dir);
    if (!(tolerance >= 0.0)) throw ConfigError("eval.tolerance: must be >= 0");
    refs = list_images(gt_dir);
    fs::create_directories(out_dir);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kConfigError;
  }
  const std::string pred_suffix = kind == EvalKind::grain ? "_labels.png" : "_phase.png";

  std::vector<std::string> unmatched, failed;
  std::map<std::string, bool> seen;
  MetricReport report;
  report.dataset = gt_dir.filename().string();
  for (const auto& ref : refs) {
    const auto stem = ref.stem().string();
    seen[stem] = true;
    try {
      if (kind == EvalKind::phase) {
        const auto pred = pred_dir / (stem + "_phase.png");
        if (!fs::exists(pred)) {
          unmatched.push_back(pred.filename().string());
          continue;
        }
        report.rows.push_back(evaluate_pair(load_mask(pred), load_mask(ref), kind, tolerance, stem));
      } else if (detail::is_boundary_raster(ref)) {
        const auto pred = pred_dir / (stem + "_boundary.png");
        if (!fs::exists(pred)) {
          unmatched.push_back(pred.filename().string());
          continue;
        }
        report.rows.push_back(evaluate_pair(load_mask(pred), load_mask(ref), kind, tolerance, stem));
      } else {
        const auto pred = pred_dir / (stem + "_labels.png");
        if (!fs::exists(pred)) {
          unmatched.push_back(pred.filename().string());
          continue;
        }
        report.rows.push_back(
            evaluate_pair(load_labelmap(pred), load_labelmap(ref), kind, tolerance, stem));
      }
    } catch (const std::exception& e) {
      failed.push_back(stem + ": " + e.what());
    }
  }
  std::vector<std::string> preds;
  for (const auto& e : fs::directory_iterator(pred_dir)) {
    const auto name = e.path().filename().string();
    if (name.size() > pred_suffix.size() &&
        name.compare(name.size() - pred_suffix.size(), pred_suffix.size(), pred_suffix) == 0 &&
        !seen.count(name.substr(0, name.size() - pred_suffix.size())))
      preds.push_back(name);
  }
  std::sort(preds.begin(), preds.end());
  for (auto& p : preds) unmatched.push_back(p + " (no reference)");

  try {
    std::ofstream csv(out_dir / "metrics.csv");
    report.write_csv(csv);
    std::ofstream js(out_dir / "metrics.json");
    js << report.to_json().dump(2) << '\n';
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kImageFailures;
  }

  log << "images: " << report.rows.size() << '\n';
  for (const auto& [k, v] : report.means()) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "mean %s: %.6f\n", k.c_str(), v);
    log << buf;
  }
  for (const auto& u : unmatched) err << "unmatched: " << u << '\n';
  for (const auto& f : failed) err << "failed: " << f << '\n';
  return unmatched.empty() && failed.empty() ? kOk : kImageFailures;
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

/// Recomputes <stem>_stats.csv and summary.json from saved label maps and the
/// source images.
inline int cmd_stats(const RunConfig& cfg, const fs::path& image_dir, const fs::path& seg_dir,
                     const fs::path& out_dir, std::ostream& log, std::ostream& err) {
  std::vector<fs::path> images;
  try {
    cfg.validate();
    detail::require_dir("image_dir", image_dir);
    detail::require_dir("seg_dir", seg_dir);
    images = list_images(image_dir);
    fs::create_directories(out_dir);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kConfigError;
  }
  json summary = json::object();
  std::vector<std::string> failed;
  for (const auto& path : images) {
    const auto stem = path.stem().string();
    try {
      const auto lm_path = seg_dir / (stem + "_labels.png");
      if (!fs::exists(lm_path)) throw IoError("missing " + lm_path.filename().string());
      const auto img = load_micrograph(path);
      const auto lm = load_labelmap(lm_path);
      if (lm.width() != img.width() || lm.height() != img.height())
        throw IoError("label map size differs from the image");
      auto stats = compute_region_stats(lm, img, cfg.scale);
      for (auto& s : stats)
        for (const auto& r : cfg.rules)
          if (r.matches(s)) {
            s.group = r.group;
            break;
          }
      std::ofstream csv(out_dir / (stem + "_stats.csv"));
      write_stats_csv(csv, stats);
      summary[stem] = summarize(stats, img.pixel_count()).to_json();
      log << stem << ": " << stats.size() << " regions\n";
    } catch (const std::exception& e) {
      failed.push_back(stem + ": " + e.what());
    }
  }
  std::ofstream(out_dir / "summary.json") << summary.dump(2) << '\n';
  for (const auto& f : failed) err << "failed: " << f << '\n';
  return failed.empty() ? kOk : kImageFailures;
}

}  // namespace matseg::cli
