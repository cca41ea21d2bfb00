#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "matseg/cli.hpp"
#include "support/fixtures.hpp"
#include "support/synthetic.hpp"

using namespace matseg;
using namespace matseg::cli;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_json(const fs::path& p, const nlohmann::json& j) { std::ofstream(p) << j.dump(); }

// A small synthetic dataset: images in <root>/images, truth in <root>/truth.
fs::path make_dataset(const std::string& name, int count, int side = 96) {
  const auto root = fixtures::temp_dir(name);
  fs::create_directories(root / "images");
  fs::create_directories(root / "truth");
  for (int i = 0; i < count; ++i) {
    const auto v = synthetic::voronoi(side, side, 8 + i, 100 + i);
    const std::string stem = "img" + std::to_string(i);
    save_micrograph(v.image, root / "images" / (stem + ".png"));
    save_labelmap(v.truth, root / "truth" / (stem + ".png"));
  }
  return root;
}

RunConfig oracle_config(const fs::path& root) {
  RunConfig cfg;
  cfg.backend = BackendKind::oracle;
  cfg.truth_dir = (root / "truth").string();
  return cfg;
}

struct Run {
  int code;
  std::string out, err;
};

Run run_cli(const std::string& args) {
  const auto dir = fixtures::temp_dir("cli_run");
  const auto out = dir / "stdout.txt", err = dir / "stderr.txt";
  const std::string cmd = std::string(MATSEG_CLI) + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  return {WEXITSTATUS(status), slurp(out), slurp(err)};
}

}  // namespace

TEST(RunConfig, RoundTripAndUnknownKeys) {
  RunConfig c;
  c.pipeline.nms_iou = 0.5;
  c.pipeline.prompt.grid = GridMode::native;
  c.scale = 0.25;
  ScreenRule r;
  r.group = "bright";
  r.min_intensity = 120;
  c.rules.push_back(r);
  const auto j = c.to_json();
  EXPECT_EQ(RunConfig::from_json(j).to_json(), j);

  try {
    RunConfig::from_json({{"pipeline.nms_iuo", 0.5}});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("pipeline.nms_iuo"), std::string::npos);
  }
  EXPECT_THROW(RunConfig::from_json({{"pipeline.crop_layers", 1.5}}), ConfigError);
  EXPECT_THROW(RunConfig::from_json({{"prompt.mode", "liquid"}}), ConfigError);
  EXPECT_THROW(RunConfig::from_json(nlohmann::json::array()), ConfigError);
}

TEST(RunConfig, ValidationNamesKey) {
  auto c = RunConfig::from_json({{"pipeline.nms_iou", 1.5}});
  try {
    c.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("nms_iou"), std::string::npos);
  }
  c = RunConfig::from_json({{"prompt.grid_min_side", 0}});
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Palette, StableAndBright) {
  EXPECT_EQ(&label_color(7), &label_color(7));
  EXPECT_EQ(palette().size(), 256u);
  for (const auto& c : palette())
    for (auto v : c) EXPECT_GE(v, 64);
  const auto img = Micrograph::filled(4, 1, 100);
  LabelMap lm(4, 1);
  lm.at(1, 0) = 3;
  const auto o = render_overlay(img, lm);
  EXPECT_EQ(o.channels(), 3);
  EXPECT_EQ(o.pixels()[0], 100);
  EXPECT_NE(o.pixels()[3] + o.pixels()[4] + o.pixels()[5], 300);
}

TEST(Segment, OracleOneImage) {
  const auto root = make_dataset("cli_seg_one", 1);
  const auto out = root / "out";
  std::ostringstream log, err;
  ASSERT_EQ(cmd_segment(oracle_config(root), root / "images", out, {}, log, err), kOk) << err.str();
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(out)) files += e.is_regular_file();
  EXPECT_EQ(files, 6u);  // five per-image outputs plus the manifest

  const auto m = nlohmann::json::parse(slurp(out / "manifest.json"));
  ASSERT_EQ(m["images"].size(), 1u);
  for (const auto& name : m["images"][0]["outputs"]) EXPECT_TRUE(fs::exists(out / name.get<std::string>()));
  EXPECT_EQ(RunConfig::from_json(m["config"]).to_json(), m["config"]);

  const auto truth = load_labelmap(root / "truth" / "img0.png");
  EXPECT_GE(adjusted_rand_index(load_labelmap(out / "img0_labels.png"), truth), 0.99);
}

TEST(Segment, EmptyInputAndConfigErrors) {
  const auto root = fixtures::temp_dir("cli_seg_empty");
  fs::create_directories(root / "in");
  fs::create_directories(root / "truth");
  auto cfg = oracle_config(root);
  std::ostringstream log, err;
  ASSERT_EQ(cmd_segment(cfg, root / "in", root / "out", {}, log, err), kOk);
  EXPECT_EQ(nlohmann::json::parse(slurp(root / "out" / "manifest.json"))["images"].size(), 0u);

  cfg.pipeline.nms_iou = 1.5;
  EXPECT_EQ(cmd_segment(cfg, root / "in", root / "out", {}, log, err), kConfigError);
  EXPECT_NE(err.str().find("nms_iou"), std::string::npos);

  RunConfig neural;
  Options opt;
  opt.model_dir = (root / "no_models").string();
  err.str("");
  EXPECT_EQ(cmd_segment(neural, root / "in", root / "out", opt, log, err), kConfigError);
  EXPECT_NE(err.str().find("no_models"), std::string::npos);
}

TEST(Segment, PerImageFailureContinues) {
  const auto root = make_dataset("cli_seg_fail", 2);
  std::ofstream(root / "images" / "broken.png") << "not a png";
  std::ostringstream log, err;
  EXPECT_EQ(cmd_segment(oracle_config(root), root / "images", root / "out", {}, log, err),
            kImageFailures);
  EXPECT_NE(err.str().find("broken.png"), std::string::npos);
  const auto m = nlohmann::json::parse(slurp(root / "out" / "manifest.json"));
  EXPECT_EQ(m["images"].size(), 2u);
  EXPECT_EQ(m["failures"].size(), 1u);
}

TEST(Segment, DeterministicAcrossJobCounts) {
  const auto root = make_dataset("cli_seg_det", 4);
  auto cfg = oracle_config(root);
  cfg.prompts_csv = true;
  std::ostringstream log, err;
  Options one, four;
  four.jobs = 4;
  ASSERT_EQ(cmd_segment(cfg, root / "images", root / "a", one, log, err), kOk);
  ASSERT_EQ(cmd_segment(cfg, root / "images", root / "b", four, log, err), kOk);
  for (int i = 0; i < 4; ++i)
    for (const char* suffix : {"_labels.png", "_masks.json", "_prompts.csv", "_boundary.png"}) {
      const auto name = "img" + std::to_string(i) + suffix;
      EXPECT_EQ(slurp(root / "a" / name), slurp(root / "b" / name)) << name;
    }
}

TEST(Segment, NeuralBackendFromModelDir) {
  const auto root = fixtures::temp_dir("cli_seg_neural");
  const fs::path data = MATSEG_TEST_DATA;
  fs::create_directories(root / "models");
  fs::create_directories(root / "in");
  fs::copy_file(data / "tiny_encoder.onnx", root / "models" / "encoder.onnx");
  fs::copy_file(data / "tiny_decoder.onnx", root / "models" / "decoder.onnx");
  fs::copy_file(data / "metadata.json", root / "models" / "metadata.json");
  save_micrograph(fixtures::render(fixtures::disk_mask(64, 64, 32, 32, 12), 200, 40),
                  root / "in" / "disk.png");
  RunConfig cfg;
  cfg.kind = EvalKind::phase;
  cfg.pipeline.prompt.mode = PresegMode::multiphase;
  Options opt;
  opt.model_dir = (root / "models").string();
  opt.jobs = 2;
  std::ostringstream log, err;
  ASSERT_EQ(cmd_segment(cfg, root / "in", root / "out", opt, log, err), kOk) << err.str();
  EXPECT_FALSE(load_mask(root / "out" / "disk_phase.png").empty());
}

TEST(Evaluate, IdentityAndMissing) {
  const auto root = make_dataset("cli_eval", 3);
  fs::create_directories(root / "pred");
  for (int i = 0; i < 3; ++i)
    fs::copy_file(root / "truth" / ("img" + std::to_string(i) + ".png"),
                  root / "pred" / ("img" + std::to_string(i) + "_labels.png"));
  std::ostringstream log, err;
  ASSERT_EQ(cmd_evaluate(root / "pred", root / "truth", EvalKind::grain, 2.0, root / "rep", log, err), kOk);
  EXPECT_NE(log.str().find("mean ARI: 1.000000"), std::string::npos) << log.str();
  EXPECT_TRUE(fs::exists(root / "rep" / "metrics.csv"));

  fs::remove(root / "truth" / "img1.png");
  log.str("");
  err.str("");
  EXPECT_EQ(cmd_evaluate(root / "pred", root / "truth", EvalKind::grain, 2.0, root / "rep", log, err),
            kImageFailures);
  EXPECT_NE(err.str().find("img1_labels.png"), std::string::npos);
}

TEST(Evaluate, MatchesLibraryOnBaselineOutputs) {
  const auto root = make_dataset("cli_eval_lib", 3);
  RunConfig cfg;
  std::ostringstream log, err;
  ASSERT_EQ(cmd_baseline("watershed", cfg, root / "images", root / "ws", {}, log, err), kOk) << err.str();
  ASSERT_EQ(cmd_evaluate(root / "ws", root / "truth", EvalKind::grain, 2.0, root / "rep", log, err), kOk)
      << err.str();
  const auto report = nlohmann::json::parse(slurp(root / "rep" / "metrics.json"));
  ASSERT_EQ(report["per_image"].size(), 3u);
  for (const auto& row : report["per_image"]) {
    const std::string stem = row["image"];
    const auto expected = evaluate_pair(load_labelmap(root / "ws" / (stem + "_labels.png")),
                                        load_labelmap(root / "truth" / (stem + ".png")),
                                        EvalKind::grain, 2.0, stem);
    for (const auto& [k, v] : expected.values) EXPECT_DOUBLE_EQ(row["metrics"][k].get<double>(), v) << k;
  }
}

TEST(Evaluate, BoundaryReferences) {
  const auto root = make_dataset("cli_eval_bnd", 2);
  fs::create_directories(root / "gt");
  for (int i = 0; i < 2; ++i) {
    const auto stem = "img" + std::to_string(i);
    const auto truth = load_labelmap(root / "truth" / (stem + ".png"));
    save_mask(label_to_boundary(truth), root / "gt" / (stem + ".png"));
  }
  std::ostringstream log, err;
  ASSERT_EQ(cmd_segment(oracle_config(root), root / "images", root / "seg", {}, log, err), kOk);
  ASSERT_EQ(cmd_evaluate(root / "seg", root / "gt", EvalKind::grain, 2.0, root / "rep", log, err), kOk)
      << err.str();
  EXPECT_NE(log.str().find("mean F1: 1.000000"), std::string::npos) << log.str();
}

TEST(Prompts, NativeBlankAndDeterministic) {
  const auto root = fixtures::temp_dir("cli_prompts");
  const auto v = synthetic::voronoi(128, 96, 12, 4);
  save_micrograph(v.image, root / "v.png");
  save_micrograph(Micrograph::filled(80, 80, 128), root / "blank.png");

  RunConfig native;
  native.pipeline.prompt.grid = GridMode::native;
  std::ostringstream log, err;
  ASSERT_EQ(cmd_prompts(native, root / "v.png", root / "n", log, err), kOk);
  const auto csv = slurp(root / "n" / "v_prompts.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1025);
  EXPECT_TRUE(fs::exists(root / "n" / "v_prompts.png"));

  RunConfig multi;
  multi.pipeline.prompt.mode = PresegMode::multiphase;
  ASSERT_EQ(cmd_prompts(multi, root / "blank.png", root / "b", log, err), kOk);
  const auto blank = slurp(root / "b" / "blank_prompts.csv");
  EXPECT_EQ(blank.find("centroid"), std::string::npos);
  EXPECT_NE(blank.find("grid"), std::string::npos);

  ASSERT_EQ(cmd_prompts(RunConfig{}, root / "v.png", root / "d1", log, err), kOk);
  ASSERT_EQ(cmd_prompts(RunConfig{}, root / "v.png", root / "d2", log, err), kOk);
  EXPECT_EQ(slurp(root / "d1" / "v_prompts.csv"), slurp(root / "d2" / "v_prompts.csv"));
}

TEST(Baseline, OtsuAndUnknown) {
  const auto root = fixtures::temp_dir("cli_baseline");
  fs::create_directories(root / "in");
  const auto fg = fixtures::disk_mask(64, 64, 20, 20, 10);
  save_micrograph(fixtures::render(fg, 210, 30), root / "in" / "bimodal.png");
  RunConfig cfg;
  cfg.kind = EvalKind::phase;
  std::ostringstream log, err;
  ASSERT_EQ(cmd_baseline("otsu", cfg, root / "in", root / "out", {}, log, err), kOk);
  EXPECT_EQ(load_mask(root / "out" / "bimodal_phase.png"), fg);
  EXPECT_EQ(cmd_baseline("snake", cfg, root / "in", root / "out", {}, log, err), kConfigError);
}

TEST(Stats, RecomputesFromLabelMaps) {
  const auto root = make_dataset("cli_stats", 2);
  std::ostringstream log, err;
  ASSERT_EQ(cmd_segment(oracle_config(root), root / "images", root / "seg", {}, log, err), kOk);
  RunConfig cfg;
  ASSERT_EQ(cmd_stats(cfg, root / "images", root / "seg", root / "st", log, err), kOk) << err.str();
  EXPECT_EQ(slurp(root / "st" / "img0_stats.csv"), slurp(root / "seg" / "img0_stats.csv"));
  const auto summary = nlohmann::json::parse(slurp(root / "st" / "summary.json"));
  EXPECT_EQ(summary.size(), 2u);
}

TEST(Binary, ExitCodes) {
  const auto root = make_dataset("cli_binary", 1);
  write_json(root / "bad.json", {{"pipeline.nms_iou", 1.5}});
  auto r = run_cli("--config " + (root / "bad.json").string() + " segment " +
                   (root / "images").string() + " " + (root / "out").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("nms_iou"), std::string::npos);

  write_json(root / "typo.json", {{"pipeline.nms_iuo", 0.5}});
  r = run_cli("--config " + (root / "typo.json").string() + " segment a b");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("nms_iuo"), std::string::npos);

  write_json(root / "oracle.json", {{"backend", "oracle"}, {"backend.truth_dir", (root / "truth").string()}});
  r = run_cli("--config " + (root / "oracle.json").string() + " --jobs 2 segment " +
              (root / "images").string() + " " + (root / "out").string());
  EXPECT_EQ(r.code, 0) << r.err;

  r = run_cli("evaluate " + (root / "out").string() + " " + (root / "truth").string());
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("mean ARI"), std::string::npos);

  r = run_cli("baseline snake " + (root / "images").string() + " " + (root / "b").string());
  EXPECT_EQ(r.code, 1);
}
