// matseg: segment, evaluate and characterise micrographs from the command line.

#include <iostream>

#include <CLI11.hpp>

#include "matseg/cli.hpp"

namespace cli = matseg::cli;

int main(int argc, char** argv) {
  CLI::App app{"Promptable microstructure segmentation toolkit"};
  app.set_version_flag("--version", std::string(cli::kVersion));
  app.require_subcommand(1);

  std::string config_path;
  cli::Options opt;
  std::int64_t seed = 0;
  app.add_option("--config", config_path, "run configuration (JSON, flat dotted keys)");
  app.add_option("--jobs", opt.jobs, "worker threads")->check(CLI::PositiveNumber);
  auto* seed_opt = app.add_option("--seed", seed, "reserved; the pipeline is deterministic");
  app.add_option("--model-dir", opt.model_dir, "model directory (overrides MATSEG_MODEL_DIR)");

  std::string in_dir, out_dir, method, image, pred_dir, gt_dir, kind = "grain", seg_dir;
  double tolerance = 2.0;

  auto* segment = app.add_subcommand("segment", "segment every image in a directory");
  segment->add_option("input", in_dir, "input image directory");
  segment->add_option("output", out_dir, "output directory");

  auto* baseline = app.add_subcommand("baseline", "classical segmentation in the segment layout");
  baseline->add_option("method", method, "otsu|adaptive|canny|watershed")->required();
  baseline->add_option("input", in_dir, "input image directory");
  baseline->add_option("output", out_dir, "output directory");

  auto* prompts = app.add_subcommand("prompts", "export prompt points for one image");
  prompts->add_option("image", image, "input image")->required();
  prompts->add_option("output", out_dir, "output directory")->required();

  auto* evaluate = app.add_subcommand("evaluate", "score predictions against references");
  evaluate->add_option("pred", pred_dir, "prediction directory")->required();
  evaluate->add_option("gt", gt_dir, "reference directory")->required();
  auto* kind_opt = evaluate->add_option("--kind", kind, "grain|phase")
                       ->check(CLI::IsMember({"grain", "phase"}));
  auto* tol_opt = evaluate->add_option("--tolerance", tolerance, "boundary match tolerance (px)");
  auto* eval_out = evaluate->add_option("--out", out_dir, "report directory (default: pred)");

  auto* stats = app.add_subcommand("stats", "region statistics from saved label maps");
  stats->add_option("images", in_dir, "source image directory")->required();
  stats->add_option("segmentation", seg_dir, "directory with <stem>_labels.png")->required();
  stats->add_option("--out", out_dir, "output directory (default: segmentation)");

  CLI11_PARSE(app, argc, argv);
  if (*seed_opt) opt.seed = seed;

  cli::RunConfig cfg;
  if (!config_path.empty()) {
    try {
      cfg = cli::RunConfig::load(config_path);
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << '\n';
      return cli::kConfigError;
    }
  }
  auto need_dirs = [&]() -> bool {
    if (in_dir.empty()) in_dir = cfg.input_dir;
    if (out_dir.empty()) out_dir = cfg.output_dir;
    if (in_dir.empty() || out_dir.empty()) {
      std::cerr << "error: io.input_dir/io.output_dir: input and output directories are required\n";
      return false;
    }
    return true;
  };

  if (*segment) {
    if (!need_dirs()) return cli::kConfigError;
    return cli::cmd_segment(cfg, in_dir, out_dir, opt, std::cout, std::cerr);
  }
  if (*baseline) {
    if (!need_dirs()) return cli::kConfigError;
    return cli::cmd_baseline(method, cfg, in_dir, out_dir, opt, std::cout, std::cerr);
  }
  if (*prompts) return cli::cmd_prompts(cfg, image, out_dir, std::cout, std::cerr);
  if (*evaluate) {
    const auto k = *kind_opt ? (kind == "grain" ? matseg::EvalKind::grain : matseg::EvalKind::phase)
                             : cfg.kind;
    if (!*tol_opt) tolerance = cfg.tolerance;
    if (!*eval_out) out_dir = pred_dir;
    return cli::cmd_evaluate(pred_dir, gt_dir, k, tolerance, out_dir, std::cout, std::cerr);
  }
  if (out_dir.empty()) out_dir = seg_dir;
  return cli::cmd_stats(cfg, in_dir, seg_dir, out_dir, std::cout, std::cerr);
}
