#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <random>

#include "matseg/metrics.hpp"
#include "matseg/neural_backend.hpp"
#include "matseg/pipeline.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"
#include "support/synthetic.hpp"

using namespace matseg;
namespace fs = std::filesystem;

namespace {

ScoredMask sm(BinaryMask m, double s) { return {std::move(m), s, {}}; }

class ThrowingBackend final : public Backend {
 public:
  Capabilities capabilities() const override { return {"throwing", 0, 0, 0, 0}; }
  ImageEmbedding encode(const Micrograph& img, const CropBox&) override {
    ImageEmbedding e;
    e.image_width = img.width();
    e.image_height = img.height();
    return e;
  }
  PredictOutcome predict(const ImageEmbedding&, const PromptPoint&) override {
    throw BackendError("boom");
  }
  std::unique_ptr<Backend> clone() const override { return std::make_unique<ThrowingBackend>(); }
};

}  // namespace

TEST(Crops, LayerZeroIsFullFrame) {
  const auto c = generate_crops(37, 21, 0, 0.34);
  ASSERT_EQ(c.size(), 1u);
  EXPECT_EQ(c[0].x1, 37);
  EXPECT_EQ(c[0].y1, 21);
}

TEST(Crops, HandValues) {
  // L = 100, n = 2, overlap 0.34: Lc = ceil(67) = 67, origins 0 and 33
  const auto c = generate_crops(100, 100, 1, 0.34);
  ASSERT_EQ(c.size(), 5u);
  EXPECT_EQ(c[1].x0, 0);
  EXPECT_EQ(c[1].x1, 67);
  EXPECT_EQ(c[2].x0, 33);
  EXPECT_EQ(c[2].x1, 100);
  EXPECT_EQ(c[3].y0, 33);
  EXPECT_EQ(c[4].layer, 1);
  EXPECT_THROW(generate_crops(10, 10, -1, 0.3), std::invalid_argument);
  EXPECT_THROW(generate_crops(10, 10, 1, 1.0), std::invalid_argument);
}

TEST(Crops, LayersCoverTheFrame) {
  std::mt19937 rng(51);
  for (int trial = 0; trial < 40; ++trial) {
    const int w = 16 + static_cast<int>(rng() % 300), h = 16 + static_cast<int>(rng() % 300);
    const int layers = static_cast<int>(rng() % 4);
    const double ov = (rng() % 90) / 100.0;
    const auto crops = generate_crops(w, h, layers, ov);
    std::size_t expected = 0;
    for (int i = 0; i <= layers; ++i) expected += std::size_t{1} << (2 * i);
    ASSERT_EQ(crops.size(), expected);
    for (int layer = 0; layer <= layers; ++layer) {
      BinaryMask cov(w, h);
      for (const auto& c : crops) {
        EXPECT_GE(c.x0, 0);
        EXPECT_LE(c.x1, w);
        EXPECT_GE(c.y0, 0);
        EXPECT_LE(c.y1, h);
        if (c.layer == layer) cov |= fixtures::rect_mask(w, h, c.x0, c.y0, c.x1, c.y1);
      }
      EXPECT_EQ(cov.area(), static_cast<std::size_t>(w) * h);
    }
  }
}

TEST(Nms, HandCases) {
  const auto a = fixtures::rect_mask(20, 20, 0, 0, 10, 10);
  EXPECT_TRUE(nms({}, 0.7).empty());
  EXPECT_EQ(nms({sm(a, 0.5)}, 0.7).size(), 1u);
  const auto kept = nms({sm(a, 0.8), sm(a, 0.9)}, 0.7);
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_EQ(kept[0].score, 0.9);
  EXPECT_THROW(nms({}, 0.0), std::invalid_argument);
}

TEST(Nms, MatchesOracleAndInvariants) {
  std::mt19937 rng(52);
  for (int trial = 0; trial < 60; ++trial) {
    std::vector<ScoredMask> ms;
    const int n = 1 + static_cast<int>(rng() % 12);
    for (int k = 0; k < n; ++k) {
      const int x0 = static_cast<int>(rng() % 20), y0 = static_cast<int>(rng() % 20);
      const int x1 = x0 + 1 + static_cast<int>(rng() % 12), y1 = y0 + 1 + static_cast<int>(rng() % 12);
      ms.push_back(sm(fixtures::rect_mask(32, 32, x0, y0, x1, y1), (rng() % 5) / 4.0));
    }
    const double thr = 0.1 + (rng() % 9) / 10.0;
    const auto kept = nms(ms, thr);
    const auto want = oracle::nms(ms, thr);
    ASSERT_EQ(kept.size(), want.size());
    for (std::size_t i = 0; i < kept.size(); ++i) {
      EXPECT_EQ(kept[i].mask, ms[want[i]].mask);
      EXPECT_EQ(kept[i].score, ms[want[i]].score);
    }
    for (std::size_t i = 0; i < kept.size(); ++i)
      for (std::size_t j = i + 1; j < kept.size(); ++j)
        EXPECT_LE(oracle::iou(kept[i].mask, kept[j].mask), thr);
    const auto again = nms(kept, thr);
    ASSERT_EQ(again.size(), kept.size());
    for (std::size_t i = 0; i < kept.size(); ++i) EXPECT_EQ(again[i].mask, kept[i].mask);
  }
}

TEST(Merge, DisjointAndContested) {
  const auto a = fixtures::rect_mask(20, 10, 0, 0, 5, 10), b = fixtures::rect_mask(20, 10, 10, 0, 15, 10);
  auto r = merge_and_label({{sm(a, 0.9)}, {sm(b, 0.85)}}, 20, 10, 0.7);
  EXPECT_EQ(r.masks.size(), 2u);
  EXPECT_EQ(r.labelmap.at(2, 2), 1u);
  EXPECT_EQ(r.labelmap.at(12, 2), 2u);
  EXPECT_EQ(r.labelmap.at(7, 2), 0u);

  // overlap below the threshold: both kept, higher score owns the shared pixels
  const auto c = fixtures::rect_mask(20, 10, 0, 0, 10, 10), d = fixtures::rect_mask(20, 10, 6, 0, 16, 10);
  r = merge_and_label({{sm(d, 0.8)}, {sm(c, 0.9)}}, 20, 10, 0.7);
  ASSERT_EQ(r.masks.size(), 2u);
  EXPECT_EQ(r.labelmap.at(8, 5), 1u);
  EXPECT_EQ(r.masks[0].score, 0.9);
  EXPECT_EQ(r.labelmap.at(12, 5), 2u);
}

TEST(SegmentCrop, KeepsOnlyConfidentTopCandidate) {
  const fs::path d = MATSEG_TEST_DATA;
  NeuralBackend be({d / "tiny_encoder.onnx", d / "tiny_decoder.onnx", d / "metadata.json"});
  const auto img = Micrograph::filled(64, 64, 120);
  PipelineConfig cfg;
  const std::vector<PromptPoint> pts{{32, 32, PromptOrigin::grid}};
  const auto out = segment_crop(img, CropBox::full(64, 64), 0, be, pts, cfg);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_NEAR(out[0].score, 0.9, 1e-6);

  cfg.score_min = 0.95;
  EXPECT_TRUE(segment_crop(img, CropBox::full(64, 64), 0, be, pts, cfg).empty());
  EXPECT_TRUE(segment_crop(img, CropBox::full(64, 64), 0, be, {}, cfg).empty());
}

TEST(SegmentCrop, PastesIntoFullFrame) {
  const auto v = synthetic::voronoi(60, 40, 5, 8);
  OracleBackend be(v.truth);
  const CropBox crop{20, 10, 50, 40, 1};
  PipelineConfig cfg;
  cfg.min_mask_area = 1;
  const std::vector<PromptPoint> pts{{30, 20, PromptOrigin::grid}, {2, 2, PromptOrigin::grid}};
  const auto out = segment_crop(v.image, crop, 3, be, pts, cfg);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].origin.crop_id, 3);
  EXPECT_EQ(out[0].mask.width(), 60);
  const auto l = v.truth.at(30, 20);
  for (int y = 0; y < 40; ++y)
    for (int x = 0; x < 60; ++x)
      EXPECT_EQ(out[0].mask.get(x, y), crop.contains(x, y) && v.truth.at(x, y) == l);
}

TEST(Pipeline, BlankImageGivesEmptyOutput) {
  PipelineConfig cfg;
  cfg.prompt.mode = PresegMode::multiphase;
  OracleBackend be(LabelMap(64, 64));
  const auto r = segment_micrograph(Micrograph::filled(64, 64, 77), cfg, be);
  EXPECT_TRUE(r.masks.empty());
  EXPECT_TRUE(r.labelmap.foreground().empty());
  EXPECT_TRUE(r.preseg.no_separation);
}

TEST(Pipeline, OracleRecoversVoronoi) {
  const auto v = synthetic::voronoi(192, 160, 24, 12);
  OracleBackend be(v.truth);
  PipelineConfig cfg;
  const auto r = segment_micrograph(v.image, cfg, be);
  EXPECT_GE(adjusted_rand_index(r.labelmap, v.truth), 0.99);
  // clipped crop masks may survive NMS but never own a pixel
  EXPECT_EQ(region_table(r.labelmap).size(), 24u);
  for (const char* stage : {"prompts", "crops", "predict", "merge"})
    EXPECT_TRUE(r.timing_ms.count(stage)) << stage;

  const auto again = segment_micrograph(v.image, cfg, be);
  EXPECT_TRUE(std::ranges::equal(again.labelmap.labels(), r.labelmap.labels()));
}

TEST(Pipeline, StageErrorsAreTagged) {
  PipelineConfig cfg;
  cfg.nms_iou = 1.5;
  OracleBackend oracle(LabelMap(32, 32));
  try {
    segment_micrograph(Micrograph::filled(32, 32), cfg, oracle);
    FAIL();
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "config");
    EXPECT_NE(std::string(e.what()).find("nms_iou"), std::string::npos);
  }

  ThrowingBackend bad;
  const auto v = synthetic::voronoi(64, 64, 6, 2);
  try {
    segment_micrograph(v.image, PipelineConfig{}, bad);
    FAIL();
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "predict");
    EXPECT_NE(std::string(e.what()).find("crop 0"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("boom"), std::string::npos);
  }
}

TEST(Pipeline, MasksJson) {
  const auto j = masks_to_json({sm(fixtures::rect_mask(8, 8, 1, 1, 3, 3), 0.95)});
  ASSERT_EQ(j.size(), 1u);
  EXPECT_EQ(j[0]["label"], 1);
  EXPECT_EQ(j[0]["area"], 4);
  EXPECT_EQ(mask_from_json(j[0]["mask"]), fixtures::rect_mask(8, 8, 1, 1, 3, 3));
}
