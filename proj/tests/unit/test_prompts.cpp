#include <gtest/gtest.h>

#include <random>
#include <set>
#include <sstream>

#include "matseg/prompts.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"
#include "support/synthetic.hpp"

using namespace matseg;

TEST(Presegment, BrightDisksMultiphase) {
  auto fg = fixtures::disk_mask(100, 80, 25, 25, 10);
  fg |= fixtures::disk_mask(100, 80, 70, 50, 12);
  fg |= fixtures::disk_mask(100, 80, 30, 62, 9);
  PromptConfig cfg;
  cfg.mode = PresegMode::multiphase;
  const auto p = presegment(fixtures::render(fg, 210, 40), cfg);
  EXPECT_FALSE(p.no_separation);
  EXPECT_EQ(region_table(p.labels).size(), 3u);
}

TEST(Presegment, GridCellsPolycrystalline) {
  auto img = Micrograph::filled(90, 90, 200);
  for (int i = 0; i < 90; ++i)
    for (int line : {30, 60}) {
      img.at(line, i) = 20;
      img.at(i, line) = 20;
    }
  // edges flank each dark line 2 px out; dilation 2 closes the line interior
  PromptConfig cfg;
  cfg.edge_dilation = 2;
  EXPECT_EQ(region_table(presegment(img, cfg).labels).size(), 9u);
}

TEST(Presegment, VoronoiRegionCountEqualsSeeds) {
  for (std::uint32_t seed : {1u, 2u, 3u}) {
    const int n = 20 + 10 * static_cast<int>(seed);
    const auto v = synthetic::voronoi(256, 256, n, seed);
    EXPECT_EQ(region_table(presegment(v.image, PromptConfig{}).labels).size(),
              static_cast<std::size_t>(n));
  }
}

TEST(Presegment, BlankMultiphaseFlagsNoSeparation) {
  PromptConfig cfg;
  cfg.mode = PresegMode::multiphase;
  const auto p = presegment(Micrograph::filled(20, 20, 90), cfg);
  EXPECT_TRUE(p.no_separation);
  EXPECT_TRUE(p.labels.foreground().empty());
}

TEST(Centroids, Basics) {
  EXPECT_TRUE(centroid_prompts(LabelMap(8, 8)).empty());
  LabelMap sq(20, 20);
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < 10; ++x) sq.at(x, y) = 1;
  EXPECT_EQ(centroid_prompts(sq), (std::vector<PromptPoint>{{4, 4, PromptOrigin::centroid}}));
}

TEST(Centroids, ConcaveRegionSnapsToNearestPixel) {
  // L shape: mean lies in the notch
  LabelMap lm(30, 30);
  for (int y = 0; y < 30; ++y)
    for (int x = 0; x < 4; ++x) lm.at(x, y) = 2;
  for (int y = 26; y < 30; ++y)
    for (int x = 0; x < 30; ++x) lm.at(x, y) = 2;
  const auto r = region_table(lm).front();
  ASSERT_NE(lm.at(static_cast<int>(std::ceil(r.cx - 0.5)), static_cast<int>(std::ceil(r.cy - 0.5))), 2u);
  const auto pts = centroid_prompts(lm);
  ASSERT_EQ(pts.size(), 1u);
  const auto [ox, oy] = oracle::nearest_pixel(lm, 2, r.cx, r.cy);
  EXPECT_EQ(pts[0].x, ox);
  EXPECT_EQ(pts[0].y, oy);
}

TEST(Centroids, OnePerRegionInside) {
  for (std::uint32_t seed = 0; seed < 10; ++seed) {
    const auto lm = synthetic::merged_cells(80, 60, 14, seed);
    const auto pts = centroid_prompts(lm);
    const auto regions = region_table(lm);
    ASSERT_EQ(pts.size(), regions.size());
    for (std::size_t k = 0; k < pts.size(); ++k)
      EXPECT_EQ(lm.at(pts[k].x, pts[k].y), regions[k].label);
  }
}

TEST(Grid, SideRule) {
  PromptConfig cfg;
  EXPECT_EQ(grid_side(256, cfg), 32);
  EXPECT_EQ(grid_side(0, cfg), 8);
  EXPECT_EQ(grid_side(100000, cfg), 64);
  cfg.grid = GridMode::native;
  EXPECT_EQ(adaptive_grid(500, 300, 7, cfg).size(), 1024u);
}

TEST(Grid, SingleCentrePoint) {
  PromptConfig cfg;
  cfg.grid_min_side = cfg.grid_max_side = 1;
  EXPECT_EQ(adaptive_grid(101, 51, 40, cfg),
            (std::vector<PromptPoint>{{51, 26, PromptOrigin::grid}}));
}

TEST(Grid, CountAndMonotone) {
  PromptConfig cfg;
  int prev = 0;
  for (int k = 0; k < 400; k += 7) {
    const auto pts = adaptive_grid(64, 48, k, cfg);
    const int s = grid_side(k, cfg);
    EXPECT_EQ(pts.size(), static_cast<std::size_t>(s * s));
    EXPECT_GE(s, prev);
    prev = s;
    for (const auto& p : pts) {
      EXPECT_GE(p.x, 0);
      EXPECT_LT(p.x, 64);
      EXPECT_GE(p.y, 0);
      EXPECT_LT(p.y, 48);
    }
  }
}

TEST(Edge, EmptyWithoutMargin) { EXPECT_TRUE(edge_densify(100, 100, 0, 5).empty()); }

TEST(Edge, BandLattice) {
  const auto pts = edge_densify(100, 100, 10, 5);
  std::set<std::pair<int, int>> got, want;
  for (const auto& p : pts) {
    got.insert({p.x, p.y});
    EXPECT_EQ(p.origin, PromptOrigin::edge);
  }
  for (int y = 0; y < 100; ++y)
    for (int x = 0; x < 100; ++x)
      if (x % 5 == 2 && y % 5 == 2 && std::min({x, y, 99 - x, 99 - y}) < 10) want.insert({x, y});
  EXPECT_EQ(got, want);
  EXPECT_THROW(edge_densify(30, 30, 15, 5), std::invalid_argument);
}

TEST(Fuse, FarApartConcatenates) {
  const std::vector<PromptPoint> c{{10, 10, PromptOrigin::centroid}};
  const std::vector<PromptPoint> g{{50, 50, PromptOrigin::grid}};
  const std::vector<PromptPoint> e{{90, 5, PromptOrigin::edge}};
  EXPECT_EQ(fuse_prompts(c, g, e, 5), (std::vector<PromptPoint>{c[0], g[0], e[0]}));
}

TEST(Fuse, CloseGridPointDropped) {
  const std::vector<PromptPoint> c{{10, 10, PromptOrigin::centroid}};
  const std::vector<PromptPoint> g{{12, 10, PromptOrigin::grid}};
  EXPECT_EQ(fuse_prompts(c, g, {}, 5), c);
}

TEST(Fuse, MatchesGreedyOracle) {
  std::mt19937 rng(41);
  std::uniform_int_distribution<int> coord(0, 99);
  for (int trial = 0; trial < 60; ++trial) {
    auto make = [&](int n, PromptOrigin o) {
      std::vector<PromptPoint> v;
      for (int i = 0; i < n; ++i) v.push_back({coord(rng), coord(rng), o});
      return v;
    };
    const auto c = make(static_cast<int>(rng() % 20), PromptOrigin::centroid);
    const auto g = make(static_cast<int>(rng() % 80), PromptOrigin::grid);
    const auto e = make(static_cast<int>(rng() % 40), PromptOrigin::edge);
    const double r = static_cast<double>(rng() % 12);
    const auto fused = fuse_prompts(c, g, e, r);
    EXPECT_EQ(fused, oracle::fuse(c, g, e, r));
    for (std::size_t i = 0; i < fused.size(); ++i)
      for (std::size_t j = i + 1; j < fused.size(); ++j) {
        if (fused[i].origin == PromptOrigin::centroid && fused[j].origin == PromptOrigin::centroid)
          continue;
        EXPECT_GE(std::hypot(fused[i].x - fused[j].x, fused[i].y - fused[j].y), r);
      }
  }
}

TEST(Generate, DeterministicAndNative) {
  const auto v = synthetic::voronoi(160, 120, 25, 9);
  PromptConfig cfg;
  const auto a = generate_prompts(v.image, cfg), b = generate_prompts(v.image, cfg);
  EXPECT_EQ(a.points, b.points);
  std::size_t centroids = 0;
  for (const auto& p : a.points) centroids += p.origin == PromptOrigin::centroid;
  EXPECT_EQ(centroids, 25u);

  cfg.grid = GridMode::native;
  const auto n = generate_prompts(v.image, cfg);
  EXPECT_EQ(n.points.size(), 1024u);

  std::ostringstream os;
  write_prompts_csv(os, {{3, 4, PromptOrigin::edge}});
  EXPECT_EQ(os.str(), "x,y,origin\n3,4,edge\n");
}

TEST(Generate, BlankMultiphaseHasNoCentroids) {
  PromptConfig cfg;
  cfg.mode = PresegMode::multiphase;
  const auto p = generate_prompts(Micrograph::filled(64, 64, 128), cfg);
  EXPECT_FALSE(p.points.empty());
  for (const auto& q : p.points) EXPECT_NE(q.origin, PromptOrigin::centroid);
}

TEST(Config, ValidationNamesKey) {
  PromptConfig cfg;
  cfg.grid_max_side = 2;
  try {
    cfg.validate();
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("prompt.grid_max_side"), std::string::npos);
  }
}
