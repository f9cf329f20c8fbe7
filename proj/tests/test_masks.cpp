#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oracles.hpp"
#include "pyrvit/masks.hpp"

using namespace pyrvit;

TEST_CASE("mask counts are exactly round(ratio * cells) across all geometries") {
  const int grids[] = {28, 14, 7, 12, 6, 3};
  for (int g : grids) {
    for (double ratio : {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9}) {
      const int expected = round_half_up(ratio * g * g);
      const MaskSpec ibot = sample_ibot_mask(g, g, ratio, 16, 11);
      const MaskSpec mae = sample_mae_mask(g, g, ratio, 16, 12);
      CHECK(ibot.masked_count() == expected);
      CHECK(mae.masked_count() == expected);
    }
  }
}

TEST_CASE("worked mask counts") {
  CHECK(sample_ibot_mask(14, 14, 0.3, 16, 0).masked_count() == 59);   // round(58.8)
  CHECK(sample_mae_mask(14, 14, 0.75, 16, 0).masked_count() == 147);  // 196 * 0.75
  CHECK(sample_mae_mask(7, 7, 0.75, 32, 0).masked_count() == 37);     // round(36.75)
}

TEST_CASE("ratio bounds") {
  CHECK_THROWS_AS(sample_ibot_mask(14, 14, 1.0, 16, 0), InvalidArgument);
  CHECK_THROWS_AS(sample_mae_mask(14, 14, 1.2, 16, 0), InvalidArgument);
  CHECK(sample_ibot_mask(14, 14, 0.0, 16, 0).masked_count() == 0);
}

TEST_CASE("ibot accumulation rounds are 4-connected and tile the mask") {
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    const int g = 14;
    const int target = round_half_up(0.3 * g * g);
    const auto rounds = ibot_mask_rounds(g, g, target, seed);
    int total = 0;
    std::vector<bool> seen(static_cast<std::size_t>(g) * g, false);
    for (const auto& round : rounds) {
      CHECK(!round.empty());
      CHECK(oracles::connected_components(round, g, g) == 1);
      for (int c : round) {
        CHECK(!seen[static_cast<std::size_t>(c)]);  // rounds are disjoint
        seen[static_cast<std::size_t>(c)] = true;
      }
      total += static_cast<int>(round.size());
    }
    CHECK(total == target);

    const MaskSpec mask = sample_ibot_mask(g, g, 0.3, 16, seed);
    int in_mask = 0;
    for (const auto& round : rounds) {
      for (int c : round) in_mask += mask.masked(c);
    }
    CHECK(in_mask == mask.masked_count());
  }
}

TEST_CASE("masks are deterministic per seed") {
  const MaskSpec a = sample_ibot_mask(14, 14, 0.3, 16, 5);
  const MaskSpec b = sample_ibot_mask(14, 14, 0.3, 16, 5);
  CHECK(a.grid == b.grid);
  const MaskSpec c = sample_ibot_mask(14, 14, 0.3, 16, 6);
  CHECK(a.grid != c.grid);
}

TEST_CASE("mae masking is uniform: per-cell frequency within 3 sigma") {
  const int g = 7;
  const double ratio = 0.75;
  const int draws = 10000;
  Eigen::MatrixXd freq = Eigen::MatrixXd::Zero(g, g);
  for (int d = 0; d < draws; ++d) {
    const MaskSpec m = sample_mae_mask(g, g, ratio, 32, 1000 + static_cast<std::uint64_t>(d));
    for (int y = 0; y < g; ++y) {
      for (int x = 0; x < g; ++x) freq(y, x) += m.grid(y, x);
    }
  }
  freq /= draws;
  const double p = 37.0 / 49.0;  // exact-count masking probability per cell
  const double sigma = std::sqrt(p * (1 - p) / draws);
  // Per-cell binomial CI, Bonferroni-adjusted across the 49 simultaneous
  // cells (z for familywise 1%).
  CHECK((freq.array() - p).abs().maxCoeff() <= 3.75 * sigma);
  // The average deviation must sit well inside a single-cell band.
  CHECK((freq.array() - p).abs().mean() <= sigma);
}

TEST_CASE("mask cells map to a disjoint pixel tiling of the crop") {
  const int crop = 224;
  const int p = 16;
  const int g = crop / p;
  const MaskSpec mask = sample_mae_mask(g, g, 0.75, p, 3);
  Eigen::MatrixXi coverage = Eigen::MatrixXi::Zero(crop, crop);
  for (int cell = 0; cell < mask.cells(); ++cell) {
    const int gy = cell / g;
    const int gx = cell % g;
    for (int y = 0; y < p; ++y) {
      for (int x = 0; x < p; ++x) coverage(gy * p + y, gx * p + x) += 1;
    }
  }
  CHECK(coverage.minCoeff() == 1);
  CHECK(coverage.maxCoeff() == 1);
  CHECK(static_cast<int>(mask.masked_cells().size() + mask.visible_cells().size()) == g * g);
}
