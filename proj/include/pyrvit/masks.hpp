#pragma once

#include "pyrvit/common.hpp"
#include "pyrvit/rng.hpp"

#include <vector>

namespace pyrvit {

// Round-half-up; the fixed rounding rule for mask counts.
inline int round_half_up(double x) { return static_cast<int>(std::floor(x + 0.5)); }

// Boolean patch-grid mask; true = masked. The masked count is exactly
// round(target_ratio * cells).
struct MaskSpec {
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> grid;
  int patch_size = 0;
  double target_ratio = 0.0;

  int grid_h() const { return static_cast<int>(grid.rows()); }
  int grid_w() const { return static_cast<int>(grid.cols()); }
  int cells() const { return grid_h() * grid_w(); }
  int masked_count() const { return static_cast<int>(grid.count()); }
  bool masked(int cell) const { return grid(cell / grid_w(), cell % grid_w()); }

  std::vector<int> masked_cells() const;   // ascending flat indices
  std::vector<int> visible_cells() const;  // ascending flat indices
};

// Block-accumulation rounds for the iBOT mask: each round grows one
// 4-connected region of not-yet-masked cells until the exact total is hit.
// Exposed so tests can verify per-round contiguity.
std::vector<std::vector<int>> ibot_mask_rounds(int grid_h, int grid_w, int target,
                                               std::uint64_t seed);

// Block-wise random mask at exactly round(ratio * cells) cells.
MaskSpec sample_ibot_mask(int grid_h, int grid_w, double ratio, int patch_size,
                          std::uint64_t seed);

// Uniform random mask without replacement at exactly round(ratio * cells).
MaskSpec sample_mae_mask(int grid_h, int grid_w, double ratio, int patch_size,
                         std::uint64_t seed);

}  // namespace pyrvit
