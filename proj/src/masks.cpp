#include "pyrvit/masks.hpp"

#include <deque>

namespace pyrvit {

std::vector<int> MaskSpec::masked_cells() const {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(masked_count()));
  for (int c = 0; c < cells(); ++c)
    if (masked(c)) out.push_back(c);
  return out;
}

std::vector<int> MaskSpec::visible_cells() const {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(cells() - masked_count()));
  for (int c = 0; c < cells(); ++c)
    if (!masked(c)) out.push_back(c);
  return out;
}

std::vector<std::vector<int>> ibot_mask_rounds(int grid_h, int grid_w, int target,
                                               std::uint64_t seed) {
  check_arg(grid_h > 0 && grid_w > 0, "empty grid");
  const int cells = grid_h * grid_w;
  check_arg(target >= 0 && target <= cells, "mask target out of range");

  RngStream rng(seed);
  std::vector<bool> masked(static_cast<std::size_t>(cells), false);
  std::vector<std::vector<int>> rounds;
  int remaining = target;

  // Block areas roughly between a few cells and an eighth of the grid.
  const int lo = std::min(4, std::max(1, cells / 16));
  const int hi = std::max(lo, cells / 8);

  while (remaining > 0) {
    // Random unmasked seed cell.
    int seed_cell = -1;
    std::uint64_t pick = rng.randint(static_cast<std::uint64_t>(cells - (target - remaining)));
    for (int c = 0; c < cells; ++c) {
      if (!masked[static_cast<std::size_t>(c)] && pick-- == 0) {
        seed_cell = c;
        break;
      }
    }
    int block = lo + static_cast<int>(rng.randint(static_cast<std::uint64_t>(hi - lo + 1)));
    block = std::min(block, remaining);

    // Grow a 4-connected region from the seed over unmasked cells.
    std::vector<int> round;
    std::deque<int> frontier{seed_cell};
    masked[static_cast<std::size_t>(seed_cell)] = true;
    while (!frontier.empty() && static_cast<int>(round.size()) < block) {
      const int c = frontier.front();
      frontier.pop_front();
      round.push_back(c);
      const int y = c / grid_w;
      const int x = c % grid_w;
      const int neighbors[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
      for (const auto& n : neighbors) {
        if (n[0] < 0 || n[0] >= grid_h || n[1] < 0 || n[1] >= grid_w) continue;
        const int nc = n[0] * grid_w + n[1];
        if (!masked[static_cast<std::size_t>(nc)]) {
          masked[static_cast<std::size_t>(nc)] = true;
          frontier.push_back(nc);
        }
      }
    }
    // Cells reserved in the frontier but not emitted stay unmasked.
    for (int c : frontier) masked[static_cast<std::size_t>(c)] = false;
    remaining -= static_cast<int>(round.size());
    rounds.push_back(std::move(round));
  }
  return rounds;
}

MaskSpec sample_ibot_mask(int grid_h, int grid_w, double ratio, int patch_size,
                          std::uint64_t seed) {
  check_arg(ratio >= 0.0 && ratio < 1.0, "mask ratio must be in [0, 1)");
  MaskSpec mask;
  mask.patch_size = patch_size;
  mask.target_ratio = ratio;
  mask.grid.setConstant(grid_h, grid_w, false);
  const int target = round_half_up(ratio * grid_h * grid_w);
  for (const auto& round : ibot_mask_rounds(grid_h, grid_w, target, seed)) {
    for (int c : round) mask.grid(c / grid_w, c % grid_w) = true;
  }
  return mask;
}

MaskSpec sample_mae_mask(int grid_h, int grid_w, double ratio, int patch_size,
                         std::uint64_t seed) {
  check_arg(ratio >= 0.0 && ratio < 1.0, "mask ratio must be in [0, 1)");
  MaskSpec mask;
  mask.patch_size = patch_size;
  mask.target_ratio = ratio;
  mask.grid.setConstant(grid_h, grid_w, false);
  const int cells = grid_h * grid_w;
  const int target = round_half_up(ratio * cells);
  RngStream rng(seed);
  for (int c : rng.choose_without_replacement(cells, target)) {
    mask.grid(c / grid_w, c % grid_w) = true;
  }
  return mask;
}

}  // namespace pyrvit
