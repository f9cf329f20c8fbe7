#pragma once

#include "pyrvit/config.hpp"

#include <vector>

namespace pyrvit {

// Deterministic stream of crop sets for pre-training. Content is a pure
// function of (config, epoch, position), so parallel workers and resumed
// runs see identical data.
class CropStream {
 public:
  explicit CropStream(const TrainConfig& cfg);

  std::size_t size() const;
  CropSet crop_set(int epoch, std::size_t position) const;

 private:
  TrainConfig cfg_;
  std::vector<ShardEntry> shard_entries_;

  std::vector<std::size_t> epoch_order(int epoch) const;
  TileSample synthetic_tile(std::size_t id, int epoch) const;
};

// Fresh deterministic tiles for adaptation experiments. Pyramid ids start at
// id_offset, so probe/eval sets stay disjoint from the training stream. One
// tile per pyramid; labels are positions in cfg.texture_classes.
std::vector<TileSample> synth_tiles(const DataConfig& cfg, int count, std::uint64_t seed,
                                    std::uint64_t id_offset = 0);

// Grouped variant for bag-level tasks: tiles_per_pyramid tiles from each of
// n_pyramids pyramids; group_ids (optional) receives the pyramid index per
// tile.
std::vector<TileSample> synth_tiles_grouped(const DataConfig& cfg, int n_pyramids,
                                            int tiles_per_pyramid, std::uint64_t seed,
                                            std::uint64_t id_offset = 0,
                                            std::vector<int>* group_ids = nullptr);

}  // namespace pyrvit
