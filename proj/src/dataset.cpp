#include "pyrvit/dataset.hpp"

namespace pyrvit {

namespace {
constexpr std::uint64_t kOrderTag = 0xE70C;
constexpr std::uint64_t kPyramidTag = 0x59D0;
constexpr std::uint64_t kTileTag = 0x711E;
constexpr std::uint64_t kCropTag = 0xC401;
}  // namespace

CropStream::CropStream(const TrainConfig& cfg) : cfg_(cfg) {
  if (cfg_.data.source == "shard") {
    shard_entries_ = read_shard_index(cfg_.data.shard_dir);
    check_arg(!shard_entries_.empty(), "shard index is empty: " + cfg_.data.shard_dir);
  } else {
    check_arg(cfg_.data.n_pyramids > 0, "n_pyramids must be positive");
    check_arg(!cfg_.data.texture_classes.empty(), "texture_classes must be non-empty");
  }
}

std::size_t CropStream::size() const {
  return cfg_.data.source == "shard" ? shard_entries_.size()
                                     : static_cast<std::size_t>(cfg_.data.n_pyramids);
}

std::vector<std::size_t> CropStream::epoch_order(int epoch) const {
  std::vector<std::size_t> order(size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  RngStream rng(derive_seed(cfg_.seed, kOrderTag, static_cast<std::uint64_t>(epoch)));
  rng.shuffle(order);
  return order;
}

TileSample CropStream::synthetic_tile(std::size_t id, int epoch) const {
  const auto& classes = cfg_.data.texture_classes;
  const int class_pos = static_cast<int>(id % classes.size());
  const PyramidImage pyramid = build_synthetic_pyramid(
      derive_seed(cfg_.seed, kPyramidTag, id), cfg_.data.base_size,
      classes[static_cast<std::size_t>(class_pos)]);
  const TissueMask mask =
      compute_tissue_mask(pyramid.levels.back(), static_cast<int>(pyramid.levels.size()) - 1);
  auto tiles = sample_tiles(
      pyramid, mask, cfg_.data.resolution_probs, 1, cfg_.data.tile_size,
      derive_seed(cfg_.seed, kTileTag, static_cast<std::uint64_t>(epoch) * size() + id));
  tiles[0].label = class_pos;
  return std::move(tiles[0]);
}

CropSet CropStream::crop_set(int epoch, std::size_t position) const {
  check_arg(position < size(), "position out of range");
  const std::size_t id = epoch_order(epoch)[position];
  TileSample tile;
  if (cfg_.data.source == "shard") {
    const ShardEntry& e = shard_entries_[id];
    tile.pixels = read_png(e.path);
    tile.mpp = e.mpp;
    tile.origin = {e.level, e.x, e.y};
    tile.label = e.label;
  } else {
    tile = synthetic_tile(id, epoch);
  }
  return make_crops(
      tile, derive_seed(cfg_.seed, kCropTag, static_cast<std::uint64_t>(epoch) * size() + id),
      cfg_.data.augment);
}

std::vector<TileSample> synth_tiles(const DataConfig& cfg, int count, std::uint64_t seed,
                                    std::uint64_t id_offset) {
  return synth_tiles_grouped(cfg, count, 1, seed, id_offset);
}

std::vector<TileSample> synth_tiles_grouped(const DataConfig& cfg, int n_pyramids,
                                            int tiles_per_pyramid, std::uint64_t seed,
                                            std::uint64_t id_offset,
                                            std::vector<int>* group_ids) {
  check_arg(!cfg.texture_classes.empty(), "texture_classes must be non-empty");
  check_arg(tiles_per_pyramid > 0, "tiles_per_pyramid must be positive");
  std::vector<TileSample> tiles(static_cast<std::size_t>(n_pyramids) * tiles_per_pyramid);
  parallel_for(static_cast<std::size_t>(n_pyramids), [&](std::size_t i) {
    const std::uint64_t id = id_offset + i;
    const int class_pos = static_cast<int>(id % cfg.texture_classes.size());
    const PyramidImage pyramid =
        build_synthetic_pyramid(derive_seed(seed, kPyramidTag, id), cfg.base_size,
                                cfg.texture_classes[static_cast<std::size_t>(class_pos)]);
    const TissueMask mask =
        compute_tissue_mask(pyramid.levels.back(), static_cast<int>(pyramid.levels.size()) - 1);
    auto sampled = sample_tiles(pyramid, mask, cfg.resolution_probs, tiles_per_pyramid,
                                cfg.tile_size, derive_seed(seed, kTileTag, id));
    for (int t = 0; t < tiles_per_pyramid; ++t) {
      sampled[static_cast<std::size_t>(t)].label = class_pos;
      tiles[i * tiles_per_pyramid + t] = std::move(sampled[static_cast<std::size_t>(t)]);
    }
  });
  if (group_ids) {
    group_ids->resize(tiles.size());
    for (std::size_t k = 0; k < tiles.size(); ++k) {
      (*group_ids)[k] = static_cast<int>(k / tiles_per_pyramid);
    }
  }
  return tiles;
}

}  // namespace pyrvit
