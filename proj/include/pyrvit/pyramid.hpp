#pragma once

#include "pyrvit/image.hpp"
#include "pyrvit/rng.hpp"

#include <array>
#include <optional>
#include <string>
#include <vector>

namespace pyrvit {

inline constexpr int kNumLevels = 4;
inline constexpr int kMaxPatchSize = 32;
inline constexpr std::array<double, kNumLevels> kMppPerLevel = {0.25, 0.5, 1.0, 2.0};

// Multi-level raster with physical resolution per level. Level k+1 is the
// 2x2 box-mean downsample of level k; mpp doubles level to level.
struct PyramidImage {
  std::vector<Image> levels;
  std::vector<double> mpp_per_level;
  int texture_label = -1;

  int base_size() const { return levels.empty() ? 0 : levels[0].height; }
};

enum class TexturePattern { kStripes, kDots, kChecker };

// A synthetic class is a pattern family drawn at a class-specific frequency.
struct TextureClass {
  TexturePattern pattern;
  double cycles_per_100px;  // at level 0
};

// Built-in synthetic class set: three pattern families at two frequencies.
const std::vector<TextureClass>& default_texture_classes();

// Deterministic four-level pyramid of blob-shaped "tissue" regions carrying
// the class texture on a light background. base_size must be divisible by
// 2^3 * 32 so every level used stays patch-aligned.
PyramidImage build_synthetic_pyramid(std::uint64_t seed, int base_size, int texture_class);

// Boolean foreground raster at one pyramid level.
struct TissueMask {
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> grid;
  double threshold = 0.0;
  int level = 0;      // pyramid level the mask was computed on
  bool empty = false; // set when the raster was degenerate (no contrast)

  std::int64_t foreground_count() const { return grid.count(); }
};

// Otsu threshold on the grayscale histogram (256 bins); foreground is the
// set of pixels strictly darker than the threshold. A constant raster has no
// usable foreground and yields an empty mask with the `empty` flag set.
TissueMask compute_tissue_mask(const Image& level_raster, int level = 0);

struct TileOrigin {
  int level = 0;
  int x = 0;  // top-left corner in level coordinates
  int y = 0;
};

struct TileSample {
  Image pixels;
  double mpp = 0.0;
  TileOrigin origin;
  int label = -1;
};

// Draws n tile placements; each tile's level is i.i.d. from resolution_probs
// and its center is uniform over the mask foreground that admits an
// in-bounds tile (mapped across levels). Levels whose foreground cannot host
// a tile are skipped and resampled with bounded retries, then an error.
std::vector<TileOrigin> sample_tile_origins(const PyramidImage& pyramid, const TissueMask& mask,
                                            const std::array<double, kNumLevels>& resolution_probs,
                                            int n, int tile_size, std::uint64_t seed);

// As above, with pixels extracted.
std::vector<TileSample> sample_tiles(const PyramidImage& pyramid, const TissueMask& mask,
                                     const std::array<double, kNumLevels>& resolution_probs,
                                     int n, int tile_size, std::uint64_t seed);

inline constexpr int kGlobalCropSize = 224;
inline constexpr int kLocalCropSize = 96;
inline constexpr int kNumGlobalCrops = 2;
inline constexpr int kNumLocalCrops = 4;

struct CropSet {
  std::array<Image, kNumGlobalCrops> global_crops;  // 224 x 224
  std::array<Image, kNumLocalCrops> local_crops;    // 96 x 96
  int label = -1;
};

struct AugmentConfig {
  bool enabled = true;
  double flip_prob = 0.5;
  double brightness_delta = 0.15;
  double contrast_delta = 0.25;
};

// Two global 224-crops and four local 96-crops from one tile with random
// position, horizontal flip, and brightness/contrast jitter. With
// augmentation disabled every crop is the top-left window.
CropSet make_crops(const TileSample& tile, std::uint64_t seed, const AugmentConfig& aug = {});

// On-disk pyramid: level_{k}.png files plus a plain-text manifest.
void write_pyramid(const std::string& dir, const PyramidImage& pyramid, std::uint64_t seed);
PyramidImage read_pyramid(const std::string& dir);

// Flat tile shard: PNG per tile plus an index with one line per tile:
// path level mpp x y label. Paths encode the source pyramid id.
struct ShardEntry {
  std::string path;
  int level = 0;
  double mpp = 0.0;
  int x = 0;
  int y = 0;
  int label = -1;
};

void write_shard(const std::string& dir, const std::vector<TileSample>& tiles,
                 const std::vector<int>& pyramid_ids);
std::vector<ShardEntry> read_shard_index(const std::string& dir);
int shard_entry_pyramid_id(const ShardEntry& entry);

}  // namespace pyrvit
