#include "pyrvit/pyramid.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace pyrvit {

namespace fs = std::filesystem;

const std::vector<TextureClass>& default_texture_classes() {
  static const std::vector<TextureClass> classes = {
      {TexturePattern::kStripes, 6.0},  {TexturePattern::kDots, 4.0},
      {TexturePattern::kChecker, 5.0},  {TexturePattern::kStripes, 12.0},
      {TexturePattern::kDots, 8.0},     {TexturePattern::kChecker, 10.0},
  };
  return classes;
}

namespace {

// Smooth pseudo-tissue blob field: a few random low-frequency cosine waves,
// thresholded at a quantile so foreground coverage stays in a sane band.
// cos(ax + by + p) is expanded into per-axis sin/cos vectors to keep the
// per-pixel work trig-free.
Mat blob_field(int size, RngStream& rng) {
  Mat field = Mat::Zero(size, size);
  const int waves = 6;
  Vec cos_x(size), sin_x(size), cos_y(size), sin_y(size);
  for (int k = 0; k < waves; ++k) {
    const double fx = rng.uniform(0.5, 2.0) / size * 6.283185307179586;
    const double fy = rng.uniform(0.5, 2.0) / size * 6.283185307179586;
    const double phase = rng.uniform(0.0, 6.283185307179586);
    const double amp = rng.uniform(0.5, 1.0);
    for (int x = 0; x < size; ++x) {
      cos_x(x) = std::cos(fx * x + phase);
      sin_x(x) = std::sin(fx * x + phase);
    }
    for (int y = 0; y < size; ++y) {
      cos_y(y) = amp * std::cos(fy * y);
      sin_y(y) = amp * std::sin(fy * y);
    }
    field.noalias() += cos_y * cos_x.transpose();
    field.noalias() -= sin_y * sin_x.transpose();
  }
  return field;
}

// Zero-mean pattern intensity from the two oriented carrier waves. Centering
// equalizes expected tissue darkness across pattern families, so class
// identity lives in texture structure rather than mean intensity.
double texture_value(TexturePattern pattern, double sin_u, double sin_v) {
  switch (pattern) {
    case TexturePattern::kStripes:
      return 0.5 * sin_u;
    case TexturePattern::kDots:
      return 0.25 * (1.0 + sin_u) * (1.0 + sin_v) - 0.25;
    case TexturePattern::kChecker: {
      const bool a = sin_u >= 0.0;
      const bool b = sin_v >= 0.0;
      return (a == b ? 1.0 : 0.0) - 0.5;
    }
  }
  return 0.0;
}

}  // namespace

PyramidImage build_synthetic_pyramid(std::uint64_t seed, int base_size, int texture_class) {
  const int divisor = 8 * kMaxPatchSize;  // three halvings, patch-aligned throughout
  check_arg(base_size > 0 && base_size % divisor == 0,
            "base_size must be divisible by " + std::to_string(divisor));
  const auto& classes = default_texture_classes();
  check_arg(texture_class >= 0 && texture_class < static_cast<int>(classes.size()),
            "texture_class outside the configured synthetic class set");

  RngStream rng(derive_seed(seed, 0xA11CE, static_cast<std::uint64_t>(texture_class)));
  const TextureClass& cls = classes[static_cast<std::size_t>(texture_class)];

  // Per-pyramid nuisance parameters. Orientation, phase, and mild frequency /
  // amplitude jitter keep the class signal structural rather than a simple
  // intensity statistic.
  const double theta = rng.uniform(0.0, 6.283185307179586);
  const double phase_u = rng.uniform(0.0, 6.283185307179586);
  const double phase_v = rng.uniform(0.0, 6.283185307179586);
  const double freq = cls.cycles_per_100px * rng.uniform(0.9, 1.1) * 6.283185307179586 / 100.0;
  const double amp = rng.uniform(0.38, 0.5);
  const double tissue_base = rng.uniform(0.6, 0.7);
  const std::array<double, 3> tint = {rng.uniform(0.92, 1.0), rng.uniform(0.78, 0.9),
                                      rng.uniform(0.84, 0.96)};

  Mat blobs = blob_field(base_size, rng);
  // Threshold at a coverage quantile in [0.35, 0.6].
  std::vector<double> sorted(blobs.data(), blobs.data() + blobs.size());
  std::sort(sorted.begin(), sorted.end());
  const double coverage = rng.uniform(0.35, 0.6);
  const double cut = sorted[static_cast<std::size_t>((1.0 - coverage) * (sorted.size() - 1))];

  const double ct = std::cos(theta);
  const double st = std::sin(theta);

  // u = freq*(ct*x + st*y) + phase_u and v likewise; per-axis sin/cos tables
  // turn sin(u), sin(v) into two multiply-adds per pixel.
  Vec su_x(base_size), cu_x(base_size), su_y(base_size), cu_y(base_size);
  Vec sv_x(base_size), cv_x(base_size), sv_y(base_size), cv_y(base_size);
  for (int x = 0; x < base_size; ++x) {
    su_x(x) = std::sin(freq * ct * x + phase_u);
    cu_x(x) = std::cos(freq * ct * x + phase_u);
    sv_x(x) = std::sin(-freq * st * x + phase_v);
    cv_x(x) = std::cos(-freq * st * x + phase_v);
  }
  for (int y = 0; y < base_size; ++y) {
    su_y(y) = std::sin(freq * st * y);
    cu_y(y) = std::cos(freq * st * y);
    sv_y(y) = std::sin(freq * ct * y);
    cv_y(y) = std::cos(freq * ct * y);
  }

  Image level0(base_size, base_size);
  for (int y = 0; y < base_size; ++y) {
    for (int x = 0; x < base_size; ++x) {
      const double noise = 0.02 * rng.normal();
      if (blobs(y, x) <= cut) {
        const double bg = 0.95 + noise;
        level0.ch[0](y, x) = bg;
        level0.ch[1](y, x) = bg;
        level0.ch[2](y, x) = bg;
        continue;
      }
      const double sin_u = su_x(x) * cu_y(y) + cu_x(x) * su_y(y);
      const double sin_v = sv_x(x) * cv_y(y) + cv_x(x) * sv_y(y);
      const double t = texture_value(cls.pattern, sin_u, sin_v);
      const double value = tissue_base - amp * t + noise;
      level0.ch[0](y, x) = value * tint[0];
      level0.ch[1](y, x) = value * tint[1];
      level0.ch[2](y, x) = value * tint[2];
    }
  }
  level0.clamp01();

  PyramidImage pyramid;
  pyramid.texture_label = texture_class;
  pyramid.mpp_per_level.assign(kMppPerLevel.begin(), kMppPerLevel.end());
  pyramid.levels.reserve(kNumLevels);
  pyramid.levels.push_back(std::move(level0));
  for (int k = 1; k < kNumLevels; ++k) {
    pyramid.levels.push_back(box_downsample(pyramid.levels.back()));
  }
  return pyramid;
}

TissueMask compute_tissue_mask(const Image& level_raster, int level) {
  check_arg(level_raster.height > 0 && level_raster.width > 0, "empty raster");
  const Mat gray = to_gray(level_raster);

  std::array<std::int64_t, 256> hist{};
  for (int y = 0; y < level_raster.height; ++y) {
    for (int x = 0; x < level_raster.width; ++x) {
      int bin = static_cast<int>(gray(y, x) * 256.0);
      bin = std::clamp(bin, 0, 255);
      hist[static_cast<std::size_t>(bin)]++;
    }
  }

  const double total = static_cast<double>(level_raster.height) * level_raster.width;
  double sum_all = 0.0;
  for (int b = 0; b < 256; ++b) sum_all += b * static_cast<double>(hist[static_cast<std::size_t>(b)]);

  // Otsu: foreground = bins <= t; pick t maximizing between-class variance.
  double best_var = 0.0;
  int best_t = -1;
  double w0 = 0.0;
  double sum0 = 0.0;
  for (int t = 0; t < 255; ++t) {
    w0 += static_cast<double>(hist[static_cast<std::size_t>(t)]);
    sum0 += t * static_cast<double>(hist[static_cast<std::size_t>(t)]);
    const double w1 = total - w0;
    if (w0 <= 0.0 || w1 <= 0.0) continue;
    const double mu0 = sum0 / w0;
    const double mu1 = (sum_all - sum0) / w1;
    const double var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
    if (var > best_var) {
      best_var = var;
      best_t = t;
    }
  }

  TissueMask mask;
  mask.level = level;
  mask.grid.setConstant(level_raster.height, level_raster.width, false);
  if (best_t < 0) {
    // No split beats zero variance: degenerate raster, no usable foreground.
    mask.empty = true;
    mask.threshold = 0.0;
    return mask;
  }
  mask.threshold = (best_t + 1) / 256.0;
  for (int y = 0; y < level_raster.height; ++y) {
    for (int x = 0; x < level_raster.width; ++x) {
      mask.grid(y, x) = gray(y, x) < mask.threshold;
    }
  }
  mask.empty = mask.grid.count() == 0;
  return mask;
}

namespace {

// Map a coordinate between pyramid levels (level k is 2^k times coarser than
// level 0).
inline int map_coord(int x, int from_level, int to_level) {
  if (from_level < to_level) return x >> (to_level - from_level);
  return x << (from_level - to_level);
}

}  // namespace

std::vector<TileOrigin> sample_tile_origins(const PyramidImage& pyramid, const TissueMask& mask,
                                            const std::array<double, kNumLevels>& resolution_probs,
                                            int n, int tile_size, std::uint64_t seed) {
  check_arg(!pyramid.levels.empty(), "empty pyramid");
  check_arg(n >= 0, "negative tile count");
  check_arg(tile_size > 0, "tile_size must be positive");
  check_arg(!mask.empty && mask.grid.count() > 0, "tissue mask has no foreground");
  double prob_sum = 0.0;
  for (double p : resolution_probs) {
    check_arg(p >= 0.0, "resolution probabilities must be non-negative");
    prob_sum += p;
  }
  check_arg(prob_sum > 0.0, "resolution probabilities sum to zero");

  RngStream rng(seed);
  std::vector<double> probs(resolution_probs.begin(), resolution_probs.end());

  // Per level: foreground cells whose footprint admits an in-bounds tile
  // center, with the usable center rectangle per cell. Built lazily.
  struct CellWindow {
    int y_lo, y_hi, x_lo, x_hi;  // inclusive center ranges at the tile level
    int my, mx;                  // mask cell
  };
  std::array<std::optional<std::vector<CellWindow>>, kNumLevels> valid;

  const auto build_valid = [&](int level) {
    std::vector<CellWindow> cells;
    const Image& raster = pyramid.levels[static_cast<std::size_t>(level)];
    if (raster.height < tile_size || raster.width < tile_size) return cells;
    const int half = tile_size / 2;
    const int y_min = half;
    const int y_max = raster.height - tile_size + half;
    const int x_min = half;
    const int x_max = raster.width - tile_size + half;
    for (int my = 0; my < mask.grid.rows(); ++my) {
      for (int mx = 0; mx < mask.grid.cols(); ++mx) {
        if (!mask.grid(my, mx)) continue;
        int fy_lo = map_coord(my, mask.level, level);
        int fx_lo = map_coord(mx, mask.level, level);
        int fy_hi = fy_lo;
        int fx_hi = fx_lo;
        if (mask.level > level) {
          const int span = 1 << (mask.level - level);
          fy_hi = fy_lo + span - 1;
          fx_hi = fx_lo + span - 1;
        }
        const CellWindow w{std::max(fy_lo, y_min), std::min(fy_hi, y_max), std::max(fx_lo, x_min),
                           std::min(fx_hi, x_max), my, mx};
        if (w.y_lo <= w.y_hi && w.x_lo <= w.x_hi) cells.push_back(w);
      }
    }
    return cells;
  };

  std::vector<TileOrigin> origins;
  origins.reserve(static_cast<std::size_t>(n));
  constexpr int kMaxRetries = 100;
  for (int i = 0; i < n; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < kMaxRetries && !placed; ++attempt) {
      const int level = static_cast<int>(rng.categorical(probs));
      if (!valid[static_cast<std::size_t>(level)]) {
        valid[static_cast<std::size_t>(level)] = build_valid(level);
      }
      const auto& cells = *valid[static_cast<std::size_t>(level)];
      if (cells.empty()) continue;  // no usable foreground here: resample the level
      const CellWindow& w = cells[static_cast<std::size_t>(rng.randint(cells.size()))];
      const int cy =
          w.y_lo + static_cast<int>(rng.randint(static_cast<std::uint64_t>(w.y_hi - w.y_lo + 1)));
      const int cx =
          w.x_lo + static_cast<int>(rng.randint(static_cast<std::uint64_t>(w.x_hi - w.x_lo + 1)));
      // A finer mask than the tile level can make the back-mapped cell differ
      // from the drawn one; the center must still land on foreground.
      const int back_y = map_coord(cy, level, mask.level);
      const int back_x = map_coord(cx, level, mask.level);
      if (back_y >= mask.grid.rows() || back_x >= mask.grid.cols() ||
          !mask.grid(back_y, back_x)) {
        continue;
      }
      const int half = tile_size / 2;
      origins.push_back({level, cx - half, cy - half});
      placed = true;
    }
    if (!placed) {
      throw std::runtime_error("sample_tile_origins: no in-bounds foreground tile after " +
                               std::to_string(kMaxRetries) + " attempts");
    }
  }
  return origins;
}

std::vector<TileSample> sample_tiles(const PyramidImage& pyramid, const TissueMask& mask,
                                     const std::array<double, kNumLevels>& resolution_probs,
                                     int n, int tile_size, std::uint64_t seed) {
  const auto origins = sample_tile_origins(pyramid, mask, resolution_probs, n, tile_size, seed);
  std::vector<TileSample> tiles;
  tiles.reserve(origins.size());
  for (const TileOrigin& origin : origins) {
    TileSample tile;
    tile.origin = origin;
    tile.pixels = pyramid.levels[static_cast<std::size_t>(origin.level)].crop(
        origin.y, origin.x, tile_size, tile_size);
    tile.mpp = pyramid.mpp_per_level[static_cast<std::size_t>(origin.level)];
    tile.label = pyramid.texture_label;
    tiles.push_back(std::move(tile));
  }
  return tiles;
}

namespace {

Image augment_crop(const Image& tile, int size, RngStream& rng, const AugmentConfig& aug) {
  int oy = 0;
  int ox = 0;
  bool flip = false;
  double brightness = 0.0;
  double contrast = 1.0;
  if (aug.enabled) {
    oy = static_cast<int>(rng.randint(static_cast<std::uint64_t>(tile.height - size + 1)));
    ox = static_cast<int>(rng.randint(static_cast<std::uint64_t>(tile.width - size + 1)));
    flip = rng.flip(aug.flip_prob);
    brightness = rng.uniform(-aug.brightness_delta, aug.brightness_delta);
    contrast = rng.uniform(1.0 - aug.contrast_delta, 1.0 + aug.contrast_delta);
  }
  Image crop = tile.crop(oy, ox, size, size);
  if (flip) {
    for (auto& c : crop.ch) c = c.rowwise().reverse().eval();
  }
  if (brightness != 0.0 || contrast != 1.0) {
    for (auto& c : crop.ch) {
      c = ((c.array() - 0.5) * contrast + 0.5 + brightness).matrix();
    }
    crop.clamp01();
  }
  return crop;
}

}  // namespace

CropSet make_crops(const TileSample& tile, std::uint64_t seed, const AugmentConfig& aug) {
  check_arg(tile.pixels.height >= kGlobalCropSize && tile.pixels.width >= kGlobalCropSize,
            "tile smaller than the global crop size");
  RngStream rng(seed);
  CropSet crops;
  crops.label = tile.label;
  for (int g = 0; g < kNumGlobalCrops; ++g) {
    crops.global_crops[static_cast<std::size_t>(g)] =
        augment_crop(tile.pixels, kGlobalCropSize, rng, aug);
  }
  for (int l = 0; l < kNumLocalCrops; ++l) {
    crops.local_crops[static_cast<std::size_t>(l)] =
        augment_crop(tile.pixels, kLocalCropSize, rng, aug);
  }
  return crops;
}

void write_pyramid(const std::string& dir, const PyramidImage& pyramid, std::uint64_t seed) {
  fs::create_directories(dir);
  for (std::size_t k = 0; k < pyramid.levels.size(); ++k) {
    write_png(dir + "/level_" + std::to_string(k) + ".png", pyramid.levels[k]);
  }
  std::ofstream manifest(dir + "/manifest");
  manifest << "base_size: " << pyramid.base_size() << "\n";
  manifest << "seed: " << seed << "\n";
  manifest << "texture_class: " << pyramid.texture_label << "\n";
  manifest << "mpp:";
  for (double m : pyramid.mpp_per_level) manifest << ' ' << m;
  manifest << "\n";
}

PyramidImage read_pyramid(const std::string& dir) {
  std::ifstream manifest(dir + "/manifest");
  if (!manifest) throw std::runtime_error("missing manifest in " + dir);
  PyramidImage pyramid;
  std::string line;
  while (std::getline(manifest, line)) {
    std::istringstream is(line);
    std::string key;
    is >> key;
    if (key == "texture_class:") {
      is >> pyramid.texture_label;
    } else if (key == "mpp:") {
      double m = 0.0;
      while (is >> m) pyramid.mpp_per_level.push_back(m);
    }
  }
  for (int k = 0;; ++k) {
    const std::string path = dir + "/level_" + std::to_string(k) + ".png";
    if (!fs::exists(path)) break;
    pyramid.levels.push_back(read_png(path));
  }
  if (pyramid.levels.empty()) throw std::runtime_error("no level rasters in " + dir);
  return pyramid;
}

void write_shard(const std::string& dir, const std::vector<TileSample>& tiles,
                 const std::vector<int>& pyramid_ids) {
  check_arg(tiles.size() == pyramid_ids.size(), "one pyramid id per tile required");
  fs::create_directories(dir);
  std::ofstream index(dir + "/index.txt");
  std::vector<int> per_pyramid_counter;
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    const int pid = pyramid_ids[i];
    if (pid >= static_cast<int>(per_pyramid_counter.size())) {
      per_pyramid_counter.resize(static_cast<std::size_t>(pid) + 1, 0);
    }
    const int j = per_pyramid_counter[static_cast<std::size_t>(pid)]++;
    const std::string name = "pyr" + std::to_string(pid) + "_t" + std::to_string(j) + ".png";
    write_png(dir + "/" + name, tiles[i].pixels);
    index << name << ' ' << tiles[i].origin.level << ' ' << tiles[i].mpp << ' ' << tiles[i].origin.x
          << ' ' << tiles[i].origin.y << ' ' << tiles[i].label << "\n";
  }
}

std::vector<ShardEntry> read_shard_index(const std::string& dir) {
  std::ifstream index(dir + "/index.txt");
  if (!index) throw std::runtime_error("missing index.txt in " + dir);
  std::vector<ShardEntry> entries;
  std::string line;
  while (std::getline(index, line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    ShardEntry e;
    is >> e.path >> e.level >> e.mpp >> e.x >> e.y >> e.label;
    e.path = dir + "/" + e.path;
    entries.push_back(std::move(e));
  }
  return entries;
}

int shard_entry_pyramid_id(const ShardEntry& entry) {
  const auto slash = entry.path.find_last_of('/');
  const std::string name = slash == std::string::npos ? entry.path : entry.path.substr(slash + 1);
  if (name.rfind("pyr", 0) != 0) return -1;
  const auto us = name.find('_');
  if (us == std::string::npos) return -1;
  return std::stoi(name.substr(3, us - 3));
}

}  // namespace pyrvit
