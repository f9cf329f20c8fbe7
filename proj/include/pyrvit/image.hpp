#pragma once

#include "pyrvit/common.hpp"

#include <array>
#include <string>

namespace pyrvit {

// Planar RGB raster, channel values in [0, 1]. Channel c is an h x w matrix.
struct Image {
  int height = 0;
  int width = 0;
  std::array<Mat, 3> ch;

  Image() = default;
  Image(int h, int w) : height(h), width(w) {
    for (auto& c : ch) c = Mat::Zero(h, w);
  }

  bool same_shape(const Image& o) const { return height == o.height && width == o.width; }

  void fill(double r, double g, double b) {
    ch[0].setConstant(r);
    ch[1].setConstant(g);
    ch[2].setConstant(b);
  }

  void clamp01() {
    for (auto& c : ch) c = c.cwiseMax(0.0).cwiseMin(1.0);
  }

  double mean() const { return (ch[0].mean() + ch[1].mean() + ch[2].mean()) / 3.0; }

  // Sub-image copy; the window must lie inside the raster.
  Image crop(int y, int x, int h, int w) const;
};

// 2x2 box-mean downsample; height and width must be even. Conserves the
// per-channel mean exactly up to rounding.
Image box_downsample(const Image& img);

// Rows are patches in row-major grid order; columns are channel-major pixels
// [r(0,0)..r(p-1,p-1), g..., b...]. side must be divisible by patch.
Mat extract_patches(const Image& img, int patch);

// Inverse of extract_patches for selected grid cells: writes patch rows into
// the raster at the given flat grid indices.
void scatter_patches(Image& img, const Mat& patches, const std::vector<int>& cells, int patch);

// Grayscale as the channel mean.
Mat to_gray(const Image& img);

// 8-bit RGB PNG I/O. Values are quantized with round(x * 255).
void write_png(const std::string& path, const Image& img);
Image read_png(const std::string& path);

}  // namespace pyrvit
