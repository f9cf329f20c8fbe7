#include "pyrvit/image.hpp"

namespace pyrvit {

Image Image::crop(int y, int x, int h, int w) const {
  check_arg(y >= 0 && x >= 0 && y + h <= height && x + w <= width, "crop window out of bounds");
  Image out(h, w);
  for (int c = 0; c < 3; ++c) out.ch[c] = ch[c].block(y, x, h, w);
  return out;
}

Image box_downsample(const Image& img) {
  check_arg(img.height % 2 == 0 && img.width % 2 == 0, "box_downsample needs even dimensions");
  const int h = img.height / 2;
  const int w = img.width / 2;
  Image out(h, w);
  for (int c = 0; c < 3; ++c) {
    const Mat& src = img.ch[c];
    Mat& dst = out.ch[c];
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        dst(i, j) = 0.25 * (src(2 * i, 2 * j) + src(2 * i, 2 * j + 1) +
                            src(2 * i + 1, 2 * j) + src(2 * i + 1, 2 * j + 1));
      }
    }
  }
  return out;
}

Mat extract_patches(const Image& img, int patch) {
  check_arg(patch > 0 && img.height % patch == 0 && img.width % patch == 0,
            "raster side not divisible by patch size");
  const int gh = img.height / patch;
  const int gw = img.width / patch;
  Mat out(gh * gw, 3 * patch * patch);
  for (int gy = 0; gy < gh; ++gy) {
    for (int gx = 0; gx < gw; ++gx) {
      const int row = gy * gw + gx;
      for (int c = 0; c < 3; ++c) {
        const Mat& src = img.ch[c];
        double* dst = out.row(row).data() + c * patch * patch;
        for (int i = 0; i < patch; ++i)
          for (int j = 0; j < patch; ++j) dst[i * patch + j] = src(gy * patch + i, gx * patch + j);
      }
    }
  }
  return out;
}

void scatter_patches(Image& img, const Mat& patches, const std::vector<int>& cells, int patch) {
  check_arg(img.height % patch == 0 && img.width % patch == 0, "raster side not divisible by patch size");
  check_arg(patches.rows() == static_cast<Eigen::Index>(cells.size()), "patch row count != cell count");
  check_arg(patches.cols() == 3 * patch * patch, "patch vector length mismatch");
  const int gw = img.width / patch;
  for (std::size_t k = 0; k < cells.size(); ++k) {
    const int gy = cells[k] / gw;
    const int gx = cells[k] % gw;
    for (int c = 0; c < 3; ++c) {
      const double* src = patches.row(static_cast<Eigen::Index>(k)).data() + c * patch * patch;
      Mat& dst = img.ch[c];
      for (int i = 0; i < patch; ++i)
        for (int j = 0; j < patch; ++j) dst(gy * patch + i, gx * patch + j) = src[i * patch + j];
    }
  }
}

Mat to_gray(const Image& img) { return (img.ch[0] + img.ch[1] + img.ch[2]) / 3.0; }

}  // namespace pyrvit
