#include "pyrvit/flexi.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>

namespace pyrvit {

bool is_supported_patch_size(int p) {
  return std::find(kSupportedPatchSizes.begin(), kSupportedPatchSizes.end(), p) !=
         kSupportedPatchSizes.end();
}

Mat bilinear_resize_matrix(int src, int dst) {
  check_arg(src > 0 && dst > 0, "resize sizes must be positive");
  // 1-D half-pixel bilinear weights, then the 2-D operator as a Kronecker
  // product of row and column interpolators.
  Mat w1d = Mat::Zero(dst, src);
  const double scale = static_cast<double>(src) / dst;
  for (int i = 0; i < dst; ++i) {
    const double center = (i + 0.5) * scale - 0.5;
    const double clamped = std::min(std::max(center, 0.0), static_cast<double>(src - 1));
    const int lo = static_cast<int>(std::floor(clamped));
    const int hi = std::min(lo + 1, src - 1);
    const double frac = clamped - lo;
    w1d(i, lo) += 1.0 - frac;
    w1d(i, hi) += frac;
  }
  Mat op = Mat::Zero(static_cast<Eigen::Index>(dst) * dst, static_cast<Eigen::Index>(src) * src);
  for (int iy = 0; iy < dst; ++iy) {
    for (int ix = 0; ix < dst; ++ix) {
      const Eigen::Index row = static_cast<Eigen::Index>(iy) * dst + ix;
      for (int sy = 0; sy < src; ++sy) {
        const double wy = w1d(iy, sy);
        if (wy == 0.0) continue;
        for (int sx = 0; sx < src; ++sx) {
          const double wx = w1d(ix, sx);
          if (wx == 0.0) continue;
          op(row, static_cast<Eigen::Index>(sy) * src + sx) = wy * wx;
        }
      }
    }
  }
  return op;
}

namespace {

std::mutex cache_mutex;

}  // namespace

const Mat& pi_resize_operator(int to_p, int base_p) {
  check_arg(is_supported_patch_size(to_p), "unsupported patch size " + std::to_string(to_p));
  static std::map<std::pair<int, int>, Mat> cache;
  std::lock_guard<std::mutex> lock(cache_mutex);
  auto it = cache.find({base_p, to_p});
  if (it != cache.end()) return it->second;

  Mat op;
  if (to_p == base_p) {
    op = Mat::Identity(static_cast<Eigen::Index>(to_p) * to_p,
                       static_cast<Eigen::Index>(to_p) * to_p);
  } else {
    const Mat R = bilinear_resize_matrix(base_p, to_p);
    const Mat pinv = Eigen::CompleteOrthogonalDecomposition<Mat>(R).pseudoInverse();
    op = pinv.transpose();
  }
  return cache.emplace(std::make_pair(base_p, to_p), std::move(op)).first->second;
}

Mat pi_resize_kernel(const Mat& base_kernel, int to_p, int base_p) {
  check_arg(!base_kernel.hasNaN(), "base kernel has non-finite entries");
  const Eigen::Index bpix = static_cast<Eigen::Index>(base_p) * base_p;
  check_arg(base_kernel.rows() == 3 * bpix, "base kernel rows != 3*base_p^2");
  if (to_p == base_p) return base_kernel;
  const Mat& A = pi_resize_operator(to_p, base_p);
  const Eigen::Index tpix = static_cast<Eigen::Index>(to_p) * to_p;
  Mat out(3 * tpix, base_kernel.cols());
  for (int c = 0; c < 3; ++c) {
    out.middleRows(c * tpix, tpix).noalias() = A * base_kernel.middleRows(c * bpix, bpix);
  }
  return out;
}

Mat pi_resize_kernel_backward(const Mat& resized_grad, int to_p, int base_p) {
  const Eigen::Index bpix = static_cast<Eigen::Index>(base_p) * base_p;
  const Eigen::Index tpix = static_cast<Eigen::Index>(to_p) * to_p;
  if (to_p == base_p) return resized_grad;
  const Mat& A = pi_resize_operator(to_p, base_p);
  Mat out(3 * bpix, resized_grad.cols());
  for (int c = 0; c < 3; ++c) {
    out.middleRows(c * bpix, bpix).noalias() =
        A.transpose() * resized_grad.middleRows(c * tpix, tpix);
  }
  return out;
}

const Mat& pos_interp_operator(int dst_grid, int src_grid) {
  check_arg(dst_grid > 0 && src_grid > 1, "grids must be non-degenerate");
  static std::map<std::pair<int, int>, Mat> cache;
  std::lock_guard<std::mutex> lock(cache_mutex);
  auto it = cache.find({src_grid, dst_grid});
  if (it != cache.end()) return it->second;

  Mat op;
  if (dst_grid == src_grid) {
    op = Mat::Identity(static_cast<Eigen::Index>(dst_grid) * dst_grid,
                       static_cast<Eigen::Index>(src_grid) * src_grid);
  } else {
    // Endpoint-pinned bilinear interpolation over normalized grid coords.
    Mat w1d = Mat::Zero(dst_grid, src_grid);
    for (int i = 0; i < dst_grid; ++i) {
      const double pos = dst_grid == 1
                             ? 0.5 * (src_grid - 1)
                             : static_cast<double>(i) * (src_grid - 1) / (dst_grid - 1);
      const int lo = std::min(static_cast<int>(std::floor(pos)), src_grid - 2);
      const double frac = pos - lo;
      w1d(i, lo) += 1.0 - frac;
      w1d(i, lo + 1) += frac;
    }
    op = Mat::Zero(static_cast<Eigen::Index>(dst_grid) * dst_grid,
                   static_cast<Eigen::Index>(src_grid) * src_grid);
    for (int iy = 0; iy < dst_grid; ++iy) {
      for (int ix = 0; ix < dst_grid; ++ix) {
        const Eigen::Index row = static_cast<Eigen::Index>(iy) * dst_grid + ix;
        for (int sy = 0; sy < src_grid; ++sy) {
          const double wy = w1d(iy, sy);
          if (wy == 0.0) continue;
          for (int sx = 0; sx < src_grid; ++sx) {
            const double wx = w1d(ix, sx);
            if (wx == 0.0) continue;
            op(row, static_cast<Eigen::Index>(sy) * src_grid + sx) = wy * wx;
          }
        }
      }
    }
  }
  return cache.emplace(std::make_pair(src_grid, dst_grid), std::move(op)).first->second;
}

Mat interpolate_pos_embed(const Mat& base_grid, int src_grid, int dst_grid) {
  check_arg(base_grid.rows() == static_cast<Eigen::Index>(src_grid) * src_grid,
            "position grid rows != src_grid^2");
  if (dst_grid == src_grid) return base_grid;
  return pos_interp_operator(dst_grid, src_grid) * base_grid;
}

}  // namespace pyrvit
