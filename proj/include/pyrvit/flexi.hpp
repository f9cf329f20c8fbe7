#pragma once

#include "pyrvit/common.hpp"

#include <array>

namespace pyrvit {

inline constexpr int kBasePatchSize = 16;
inline constexpr std::array<int, 3> kSupportedPatchSizes = {8, 16, 32};

bool is_supported_patch_size(int p);

// Dense bilinear resize operator mapping a src x src raster (flattened
// row-major) to dst x dst. Half-pixel centers, edge-clamped; this is the
// patch-resize operator R underlying the pseudoinverse kernel resize.
Mat bilinear_resize_matrix(int src, int dst);

// (pinv(R))^T for the resize from the base patch size to `to_p`, cached per
// target size. Maps a base-patch pixel vector to a to_p-patch pixel vector.
// Exactly the identity when to_p equals the base size.
const Mat& pi_resize_operator(int to_p, int base_p = kBasePatchSize);

// Resizes a patch-embedding kernel [3*base_p^2, E] to [3*to_p^2, E] by
// applying the pseudoinverse resize per channel block. For upsizing this
// preserves <w, x> = <w_hat, R x> for every patch x; for downsizing it is
// the least-squares optimum over unit-covariance patches.
Mat pi_resize_kernel(const Mat& base_kernel, int to_p, int base_p = kBasePatchSize);

// Gradient of pi_resize_kernel: maps the resized-kernel gradient back to the
// base kernel (transpose of the fixed linear resize).
Mat pi_resize_kernel_backward(const Mat& resized_grad, int to_p, int base_p = kBasePatchSize);

// Bilinear grid interpolation operator [dst^2, src^2] with endpoints pinned
// (corner cells map exactly), used for position-embedding resizing.
const Mat& pos_interp_operator(int dst_grid, int src_grid);

// Interpolates a [src^2, E] position grid to [dst^2, E]. Identity when the
// grids match.
Mat interpolate_pos_embed(const Mat& base_grid, int src_grid, int dst_grid);

}  // namespace pyrvit
