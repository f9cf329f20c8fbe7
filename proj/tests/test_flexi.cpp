#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oracles.hpp"
#include "pyrvit/flexi.hpp"

#include <Eigen/Dense>

using namespace pyrvit;

TEST_CASE("resize matrices are partitions of unity") {
  for (int dst : {8, 32}) {
    const Mat r = bilinear_resize_matrix(16, dst);
    CHECK(r.rows() == dst * dst);
    CHECK(r.cols() == 256);
    for (Eigen::Index i = 0; i < r.rows(); ++i) {
      CHECK(r.row(i).sum() == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("pi-resize at the base size is bit-exact identity") {
  RngStream rng(1);
  const Mat kernel = trunc_normal_mat(rng, 3 * 256, 8);
  const Mat same = pi_resize_kernel(kernel, 16);
  CHECK(same == kernel);
}

TEST_CASE("pi-resize preserves inner products when upsizing") {
  RngStream rng(2);
  const Mat resize = bilinear_resize_matrix(16, 32);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const Mat w = trunc_normal_mat(rng, 3 * 256, 1, 1.0);
    const Mat w_hat = pi_resize_kernel(w, 32);
    Vec x(3 * 256), rx(3 * 1024);
    for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = rng.normal();
    for (int c = 0; c < 3; ++c) {
      rx.segment(c * 1024, 1024) = resize * x.segment(c * 256, 256);
    }
    const double lhs = (w_hat.transpose() * rx)(0);
    const double rhs = (w.transpose() * x)(0);
    worst = std::max(worst, std::abs(lhs - rhs) / std::max(1.0, std::abs(rhs)));
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("pi-resize downsizing matches the explicit least-squares oracle") {
  // argmin_v ||w - R^T v||^2 for Gaussian patches, solved directly.
  RngStream rng(3);
  const Mat resize = bilinear_resize_matrix(16, 8);
  for (int trial = 0; trial < 10; ++trial) {
    const Vec w = trunc_normal_vec(rng, 256, 1.0);
    Mat w3 = Mat::Zero(3 * 256, 1);
    w3.block(0, 0, 256, 1) = w;
    const Mat w_hat = pi_resize_kernel(w3, 8);
    const Vec got = w_hat.block(0, 0, 64, 1);

    const Vec solved = resize.transpose()
                           .colPivHouseholderQr()
                           .solve(w);
    CHECK((got - solved).norm() < 1e-5 * std::max(1.0, solved.norm()));
  }
}

TEST_CASE("unsupported patch sizes are rejected") {
  RngStream rng(4);
  const Mat kernel = trunc_normal_mat(rng, 3 * 256, 4);
  CHECK_THROWS_AS(pi_resize_kernel(kernel, 24), InvalidArgument);
  CHECK_THROWS_AS(pi_resize_operator(12), InvalidArgument);
}

TEST_CASE("pi-resize backward is the transpose of the forward operator") {
  RngStream rng(5);
  const Mat kernel = trunc_normal_mat(rng, 3 * 256, 2);
  const Mat grad_out = trunc_normal_mat(rng, 3 * 1024, 2);
  const Mat back = pi_resize_kernel_backward(grad_out, 32);
  // <A k, g> == <k, A^T g> for random pairs.
  const Mat fwd = pi_resize_kernel(kernel, 32);
  const double lhs = (fwd.cwiseProduct(grad_out)).sum();
  const double rhs = (kernel.cwiseProduct(back)).sum();
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-10));
}

TEST_CASE("position interpolation: identity, constants, and the bilinear oracle") {
  RngStream rng(6);
  const Mat base = trunc_normal_mat(rng, 14 * 14, 5);
  CHECK(interpolate_pos_embed(base, 14, 14) == base);

  Mat constant = Mat::Ones(14 * 14, 3) * 0.7;
  for (int g : {28, 14, 7, 12, 6, 3}) {
    const Mat out = interpolate_pos_embed(constant, 14, g);
    CHECK(out.rows() == g * g);
    CHECK((out.array() - 0.7).abs().maxCoeff() < 1e-12);
  }

  // 2x2 grid {0,1;1,2} to 3x3: closed-form bilinear values.
  Mat corners(4, 1);
  corners << 0, 1, 1, 2;
  const Mat out = interpolate_pos_embed(corners, 2, 3);
  REQUIRE(out.rows() == 9);
  const double expected[9] = {0, 0.5, 1, 0.5, 1, 1.5, 1, 1.5, 2};
  for (int i = 0; i < 9; ++i) CHECK(out(i, 0) == doctest::Approx(expected[i]).epsilon(1e-12));
}

TEST_CASE("all crop/patch grids are reachable from the base grid") {
  RngStream rng(7);
  const Mat base = trunc_normal_mat(rng, 14 * 14, 4);
  for (int g : {28, 14, 7, 12, 6, 3}) {
    const Mat out = interpolate_pos_embed(base, 14, g);
    CHECK(out.rows() == g * g);
    CHECK(out.allFinite());
  }
}
