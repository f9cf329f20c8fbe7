#pragma once

#include "pyrvit/common.hpp"
#include "pyrvit/rng.hpp"

#include <string>
#include <vector>

namespace pyrvit {

// Trainable array with its gradient twin. Gradients accumulate across
// backward calls until zero_grad().
template <typename T>
struct Param {
  T v;
  T g;

  void set(T value) {
    v = std::move(value);
    g = T::Zero(v.rows(), v.cols());
  }
  void zero_grad() { g.setZero(); }
};

// Flat view over one parameter, used by the optimizer, EMA update, and
// checkpoint writer. `decay` marks parameters that receive weight decay
// (matrices; biases, norms, and tokens are exempt).
struct ParamEntry {
  std::string name;
  double* value;
  double* grad;
  Eigen::Index size;
  Eigen::Index rows;
  Eigen::Index cols;
  bool decay;
};

using ParamList = std::vector<ParamEntry>;

template <typename T>
inline void collect_param(ParamList& out, const std::string& name, Param<T>& p, bool decay) {
  out.push_back({name, p.v.data(), p.g.data(), p.v.size(), p.v.rows(), p.v.cols(), decay});
}

inline void zero_grads(const ParamList& params) {
  for (const auto& p : params) {
    Eigen::Map<Vec>(p.grad, p.size).setZero();
  }
}

inline std::uint64_t weights_hash(const ParamList& params) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& p : params) {
    h = fnv1a(p.name.data(), p.name.size(), h);
    h = fnv1a(p.value, static_cast<std::size_t>(p.size) * sizeof(double), h);
  }
  return h;
}

// Normal(0, std) truncated to +/- 2 std; the usual transformer init.
inline double trunc_normal(RngStream& rng, double stddev = 0.02) {
  double x = rng.normal();
  while (x < -2.0 || x > 2.0) x = rng.normal();
  return x * stddev;
}

inline Mat trunc_normal_mat(RngStream& rng, Eigen::Index rows, Eigen::Index cols,
                            double stddev = 0.02) {
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = trunc_normal(rng, stddev);
  return m;
}

inline Vec trunc_normal_vec(RngStream& rng, Eigen::Index n, double stddev = 0.02) {
  Vec v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = trunc_normal(rng, stddev);
  return v;
}

}  // namespace pyrvit
