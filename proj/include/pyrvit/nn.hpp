#pragma once

#include "pyrvit/param.hpp"

#include <memory>
#include <string>
#include <vector>

namespace pyrvit {

// Row-wise numerically stable softmax.
Mat softmax_rows(const Mat& z);
// Backward through softmax given its output s and upstream gradient ds.
Mat softmax_rows_backward(const Mat& s, const Mat& ds);

double gelu(double x);
double gelu_grad(double x);

// ---------------------------------------------------------------------------
// Layers. Each layer owns its parameters; forward() optionally records the
// activations it needs into a context object so backward() can run later.
// backward() accumulates parameter gradients and returns the input gradient.
// ---------------------------------------------------------------------------

struct LinearCtx {
  Mat x;
};

struct Linear {
  Param<Mat> W;  // [in, out]
  Param<Vec> b;  // [out]

  void init(Eigen::Index in, Eigen::Index out, RngStream& rng, double stddev = 0.02);
  Eigen::Index in_dim() const { return W.v.rows(); }
  Eigen::Index out_dim() const { return W.v.cols(); }

  Mat forward(const Mat& x, LinearCtx* ctx = nullptr) const;
  Mat backward(const LinearCtx& ctx, const Mat& dy);
  void collect(const std::string& prefix, ParamList& out);
};

struct LayerNormCtx {
  Mat xhat;
  Vec inv_sigma;
};

struct LayerNorm {
  Param<Vec> gamma;
  Param<Vec> beta;
  double eps = 1e-6;

  void init(Eigen::Index dim);
  Mat forward(const Mat& x, LayerNormCtx* ctx = nullptr) const;
  Mat backward(const LayerNormCtx& ctx, const Mat& dy);
  void collect(const std::string& prefix, ParamList& out);
};

struct GeluCtx {
  Mat x;
};

Mat gelu_forward(const Mat& x, GeluCtx* ctx = nullptr);
Mat gelu_backward(const GeluCtx& ctx, const Mat& dy);

struct AttentionCtx {
  LinearCtx qkv;
  LinearCtx proj;
  Mat qkv_out;                // [T, 3E]
  std::vector<Mat> attn;      // per head [T, T] softmax weights
  Mat concat;                 // [T, E] attended values before projection
};

struct MultiHeadAttention {
  Linear qkv;   // E -> 3E
  Linear proj;  // E -> E
  int heads = 1;

  void init(Eigen::Index dim, int n_heads, RngStream& rng);
  Mat forward(const Mat& x, AttentionCtx* ctx = nullptr) const;
  Mat backward(const AttentionCtx& ctx, const Mat& dy);
  void collect(const std::string& prefix, ParamList& out);
};

struct MlpCtx {
  LinearCtx fc1;
  GeluCtx act;
  LinearCtx fc2;
};

struct Mlp {
  Linear fc1;
  Linear fc2;

  void init(Eigen::Index dim, Eigen::Index hidden, RngStream& rng);
  Mat forward(const Mat& x, MlpCtx* ctx = nullptr) const;
  Mat backward(const MlpCtx& ctx, const Mat& dy);
  void collect(const std::string& prefix, ParamList& out);
};

struct BlockCtx {
  LayerNormCtx ln1;
  AttentionCtx attn;
  LayerNormCtx ln2;
  MlpCtx mlp;
};

// Pre-norm transformer block: x + attn(ln1(x)), then + mlp(ln2(.)).
struct Block {
  LayerNorm ln1;
  MultiHeadAttention attn;
  LayerNorm ln2;
  Mlp mlp;

  void init(Eigen::Index dim, int heads, Eigen::Index mlp_hidden, RngStream& rng);
  Mat forward(const Mat& x, BlockCtx* ctx = nullptr) const;
  Mat backward(const BlockCtx& ctx, const Mat& dy);
  void collect(const std::string& prefix, ParamList& out);
};

// Rows normalized to unit L2 norm (with a small floor for zero rows).
struct L2NormCtx {
  Mat y;
  Vec norms;
};

Mat l2_normalize_rows(const Mat& x, L2NormCtx* ctx = nullptr, double eps = 1e-12);
Mat l2_normalize_rows_backward(const L2NormCtx& ctx, const Mat& dy);

}  // namespace pyrvit
