#include "pyrvit/nn.hpp"

#include <cmath>

namespace pyrvit {

Mat softmax_rows(const Mat& z) {
  Mat s(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double m = z.row(i).maxCoeff();
    s.row(i) = (z.row(i).array() - m).exp();
    s.row(i) /= s.row(i).sum();
  }
  return s;
}

Mat softmax_rows_backward(const Mat& s, const Mat& ds) {
  Mat dz(s.rows(), s.cols());
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const double dot = s.row(i).dot(ds.row(i));
    dz.row(i) = s.row(i).cwiseProduct((ds.row(i).array() - dot).matrix());
  }
  return dz;
}

namespace {
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
}  // namespace

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_grad(double x) {
  return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

// ---------------------------------------------------------------------------

void Linear::init(Eigen::Index in, Eigen::Index out, RngStream& rng, double stddev) {
  W.set(trunc_normal_mat(rng, in, out, stddev));
  b.set(Vec::Zero(out));
}

Mat Linear::forward(const Mat& x, LinearCtx* ctx) const {
  if (ctx) ctx->x = x;
  Mat y = x * W.v;
  y.rowwise() += b.v.transpose();
  return y;
}

Mat Linear::backward(const LinearCtx& ctx, const Mat& dy) {
  W.g.noalias() += ctx.x.transpose() * dy;
  b.g.noalias() += dy.colwise().sum().transpose();
  return dy * W.v.transpose();
}

void Linear::collect(const std::string& prefix, ParamList& out) {
  collect_param(out, prefix + ".weight", W, true);
  collect_param(out, prefix + ".bias", b, false);
}

// ---------------------------------------------------------------------------

void LayerNorm::init(Eigen::Index dim) {
  gamma.set(Vec::Ones(dim));
  beta.set(Vec::Zero(dim));
}

Mat LayerNorm::forward(const Mat& x, LayerNormCtx* ctx) const {
  const Eigen::Index d = x.cols();
  Mat xhat(x.rows(), d);
  Vec inv_sigma(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double mu = x.row(i).mean();
    const auto centered = x.row(i).array() - mu;
    const double var = centered.square().sum() / static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (centered * inv).matrix();
    inv_sigma(i) = inv;
  }
  if (ctx) {
    ctx->xhat = xhat;
    ctx->inv_sigma = inv_sigma;
  }
  Mat y = xhat.array().rowwise() * gamma.v.transpose().array();
  y.rowwise() += beta.v.transpose();
  return y;
}

Mat LayerNorm::backward(const LayerNormCtx& ctx, const Mat& dy) {
  const Eigen::Index d = dy.cols();
  gamma.g.noalias() += dy.cwiseProduct(ctx.xhat).colwise().sum().transpose();
  beta.g.noalias() += dy.colwise().sum().transpose();
  Mat dx(dy.rows(), d);
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const auto g = dy.row(i).array() * gamma.v.transpose().array();
    const double mean_g = g.mean();
    const double mean_gx = (g * ctx.xhat.row(i).array()).mean();
    dx.row(i) =
        ((g - mean_g - ctx.xhat.row(i).array() * mean_gx) * ctx.inv_sigma(i)).matrix();
  }
  return dx;
}

void LayerNorm::collect(const std::string& prefix, ParamList& out) {
  collect_param(out, prefix + ".gamma", gamma, false);
  collect_param(out, prefix + ".beta", beta, false);
}

// ---------------------------------------------------------------------------

Mat gelu_forward(const Mat& x, GeluCtx* ctx) {
  if (ctx) ctx->x = x;
  return x.unaryExpr([](double v) { return gelu(v); });
}

Mat gelu_backward(const GeluCtx& ctx, const Mat& dy) {
  return dy.cwiseProduct(ctx.x.unaryExpr([](double v) { return gelu_grad(v); }));
}

// ---------------------------------------------------------------------------

void MultiHeadAttention::init(Eigen::Index dim, int n_heads, RngStream& rng) {
  check_arg(dim % n_heads == 0, "embed dim must divide evenly into heads");
  heads = n_heads;
  qkv.init(dim, 3 * dim, rng);
  proj.init(dim, dim, rng);
}

Mat MultiHeadAttention::forward(const Mat& x, AttentionCtx* ctx) const {
  const Eigen::Index T = x.rows();
  const Eigen::Index E = x.cols();
  const Eigen::Index dh = E / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Mat qkv_out = qkv.forward(x, ctx ? &ctx->qkv : nullptr);
  Mat concat(T, E);
  std::vector<Mat> attn_store;
  if (ctx) attn_store.resize(static_cast<std::size_t>(heads));

  for (int h = 0; h < heads; ++h) {
    const auto Q = qkv_out.block(0, h * dh, T, dh);
    const auto K = qkv_out.block(0, E + h * dh, T, dh);
    const auto V = qkv_out.block(0, 2 * E + h * dh, T, dh);
    Mat scores = (Q * K.transpose()) * scale;
    Mat attn = softmax_rows(scores);
    concat.block(0, h * dh, T, dh).noalias() = attn * V;
    if (ctx) attn_store[static_cast<std::size_t>(h)] = std::move(attn);
  }
  if (ctx) {
    ctx->qkv_out = std::move(qkv_out);
    ctx->attn = std::move(attn_store);
    ctx->concat = concat;
  }
  return proj.forward(concat, ctx ? &ctx->proj : nullptr);
}

Mat MultiHeadAttention::backward(const AttentionCtx& ctx, const Mat& dy) {
  const Eigen::Index T = dy.rows();
  const Eigen::Index E = dy.cols();
  const Eigen::Index dh = E / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Mat dconcat = proj.backward(ctx.proj, dy);
  Mat dqkv = Mat::Zero(T, 3 * E);
  for (int h = 0; h < heads; ++h) {
    const auto Q = ctx.qkv_out.block(0, h * dh, T, dh);
    const auto K = ctx.qkv_out.block(0, E + h * dh, T, dh);
    const auto V = ctx.qkv_out.block(0, 2 * E + h * dh, T, dh);
    const Mat& attn = ctx.attn[static_cast<std::size_t>(h)];
    const auto dO = dconcat.block(0, h * dh, T, dh);

    Mat dattn = dO * V.transpose();
    Mat dscores = softmax_rows_backward(attn, dattn);
    dqkv.block(0, h * dh, T, dh).noalias() = dscores * K * scale;
    dqkv.block(0, E + h * dh, T, dh).noalias() = dscores.transpose() * Q * scale;
    dqkv.block(0, 2 * E + h * dh, T, dh).noalias() = attn.transpose() * dO;
  }
  return qkv.backward(ctx.qkv, dqkv);
}

void MultiHeadAttention::collect(const std::string& prefix, ParamList& out) {
  qkv.collect(prefix + ".qkv", out);
  proj.collect(prefix + ".proj", out);
}

// ---------------------------------------------------------------------------

void Mlp::init(Eigen::Index dim, Eigen::Index hidden, RngStream& rng) {
  fc1.init(dim, hidden, rng);
  fc2.init(hidden, dim, rng);
}

Mat Mlp::forward(const Mat& x, MlpCtx* ctx) const {
  Mat h = fc1.forward(x, ctx ? &ctx->fc1 : nullptr);
  h = gelu_forward(h, ctx ? &ctx->act : nullptr);
  return fc2.forward(h, ctx ? &ctx->fc2 : nullptr);
}

Mat Mlp::backward(const MlpCtx& ctx, const Mat& dy) {
  Mat dh = fc2.backward(ctx.fc2, dy);
  dh = gelu_backward(ctx.act, dh);
  return fc1.backward(ctx.fc1, dh);
}

void Mlp::collect(const std::string& prefix, ParamList& out) {
  fc1.collect(prefix + ".fc1", out);
  fc2.collect(prefix + ".fc2", out);
}

// ---------------------------------------------------------------------------

void Block::init(Eigen::Index dim, int heads, Eigen::Index mlp_hidden, RngStream& rng) {
  ln1.init(dim);
  attn.init(dim, heads, rng);
  ln2.init(dim);
  mlp.init(dim, mlp_hidden, rng);
}

Mat Block::forward(const Mat& x, BlockCtx* ctx) const {
  Mat h = x + attn.forward(ln1.forward(x, ctx ? &ctx->ln1 : nullptr), ctx ? &ctx->attn : nullptr);
  return h + mlp.forward(ln2.forward(h, ctx ? &ctx->ln2 : nullptr), ctx ? &ctx->mlp : nullptr);
}

Mat Block::backward(const BlockCtx& ctx, const Mat& dy) {
  Mat dh = dy + ln2.backward(ctx.ln2, mlp.backward(ctx.mlp, dy));
  return dh + ln1.backward(ctx.ln1, attn.backward(ctx.attn, dh));
}

void Block::collect(const std::string& prefix, ParamList& out) {
  ln1.collect(prefix + ".ln1", out);
  attn.collect(prefix + ".attn", out);
  ln2.collect(prefix + ".ln2", out);
  mlp.collect(prefix + ".mlp", out);
}

// ---------------------------------------------------------------------------

Mat l2_normalize_rows(const Mat& x, L2NormCtx* ctx, double eps) {
  Mat y(x.rows(), x.cols());
  Vec norms(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double n = std::max(x.row(i).norm(), eps);
    norms(i) = n;
    y.row(i) = x.row(i) / n;
  }
  if (ctx) {
    ctx->y = y;
    ctx->norms = norms;
  }
  return y;
}

Mat l2_normalize_rows_backward(const L2NormCtx& ctx, const Mat& dy) {
  Mat dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const double dot = ctx.y.row(i).dot(dy.row(i));
    dx.row(i) = (dy.row(i) - ctx.y.row(i) * dot) / ctx.norms(i);
  }
  return dx;
}

}  // namespace pyrvit
