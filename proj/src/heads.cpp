#include "pyrvit/heads.hpp"

namespace pyrvit {

void ProjectionHead::init(const ProjectionHeadConfig& config, std::uint64_t seed) {
  cfg = config;
  RngStream rng(seed);
  l1.init(cfg.in_dim, cfg.hidden_dim, rng);
  l2.init(cfg.hidden_dim, cfg.hidden_dim, rng);
  l3.init(cfg.hidden_dim, cfg.bottleneck_dim, rng);
  prototypes.set(trunc_normal_mat(rng, cfg.n_prototypes, cfg.bottleneck_dim));
}

Mat ProjectionHead::forward(const Mat& x, ProjectionHeadCtx* ctx) const {
  Mat h = l1.forward(x, ctx ? &ctx->l1 : nullptr);
  h = gelu_forward(h, ctx ? &ctx->a1 : nullptr);
  h = l2.forward(h, ctx ? &ctx->l2 : nullptr);
  h = gelu_forward(h, ctx ? &ctx->a2 : nullptr);
  h = l3.forward(h, ctx ? &ctx->l3 : nullptr);
  Mat z = l2_normalize_rows(h, ctx ? &ctx->bottleneck : nullptr);

  L2NormCtx wctx;
  const Mat w_hat = l2_normalize_rows(prototypes.v, &wctx);
  if (ctx) {
    ctx->z = z;
    ctx->w_hat = w_hat;
    ctx->w_norms = wctx.norms;
  }
  return z * w_hat.transpose();
}

Mat ProjectionHead::backward(const ProjectionHeadCtx& ctx, const Mat& dlogits) {
  // logits = z * w_hat^T
  Mat dz = dlogits * ctx.w_hat;
  Mat dw_hat = dlogits.transpose() * ctx.z;
  L2NormCtx wctx{ctx.w_hat, ctx.w_norms};
  prototypes.g += l2_normalize_rows_backward(wctx, dw_hat);

  Mat dh = l2_normalize_rows_backward(ctx.bottleneck, dz);
  dh = l3.backward(ctx.l3, dh);
  dh = gelu_backward(ctx.a2, dh);
  dh = l2.backward(ctx.l2, dh);
  dh = gelu_backward(ctx.a1, dh);
  return l1.backward(ctx.l1, dh);
}

void ProjectionHead::collect(const std::string& prefix, ParamList& out) {
  l1.collect(prefix + ".l1", out);
  l2.collect(prefix + ".l2", out);
  l3.collect(prefix + ".l3", out);
  collect_param(out, prefix + ".prototypes", prototypes, true);
}

void CenterState::update(const Mat& teacher_logits, double momentum) {
  const Vec batch_mean = teacher_logits.colwise().mean().transpose();
  center = momentum * center + (1.0 - momentum) * batch_mean;
}

}  // namespace pyrvit
