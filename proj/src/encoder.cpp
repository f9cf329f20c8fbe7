#include "pyrvit/encoder.hpp"

namespace pyrvit {

std::int64_t EncoderConfig::param_count() const {
  const std::int64_t e = embed_dim;
  const std::int64_t pe = 3 * base_patch * base_patch * e + e;
  const std::int64_t tokens = 3 * e + static_cast<std::int64_t>(base_grid) * base_grid * e;
  const std::int64_t per_block = (3 * e * e + 3 * e) + (e * e + e)  // attention
                                 + 2 * (2 * e)                      // norms
                                 + 2 * (mlp_ratio * e * e) + mlp_ratio * e + e;  // mlp
  return pe + tokens + depth * per_block + 2 * e;
}

std::int64_t param_count(const ParamList& params) {
  std::int64_t n = 0;
  for (const auto& p : params) n += p.size;
  return n;
}

void VitEncoder::init(const EncoderConfig& config, std::uint64_t seed) {
  cfg = config;
  RngStream rng(seed);
  const Eigen::Index e = cfg.embed_dim;
  patch_kernel.set(trunc_normal_mat(rng, 3 * cfg.base_patch * cfg.base_patch, e));
  patch_bias.set(Vec::Zero(e));
  cls_token.set(trunc_normal_vec(rng, e));
  cls_pos.set(trunc_normal_vec(rng, e));
  mask_token.set(trunc_normal_vec(rng, e));
  pos_grid.set(trunc_normal_mat(rng, static_cast<Eigen::Index>(cfg.base_grid) * cfg.base_grid, e));
  blocks.assign(static_cast<std::size_t>(cfg.depth), Block{});
  for (auto& blk : blocks) blk.init(e, cfg.heads, cfg.mlp_ratio * e, rng);
  norm.init(e);
}

TokenSequence VitEncoder::encode(const Image& crop, int patch_size, TokenMasking masking,
                                 const MaskSpec* mask, EncodeTape* tape) const {
  check_arg(is_supported_patch_size(patch_size),
            "unsupported patch size " + std::to_string(patch_size));
  check_arg(crop.height == crop.width, "crops must be square");
  check_arg(crop.height % patch_size == 0, "crop side not divisible by patch size");
  const int g = crop.height / patch_size;
  const int n_cells = g * g;

  if (masking != TokenMasking::kNone) {
    check_arg(mask != nullptr, "masked encoding requires a mask");
    check_arg(mask->grid_h() == g && mask->grid_w() == g && mask->patch_size == patch_size,
              "mask geometry does not match the token grid");
  }

  Mat patches = extract_patches(crop, patch_size);
  const Mat kernel = pi_resize_kernel(patch_kernel.v, patch_size, cfg.base_patch);
  Mat tokens = patches * kernel;
  tokens.rowwise() += patch_bias.v.transpose();

  std::vector<int> cells;
  std::vector<bool> replaced;
  if (masking == TokenMasking::kDropMasked) {
    cells = mask->visible_cells();
    check_arg(!cells.empty(), "mask leaves no visible tokens");
    Mat kept(static_cast<Eigen::Index>(cells.size()), tokens.cols());
    Mat kept_patches(static_cast<Eigen::Index>(cells.size()), patches.cols());
    for (std::size_t i = 0; i < cells.size(); ++i) {
      kept.row(static_cast<Eigen::Index>(i)) = tokens.row(cells[i]);
      kept_patches.row(static_cast<Eigen::Index>(i)) = patches.row(cells[i]);
    }
    tokens = std::move(kept);
    patches = std::move(kept_patches);
    replaced.assign(cells.size(), false);
  } else {
    cells.resize(static_cast<std::size_t>(n_cells));
    for (int c = 0; c < n_cells; ++c) cells[static_cast<std::size_t>(c)] = c;
    replaced.assign(cells.size(), false);
    if (masking == TokenMasking::kReplaceMasked) {
      for (int c = 0; c < n_cells; ++c) {
        if (mask->masked(c)) {
          tokens.row(c) = mask_token.v.transpose();
          replaced[static_cast<std::size_t>(c)] = true;
        }
      }
    }
  }

  const Mat pos = interpolate_pos_embed(pos_grid.v, cfg.base_grid, g);
  for (std::size_t r = 0; r < cells.size(); ++r) {
    tokens.row(static_cast<Eigen::Index>(r)) += pos.row(cells[r]);
  }

  Mat x(tokens.rows() + 1, cfg.embed_dim);
  x.row(0) = (cls_token.v + cls_pos.v).transpose();
  x.bottomRows(tokens.rows()) = tokens;

  if (tape) {
    tape->patch_size = patch_size;
    tape->grid = g;
    tape->cells = cells;
    tape->replaced = replaced;
    tape->patches = patches;
    tape->blocks.resize(blocks.size());
  }
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    x = blocks[b].forward(x, tape ? &tape->blocks[b] : nullptr);
  }
  x = norm.forward(x, tape ? &tape->ln : nullptr);

  TokenSequence out;
  out.cls = x.row(0).transpose();
  out.patch_tokens = x.bottomRows(x.rows() - 1);
  out.grid_h = g;
  out.grid_w = g;
  out.patch_size = patch_size;
  out.crop_size = crop.height;
  out.cells = std::move(cells);
  return out;
}

void VitEncoder::backward(const EncodeTape& tape, const TokenSequenceGrad& grad) {
  const Eigen::Index n = tape.patches.rows();
  Mat dy = Mat::Zero(n + 1, cfg.embed_dim);
  if (grad.cls.size() > 0) dy.row(0) = grad.cls.transpose();
  if (grad.patch_tokens.size() > 0) {
    check_arg(grad.patch_tokens.rows() == n, "patch-token gradient row mismatch");
    dy.bottomRows(n) = grad.patch_tokens;
  }

  Mat dx = norm.backward(tape.ln, dy);
  for (std::size_t b = blocks.size(); b-- > 0;) {
    dx = blocks[b].backward(tape.blocks[b], dx);
  }

  cls_token.g += dx.row(0).transpose();
  cls_pos.g += dx.row(0).transpose();
  Mat dtok = dx.bottomRows(n);

  // Position embedding: scatter token grads to grid cells, then pull back
  // through the interpolation operator.
  Mat dpos = Mat::Zero(static_cast<Eigen::Index>(tape.grid) * tape.grid, cfg.embed_dim);
  for (Eigen::Index r = 0; r < n; ++r) {
    dpos.row(tape.cells[static_cast<std::size_t>(r)]) += dtok.row(r);
  }
  if (tape.grid == cfg.base_grid) {
    pos_grid.g += dpos;
  } else {
    pos_grid.g.noalias() += pos_interp_operator(tape.grid, cfg.base_grid).transpose() * dpos;
  }

  // Mask-token rows never saw the patch embedding.
  for (Eigen::Index r = 0; r < n; ++r) {
    if (tape.replaced[static_cast<std::size_t>(r)]) {
      mask_token.g += dtok.row(r).transpose();
      dtok.row(r).setZero();
    }
  }

  patch_bias.g += dtok.colwise().sum().transpose();
  Mat dkernel = tape.patches.transpose() * dtok;
  patch_kernel.g += pi_resize_kernel_backward(dkernel, tape.patch_size, cfg.base_patch);
}

void VitEncoder::collect(const std::string& prefix, ParamList& out) {
  collect_param(out, prefix + ".patch_embed.kernel", patch_kernel, true);
  collect_param(out, prefix + ".patch_embed.bias", patch_bias, false);
  collect_param(out, prefix + ".cls_token", cls_token, false);
  collect_param(out, prefix + ".cls_pos", cls_pos, false);
  collect_param(out, prefix + ".mask_token", mask_token, false);
  collect_param(out, prefix + ".pos_embed", pos_grid, false);
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    blocks[b].collect(prefix + ".block" + std::to_string(b), out);
  }
  norm.collect(prefix + ".norm", out);
}

ParamList VitEncoder::params(const std::string& prefix) {
  ParamList out;
  collect(prefix, out);
  return out;
}

}  // namespace pyrvit
