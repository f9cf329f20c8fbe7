#include "pyrvit/decoder.hpp"

namespace pyrvit {

void MaeDecoder::init(const DecoderConfig& config, Eigen::Index enc_dim, std::uint64_t seed) {
  cfg = config;
  encoder_dim = enc_dim;
  RngStream rng(seed);
  const Eigen::Index d = cfg.embed_dim;
  embed.init(enc_dim, d, rng);
  mask_token.set(trunc_normal_vec(rng, d));
  cls_pos.set(trunc_normal_vec(rng, d));
  pos.clear();
  for (int g : cfg.pos_grids) {
    pos[g].set(trunc_normal_mat(rng, static_cast<Eigen::Index>(g) * g, d));
  }
  blocks.assign(static_cast<std::size_t>(cfg.depth), Block{});
  for (auto& blk : blocks) blk.init(d, cfg.heads, cfg.mlp_ratio * d, rng);
  norm.init(d);
  out_weight.set(trunc_normal_mat(rng, d, 3 * kBasePatchSize * kBasePatchSize));
  out_bias.set(Vec::Zero(3 * kBasePatchSize * kBasePatchSize));
}

namespace {

// Output projection resized from the base patch size to p along the pixel
// axis, channel block by channel block.
Mat resized_out_weight(const Mat& w0, int p) {
  if (p == kBasePatchSize) return w0;
  const Mat& A = pi_resize_operator(p);
  const Eigen::Index bpix = kBasePatchSize * kBasePatchSize;
  const Eigen::Index tpix = static_cast<Eigen::Index>(p) * p;
  Mat out(w0.rows(), 3 * tpix);
  for (int c = 0; c < 3; ++c) {
    out.middleCols(c * tpix, tpix).noalias() = w0.middleCols(c * bpix, bpix) * A.transpose();
  }
  return out;
}

Vec resized_out_bias(const Vec& b0, int p) {
  if (p == kBasePatchSize) return b0;
  const Mat& A = pi_resize_operator(p);
  const Eigen::Index bpix = kBasePatchSize * kBasePatchSize;
  const Eigen::Index tpix = static_cast<Eigen::Index>(p) * p;
  Vec out(3 * tpix);
  for (int c = 0; c < 3; ++c) {
    out.segment(c * tpix, tpix).noalias() = A * b0.segment(c * bpix, bpix);
  }
  return out;
}

}  // namespace

Reconstruction MaeDecoder::decode(const TokenSequence& visible, const MaskSpec& mask,
                                  DecodeTape* tape) const {
  const int g = mask.grid_h();
  check_arg(mask.grid_w() == g, "decoder expects square grids");
  check_arg(visible.patch_size == mask.patch_size && visible.grid_h == g && visible.grid_w == g,
            "mask geometry does not match the encoded sequence");
  check_arg(pos.count(g) != 0, "no decoder position grid for grid size " + std::to_string(g));
  const auto masked = mask.masked_cells();
  check_arg(!masked.empty(), "empty mask: nothing to reconstruct");
  check_arg(static_cast<int>(visible.cells.size()) + static_cast<int>(masked.size()) == g * g,
            "visible cells plus masked cells must tile the grid");

  const Eigen::Index v = visible.patch_tokens.rows();
  Mat enc_in(v + 1, encoder_dim);
  enc_in.row(0) = visible.cls.transpose();
  enc_in.bottomRows(v) = visible.patch_tokens;
  const Mat emb = embed.forward(enc_in, tape ? &tape->embed : nullptr);

  const Eigen::Index cells = static_cast<Eigen::Index>(g) * g;
  Mat x(cells + 1, cfg.embed_dim);
  x.row(0) = emb.row(0) + cls_pos.v.transpose();
  const Mat& pos_g = pos.at(g).v;
  for (Eigen::Index c = 0; c < cells; ++c) {
    x.row(c + 1) = mask_token.v.transpose() + pos_g.row(c);
  }
  for (Eigen::Index i = 0; i < v; ++i) {
    const int cell = visible.cells[static_cast<std::size_t>(i)];
    x.row(cell + 1) = emb.row(i + 1) + pos_g.row(cell);
  }

  if (tape) {
    tape->patch_size = mask.patch_size;
    tape->grid = g;
    tape->visible_cells = visible.cells;
    tape->masked_cells = masked;
    tape->blocks.resize(blocks.size());
  }
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    x = blocks[b].forward(x, tape ? &tape->blocks[b] : nullptr);
  }
  x = norm.forward(x, tape ? &tape->ln : nullptr);

  Mat hidden(static_cast<Eigen::Index>(masked.size()), cfg.embed_dim);
  for (std::size_t i = 0; i < masked.size(); ++i) {
    hidden.row(static_cast<Eigen::Index>(i)) = x.row(masked[i] + 1);
  }
  if (tape) tape->masked_hidden = hidden;

  Reconstruction recon;
  recon.patches = hidden * resized_out_weight(out_weight.v, mask.patch_size);
  recon.patches.rowwise() += resized_out_bias(out_bias.v, mask.patch_size).transpose();
  recon.masked_cells = masked;
  recon.patch_size = mask.patch_size;
  recon.crop_size = g * mask.patch_size;
  return recon;
}

TokenSequenceGrad MaeDecoder::backward(const DecodeTape& tape, const Mat& dpatches) {
  const int p = tape.patch_size;
  const Eigen::Index bpix = kBasePatchSize * kBasePatchSize;
  const Eigen::Index tpix = static_cast<Eigen::Index>(p) * p;

  // Projection: out = H * W_p + b_p with W_p = blockwise W0 A^T.
  Mat dhidden;
  if (p == kBasePatchSize) {
    out_weight.g.noalias() += tape.masked_hidden.transpose() * dpatches;
    out_bias.g.noalias() += dpatches.colwise().sum().transpose();
    dhidden = dpatches * out_weight.v.transpose();
  } else {
    const Mat& A = pi_resize_operator(p);
    dhidden = Mat::Zero(tape.masked_hidden.rows(), cfg.embed_dim);
    for (int c = 0; c < 3; ++c) {
      const auto dout_c = dpatches.middleCols(c * tpix, tpix);
      out_weight.g.middleCols(c * bpix, bpix).noalias() +=
          tape.masked_hidden.transpose() * dout_c * A;
      out_bias.g.segment(c * bpix, bpix).noalias() +=
          A.transpose() * dout_c.colwise().sum().transpose();
      dhidden.noalias() += dout_c * A * out_weight.v.middleCols(c * bpix, bpix).transpose();
    }
  }

  const Eigen::Index cells = static_cast<Eigen::Index>(tape.grid) * tape.grid;
  Mat dx = Mat::Zero(cells + 1, cfg.embed_dim);
  for (std::size_t i = 0; i < tape.masked_cells.size(); ++i) {
    dx.row(tape.masked_cells[i] + 1) = dhidden.row(static_cast<Eigen::Index>(i));
  }

  dx = norm.backward(tape.ln, dx);
  for (std::size_t b = blocks.size(); b-- > 0;) {
    dx = blocks[b].backward(tape.blocks[b], dx);
  }

  cls_pos.g += dx.row(0).transpose();
  Param<Mat>& pos_g = pos.at(tape.grid);
  for (Eigen::Index c = 0; c < cells; ++c) {
    pos_g.g.row(c) += dx.row(c + 1);
  }
  std::vector<bool> is_visible(static_cast<std::size_t>(cells), false);
  for (int c : tape.visible_cells) is_visible[static_cast<std::size_t>(c)] = true;
  for (Eigen::Index c = 0; c < cells; ++c) {
    if (!is_visible[static_cast<std::size_t>(c)]) {
      mask_token.g += dx.row(c + 1).transpose();
    }
  }

  const Eigen::Index v = static_cast<Eigen::Index>(tape.visible_cells.size());
  Mat demb = Mat::Zero(v + 1, cfg.embed_dim);
  demb.row(0) = dx.row(0);
  for (Eigen::Index i = 0; i < v; ++i) {
    demb.row(i + 1) = dx.row(tape.visible_cells[static_cast<std::size_t>(i)] + 1);
  }
  const Mat denc = embed.backward(tape.embed, demb);

  TokenSequenceGrad grad;
  grad.cls = denc.row(0).transpose();
  grad.patch_tokens = denc.bottomRows(v);
  return grad;
}

void MaeDecoder::collect(const std::string& prefix, ParamList& out) {
  embed.collect(prefix + ".embed", out);
  collect_param(out, prefix + ".mask_token", mask_token, false);
  collect_param(out, prefix + ".cls_pos", cls_pos, false);
  for (auto& [g, p] : pos) {
    collect_param(out, prefix + ".pos" + std::to_string(g), p, false);
  }
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    blocks[b].collect(prefix + ".block" + std::to_string(b), out);
  }
  norm.collect(prefix + ".norm", out);
  collect_param(out, prefix + ".out_proj.weight", out_weight, true);
  collect_param(out, prefix + ".out_proj.bias", out_bias, false);
}

ParamList MaeDecoder::params(const std::string& prefix) {
  ParamList out;
  collect(prefix, out);
  return out;
}

Image assemble_reconstruction(const Image& target, const Reconstruction& recon) {
  check_arg(target.height == recon.crop_size && target.width == recon.crop_size,
            "target raster does not match the reconstruction support");
  Image out = target;
  scatter_patches(out, recon.patches, recon.masked_cells, recon.patch_size);
  return out;
}

}  // namespace pyrvit
