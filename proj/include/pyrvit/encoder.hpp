#pragma once

#include "pyrvit/flexi.hpp"
#include "pyrvit/image.hpp"
#include "pyrvit/masks.hpp"
#include "pyrvit/nn.hpp"

#include <optional>
#include <string>
#include <vector>

namespace pyrvit {

struct EncoderConfig {
  int depth = 12;
  int heads = 6;
  Eigen::Index embed_dim = 384;
  int mlp_ratio = 4;
  int base_patch = kBasePatchSize;
  int base_grid = 14;  // 224 / 16

  static EncoderConfig vit_s() { return {12, 6, 384, 4}; }
  static EncoderConfig vit_b() { return {12, 12, 768, 4}; }
  // Desk-scale preset used by tests and the toy end-to-end run.
  static EncoderConfig desk() { return {4, 4, 64, 4}; }
  // Miniature preset for finite-difference checks.
  static EncoderConfig mini() { return {2, 2, 16, 2}; }

  std::int64_t param_count() const;
};

// CLS embedding plus patch-token embeddings with grid geometry. `cells`
// holds the flat grid index of each row of patch_tokens (a strict subset
// when tokens were dropped on the MAE path).
struct TokenSequence {
  Vec cls;
  Mat patch_tokens;
  int grid_h = 0;
  int grid_w = 0;
  int patch_size = 0;
  int crop_size = 0;
  std::vector<int> cells;
};

enum class TokenMasking {
  kNone,           // all tokens pass through
  kReplaceMasked,  // masked tokens swapped for the learnable mask token (iBOT)
  kDropMasked,     // masked tokens removed before encoding (MAE)
};

struct EncodeTape {
  int patch_size = 0;
  int grid = 0;
  std::vector<int> cells;
  std::vector<bool> replaced;  // per token row: embedding overwritten by mask token
  Mat patches;                 // pixel patches feeding the embed, aligned with token rows
  std::vector<BlockCtx> blocks;
  LayerNormCtx ln;
};

// Gradient of an encode() call with respect to its outputs.
struct TokenSequenceGrad {
  Vec cls = Vec();
  Mat patch_tokens = Mat();
};

// ViT encoder with a flexible patch size: one stored kernel and position
// grid serve patch sizes {8, 16, 32} through pseudoinverse resizing and
// bilinear interpolation.
struct VitEncoder {
  EncoderConfig cfg;
  Param<Mat> patch_kernel;  // [3*base_patch^2, embed_dim]
  Param<Vec> patch_bias;
  Param<Vec> cls_token;
  Param<Vec> cls_pos;
  Param<Vec> mask_token;
  Param<Mat> pos_grid;  // [base_grid^2, embed_dim]
  std::vector<Block> blocks;
  LayerNorm norm;

  void init(const EncoderConfig& config, std::uint64_t seed);

  // Embeds, masks, and runs the transformer. `mask` is required for the
  // masked modes and must match the (crop, patch) geometry.
  TokenSequence encode(const Image& crop, int patch_size, TokenMasking masking = TokenMasking::kNone,
                       const MaskSpec* mask = nullptr, EncodeTape* tape = nullptr) const;

  // Accumulates parameter gradients for a recorded encode() call.
  void backward(const EncodeTape& tape, const TokenSequenceGrad& grad);

  void collect(const std::string& prefix, ParamList& out);
  ParamList params(const std::string& prefix = "encoder");
};

std::int64_t param_count(const ParamList& params);

}  // namespace pyrvit
