#pragma once

#include "pyrvit/encoder.hpp"

#include <map>

namespace pyrvit {

struct DecoderConfig {
  int depth = 4;
  Eigen::Index embed_dim = 192;
  int heads = 4;
  int mlp_ratio = 4;
  std::vector<int> pos_grids = {28, 14, 7};  // global-crop grids for p=8,16,32

  static DecoderConfig standard() { return {}; }
  static DecoderConfig desk() { return {2, 48, 4, 4, {28, 14, 7}}; }
  static DecoderConfig mini() { return {1, 8, 2, 2, {28, 14, 7}}; }
};

// Predicted pixel patches for the masked positions; `assembled` (optional)
// carries the full-raster assembly with ground truth at visible positions.
struct Reconstruction {
  Mat patches;  // [n_masked, 3*p^2]
  std::vector<int> masked_cells;
  int patch_size = 0;
  int crop_size = 0;
  std::optional<Image> assembled;
};

struct DecodeTape {
  int patch_size = 0;
  int grid = 0;
  std::vector<int> visible_cells;
  std::vector<int> masked_cells;
  LinearCtx embed;
  std::vector<BlockCtx> blocks;
  LayerNormCtx ln;
  Mat masked_hidden;  // decoder outputs at masked rows, pre-projection
};

// Shallow transformer that reconstructs masked patches from the encoder's
// visible tokens. The output projection is stored at the base patch size and
// pseudoinverse-resized, so one set of decoder weights serves all mask sizes.
struct MaeDecoder {
  DecoderConfig cfg;
  Eigen::Index encoder_dim = 0;
  Linear embed;  // encoder_dim -> embed_dim
  Param<Vec> mask_token;
  Param<Vec> cls_pos;
  std::map<int, Param<Mat>> pos;  // learnable per supported grid
  std::vector<Block> blocks;
  LayerNorm norm;
  Param<Mat> out_weight;  // [embed_dim, 3*base_patch^2]
  Param<Vec> out_bias;    // [3*base_patch^2]

  void init(const DecoderConfig& config, Eigen::Index enc_dim, std::uint64_t seed);

  // visible: encoder output for the kDropMasked pass whose mask is `mask`.
  Reconstruction decode(const TokenSequence& visible, const MaskSpec& mask,
                        DecodeTape* tape = nullptr) const;

  // Returns the gradient w.r.t. the encoder outputs fed into decode().
  TokenSequenceGrad backward(const DecodeTape& tape, const Mat& dpatches);

  void collect(const std::string& prefix, ParamList& out);
  ParamList params(const std::string& prefix = "decoder");
};

// Full-crop raster with predicted patches at masked cells and ground-truth
// pixels everywhere else.
Image assemble_reconstruction(const Image& target, const Reconstruction& recon);

}  // namespace pyrvit
