#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oracles.hpp"
#include "pyrvit/decoder.hpp"

using namespace pyrvit;

namespace {

Image random_image(int side, std::uint64_t seed) {
  RngStream rng(seed);
  Image img(side, side);
  for (auto& c : img.ch) {
    for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = rng.uniform();
  }
  return img;
}

}  // namespace

TEST_CASE("token-count law over all six crop/patch pairs") {
  VitEncoder enc;
  enc.init(EncoderConfig::desk(), 1);
  const int crops[] = {224, 96};
  for (int crop : crops) {
    for (int p : kSupportedPatchSizes) {
      const Image img = random_image(crop, 7);
      const TokenSequence seq = enc.encode(img, p);
      const int g = crop / p;
      CHECK(seq.patch_tokens.rows() == g * g);
      CHECK(seq.grid_h == g);
      CHECK(seq.grid_w == g);
      CHECK(seq.cls.size() == 64);
    }
  }
}

TEST_CASE("weight sharing: one set of weights serves all patch sizes without mutation") {
  VitEncoder enc;
  enc.init(EncoderConfig::desk(), 2);
  const std::uint64_t before = weights_hash(enc.params());
  for (int p : kSupportedPatchSizes) {
    const TokenSequence seq = enc.encode(random_image(224, p), p);
    CHECK(seq.cls.allFinite());
  }
  CHECK(weights_hash(enc.params()) == before);
}

TEST_CASE("masked modes: replacement keeps the grid, dropping consumes the rest") {
  VitEncoder enc;
  enc.init(EncoderConfig::desk(), 3);
  const Image img = random_image(224, 9);
  const MaskSpec mask = sample_mae_mask(14, 14, 0.75, 16, 4);

  const TokenSequence replaced = enc.encode(img, 16, TokenMasking::kReplaceMasked, &mask);
  CHECK(replaced.patch_tokens.rows() == 196);

  const TokenSequence dropped = enc.encode(img, 16, TokenMasking::kDropMasked, &mask);
  CHECK(dropped.patch_tokens.rows() == 196 - 147);  // 25% visible
  CHECK(dropped.cells == mask.visible_cells());

  // Geometry mismatch: a mask built for another grid must be rejected.
  const MaskSpec wrong = sample_mae_mask(7, 7, 0.75, 32, 4);
  CHECK_THROWS_AS(enc.encode(img, 16, TokenMasking::kReplaceMasked, &wrong), InvalidArgument);
  CHECK_THROWS_AS(enc.encode(Image(100, 100), 16), InvalidArgument);
  CHECK_THROWS_AS(enc.encode(img, 24), InvalidArgument);
}

TEST_CASE("encoding is deterministic") {
  VitEncoder enc;
  enc.init(EncoderConfig::desk(), 4);
  const Image img = random_image(96, 11);
  const TokenSequence a = enc.encode(img, 16);
  const TokenSequence b = enc.encode(img, 16);
  CHECK(a.cls == b.cls);
  CHECK(a.patch_tokens == b.patch_tokens);
}

TEST_CASE("miniature encoder passes central finite-difference checks") {
  EncoderConfig mini = EncoderConfig::mini();
  VitEncoder enc;
  enc.init(mini, 5);
  const Image img = random_image(32, 13);  // 2x2 grid at p=16

  const auto loss_at = [&](TokenMasking masking, const MaskSpec* mask) {
    return [&enc, &img, masking, mask]() {
      const TokenSequence seq = enc.encode(img, 16, masking, mask);
      return 0.5 * seq.cls.squaredNorm() + 0.25 * seq.patch_tokens.squaredNorm();
    };
  };
  const auto run_backward = [&](TokenMasking masking, const MaskSpec* mask) {
    zero_grads(enc.params());
    EncodeTape tape;
    const TokenSequence seq = enc.encode(img, 16, masking, mask, &tape);
    TokenSequenceGrad grad;
    grad.cls = seq.cls;
    grad.patch_tokens = 0.5 * seq.patch_tokens;
    enc.backward(tape, grad);
  };

  SUBCASE("plain encoding") {
    run_backward(TokenMasking::kNone, nullptr);
    CHECK(oracles::max_grad_rel_error(loss_at(TokenMasking::kNone, nullptr), enc.params(), 21) <
          1e-4);
  }
  SUBCASE("ibot-style token replacement") {
    const MaskSpec mask = sample_ibot_mask(2, 2, 0.5, 16, 6);
    run_backward(TokenMasking::kReplaceMasked, &mask);
    CHECK(oracles::max_grad_rel_error(loss_at(TokenMasking::kReplaceMasked, &mask), enc.params(),
                                      22) < 1e-4);
  }
  SUBCASE("mae-style token dropping") {
    const MaskSpec mask = sample_mae_mask(2, 2, 0.5, 16, 7);
    run_backward(TokenMasking::kDropMasked, &mask);
    CHECK(oracles::max_grad_rel_error(loss_at(TokenMasking::kDropMasked, &mask), enc.params(),
                                      23) < 1e-4);
  }
}

TEST_CASE("decoder reconstructs one patch per masked cell at every patch size") {
  VitEncoder enc;
  enc.init(EncoderConfig::desk(), 6);
  MaeDecoder dec;
  dec.init(DecoderConfig::desk(), 64, 7);
  const std::uint64_t before = weights_hash(dec.params());

  for (int p : kSupportedPatchSizes) {
    const int g = 224 / p;
    const Image img = random_image(224, 20 + static_cast<std::uint64_t>(p));
    const MaskSpec mask = sample_mae_mask(g, g, 0.75, p, 8);
    const TokenSequence visible = enc.encode(img, p, TokenMasking::kDropMasked, &mask);
    const Reconstruction recon = dec.decode(visible, mask);
    CHECK(recon.patches.rows() == mask.masked_count());
    CHECK(recon.patches.cols() == 3 * p * p);
    CHECK(recon.patches.allFinite());
  }
  CHECK(weights_hash(dec.params()) == before);  // flexified projection, no mutation
}

TEST_CASE("decoder rejects bad inputs") {
  VitEncoder enc;
  enc.init(EncoderConfig::desk(), 8);
  MaeDecoder dec;
  dec.init(DecoderConfig::desk(), 64, 9);
  const Image img = random_image(224, 30);

  const MaskSpec empty = sample_mae_mask(14, 14, 0.0, 16, 1);
  const MaskSpec mask = sample_mae_mask(14, 14, 0.75, 16, 1);
  const TokenSequence visible = enc.encode(img, 16, TokenMasking::kDropMasked, &mask);
  CHECK_THROWS_AS(dec.decode(visible, empty), InvalidArgument);

  const MaskSpec wrong = sample_mae_mask(7, 7, 0.75, 32, 1);
  CHECK_THROWS_AS(dec.decode(visible, wrong), InvalidArgument);
}

TEST_CASE("decoder has strictly fewer parameters than its encoder") {
  VitEncoder enc_s;
  enc_s.init(EncoderConfig::vit_s(), 10);
  MaeDecoder dec;
  dec.init(DecoderConfig::standard(), 384, 11);
  CHECK(param_count(dec.params()) < param_count(enc_s.params()));

  VitEncoder enc_d;
  enc_d.init(EncoderConfig::desk(), 12);
  MaeDecoder dec_d;
  dec_d.init(DecoderConfig::desk(), 64, 13);
  CHECK(param_count(dec_d.params()) < param_count(enc_d.params()));
}

TEST_CASE("miniature encoder+decoder pass joint finite-difference checks") {
  VitEncoder enc;
  enc.init(EncoderConfig::mini(), 14);
  MaeDecoder dec;
  dec.init(DecoderConfig::mini(), 16, 15);
  const Image img = random_image(32, 40);
  // Use a supported decoder grid: 32/16 = 2 needs a pos grid entry.
  dec.pos.clear();
  {
    RngStream rng(16);
    dec.pos[2].set(trunc_normal_mat(rng, 4, dec.cfg.embed_dim));
  }
  const MaskSpec mask = sample_mae_mask(2, 2, 0.5, 16, 17);

  const auto loss_fn = [&]() {
    const TokenSequence visible = enc.encode(img, 16, TokenMasking::kDropMasked, &mask);
    const Reconstruction recon = dec.decode(visible, mask);
    return 0.5 * recon.patches.squaredNorm();
  };

  ParamList all = enc.params("enc");
  for (const auto& p : dec.params("dec")) all.push_back(p);
  zero_grads(all);

  EncodeTape etape;
  DecodeTape dtape;
  const TokenSequence visible = enc.encode(img, 16, TokenMasking::kDropMasked, &mask, &etape);
  const Reconstruction recon = dec.decode(visible, mask, &dtape);
  const TokenSequenceGrad dvis = dec.backward(dtape, recon.patches);
  enc.backward(etape, dvis);

  CHECK(oracles::max_grad_rel_error(loss_fn, all, 24, 16) < 1e-4);
}

TEST_CASE("assembled reconstruction keeps ground truth at visible cells") {
  VitEncoder enc;
  enc.init(EncoderConfig::desk(), 18);
  MaeDecoder dec;
  dec.init(DecoderConfig::desk(), 64, 19);
  const Image img = random_image(224, 50);
  const MaskSpec mask = sample_mae_mask(14, 14, 0.75, 16, 2);
  const TokenSequence visible = enc.encode(img, 16, TokenMasking::kDropMasked, &mask);
  const Reconstruction recon = dec.decode(visible, mask);
  const Image assembled = assemble_reconstruction(img, recon);

  const Mat img_patches = extract_patches(img, 16);
  const Mat asm_patches = extract_patches(assembled, 16);
  for (int cell : mask.visible_cells()) {
    CHECK(img_patches.row(cell) == asm_patches.row(cell));
  }
  int row = 0;
  for (int cell : recon.masked_cells) {
    CHECK(asm_patches.row(cell) == recon.patches.row(row++));
  }
}
