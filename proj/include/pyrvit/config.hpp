#pragma once

#include "pyrvit/decoder.hpp"
#include "pyrvit/heads.hpp"
#include "pyrvit/losses.hpp"
#include "pyrvit/pyramid.hpp"

#include <array>
#include <map>
#include <string>

namespace pyrvit {

struct DataConfig {
  std::string source = "synthetic";  // "synthetic" | "shard"
  std::string shard_dir;
  int n_pyramids = 256;
  int base_size = 512;
  std::vector<int> texture_classes = {0, 3};
  std::array<double, kNumLevels> resolution_probs = {0.25, 0.25, 0.25, 0.25};
  int tile_size = 256;
  AugmentConfig augment;
};

struct ModelConfig {
  std::string encoder_preset = "vit_s";  // vit_s | vit_b | desk | mini
  std::string decoder_preset = "standard";
  Eigen::Index head_hidden_dim = 512;
  Eigen::Index head_bottleneck_dim = 64;
  Eigen::Index head_prototypes = 1024;
  bool mae_shared_encoder = true;  // MAE path reuses the student encoder
};

struct MaskingConfig {
  double ibot_ratio = 0.3;
  double mae_ratio = 0.75;
};

struct LossConfig {
  LossWeights weights;
  std::string fourier_support = "full";  // "full" | "masked_zeroed"
  double fourier_cutoff = 0.25;
  DistillationTemps temps;
  double koleo_eps = 1e-8;
};

struct OptimConfig {
  double base_lr = 0.002;
  int warmup_epochs = 5;
  int total_epochs = 100;
  int batch_size = 16;
  double weight_decay = 0.04;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double grad_clip_norm = 3.0;
  double ema_momentum_start = 0.992;
  double ema_momentum_end = 1.0;
  double lr_floor_ratio = 0.01;
};

struct TrainConfig {
  std::uint64_t seed = 0;
  DataConfig data;
  ModelConfig model;
  MaskingConfig masking;
  // Per-step sampling weights over patch sizes {8, 16, 32}.
  std::map<int, double> patch_size_distribution = {{8, 1.0}, {16, 1.0}, {32, 1.0}};
  LossConfig loss;
  OptimConfig optim;

  EncoderConfig encoder_config() const;
  DecoderConfig decoder_config() const;
  ProjectionHeadConfig head_config() const;
  FourierSupport fourier_support() const;

  // Throws InvalidArgument on contract violations (e.g. the MAE ratio not
  // exceeding the iBOT ratio).
  void validate() const;

  std::string to_json_string() const;
  static TrainConfig from_json_string(const std::string& text);
  static TrainConfig load(const std::string& path);
  void save(const std::string& path) const;
};

EncoderConfig encoder_preset(const std::string& name);
DecoderConfig decoder_preset(const std::string& name);

}  // namespace pyrvit
