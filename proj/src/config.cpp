#include "pyrvit/config.hpp"

#include <nlohmann/json.hpp>

#include <fstream>

namespace pyrvit {

using ordered_json = nlohmann::ordered_json;

EncoderConfig encoder_preset(const std::string& name) {
  if (name == "vit_s") return EncoderConfig::vit_s();
  if (name == "vit_b") return EncoderConfig::vit_b();
  if (name == "desk") return EncoderConfig::desk();
  if (name == "mini") return EncoderConfig::mini();
  throw InvalidArgument("unknown encoder preset: " + name);
}

DecoderConfig decoder_preset(const std::string& name) {
  if (name == "standard") return DecoderConfig::standard();
  if (name == "desk") return DecoderConfig::desk();
  if (name == "mini") return DecoderConfig::mini();
  throw InvalidArgument("unknown decoder preset: " + name);
}

EncoderConfig TrainConfig::encoder_config() const { return encoder_preset(model.encoder_preset); }
DecoderConfig TrainConfig::decoder_config() const { return decoder_preset(model.decoder_preset); }

ProjectionHeadConfig TrainConfig::head_config() const {
  ProjectionHeadConfig cfg;
  cfg.in_dim = encoder_config().embed_dim;
  cfg.hidden_dim = model.head_hidden_dim;
  cfg.bottleneck_dim = model.head_bottleneck_dim;
  cfg.n_prototypes = model.head_prototypes;
  return cfg;
}

FourierSupport TrainConfig::fourier_support() const {
  if (loss.fourier_support == "full") return FourierSupport::kFull;
  if (loss.fourier_support == "masked_zeroed") return FourierSupport::kMaskedZeroed;
  throw InvalidArgument("unknown fourier_support: " + loss.fourier_support);
}

void TrainConfig::validate() const {
  check_arg(masking.mae_ratio > masking.ibot_ratio,
            "MAE mask ratio must exceed the iBOT mask ratio");
  check_arg(masking.ibot_ratio >= 0.0 && masking.ibot_ratio < 1.0, "iBOT ratio outside [0, 1)");
  check_arg(masking.mae_ratio < 1.0, "MAE ratio outside [0, 1)");
  check_arg(optim.warmup_epochs <= optim.total_epochs, "warmup_epochs exceeds total_epochs");
  check_arg(optim.batch_size >= 2, "batch_size must be at least 2 (KoLeo needs a batch)");
  check_arg(optim.ema_momentum_start >= 0.0 && optim.ema_momentum_start <= 1.0 &&
                optim.ema_momentum_end >= 0.0 && optim.ema_momentum_end <= 1.0,
            "EMA momentum outside [0, 1]");
  check_arg(loss.weights.w_dino >= 0 && loss.weights.w_ibot >= 0 && loss.weights.w_mae >= 0 &&
                loss.weights.w_koleo >= 0 && loss.weights.lambda1 >= 0 && loss.weights.lambda2 >= 0,
            "loss weights must be non-negative");
  double psum = 0.0;
  for (const auto& [p, w] : patch_size_distribution) {
    check_arg(is_supported_patch_size(p), "unsupported patch size in distribution");
    check_arg(w >= 0.0, "negative patch-size weight");
    psum += w;
  }
  check_arg(psum > 0.0, "patch-size distribution sums to zero");
  check_arg(data.source == "synthetic" || data.source == "shard",
            "data.source must be 'synthetic' or 'shard'");
  check_arg(data.tile_size >= kGlobalCropSize, "tile_size must fit the global crop");
  fourier_support();
  encoder_config();
  decoder_config();
}

namespace {

ordered_json to_json(const TrainConfig& c) {
  ordered_json j;
  j["seed"] = c.seed;
  j["data"] = {{"source", c.data.source},
               {"shard_dir", c.data.shard_dir},
               {"n_pyramids", c.data.n_pyramids},
               {"base_size", c.data.base_size},
               {"texture_classes", c.data.texture_classes},
               {"resolution_probs", c.data.resolution_probs},
               {"tile_size", c.data.tile_size},
               {"augment",
                {{"enabled", c.data.augment.enabled},
                 {"flip_prob", c.data.augment.flip_prob},
                 {"brightness_delta", c.data.augment.brightness_delta},
                 {"contrast_delta", c.data.augment.contrast_delta}}}};
  j["model"] = {{"encoder", c.model.encoder_preset},
                {"decoder", c.model.decoder_preset},
                {"head_hidden_dim", c.model.head_hidden_dim},
                {"head_bottleneck_dim", c.model.head_bottleneck_dim},
                {"head_prototypes", c.model.head_prototypes},
                {"mae_shared_encoder", c.model.mae_shared_encoder}};
  j["masking"] = {{"ibot_ratio", c.masking.ibot_ratio}, {"mae_ratio", c.masking.mae_ratio}};
  ordered_json dist;
  for (const auto& [p, w] : c.patch_size_distribution) dist[std::to_string(p)] = w;
  j["patch_size_distribution"] = dist;
  j["loss"] = {{"w_dino", c.loss.weights.w_dino},
               {"w_ibot", c.loss.weights.w_ibot},
               {"w_mae", c.loss.weights.w_mae},
               {"w_koleo", c.loss.weights.w_koleo},
               {"lambda1", c.loss.weights.lambda1},
               {"lambda2", c.loss.weights.lambda2},
               {"fourier_support", c.loss.fourier_support},
               {"fourier_cutoff", c.loss.fourier_cutoff},
               {"tau_student", c.loss.temps.tau_student},
               {"tau_teacher", c.loss.temps.tau_teacher},
               {"center_momentum", c.loss.temps.center_momentum},
               {"koleo_eps", c.loss.koleo_eps}};
  j["optim"] = {{"base_lr", c.optim.base_lr},
                {"warmup_epochs", c.optim.warmup_epochs},
                {"total_epochs", c.optim.total_epochs},
                {"batch_size", c.optim.batch_size},
                {"weight_decay", c.optim.weight_decay},
                {"beta1", c.optim.beta1},
                {"beta2", c.optim.beta2},
                {"grad_clip_norm", c.optim.grad_clip_norm},
                {"ema_momentum_start", c.optim.ema_momentum_start},
                {"ema_momentum_end", c.optim.ema_momentum_end},
                {"lr_floor_ratio", c.optim.lr_floor_ratio}};
  return j;
}

template <typename T>
void maybe(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

TrainConfig from_json(const nlohmann::json& j) {
  TrainConfig c;
  maybe(j, "seed", c.seed);
  if (j.contains("data")) {
    const auto& d = j.at("data");
    maybe(d, "source", c.data.source);
    maybe(d, "shard_dir", c.data.shard_dir);
    maybe(d, "n_pyramids", c.data.n_pyramids);
    maybe(d, "base_size", c.data.base_size);
    maybe(d, "texture_classes", c.data.texture_classes);
    maybe(d, "resolution_probs", c.data.resolution_probs);
    maybe(d, "tile_size", c.data.tile_size);
    if (d.contains("augment")) {
      const auto& a = d.at("augment");
      maybe(a, "enabled", c.data.augment.enabled);
      maybe(a, "flip_prob", c.data.augment.flip_prob);
      maybe(a, "brightness_delta", c.data.augment.brightness_delta);
      maybe(a, "contrast_delta", c.data.augment.contrast_delta);
    }
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    maybe(m, "encoder", c.model.encoder_preset);
    maybe(m, "decoder", c.model.decoder_preset);
    maybe(m, "head_hidden_dim", c.model.head_hidden_dim);
    maybe(m, "head_bottleneck_dim", c.model.head_bottleneck_dim);
    maybe(m, "head_prototypes", c.model.head_prototypes);
    maybe(m, "mae_shared_encoder", c.model.mae_shared_encoder);
  }
  if (j.contains("masking")) {
    maybe(j.at("masking"), "ibot_ratio", c.masking.ibot_ratio);
    maybe(j.at("masking"), "mae_ratio", c.masking.mae_ratio);
  }
  if (j.contains("patch_size_distribution")) {
    c.patch_size_distribution.clear();
    for (auto it = j.at("patch_size_distribution").begin();
         it != j.at("patch_size_distribution").end(); ++it) {
      c.patch_size_distribution[std::stoi(it.key())] = it.value().get<double>();
    }
  }
  if (j.contains("loss")) {
    const auto& l = j.at("loss");
    maybe(l, "w_dino", c.loss.weights.w_dino);
    maybe(l, "w_ibot", c.loss.weights.w_ibot);
    maybe(l, "w_mae", c.loss.weights.w_mae);
    maybe(l, "w_koleo", c.loss.weights.w_koleo);
    maybe(l, "lambda1", c.loss.weights.lambda1);
    maybe(l, "lambda2", c.loss.weights.lambda2);
    maybe(l, "fourier_support", c.loss.fourier_support);
    maybe(l, "fourier_cutoff", c.loss.fourier_cutoff);
    maybe(l, "tau_student", c.loss.temps.tau_student);
    maybe(l, "tau_teacher", c.loss.temps.tau_teacher);
    maybe(l, "center_momentum", c.loss.temps.center_momentum);
    maybe(l, "koleo_eps", c.loss.koleo_eps);
  }
  if (j.contains("optim")) {
    const auto& o = j.at("optim");
    maybe(o, "base_lr", c.optim.base_lr);
    maybe(o, "warmup_epochs", c.optim.warmup_epochs);
    maybe(o, "total_epochs", c.optim.total_epochs);
    maybe(o, "batch_size", c.optim.batch_size);
    maybe(o, "weight_decay", c.optim.weight_decay);
    maybe(o, "beta1", c.optim.beta1);
    maybe(o, "beta2", c.optim.beta2);
    maybe(o, "grad_clip_norm", c.optim.grad_clip_norm);
    maybe(o, "ema_momentum_start", c.optim.ema_momentum_start);
    maybe(o, "ema_momentum_end", c.optim.ema_momentum_end);
    maybe(o, "lr_floor_ratio", c.optim.lr_floor_ratio);
  }
  return c;
}

}  // namespace

std::string TrainConfig::to_json_string() const { return to_json(*this).dump(2) + "\n"; }

TrainConfig TrainConfig::from_json_string(const std::string& text) {
  TrainConfig c = from_json(nlohmann::json::parse(text));
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw InvalidArgument("cannot open config file: " + path);
  std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return from_json_string(text);
}

void TrainConfig::save(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw InvalidArgument("cannot write config file: " + path);
  os << to_json_string();
}

}  // namespace pyrvit
