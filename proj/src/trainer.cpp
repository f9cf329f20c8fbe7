#include "pyrvit/trainer.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>

namespace pyrvit {

namespace fs = std::filesystem;

void TrainModels::init(const TrainConfig& cfg) {
  const EncoderConfig enc_cfg = cfg.encoder_config();
  const DecoderConfig dec_cfg = cfg.decoder_config();
  const ProjectionHeadConfig head_cfg = cfg.head_config();

  student.init(enc_cfg, derive_seed(cfg.seed, 0x51, 0));
  student_dino.init(head_cfg, derive_seed(cfg.seed, 0x51, 1));
  student_ibot.init(head_cfg, derive_seed(cfg.seed, 0x51, 2));
  decoder.init(dec_cfg, enc_cfg.embed_dim, derive_seed(cfg.seed, 0x51, 3));

  // The teacher starts as an exact copy of the student.
  teacher = student;
  teacher_dino = student_dino;
  teacher_ibot = student_ibot;

  if (!cfg.model.mae_shared_encoder) {
    mae_encoder = std::make_unique<VitEncoder>();
    mae_encoder->init(enc_cfg, derive_seed(cfg.seed, 0x51, 4));
  } else {
    mae_encoder.reset();
  }

  dino_center.init(head_cfg.n_prototypes);
  ibot_center.init(head_cfg.n_prototypes);

  check_arg(param_count(decoder.params()) < param_count(student.params()),
            "decoder must have strictly fewer parameters than the encoder");
}

VitEncoder& TrainModels::mae_path_encoder() { return mae_encoder ? *mae_encoder : student; }

ParamList TrainModels::trainable_params() {
  ParamList out;
  student.collect("student", out);
  student_dino.collect("student_dino", out);
  student_ibot.collect("student_ibot", out);
  decoder.collect("decoder", out);
  if (mae_encoder) mae_encoder->collect("mae_encoder", out);
  return out;
}

ParamList TrainModels::teacher_params() {
  ParamList out;
  teacher.collect("teacher", out);
  teacher_dino.collect("teacher_dino", out);
  teacher_ibot.collect("teacher_ibot", out);
  return out;
}

ParamList TrainModels::ema_source_params() {
  ParamList out;
  student.collect("teacher", out);  // aligned names so EMA pairs up by position
  student_dino.collect("teacher_dino", out);
  student_ibot.collect("teacher_ibot", out);
  return out;
}

ParamList TrainModels::all_params() {
  ParamList out = trainable_params();
  ParamList t = teacher_params();
  out.insert(out.end(), t.begin(), t.end());
  return out;
}

Pretrainer::Pretrainer(TrainConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  models_.init(cfg_);
  opt_.beta1 = cfg_.optim.beta1;
  opt_.beta2 = cfg_.optim.beta2;
  opt_.weight_decay = cfg_.optim.weight_decay;
  fourier_filter_ = make_lowpass_filter(kGlobalCropSize, kGlobalCropSize, cfg_.loss.fourier_cutoff);
}

void Pretrainer::set_schedule(std::int64_t steps_per_epoch, std::int64_t total_epochs,
                              std::int64_t warmup_epochs) {
  steps_per_epoch_ = std::max<std::int64_t>(1, steps_per_epoch);
  total_steps_ = steps_per_epoch_ * total_epochs;
  warmup_steps_ = steps_per_epoch_ * warmup_epochs;
}

double Pretrainer::current_lr() const {
  return lr_schedule(step_, cfg_.optim.base_lr, warmup_steps_, total_steps_,
                     cfg_.optim.lr_floor_ratio);
}

int Pretrainer::draw_patch_size() const {
  RngStream rng(derive_seed(cfg_.seed, 0x57E9, static_cast<std::uint64_t>(step_)));
  std::vector<int> sizes;
  std::vector<double> weights;
  for (const auto& [p, w] : cfg_.patch_size_distribution) {
    sizes.push_back(p);
    weights.push_back(w);
  }
  return sizes[rng.categorical(weights)];
}

StepResult Pretrainer::train_step(const std::vector<CropSet>& batch) {
  const int B = static_cast<int>(batch.size());
  check_arg(B >= 2, "train_step needs a batch of at least 2 crop sets");

  const int p = draw_patch_size();
  const int g_grid = kGlobalCropSize / p;
  const int n_cells = g_grid * g_grid;
  const Eigen::Index embed = models_.student.cfg.embed_dim;
  const DistillationTemps& temps = cfg_.loss.temps;
  const LossWeights& w = cfg_.loss.weights;
  VitEncoder& mae_enc = models_.mae_path_encoder();

  struct PerSample {
    std::array<MaskSpec, kNumGlobalCrops> ibot_masks, mae_masks;
    std::array<std::unique_ptr<EncodeTape>, kNumGlobalCrops> sg_tapes, mae_tapes;
    std::array<std::unique_ptr<DecodeTape>, kNumGlobalCrops> dec_tapes;
    std::array<TokenSequence, kNumGlobalCrops> sg_out, mae_out, t_out;
    std::array<std::unique_ptr<EncodeTape>, kNumLocalCrops> sl_tapes;
    std::array<TokenSequence, kNumLocalCrops> sl_out;
    std::array<Reconstruction, kNumGlobalCrops> recons;
    std::array<Mat, kNumGlobalCrops> dpred;
  };
  std::vector<PerSample> samples(static_cast<std::size_t>(B));

  // ---- forward (per-sample work is independent; weights are read-only) ----
  parallel_for(static_cast<std::size_t>(B), [&](std::size_t si) {
    const int s = static_cast<int>(si);
    PerSample& ps = samples[si];
    const CropSet& crops = batch[si];
    for (int g = 0; g < kNumGlobalCrops; ++g) {
      const std::uint64_t tag = static_cast<std::uint64_t>(s) * 16 + static_cast<std::uint64_t>(g);
      ps.ibot_masks[g] = sample_ibot_mask(
          g_grid, g_grid, cfg_.masking.ibot_ratio, p,
          derive_seed(cfg_.seed, 0x1B07000 + static_cast<std::uint64_t>(step_), tag));
      ps.mae_masks[g] = sample_mae_mask(
          g_grid, g_grid, cfg_.masking.mae_ratio, p,
          derive_seed(cfg_.seed, 0x3AE0000 + static_cast<std::uint64_t>(step_), tag));

      ps.t_out[g] = models_.teacher.encode(crops.global_crops[g], p);
      ps.sg_tapes[g] = std::make_unique<EncodeTape>();
      ps.sg_out[g] = models_.student.encode(crops.global_crops[g], p, TokenMasking::kReplaceMasked,
                                            &ps.ibot_masks[g], ps.sg_tapes[g].get());
      ps.mae_tapes[g] = std::make_unique<EncodeTape>();
      ps.mae_out[g] = mae_enc.encode(crops.global_crops[g], p, TokenMasking::kDropMasked,
                                     &ps.mae_masks[g], ps.mae_tapes[g].get());
      ps.dec_tapes[g] = std::make_unique<DecodeTape>();
      ps.recons[g] = models_.decoder.decode(ps.mae_out[g], ps.mae_masks[g], ps.dec_tapes[g].get());
    }
    for (int l = 0; l < kNumLocalCrops; ++l) {
      ps.sl_tapes[l] = std::make_unique<EncodeTape>();
      ps.sl_out[l] = models_.student.encode(crops.local_crops[l], p, TokenMasking::kNone, nullptr,
                                            ps.sl_tapes[l].get());
    }
  });

  // ---- heads ----
  constexpr int kStudentViews = kNumGlobalCrops + kNumLocalCrops;
  std::vector<Mat> teacher_dino_logits(kNumGlobalCrops);
  std::vector<Mat> student_cls(kStudentViews, Mat(B, embed));
  std::vector<Mat> student_dino_logits(kStudentViews);
  std::vector<ProjectionHeadCtx> dino_ctx(kStudentViews);

  for (int g = 0; g < kNumGlobalCrops; ++g) {
    Mat cls(B, embed);
    for (int s = 0; s < B; ++s) cls.row(s) = samples[static_cast<std::size_t>(s)].t_out[g].cls;
    teacher_dino_logits[g] = models_.teacher_dino.forward(cls);
  }
  for (int v = 0; v < kStudentViews; ++v) {
    for (int s = 0; s < B; ++s) {
      const PerSample& ps = samples[static_cast<std::size_t>(s)];
      student_cls[v].row(s) = v < kNumGlobalCrops ? ps.sg_out[v].cls : ps.sl_out[v - 2].cls;
    }
    student_dino_logits[v] = models_.student_dino.forward(student_cls[v], &dino_ctx[v]);
  }

  // iBOT heads run on masked rows only: visible positions carry no loss.
  struct MaskedRow {
    int sample;
    int view;
    int cell;
  };
  std::vector<MaskedRow> masked_rows;
  for (int s = 0; s < B; ++s) {
    const PerSample& ps = samples[static_cast<std::size_t>(s)];
    for (int g = 0; g < kNumGlobalCrops; ++g) {
      for (int cell : ps.ibot_masks[g].masked_cells()) masked_rows.push_back({s, g, cell});
    }
  }
  const int total_masked = static_cast<int>(masked_rows.size());
  Mat teacher_masked_logits, student_masked_logits;
  ProjectionHeadCtx ibot_ctx;
  if (total_masked > 0) {
    Mat t_rows(total_masked, embed);
    Mat s_rows(total_masked, embed);
    for (int r = 0; r < total_masked; ++r) {
      const MaskedRow& m = masked_rows[static_cast<std::size_t>(r)];
      const PerSample& ps = samples[static_cast<std::size_t>(m.sample)];
      t_rows.row(r) = ps.t_out[m.view].patch_tokens.row(m.cell);
      s_rows.row(r) = ps.sg_out[m.view].patch_tokens.row(m.cell);
    }
    teacher_masked_logits = models_.teacher_ibot.forward(t_rows);
    student_masked_logits = models_.student_ibot.forward(s_rows, &ibot_ctx);
  }

  // ---- losses ----
  LossParts parts;
  std::vector<Mat> d_dino_logits;
  parts.dino = dino_loss(teacher_dino_logits, student_dino_logits, temps,
                         models_.dino_center.center, &d_dino_logits);

  Mat d_ibot_rows;
  if (total_masked > 0) {
    d_ibot_rows = Mat::Zero(total_masked, models_.student_ibot.cfg.n_prototypes);
    parts.ibot = distillation_ce(teacher_masked_logits, student_masked_logits, temps,
                                 models_.ibot_center.center, &d_ibot_rows);
  }

  std::vector<Mat> d_koleo(kNumGlobalCrops);
  for (int g = 0; g < kNumGlobalCrops; ++g) {
    d_koleo[g] = Mat::Zero(B, embed);
    parts.koleo += koleo_regularizer(student_cls[g], &d_koleo[g], cfg_.loss.koleo_eps,
                                     1.0 / kNumGlobalCrops) /
                   kNumGlobalCrops;
  }

  const double recon_norm = static_cast<double>(B) * kNumGlobalCrops;
  const FourierSupport support = cfg_.fourier_support();
  for (int s = 0; s < B; ++s) {
    PerSample& ps = samples[static_cast<std::size_t>(s)];
    for (int g = 0; g < kNumGlobalCrops; ++g) {
      const Image& target = batch[static_cast<std::size_t>(s)].global_crops[g];
      ps.dpred[g] = Mat::Zero(ps.recons[g].patches.rows(), ps.recons[g].patches.cols());
      parts.mae +=
          mae_loss(ps.recons[g], target, &ps.dpred[g], w.w_mae / recon_norm) / recon_norm;

      const auto [y_hat, y] = fourier_support_pair(ps.recons[g], target, support);
      Image grad_img;
      parts.fourier += fourier_loss(y_hat, y, fourier_filter_, w.lambda1, w.lambda2, &grad_img,
                                    1.0 / recon_norm) /
                       recon_norm;
      const Mat grad_patches = extract_patches(grad_img, p);
      for (std::size_t i = 0; i < ps.recons[g].masked_cells.size(); ++i) {
        ps.dpred[g].row(static_cast<Eigen::Index>(i)) +=
            grad_patches.row(ps.recons[g].masked_cells[i]);
      }
    }
  }

  // Aborts before any state mutation if a term went non-finite.
  const double total = total_loss(parts, w);

  // ---- backward ----
  std::vector<Mat> d_student_cls(kStudentViews);
  for (int v = 0; v < kStudentViews; ++v) {
    const Mat d_logits = d_dino_logits[v] * w.w_dino;
    d_student_cls[v] = models_.student_dino.backward(dino_ctx[v], d_logits);
  }
  for (int g = 0; g < kNumGlobalCrops; ++g) {
    d_student_cls[g] += w.w_koleo * d_koleo[g];
  }
  Mat d_masked_tokens;
  if (total_masked > 0) {
    d_masked_tokens = models_.student_ibot.backward(ibot_ctx, d_ibot_rows * w.w_ibot);
  }
  // Contiguous (sample, view) blocks within the gathered masked rows.
  std::vector<std::array<std::pair<int, int>, kNumGlobalCrops>> row_blocks(
      static_cast<std::size_t>(B));
  for (auto& blocks : row_blocks) blocks.fill({0, 0});
  for (int r = 0; r < total_masked; ++r) {
    const MaskedRow& m = masked_rows[static_cast<std::size_t>(r)];
    auto& block = row_blocks[static_cast<std::size_t>(m.sample)][static_cast<std::size_t>(m.view)];
    if (block.second == 0) block.first = r;
    block.second++;
  }

  for (int s = 0; s < B; ++s) {
    PerSample& ps = samples[static_cast<std::size_t>(s)];
    for (int g = 0; g < kNumGlobalCrops; ++g) {
      TokenSequenceGrad grad;
      grad.cls = d_student_cls[g].row(s).transpose();
      grad.patch_tokens = Mat::Zero(n_cells, embed);
      const auto [row0, count] = row_blocks[static_cast<std::size_t>(s)][static_cast<std::size_t>(g)];
      for (int r = row0; r < row0 + count; ++r) {
        grad.patch_tokens.row(masked_rows[static_cast<std::size_t>(r)].cell) =
            d_masked_tokens.row(r);
      }
      models_.student.backward(*ps.sg_tapes[g], grad);
      ps.sg_tapes[g].reset();
    }
    for (int l = 0; l < kNumLocalCrops; ++l) {
      TokenSequenceGrad grad;
      grad.cls = d_student_cls[kNumGlobalCrops + l].row(s).transpose();
      models_.student.backward(*ps.sl_tapes[l], grad);
      ps.sl_tapes[l].reset();
    }
    for (int g = 0; g < kNumGlobalCrops; ++g) {
      const TokenSequenceGrad grad = models_.decoder.backward(*ps.dec_tapes[g], ps.dpred[g]);
      mae_enc.backward(*ps.mae_tapes[g], grad);
      ps.dec_tapes[g].reset();
      ps.mae_tapes[g].reset();
    }
  }

  // ---- update ----
  StepResult result;
  result.parts = parts;
  result.total = total;
  result.patch_size = p;
  result.lr = current_lr();

  ParamList trainable = models_.trainable_params();
  result.grad_norm = clip_grad_norm(trainable, cfg_.optim.grad_clip_norm);
  opt_.step(trainable, result.lr);
  zero_grads(trainable);

  const double momentum = ema_momentum_schedule(step_, total_steps_, cfg_.optim.ema_momentum_start,
                                                cfg_.optim.ema_momentum_end);
  ema_update(models_.teacher_params(), models_.ema_source_params(), momentum);

  Mat dino_center_batch(static_cast<Eigen::Index>(kNumGlobalCrops) * B,
                        models_.teacher_dino.cfg.n_prototypes);
  for (int g = 0; g < kNumGlobalCrops; ++g) {
    dino_center_batch.middleRows(static_cast<Eigen::Index>(g) * B, B) = teacher_dino_logits[g];
  }
  models_.dino_center.update(dino_center_batch, temps.center_momentum);
  if (total_masked > 0) {
    Mat ibot_rows(total_masked, models_.teacher_ibot.cfg.n_prototypes);
    Eigen::Index row = 0;
    for (int s = 0; s < B; ++s) {
      const PerSample& ps = samples[static_cast<std::size_t>(s)];
      for (int g = 0; g < kNumGlobalCrops; ++g) {
        for (int cell : ps.ibot_masks[g].masked_cells()) {
          ibot_rows.row(row++) =
              teacher_ibot_logits[g].row(static_cast<Eigen::Index>(s) * n_cells + cell);
        }
      }
    }
    models_.ibot_center.update(ibot_rows, temps.center_momentum);
  }

  ++step_;
  return result;
}

std::string Pretrainer::run(const std::string& out_dir, const std::string& resume_path,
                            bool dump_loss_parts) {
  CropStream stream(cfg_);
  const int batch =
      std::min<int>(cfg_.optim.batch_size, static_cast<int>(stream.size()));
  set_schedule(static_cast<std::int64_t>(stream.size()) / batch, cfg_.optim.total_epochs,
               cfg_.optim.warmup_epochs);

  fs::create_directories(out_dir);
  if (!resume_path.empty()) load_checkpoint(resume_path);

  const std::string metrics_path = out_dir + "/metrics.csv";
  std::ofstream metrics(metrics_path,
                        resume_path.empty() ? std::ios::trunc : std::ios::app);
  if (resume_path.empty()) {
    metrics << "step,lr,patch_size,dino,ibot,mae,fourier,koleo,total\n";
  }

  while (step_ < total_steps_) {
    const int epoch = static_cast<int>(step_ / steps_per_epoch_);
    const std::int64_t pos = step_ % steps_per_epoch_;
    std::vector<CropSet> crop_batch(static_cast<std::size_t>(batch));
    parallel_for(static_cast<std::size_t>(batch), [&](std::size_t i) {
      crop_batch[i] = stream.crop_set(epoch, static_cast<std::size_t>(pos) * batch + i);
    });

    const StepResult res = train_step(crop_batch);
    char line[256];
    std::snprintf(line, sizeof(line), "%lld,%.8g,%d,%.8g,%.8g,%.8g,%.8g,%.8g,%.8g",
                  static_cast<long long>(step_ - 1), res.lr, res.patch_size, res.parts.dino,
                  res.parts.ibot, res.parts.mae, res.parts.fourier, res.parts.koleo, res.total);
    metrics << line << "\n";
    metrics.flush();
    if (dump_loss_parts) std::cout << line << std::endl;

    if (pos == steps_per_epoch_ - 1) {
      save_checkpoint(out_dir + "/checkpoint_latest.bin");
    }
  }

  const std::string final_path = out_dir + "/checkpoint_final.bin";
  save_checkpoint(final_path);
  return final_path;
}

void Pretrainer::save_checkpoint(const std::string& path) const {
  Checkpoint ck;
  ck.set_meta("kind", "train_state");
  ck.set_meta("config", cfg_.to_json_string());
  ck.set_meta("step", std::to_string(step_));
  ck.set_meta("opt_step_count", std::to_string(opt_.step_count));
  auto& models = const_cast<TrainModels&>(models_);
  ck.add_params(models.all_params());
  for (const auto& p : models.trainable_params()) {
    const auto mi = opt_.m.find(p.name);
    const auto vi = opt_.v.find(p.name);
    if (mi != opt_.m.end() && vi != opt_.v.end()) {
      ck.add_array("opt.m." + p.name, {mi->second.size(), 1}, mi->second.data());
      ck.add_array("opt.v." + p.name, {vi->second.size(), 1}, vi->second.data());
    }
  }
  ck.add_array("center.dino", {models_.dino_center.center.size(), 1},
               models_.dino_center.center.data());
  ck.add_array("center.ibot", {models_.ibot_center.center.size(), 1},
               models_.ibot_center.center.data());
  ck.write(path);
}

void Pretrainer::load_checkpoint(const std::string& path) {
  const Checkpoint ck = Checkpoint::read(path);
  if (ck.meta("kind") != "train_state") {
    throw CheckpointError("not a training checkpoint: " + path);
  }
  if (ck.meta("config") != cfg_.to_json_string()) {
    throw CheckpointError("checkpoint config does not match the run config");
  }
  ck.load_params(models_.all_params());
  opt_.m.clear();
  opt_.v.clear();
  for (const auto& p : models_.trainable_params()) {
    if (ck.has_array("opt.m." + p.name)) {
      const auto& m = ck.array("opt.m." + p.name);
      const auto& v = ck.array("opt.v." + p.name);
      opt_.m[p.name] = Eigen::Map<const Vec>(m.data.data(), static_cast<Eigen::Index>(m.data.size()));
      opt_.v[p.name] = Eigen::Map<const Vec>(v.data.data(), static_cast<Eigen::Index>(v.data.size()));
    }
  }
  const auto& dc = ck.array("center.dino");
  models_.dino_center.center =
      Eigen::Map<const Vec>(dc.data.data(), static_cast<Eigen::Index>(dc.data.size()));
  const auto& ic = ck.array("center.ibot");
  models_.ibot_center.center =
      Eigen::Map<const Vec>(ic.data.data(), static_cast<Eigen::Index>(ic.data.size()));
  step_ = std::stoll(ck.meta("step"));
  opt_.step_count = std::stoll(ck.meta("opt_step_count"));
}

VitEncoder load_teacher_encoder(const std::string& checkpoint_path) {
  const Checkpoint ck = Checkpoint::read(checkpoint_path);
  const TrainConfig cfg = TrainConfig::from_json_string(ck.meta("config"));
  VitEncoder teacher;
  teacher.init(cfg.encoder_config(), 0);
  ck.load_params(teacher.params("teacher"));
  return teacher;
}

std::uint64_t checkpoint_weights_hash(const std::string& checkpoint_path) {
  const Checkpoint ck = Checkpoint::read(checkpoint_path);
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& name : ck.array_names()) {
    if (name.rfind("teacher.", 0) != 0) continue;
    const auto& arr = ck.array(name);
    h = fnv1a(name.data(), name.size(), h);
    h = fnv1a(arr.data.data(), arr.data.size() * sizeof(double), h);
  }
  return h;
}

}  // namespace pyrvit
