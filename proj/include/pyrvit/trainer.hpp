#pragma once

#include "pyrvit/checkpoint.hpp"
#include "pyrvit/config.hpp"
#include "pyrvit/dataset.hpp"
#include "pyrvit/optim.hpp"

#include <memory>

namespace pyrvit {

// Student/teacher model pair with projection heads and the MAE decoder.
// The teacher is an EMA copy of the student (encoder + heads) and never
// receives gradients; downstream featurization always reads the teacher.
struct TrainModels {
  VitEncoder student;
  VitEncoder teacher;
  ProjectionHead student_dino, student_ibot;
  ProjectionHead teacher_dino, teacher_ibot;
  MaeDecoder decoder;
  std::unique_ptr<VitEncoder> mae_encoder;  // only when not sharing the student
  CenterState dino_center, ibot_center;

  void init(const TrainConfig& cfg);
  VitEncoder& mae_path_encoder();

  ParamList trainable_params();  // student encoder + heads + decoder (+ mae encoder)
  ParamList teacher_params();
  ParamList ema_source_params();  // student params aligned with teacher_params()
  ParamList all_params();
};

struct StepResult {
  LossParts parts;
  double total = 0.0;
  double lr = 0.0;
  int patch_size = 0;
  double grad_norm = 0.0;
};

class Pretrainer {
 public:
  explicit Pretrainer(TrainConfig cfg);

  // The learning-rate and EMA schedules depend on the dataset size; tests
  // driving train_step directly set them explicitly.
  void set_schedule(std::int64_t steps_per_epoch, std::int64_t total_epochs,
                    std::int64_t warmup_epochs);

  StepResult train_step(const std::vector<CropSet>& batch);

  // Full run: streams data, logs one CSV line per step, checkpoints per
  // epoch and at the end. Returns the final checkpoint path.
  std::string run(const std::string& out_dir, const std::string& resume_path = "",
                  bool dump_loss_parts = false);

  void save_checkpoint(const std::string& path) const;
  void load_checkpoint(const std::string& path);

  std::int64_t step() const { return step_; }
  TrainModels& models() { return models_; }
  const TrainConfig& config() const { return cfg_; }
  double current_lr() const;

 private:
  TrainConfig cfg_;
  TrainModels models_;
  AdamW opt_;
  std::int64_t step_ = 0;
  std::int64_t steps_per_epoch_ = 1;
  std::int64_t total_steps_ = 1;
  std::int64_t warmup_steps_ = 0;
  FourierFilterMask fourier_filter_;

  int draw_patch_size() const;
};

// Loads the teacher encoder (the downstream featurizer) from a checkpoint.
VitEncoder load_teacher_encoder(const std::string& checkpoint_path);
std::uint64_t checkpoint_weights_hash(const std::string& checkpoint_path);

}  // namespace pyrvit
