#pragma once

#include "pyrvit/param.hpp"

#include <map>

namespace pyrvit {

// AdamW with decoupled weight decay. Moment buffers are keyed by parameter
// name so state survives checkpointing.
struct AdamW {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.04;
  std::int64_t step_count = 0;
  std::map<std::string, Vec> m;
  std::map<std::string, Vec> v;

  void step(const ParamList& params, double lr);
};

// Global-norm gradient clipping; a non-positive max_norm disables it.
// Returns the pre-clip norm.
double clip_grad_norm(const ParamList& params, double max_norm);

// teacher <- momentum * teacher + (1 - momentum) * student, elementwise over
// paired parameter lists. No gradients are involved.
void ema_update(const ParamList& teacher, const ParamList& student, double momentum);

// Linear warmup from 0 to base_lr over warmup_steps, then cosine decay to
// base_lr * floor_ratio at total_steps. lr(0) = 0 and lr(warmup) = base_lr
// exactly.
double lr_schedule(std::int64_t step, double base_lr, std::int64_t warmup_steps,
                   std::int64_t total_steps, double floor_ratio = 0.01);

// Cosine ramp of the teacher EMA momentum from start (step 0) to end (final
// step).
double ema_momentum_schedule(std::int64_t step, std::int64_t total_steps, double start,
                             double end);

}  // namespace pyrvit
