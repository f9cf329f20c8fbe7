#include "pyrvit/optim.hpp"

#include <cmath>

namespace pyrvit {

void AdamW::step(const ParamList& params, double lr) {
  ++step_count;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
  for (const auto& p : params) {
    auto value = Eigen::Map<Vec>(p.value, p.size);
    const auto grad = Eigen::Map<const Vec>(p.grad, p.size);
    Vec& mi = m[p.name];
    Vec& vi = v[p.name];
    if (mi.size() != p.size) mi = Vec::Zero(p.size);
    if (vi.size() != p.size) vi = Vec::Zero(p.size);

    if (p.decay && weight_decay != 0.0) {
      value -= lr * weight_decay * value;
    }
    mi = beta1 * mi + (1.0 - beta1) * grad;
    vi = beta2 * vi + (1.0 - beta2) * grad.cwiseProduct(grad);
    value.array() -= lr * (mi.array() / bc1) / ((vi.array() / bc2).sqrt() + eps);
  }
}

double clip_grad_norm(const ParamList& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    sq += Eigen::Map<const Vec>(p.grad, p.size).squaredNorm();
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (const auto& p : params) {
      Eigen::Map<Vec>(p.grad, p.size) *= scale;
    }
  }
  return norm;
}

void ema_update(const ParamList& teacher, const ParamList& student, double momentum) {
  check_arg(momentum >= 0.0 && momentum <= 1.0, "EMA momentum must lie in [0, 1]");
  check_arg(teacher.size() == student.size(), "teacher/student parameter lists differ");
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    check_arg(teacher[i].size == student[i].size,
              "shape mismatch for parameter " + teacher[i].name);
    auto t = Eigen::Map<Vec>(teacher[i].value, teacher[i].size);
    const auto s = Eigen::Map<const Vec>(student[i].value, student[i].size);
    t = momentum * t + (1.0 - momentum) * s;
  }
}

double lr_schedule(std::int64_t step, double base_lr, std::int64_t warmup_steps,
                   std::int64_t total_steps, double floor_ratio) {
  check_arg(step >= 0, "negative step");
  if (warmup_steps > 0 && step <= warmup_steps) {
    return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  if (step >= total_steps) return base_lr * floor_ratio;
  const double floor = base_lr * floor_ratio;
  const double progress = static_cast<double>(step - warmup_steps) /
                          static_cast<double>(total_steps - warmup_steps);
  return floor + (base_lr - floor) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

double ema_momentum_schedule(std::int64_t step, std::int64_t total_steps, double start,
                             double end) {
  if (total_steps <= 0 || step >= total_steps) return end;
  const double progress = static_cast<double>(step) / static_cast<double>(total_steps);
  return end - (end - start) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

}  // namespace pyrvit
