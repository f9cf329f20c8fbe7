#pragma once

#include "pyrvit/nn.hpp"

namespace pyrvit {

struct ProjectionHeadConfig {
  Eigen::Index in_dim = 384;
  Eigen::Index hidden_dim = 512;
  Eigen::Index bottleneck_dim = 64;
  Eigen::Index n_prototypes = 1024;
};

struct ProjectionHeadCtx {
  LinearCtx l1, l2, l3;
  GeluCtx a1, a2;
  L2NormCtx bottleneck;
  Mat z;        // normalized bottleneck outputs
  Mat w_hat;    // row-normalized prototypes
  Vec w_norms;  // prototype row norms
};

// Three-layer MLP to an L2-normalized bottleneck, then cosine logits against
// row-normalized prototype vectors.
struct ProjectionHead {
  ProjectionHeadConfig cfg;
  Linear l1, l2, l3;
  Param<Mat> prototypes;  // [K, bottleneck]

  void init(const ProjectionHeadConfig& config, std::uint64_t seed);
  Mat forward(const Mat& x, ProjectionHeadCtx* ctx = nullptr) const;
  Mat backward(const ProjectionHeadCtx& ctx, const Mat& dlogits);
  void collect(const std::string& prefix, ParamList& out);
};

// Student/teacher softmax temperatures and the teacher-centering momentum.
struct DistillationTemps {
  double tau_student = 0.1;
  double tau_teacher = 0.04;
  double center_momentum = 0.9;
};

// EMA center over teacher logits, subtracted before the teacher softmax.
struct CenterState {
  Vec center;

  void init(Eigen::Index k) { center = Vec::Zero(k); }
  // Momentum update from a batch of teacher logits.
  void update(const Mat& teacher_logits, double momentum);
};

}  // namespace pyrvit
