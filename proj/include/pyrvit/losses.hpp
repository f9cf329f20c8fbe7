#pragma once

#include "pyrvit/decoder.hpp"
#include "pyrvit/heads.hpp"
#include "pyrvit/image.hpp"
#include "pyrvit/masks.hpp"

namespace pyrvit {

// Outer loss weights and the Fourier band weights (lambda1 low, lambda2
// high). The KoLeo weight is not fixed by the composite-loss definition; it
// defaults to 0.1.
struct LossWeights {
  double w_dino = 1.0;
  double w_ibot = 1.0;
  double w_mae = 1.0;
  double w_koleo = 0.1;
  double lambda1 = 5.0;
  double lambda2 = 1.0;
};

// Cross-entropy of the student softmax against the centered, sharpened
// teacher softmax, averaged over rows. dstudent (optional) receives the
// gradient w.r.t. the raw student logits, scaled by `grad_scale`.
double distillation_ce(const Mat& teacher_logits, const Mat& student_logits,
                       const DistillationTemps& temps, const Vec& center,
                       Mat* dstudent = nullptr, double grad_scale = 1.0);

// Multi-crop DINO loss: teacher global views vs. every student view except
// the identical one. teacher_logits has one [batch, K] entry per global
// view; student_logits one per student view, globals first.
double dino_loss(const std::vector<Mat>& teacher_logits, const std::vector<Mat>& student_logits,
                 const DistillationTemps& temps, const Vec& center,
                 std::vector<Mat>* dstudent = nullptr);

struct IbotResult {
  double loss = 0.0;
  int masked = 0;
  bool empty_mask = false;
};

// Patch-token distillation at masked positions only. Logit rows follow the
// flat grid order. Empty masks yield loss 0 with the flag set.
IbotResult ibot_loss(const Mat& student_patch_logits, const Mat& teacher_patch_logits,
                     const MaskSpec& mask, const DistillationTemps& temps, const Vec& center,
                     Mat* dstudent = nullptr, double grad_scale = 1.0);

// Kozachenko-Leonenko spread regularizer: -mean_i log(nn_dist_i + eps) over
// L2-normalized rows. Needs at least two rows.
double koleo_regularizer(const Mat& embeddings, Mat* dembeddings = nullptr, double eps = 1e-8,
                         double grad_scale = 1.0);

// Mean squared error over masked pixels. target_patches rows align with the
// reconstruction's masked cells.
double mae_loss(const Mat& predicted_patches, const Mat& target_patches, Mat* dpred = nullptr,
                double grad_scale = 1.0);
double mae_loss(const Reconstruction& recon, const Image& target, Mat* dpred = nullptr,
                double grad_scale = 1.0);

// Low-pass filter over a centered 2-D frequency grid; 1 inside the cutoff
// radius (as a fraction of Nyquist), 0 outside. M and 1-M partition the grid.
struct FourierFilterMask {
  Mat M;
  double cutoff_radius = 0.25;
};

FourierFilterMask make_lowpass_filter(int height, int width, double cutoff_radius = 0.25);

// Eq-style spectral loss with the unnormalized DFT convention:
// lambda1 * ||M (F(y_hat) - F(y))||^2 + lambda2 * ||(1-M)(F(y_hat) - F(y))||^2,
// summed over channels. grad_yhat (optional) receives d loss / d y_hat.
double fourier_loss(const Image& y_hat, const Image& y, const FourierFilterMask& filter,
                    double lambda1, double lambda2, Image* grad_yhat = nullptr,
                    double grad_scale = 1.0);

// How the reconstruction is laid onto a raster before the spectral loss:
// predicted/ground-truth pixels at masked cells with either ground truth
// (kFull) or zeros (kMaskedZeroed) at visible positions.
enum class FourierSupport { kFull, kMaskedZeroed };

// Builds the (y_hat, y) raster pair for the chosen support.
std::pair<Image, Image> fourier_support_pair(const Reconstruction& recon, const Image& target,
                                             FourierSupport support);

struct LossParts {
  double dino = 0.0;
  double ibot = 0.0;
  double mae = 0.0;
  double fourier = 0.0;
  double koleo = 0.0;
};

// Weighted sum per the composite objective; outer weights apply to DINO,
// iBOT, MAE, and KoLeo, while the Fourier term carries its lambdas inside.
// Throws NumericError naming the first non-finite part.
double total_loss(const LossParts& parts, const LossWeights& weights);

}  // namespace pyrvit
