#include "pyrvit/losses.hpp"

#include <fftw3.h>

#include <cmath>
#include <complex>
#include <map>
#include <mutex>

namespace pyrvit {

namespace {

Mat log_softmax_rows(const Mat& z) {
  Mat out(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double m = z.row(i).maxCoeff();
    const double lse = std::log((z.row(i).array() - m).exp().sum()) + m;
    out.row(i) = (z.row(i).array() - lse).matrix();
  }
  return out;
}

}  // namespace

double distillation_ce(const Mat& teacher_logits, const Mat& student_logits,
                       const DistillationTemps& temps, const Vec& center, Mat* dstudent,
                       double grad_scale) {
  check_arg(teacher_logits.rows() == student_logits.rows() &&
                teacher_logits.cols() == student_logits.cols(),
            "teacher/student logit shapes differ");
  check_arg(teacher_logits.allFinite() && student_logits.allFinite(),
            "non-finite logits in distillation loss");
  const Eigen::Index n = teacher_logits.rows();

  Mat t_centered = teacher_logits;
  t_centered.rowwise() -= center.transpose();
  const Mat p = softmax_rows(t_centered / temps.tau_teacher);
  const Mat log_q = log_softmax_rows(student_logits / temps.tau_student);

  const double loss = -(p.cwiseProduct(log_q).sum()) / static_cast<double>(n);
  if (dstudent) {
    const Mat q = log_q.array().exp().matrix();
    *dstudent += (q - p) * (grad_scale / (temps.tau_student * static_cast<double>(n)));
  }
  return loss;
}

double dino_loss(const std::vector<Mat>& teacher_logits, const std::vector<Mat>& student_logits,
                 const DistillationTemps& temps, const Vec& center,
                 std::vector<Mat>* dstudent) {
  check_arg(!teacher_logits.empty() && !student_logits.empty(), "no crops given");
  int n_pairs = 0;
  for (std::size_t i = 0; i < teacher_logits.size(); ++i) {
    for (std::size_t j = 0; j < student_logits.size(); ++j) {
      if (j != i) ++n_pairs;
    }
  }
  check_arg(n_pairs > 0, "no valid teacher/student view pairs");

  if (dstudent) {
    dstudent->resize(student_logits.size());
    for (std::size_t j = 0; j < student_logits.size(); ++j) {
      (*dstudent)[j] = Mat::Zero(student_logits[j].rows(), student_logits[j].cols());
    }
  }
  double loss = 0.0;
  for (std::size_t i = 0; i < teacher_logits.size(); ++i) {
    for (std::size_t j = 0; j < student_logits.size(); ++j) {
      if (j == i) continue;  // identical view
      loss += distillation_ce(teacher_logits[i], student_logits[j], temps, center,
                              dstudent ? &(*dstudent)[j] : nullptr, 1.0 / n_pairs);
    }
  }
  return loss / n_pairs;
}

IbotResult ibot_loss(const Mat& student_patch_logits, const Mat& teacher_patch_logits,
                     const MaskSpec& mask, const DistillationTemps& temps, const Vec& center,
                     Mat* dstudent, double grad_scale) {
  check_arg(student_patch_logits.rows() == teacher_patch_logits.rows() &&
                student_patch_logits.cols() == teacher_patch_logits.cols(),
            "logit shapes differ");
  check_arg(student_patch_logits.rows() == mask.cells(), "logit rows must cover the mask grid");

  IbotResult result;
  const auto masked = mask.masked_cells();
  result.masked = static_cast<int>(masked.size());
  if (masked.empty()) {
    result.empty_mask = true;
    return result;  // ratio-0 runs are legal: no masked tokens, zero loss
  }

  Mat t(static_cast<Eigen::Index>(masked.size()), teacher_patch_logits.cols());
  Mat s(static_cast<Eigen::Index>(masked.size()), student_patch_logits.cols());
  for (std::size_t i = 0; i < masked.size(); ++i) {
    t.row(static_cast<Eigen::Index>(i)) = teacher_patch_logits.row(masked[i]);
    s.row(static_cast<Eigen::Index>(i)) = student_patch_logits.row(masked[i]);
  }
  Mat ds_rows;
  Mat* ds = dstudent ? &ds_rows : nullptr;
  if (ds) ds_rows = Mat::Zero(s.rows(), s.cols());
  result.loss = distillation_ce(t, s, temps, center, ds, grad_scale);
  if (dstudent) {
    if (dstudent->size() == 0) {
      *dstudent = Mat::Zero(student_patch_logits.rows(), student_patch_logits.cols());
    }
    for (std::size_t i = 0; i < masked.size(); ++i) {
      dstudent->row(masked[i]) += ds_rows.row(static_cast<Eigen::Index>(i));
    }
  }
  return result;
}

double koleo_regularizer(const Mat& embeddings, Mat* dembeddings, double eps,
                         double grad_scale) {
  const Eigen::Index n = embeddings.rows();
  check_arg(n >= 2, "KoLeo needs a batch of at least two embeddings");

  L2NormCtx norm_ctx;
  const Mat e = l2_normalize_rows(embeddings, &norm_ctx);

  std::vector<Eigen::Index> nn(static_cast<std::size_t>(n));
  Vec dist(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    Eigen::Index best_j = -1;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      const double d = (e.row(i) - e.row(j)).norm();
      if (d < best) {
        best = d;
        best_j = j;
      }
    }
    nn[static_cast<std::size_t>(i)] = best_j;
    dist(i) = best;
  }

  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) loss -= std::log(dist(i) + eps);
  loss /= static_cast<double>(n);

  if (dembeddings) {
    Mat de = Mat::Zero(n, e.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
      if (dist(i) <= 0.0) continue;  // duplicate pair: flat direction
      const Eigen::Index j = nn[static_cast<std::size_t>(i)];
      const double coeff = -1.0 / (static_cast<double>(n) * (dist(i) + eps) * dist(i));
      const auto diff = (e.row(i) - e.row(j)) * coeff;
      de.row(i) += diff;
      de.row(j) -= diff;
    }
    *dembeddings += l2_normalize_rows_backward(norm_ctx, de) * grad_scale;
  }
  return loss;
}

double mae_loss(const Mat& predicted_patches, const Mat& target_patches, Mat* dpred,
                double grad_scale) {
  check_arg(predicted_patches.rows() == target_patches.rows() &&
                predicted_patches.cols() == target_patches.cols(),
            "prediction/target shapes differ");
  check_arg(predicted_patches.size() > 0, "empty mask: nothing to score");
  const double count = static_cast<double>(predicted_patches.size());
  const Mat diff = predicted_patches - target_patches;
  if (dpred) *dpred += diff * (2.0 * grad_scale / count);
  return diff.squaredNorm() / count;
}

double mae_loss(const Reconstruction& recon, const Image& target, Mat* dpred,
                double grad_scale) {
  check_arg(target.height == recon.crop_size && target.width == recon.crop_size,
            "target raster does not match the reconstruction support");
  const Mat all_patches = extract_patches(target, recon.patch_size);
  Mat target_patches(static_cast<Eigen::Index>(recon.masked_cells.size()), all_patches.cols());
  for (std::size_t i = 0; i < recon.masked_cells.size(); ++i) {
    target_patches.row(static_cast<Eigen::Index>(i)) = all_patches.row(recon.masked_cells[i]);
  }
  return mae_loss(recon.patches, target_patches, dpred, grad_scale);
}

FourierFilterMask make_lowpass_filter(int height, int width, double cutoff_radius) {
  check_arg(height > 0 && width > 0, "empty frequency grid");
  check_arg(cutoff_radius >= 0.0 && cutoff_radius <= 1.0, "cutoff must be a Nyquist fraction");
  FourierFilterMask filter;
  filter.cutoff_radius = cutoff_radius;
  filter.M = Mat::Zero(height, width);
  const double radius = cutoff_radius * (std::min(height, width) / 2.0);
  for (int i = 0; i < height; ++i) {
    const double fi = i <= height / 2 ? i : i - height;
    for (int j = 0; j < width; ++j) {
      const double fj = j <= width / 2 ? j : j - width;
      if (std::sqrt(fi * fi + fj * fj) <= radius) filter.M(i, j) = 1.0;
    }
  }
  return filter;
}

namespace {

// FFTW plans are not thread-safe to create; cache one per shape/direction
// with dedicated buffers behind a lock.
struct FftPlan {
  fftw_plan plan = nullptr;
  fftw_complex* in = nullptr;
  fftw_complex* out = nullptr;
  Eigen::Index size = 0;

  ~FftPlan() {
    if (plan) fftw_destroy_plan(plan);
    if (in) fftw_free(in);
    if (out) fftw_free(out);
  }
};

std::mutex fft_mutex;

FftPlan& get_plan(int h, int w, int sign) {
  static std::map<std::tuple<int, int, int>, FftPlan> cache;
  auto& entry = cache[{h, w, sign}];
  if (!entry.plan) {
    entry.size = static_cast<Eigen::Index>(h) * w;
    entry.in = fftw_alloc_complex(static_cast<std::size_t>(entry.size));
    entry.out = fftw_alloc_complex(static_cast<std::size_t>(entry.size));
    entry.plan = fftw_plan_dft_2d(h, w, entry.in, entry.out, sign, FFTW_ESTIMATE);
  }
  return entry;
}

}  // namespace

double fourier_loss(const Image& y_hat, const Image& y, const FourierFilterMask& filter,
                    double lambda1, double lambda2, Image* grad_yhat, double grad_scale) {
  check_arg(y_hat.same_shape(y), "raster shapes differ");
  check_arg(filter.M.rows() == y.height && filter.M.cols() == y.width,
            "filter does not match the frequency grid");
  const int h = y.height;
  const int w = y.width;
  const Eigen::Index n = static_cast<Eigen::Index>(h) * w;

  if (grad_yhat && !grad_yhat->same_shape(y)) *grad_yhat = Image(h, w);

  std::lock_guard<std::mutex> lock(fft_mutex);
  FftPlan& fwd = get_plan(h, w, FFTW_FORWARD);
  FftPlan& bwd = get_plan(h, w, FFTW_BACKWARD);

  double loss = 0.0;
  for (int c = 0; c < 3; ++c) {
    const Mat residual = y_hat.ch[c] - y.ch[c];
    for (Eigen::Index k = 0; k < n; ++k) {
      fwd.in[k][0] = residual(k / w, k % w);
      fwd.in[k][1] = 0.0;
    }
    fftw_execute(fwd.plan);
    for (Eigen::Index k = 0; k < n; ++k) {
      const double weight =
          lambda1 * filter.M(k / w, k % w) + lambda2 * (1.0 - filter.M(k / w, k % w));
      const double re = fwd.out[k][0];
      const double im = fwd.out[k][1];
      loss += weight * (re * re + im * im);
      if (grad_yhat) {
        bwd.in[k][0] = weight * re;
        bwd.in[k][1] = weight * im;
      }
    }
    if (grad_yhat) {
      fftw_execute(bwd.plan);
      for (Eigen::Index k = 0; k < n; ++k) {
        grad_yhat->ch[c](k / w, k % w) += 2.0 * grad_scale * bwd.out[k][0];
      }
    }
  }
  return loss;
}

std::pair<Image, Image> fourier_support_pair(const Reconstruction& recon, const Image& target,
                                             FourierSupport support) {
  if (support == FourierSupport::kFull) {
    return {assemble_reconstruction(target, recon), target};
  }
  // Masked-only support: both rasters zero at visible positions.
  Image y_hat(target.height, target.width);
  Image y(target.height, target.width);
  scatter_patches(y_hat, recon.patches, recon.masked_cells, recon.patch_size);
  const Mat all_patches = extract_patches(target, recon.patch_size);
  Mat target_patches(static_cast<Eigen::Index>(recon.masked_cells.size()), all_patches.cols());
  for (std::size_t i = 0; i < recon.masked_cells.size(); ++i) {
    target_patches.row(static_cast<Eigen::Index>(i)) = all_patches.row(recon.masked_cells[i]);
  }
  scatter_patches(y, target_patches, recon.masked_cells, recon.patch_size);
  return {std::move(y_hat), std::move(y)};
}

double total_loss(const LossParts& parts, const LossWeights& weights) {
  const std::pair<const char*, double> named[] = {{"dino", parts.dino},
                                                  {"ibot", parts.ibot},
                                                  {"mae", parts.mae},
                                                  {"fourier", parts.fourier},
                                                  {"koleo", parts.koleo}};
  for (const auto& [name, value] : named) {
    if (!std::isfinite(value)) {
      throw NumericError(std::string("non-finite loss term: ") + name);
    }
  }
  return weights.w_dino * parts.dino + weights.w_ibot * parts.ibot + weights.w_mae * parts.mae +
         parts.fourier + weights.w_koleo * parts.koleo;
}

}  // namespace pyrvit
