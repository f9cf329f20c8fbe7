#pragma once

#include "pyrvit/encoder.hpp"
#include "pyrvit/pyramid.hpp"

#include <any>
#include <memory>
#include <string>
#include <vector>

namespace pyrvit {

// Frozen-backbone features for one dataset at one patch size. Patch tokens
// for tile i live in rows [i*grid^2, (i+1)*grid^2).
struct FeatureSet {
  Mat cls;           // [N, E]
  Mat patch_tokens;  // [N*grid^2, E]; empty when only CLS was extracted
  int grid = 0;
  int patch_size = 0;
  std::vector<int> labels;
  std::vector<int> groups;  // source pyramid per tile (bags); -1 if unknown
  std::string dataset_id;
  std::uint64_t backbone_hash = 0;

  std::size_t size() const { return static_cast<std::size_t>(cls.rows()); }
  Eigen::Index dim() const { return cls.cols(); }
  bool has_patch_tokens() const { return patch_tokens.size() > 0; }
  Mat tokens_for(std::size_t i) const;
};

// Center-crops each tile to 224 and runs the frozen backbone. Read-only on
// the encoder; parallel over tiles.
FeatureSet extract_features(const VitEncoder& backbone, const std::vector<TileSample>& tiles,
                            int patch_size, bool keep_patch_tokens,
                            const std::string& dataset_id = "",
                            const std::vector<int>* groups = nullptr);

// Binary feature cache keyed by (backbone hash, patch size, dataset id).
std::string feature_cache_path(const std::string& cache_dir, std::uint64_t backbone_hash,
                               int patch_size, const std::string& dataset_id);
void write_feature_cache(const std::string& path, const FeatureSet& fs);
FeatureSet read_feature_cache(const std::string& path);

// ---------------------------------------------------------------------------
// Probe heads over frozen features.
// ---------------------------------------------------------------------------

enum class ProbeKind { kLinear, kAttentive, kCenterCell };
ProbeKind probe_kind_from_string(const std::string& name);

struct ProbeConfig {
  Eigen::Index mlp_hidden = 256;
  // Attentive probing: pool with a single learned query (default) or reuse
  // the CLS embedding as the query.
  bool cls_as_query = false;
};

// Classification head over one FeatureSet row. Implementations cache what
// backward needs in the std::any context.
class ProbeHead {
 public:
  virtual ~ProbeHead() = default;
  virtual Vec logits(const FeatureSet& fs, std::size_t i, std::any* ctx = nullptr) const = 0;
  virtual void backward(const std::any& ctx, const Vec& dlogits) = 0;
  virtual ParamList params() = 0;
  virtual int n_classes() const = 0;
};

std::unique_ptr<ProbeHead> make_probe_head(ProbeKind kind, Eigen::Index embed_dim, int grid,
                                           int n_classes, std::uint64_t seed,
                                           const ProbeConfig& cfg = {});

struct FitConfig {
  int epochs = 60;
  int batch_size = 32;
  double lr = 5e-3;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
};

struct FitResult {
  std::vector<double> epoch_loss;
};

// Minibatch gradient descent (AdamW) with softmax cross-entropy on frozen,
// cached features. The backbone is never touched.
FitResult fit_head(ProbeHead& head, const FeatureSet& fs, const std::vector<int>& indices,
                   const FitConfig& cfg);

std::vector<int> predict(const ProbeHead& head, const FeatureSet& fs,
                         const std::vector<int>& indices);
// Softmax class probabilities, rows aligned with indices.
Mat predict_scores(const ProbeHead& head, const FeatureSet& fs, const std::vector<int>& indices);

double accuracy(const std::vector<int>& predictions, const std::vector<int>& labels);

// ---------------------------------------------------------------------------
// AdditiveMIL: bag logits are an exact sum of per-tile class contributions.
// ---------------------------------------------------------------------------

struct MilBag {
  Mat tile_features;  // [n_tiles, E]
  int label = -1;
  std::vector<std::pair<int, int>> tile_coords;  // optional, for contribution maps
};

struct AdditiveMilOutput {
  Vec bag_logits;
  Mat contributions;               // [n_tiles, C], input order
  std::vector<std::size_t> order;  // permutation-independent summation order
  Vec attention;                   // softmax attention per tile, input order
};

struct MilCtx;

// Gated-attention MIL with a per-tile classifier; bag logits accumulate in
// a feature-hash order so permuting tiles leaves them bit-identical.
class AdditiveMilHead {
 public:
  void init(Eigen::Index embed_dim, Eigen::Index attn_dim, int n_classes, std::uint64_t seed);
  AdditiveMilOutput forward(const Mat& tile_features, std::shared_ptr<MilCtx>* ctx = nullptr) const;
  // dfeatures (optional) receives gradients w.r.t. tile features, for the
  // fine-tuned-featurizer mode.
  void backward(const MilCtx& ctx, const Vec& dbag_logits, Mat* dfeatures = nullptr);
  ParamList params();
  int n_classes() const { return static_cast<int>(classifier.out_dim()); }

  Param<Mat> gate_v, gate_u;  // [E, A]
  Param<Vec> gate_w;          // [A]
  Linear classifier;          // E -> C
};

FitResult fit_mil(AdditiveMilHead& head, const std::vector<MilBag>& bags, const FitConfig& cfg);

// Fine-tuned-featurizer mode: the encoder copy is trained jointly with the
// head. Bags reference tiles by index into `tiles`.
FitResult fit_mil_finetune(VitEncoder& encoder, AdditiveMilHead& head,
                           const std::vector<TileSample>& tiles,
                           const std::vector<std::vector<int>>& bag_tiles,
                           const std::vector<int>& bag_labels, int patch_size,
                           const FitConfig& cfg);

std::vector<MilBag> bags_from_features(const FeatureSet& fs);

// Per-tile contribution CSV: bag, tile, x, y, one column per class.
void write_contribution_csv(const std::string& path, const std::vector<MilBag>& bags,
                            const AdditiveMilHead& head);

}  // namespace pyrvit
