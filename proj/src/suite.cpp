#include "pyrvit/suite.hpp"

#include "pyrvit/dataset.hpp"
#include "pyrvit/trainer.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <numeric>

namespace pyrvit {

namespace fs = std::filesystem;

SuiteConfig SuiteConfig::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw InvalidArgument("cannot open suite config: " + path);
  nlohmann::json j = nlohmann::json::parse(is);

  SuiteConfig cfg;
  if (j.contains("checkpoint")) cfg.checkpoint = j["checkpoint"].get<std::string>();
  if (j.contains("data")) {
    const auto& d = j["data"];
    if (d.contains("base_size")) cfg.data.base_size = d["base_size"].get<int>();
    if (d.contains("tile_size")) cfg.data.tile_size = d["tile_size"].get<int>();
    if (d.contains("texture_classes"))
      cfg.data.texture_classes = d["texture_classes"].get<std::vector<int>>();
    if (d.contains("resolution_probs"))
      cfg.data.resolution_probs = d["resolution_probs"].get<std::array<double, kNumLevels>>();
  }
  if (j.contains("probe_train")) cfg.probe_train = j["probe_train"].get<int>();
  if (j.contains("probe_eval")) cfg.probe_eval = j["probe_eval"].get<int>();
  if (j.contains("probe_patch_size")) cfg.probe_patch_size = j["probe_patch_size"].get<int>();
  if (j.contains("probe_heads")) cfg.probe_heads = j["probe_heads"].get<std::vector<std::string>>();
  if (j.contains("fit_epochs")) cfg.fit.epochs = j["fit_epochs"].get<int>();
  if (j.contains("fit_lr")) cfg.fit.lr = j["fit_lr"].get<double>();
  if (j.contains("run_mil")) cfg.run_mil = j["run_mil"].get<bool>();
  if (j.contains("mil_train_bags")) cfg.mil_train_bags = j["mil_train_bags"].get<int>();
  if (j.contains("mil_eval_bags")) cfg.mil_eval_bags = j["mil_eval_bags"].get<int>();
  if (j.contains("mil_tiles_per_bag")) cfg.mil_tiles_per_bag = j["mil_tiles_per_bag"].get<int>();
  if (j.contains("run_throughput")) cfg.run_throughput = j["run_throughput"].get<bool>();
  if (j.contains("bench_duration")) cfg.bench_duration = j["bench_duration"].get<double>();
  if (j.contains("bench_batch")) cfg.bench_batch = j["bench_batch"].get<int>();
  if (j.contains("n_bootstrap")) cfg.n_bootstrap = j["n_bootstrap"].get<int>();
  if (j.contains("seed")) cfg.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("cache_dir")) cfg.cache_dir = j["cache_dir"].get<std::string>();
  return cfg;
}

namespace {

// Bootstrap reports for one prediction task: macro-F1 and AUROC.
void metric_pair(std::vector<MetricReport>& reports, std::vector<std::string>& tasks,
                 const std::string& task, const std::vector<int>& predictions, const Mat& scores,
                 const std::vector<int>& labels, int n_classes, int n_bootstrap,
                 std::uint64_t seed) {
  reports.push_back(bootstrap_metric(
      "macro_f1",
      [&](const std::vector<int>& idx) {
        std::vector<int> p(idx.size()), l(idx.size());
        for (std::size_t k = 0; k < idx.size(); ++k) {
          p[k] = predictions[static_cast<std::size_t>(idx[k])];
          l[k] = labels[static_cast<std::size_t>(idx[k])];
        }
        return macro_f1(p, l, n_classes);
      },
      labels.size(), n_bootstrap, derive_seed(seed, 0xF1, tasks.size())));
  tasks.push_back(task);

  reports.push_back(bootstrap_metric(
      "auroc",
      [&](const std::vector<int>& idx) {
        Mat s(static_cast<Eigen::Index>(idx.size()), scores.cols());
        std::vector<int> l(idx.size());
        for (std::size_t k = 0; k < idx.size(); ++k) {
          s.row(static_cast<Eigen::Index>(k)) = scores.row(idx[k]);
          l[k] = labels[static_cast<std::size_t>(idx[k])];
        }
        return auroc_ovr(s, l, n_classes);
      },
      labels.size(), n_bootstrap, derive_seed(seed, 0xA0C, tasks.size())));
  tasks.push_back(task);
}

}  // namespace

void write_metric_csv(const std::string& path, const std::vector<MetricReport>& reports,
                      const std::vector<std::string>& tasks) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << "task,metric,point,boot_mean,boot_std,n_bootstrap,seed,redrawn\n";
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const MetricReport& r = reports[i];
    os << tasks[i] << ',' << r.metric << ',' << r.point << ',' << r.boot_mean << ',' << r.boot_std
       << ',' << r.n_bootstrap << ',' << r.seed << ',' << r.redrawn << "\n";
  }
}

void write_throughput_csv(const std::string& path, const std::vector<ThroughputReport>& reports) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << "task,encoder,patch_size,tile_size,batch_size,repetitions,tiles_per_second,hardware\n";
  for (const auto& r : reports) {
    os << r.task << ',' << r.encoder << ',' << r.patch_size << ',' << r.tile_size << ','
       << r.batch_size << ',' << r.repetitions << ',' << r.tiles_per_second << ",\"" << r.hardware
       << "\"\n";
  }
}

SuiteResult run_benchmark_suite(const SuiteConfig& cfg, const std::string& out_dir) {
  if (!fs::exists(cfg.checkpoint)) {
    throw InvalidArgument("missing checkpoint: " + cfg.checkpoint);
  }
  fs::create_directories(out_dir);
  const std::string cache_dir = cfg.cache_dir.empty() ? out_dir + "/cache" : cfg.cache_dir;
  fs::create_directories(cache_dir);

  const VitEncoder teacher = load_teacher_encoder(cfg.checkpoint);
  const std::uint64_t backbone_hash = checkpoint_weights_hash(cfg.checkpoint);
  const int n_classes = static_cast<int>(cfg.data.texture_classes.size());

  SuiteResult result;
  result.report_dir = out_dir;
  std::vector<std::string> tasks;
  std::ofstream summary(out_dir + "/summary.txt");

  // ---- probe tasks ----
  const auto featurize_cached = [&](const std::string& dataset_id,
                                    const std::vector<TileSample>& tiles,
                                    const std::vector<int>* groups) {
    const std::string path =
        feature_cache_path(cache_dir, backbone_hash, cfg.probe_patch_size, dataset_id);
    if (fs::exists(path)) {
      FeatureSet cached = read_feature_cache(path);
      if (cached.backbone_hash == backbone_hash) return cached;
    }
    FeatureSet fsr =
        extract_features(teacher, tiles, cfg.probe_patch_size, true, dataset_id, groups);
    fsr.backbone_hash = backbone_hash;  // keyed by checkpoint content
    write_feature_cache(path, fsr);
    return fsr;
  };

  const auto train_tiles =
      synth_tiles(cfg.data, cfg.probe_train, derive_seed(cfg.seed, 0x7AB1, 0), 1u << 20);
  const auto eval_tiles =
      synth_tiles(cfg.data, cfg.probe_eval, derive_seed(cfg.seed, 0x7AB1, 1), 1u << 21);
  const FeatureSet train_fs = featurize_cached("suite_train", train_tiles, nullptr);
  const FeatureSet eval_fs = featurize_cached("suite_eval", eval_tiles, nullptr);

  std::vector<int> train_idx(train_fs.size());
  std::iota(train_idx.begin(), train_idx.end(), 0);
  std::vector<int> eval_idx(eval_fs.size());
  std::iota(eval_idx.begin(), eval_idx.end(), 0);

  for (const std::string& head_name : cfg.probe_heads) {
    const ProbeKind kind = probe_kind_from_string(head_name);
    auto head = make_probe_head(kind, train_fs.dim(), train_fs.grid, n_classes,
                                derive_seed(cfg.seed, 0x4EAD, tasks.size()));
    FitConfig fit = cfg.fit;
    fit.seed = derive_seed(cfg.seed, 0xF17, tasks.size());
    fit_head(*head, train_fs, train_idx, fit);

    const std::vector<int> preds = predict(*head, eval_fs, eval_idx);
    const Mat scores = predict_scores(*head, eval_fs, eval_idx);
    std::vector<int> eval_labels(eval_fs.labels.begin(), eval_fs.labels.end());
    metric_pair(result.reports, tasks, "probe_" + head_name, preds, scores, eval_labels,
                n_classes, cfg.n_bootstrap, cfg.seed);
    summary << "probe_" << head_name << ": macro_f1=" << result.reports[tasks.size() - 2].point
            << " auroc=" << result.reports[tasks.size() - 1].point << "\n";
  }

  // ---- MIL ----
  if (cfg.run_mil) {
    std::vector<int> train_groups, eval_groups;
    const auto mil_train_tiles =
        synth_tiles_grouped(cfg.data, cfg.mil_train_bags, cfg.mil_tiles_per_bag,
                            derive_seed(cfg.seed, 0x7AB1, 2), 1u << 22, &train_groups);
    const auto mil_eval_tiles =
        synth_tiles_grouped(cfg.data, cfg.mil_eval_bags, cfg.mil_tiles_per_bag,
                            derive_seed(cfg.seed, 0x7AB1, 3), 1u << 23, &eval_groups);
    const FeatureSet mil_train_fs = featurize_cached("suite_mil_train", mil_train_tiles,
                                                     &train_groups);
    const FeatureSet mil_eval_fs = featurize_cached("suite_mil_eval", mil_eval_tiles,
                                                    &eval_groups);
    auto train_bags = bags_from_features(mil_train_fs);
    auto eval_bags = bags_from_features(mil_eval_fs);
    for (std::size_t b = 0; b < eval_bags.size(); ++b) {
      for (int t = 0; t < cfg.mil_tiles_per_bag; ++t) {
        const auto& tile = mil_eval_tiles[b * cfg.mil_tiles_per_bag + static_cast<std::size_t>(t)];
        eval_bags[b].tile_coords.emplace_back(tile.origin.x, tile.origin.y);
      }
    }

    AdditiveMilHead mil;
    mil.init(mil_train_fs.dim(), 64, n_classes, derive_seed(cfg.seed, 0x311, 0));
    FitConfig fit = cfg.fit;
    fit.seed = derive_seed(cfg.seed, 0x311, 1);
    fit_mil(mil, train_bags, fit);

    std::vector<int> preds, labels;
    Mat scores(static_cast<Eigen::Index>(eval_bags.size()), n_classes);
    for (std::size_t b = 0; b < eval_bags.size(); ++b) {
      const AdditiveMilOutput out = mil.forward(eval_bags[b].tile_features);
      Eigen::Index best = 0;
      out.bag_logits.maxCoeff(&best);
      preds.push_back(static_cast<int>(best));
      labels.push_back(eval_bags[b].label);
      const double m = out.bag_logits.maxCoeff();
      Vec e = (out.bag_logits.array() - m).exp();
      scores.row(static_cast<Eigen::Index>(b)) = (e / e.sum()).transpose();
    }
    metric_pair(result.reports, tasks, "mil_frozen", preds, scores, labels, n_classes,
                cfg.n_bootstrap, cfg.seed);
    summary << "mil_frozen: macro_f1=" << result.reports[tasks.size() - 2].point
            << " auroc=" << result.reports[tasks.size() - 1].point << "\n";
    write_contribution_csv(out_dir + "/contributions.csv", eval_bags, mil);
  }

  // ---- throughput ----
  if (cfg.run_throughput) {
    const TrainConfig train_cfg =
        TrainConfig::from_json_string(Checkpoint::read(cfg.checkpoint).meta("config"));
    for (int p : kSupportedPatchSizes) {
      result.bench.push_back(throughput_bench(train_cfg.encoder_config(), "tile", p,
                                              cfg.bench_duration, cfg.bench_batch, 3,
                                              derive_seed(cfg.seed, 0xBE, p),
                                              train_cfg.model.encoder_preset));
      summary << "throughput tile p" << p << ": " << result.bench.back().tiles_per_second
              << " tiles/s\n";
    }
    write_throughput_csv(out_dir + "/throughput.csv", result.bench);
  }

  write_metric_csv(out_dir + "/metrics.csv", result.reports, tasks);
  summary << "reports: " << result.reports.size() << "\n";
  return result;
}

}  // namespace pyrvit
