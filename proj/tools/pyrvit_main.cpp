#include "pyrvit/adaptation.hpp"
#include "pyrvit/bench.hpp"
#include "pyrvit/dataset.hpp"
#include "pyrvit/suite.hpp"
#include "pyrvit/trainer.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>

namespace fs = std::filesystem;
using namespace pyrvit;

namespace {

std::vector<int> parse_int_list(const std::string& csv) {
  std::vector<int> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stoi(item));
  return out;
}

int cmd_synth_data(const std::string& out_dir, int n_pyramids, int base_size,
                   const std::string& classes_csv, int tiles_per_pyramid, int tile_size,
                   const std::string& probs_csv, std::uint64_t seed, int write_pyramids) {
  DataConfig data;
  data.base_size = base_size;
  data.tile_size = tile_size;
  data.texture_classes = parse_int_list(classes_csv);
  {
    std::stringstream ss(probs_csv);
    std::string item;
    for (auto& p : data.resolution_probs) {
      if (!std::getline(ss, item, ',')) throw InvalidArgument("need 4 resolution probabilities");
      p = std::stod(item);
    }
  }

  fs::create_directories(out_dir);
  std::vector<int> groups;
  const auto tiles =
      synth_tiles_grouped(data, n_pyramids, tiles_per_pyramid, seed, 0, &groups);
  write_shard(out_dir, tiles, groups);

  for (int i = 0; i < write_pyramids && i < n_pyramids; ++i) {
    const int class_pos = static_cast<int>(i % data.texture_classes.size());
    const auto pyramid = build_synthetic_pyramid(
        derive_seed(seed, 0x59D0, static_cast<std::uint64_t>(i)), base_size,
        data.texture_classes[static_cast<std::size_t>(class_pos)]);
    write_pyramid(out_dir + "/pyramids/pyr" + std::to_string(i), pyramid,
                  derive_seed(seed, 0x59D0, static_cast<std::uint64_t>(i)));
  }
  std::cout << "wrote " << tiles.size() << " tiles to " << out_dir << std::endl;
  return 0;
}

int cmd_pretrain(const std::string& config_path, const std::string& out_dir,
                 const std::string& resume, bool print_config, bool dump_loss_parts,
                 std::int64_t seed_override) {
  TrainConfig cfg = config_path.empty() ? TrainConfig{} : TrainConfig::load(config_path);
  if (seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(seed_override);
  if (print_config) {
    std::cout << cfg.to_json_string();
    return 0;
  }
  cfg.validate();
  check_arg(!out_dir.empty(), "--out is required");
  Pretrainer trainer(cfg);
  const std::string final_ckpt = trainer.run(out_dir, resume, dump_loss_parts);
  std::cout << "final checkpoint: " << final_ckpt << std::endl;
  return 0;
}

struct ProbeDataOpts {
  std::string shard_dir;
  int train = 192;
  int eval = 96;
  int base_size = 512;
  int tile_size = 256;
  std::string classes_csv = "0,3";
};

// Tiles for probing: either a shard directory or fresh synthetic draws.
std::pair<std::vector<TileSample>, std::vector<TileSample>> probe_tiles(
    const ProbeDataOpts& opts, std::uint64_t seed) {
  if (!opts.shard_dir.empty()) {
    std::vector<TileSample> all;
    for (const auto& e : read_shard_index(opts.shard_dir)) {
      TileSample t;
      t.pixels = read_png(e.path);
      t.label = e.label;
      t.mpp = e.mpp;
      t.origin = {e.level, e.x, e.y};
      all.push_back(std::move(t));
    }
    check_arg(static_cast<int>(all.size()) >= 2, "shard too small");
    const std::size_t n_eval = all.size() / 4 + 1;
    std::vector<TileSample> train(all.begin(), all.end() - static_cast<std::ptrdiff_t>(n_eval));
    std::vector<TileSample> eval(all.end() - static_cast<std::ptrdiff_t>(n_eval), all.end());
    return {std::move(train), std::move(eval)};
  }
  DataConfig data;
  data.base_size = opts.base_size;
  data.tile_size = opts.tile_size;
  data.texture_classes = parse_int_list(opts.classes_csv);
  return {synth_tiles(data, opts.train, derive_seed(seed, 0x7AB1, 0), 1u << 20),
          synth_tiles(data, opts.eval, derive_seed(seed, 0x7AB1, 1), 1u << 21)};
}

int cmd_probe(const std::string& checkpoint, const std::string& head_name, int patch_size,
              const ProbeDataOpts& data_opts, const std::string& out_dir,
              const std::string& cache_dir, int n_bootstrap, std::uint64_t seed,
              bool random_baseline, int fit_epochs, double fit_lr) {
  fs::create_directories(out_dir);
  VitEncoder teacher = load_teacher_encoder(checkpoint);
  std::uint64_t backbone_hash = checkpoint_weights_hash(checkpoint);
  if (random_baseline) {
    // Same architecture, fresh random weights, still frozen.
    teacher.init(teacher.cfg, derive_seed(seed, 0xBA5E, 7));
    backbone_hash = weights_hash(teacher.params("baseline"));
  }
  const std::uint64_t pre_hash = weights_hash(teacher.params("t"));

  auto [train_tiles, eval_tiles] = probe_tiles(data_opts, seed);
  int n_classes = 0;
  for (const auto& t : train_tiles) n_classes = std::max(n_classes, t.label + 1);

  const std::string cdir = cache_dir.empty() ? out_dir + "/cache" : cache_dir;
  fs::create_directories(cdir);
  const bool need_tokens = head_name != "linear";

  FeatureSet train_fs, eval_fs;
  const std::string train_cache = feature_cache_path(cdir, backbone_hash, patch_size, "train");
  const std::string eval_cache = feature_cache_path(cdir, backbone_hash, patch_size, "eval");
  if (fs::exists(train_cache) && fs::exists(eval_cache)) {
    train_fs = read_feature_cache(train_cache);
    eval_fs = read_feature_cache(eval_cache);
  }
  if (train_fs.size() == 0 || (need_tokens && !train_fs.has_patch_tokens())) {
    train_fs = extract_features(teacher, train_tiles, patch_size, need_tokens, "train");
    eval_fs = extract_features(teacher, eval_tiles, patch_size, need_tokens, "eval");
    train_fs.backbone_hash = backbone_hash;
    eval_fs.backbone_hash = backbone_hash;
    write_feature_cache(train_cache, train_fs);
    write_feature_cache(eval_cache, eval_fs);
  }

  auto head = make_probe_head(probe_kind_from_string(head_name), train_fs.dim(), train_fs.grid,
                              n_classes, derive_seed(seed, 0x4EAD, 0));
  FitConfig fit;
  fit.seed = derive_seed(seed, 0xF17, 0);
  fit.epochs = fit_epochs;
  fit.lr = fit_lr;
  std::vector<int> train_idx(train_fs.size());
  std::iota(train_idx.begin(), train_idx.end(), 0);
  fit_head(*head, train_fs, train_idx, fit);

  check_arg(weights_hash(teacher.params("t")) == pre_hash,
            "backbone changed during head fitting");

  std::vector<int> eval_idx(eval_fs.size());
  std::iota(eval_idx.begin(), eval_idx.end(), 0);
  const auto preds = predict(*head, eval_fs, eval_idx);
  const Mat scores = predict_scores(*head, eval_fs, eval_idx);

  const double acc = accuracy(preds, eval_fs.labels);
  const double f1 = macro_f1(preds, eval_fs.labels, n_classes);
  const auto f1_report = bootstrap_metric(
      "macro_f1",
      [&](const std::vector<int>& idx) {
        std::vector<int> p(idx.size()), l(idx.size());
        for (std::size_t k = 0; k < idx.size(); ++k) {
          p[k] = preds[static_cast<std::size_t>(idx[k])];
          l[k] = eval_fs.labels[static_cast<std::size_t>(idx[k])];
        }
        return macro_f1(p, l, n_classes);
      },
      eval_fs.size(), n_bootstrap, derive_seed(seed, 0xF1, 1));

  std::ofstream os(out_dir + "/probe_" + head_name + ".csv");
  os << "metric,value\naccuracy," << acc << "\nmacro_f1," << f1 << "\nmacro_f1_boot_mean,"
     << f1_report.boot_mean << "\nmacro_f1_boot_std," << f1_report.boot_std << "\n";
  std::cout << "probe head=" << head_name << " accuracy=" << acc << " macro_f1=" << f1
            << " (boot " << f1_report.boot_mean << " +/- " << f1_report.boot_std << ")"
            << std::endl;
  return 0;
}

int cmd_mil(const std::string& checkpoint, const std::string& mode, int patch_size, int train_bags,
            int eval_bags, int tiles_per_bag, const ProbeDataOpts& data_opts,
            const std::string& out_dir, int n_bootstrap, std::uint64_t seed, int fit_epochs,
            double fit_lr) {
  check_arg(mode == "frozen" || mode == "finetune", "--mode must be frozen or finetune");
  fs::create_directories(out_dir);
  VitEncoder teacher = load_teacher_encoder(checkpoint);

  DataConfig data;
  data.base_size = data_opts.base_size;
  data.tile_size = data_opts.tile_size;
  data.texture_classes = parse_int_list(data_opts.classes_csv);
  const int n_classes = static_cast<int>(data.texture_classes.size());

  std::vector<int> train_groups, eval_groups;
  const auto train_tiles = synth_tiles_grouped(data, train_bags, tiles_per_bag,
                                               derive_seed(seed, 0x7AB1, 2), 1u << 22,
                                               &train_groups);
  const auto eval_tiles = synth_tiles_grouped(data, eval_bags, tiles_per_bag,
                                              derive_seed(seed, 0x7AB1, 3), 1u << 23,
                                              &eval_groups);

  AdditiveMilHead head;
  head.init(teacher.cfg.embed_dim, 64, n_classes, derive_seed(seed, 0x311, 0));
  FitConfig fit;
  fit.seed = derive_seed(seed, 0x311, 1);
  fit.epochs = fit_epochs;
  fit.lr = fit_lr;

  if (mode == "frozen") {
    const FeatureSet train_fs =
        extract_features(teacher, train_tiles, patch_size, false, "mil_train", &train_groups);
    fit_mil(head, bags_from_features(train_fs), fit);
  } else {
    std::vector<std::vector<int>> bag_tiles(static_cast<std::size_t>(train_bags));
    std::vector<int> bag_labels(static_cast<std::size_t>(train_bags));
    for (std::size_t i = 0; i < train_tiles.size(); ++i) {
      bag_tiles[static_cast<std::size_t>(train_groups[i])].push_back(static_cast<int>(i));
      bag_labels[static_cast<std::size_t>(train_groups[i])] = train_tiles[i].label;
    }
    fit_mil_finetune(teacher, head, train_tiles, bag_tiles, bag_labels, patch_size, fit);
  }

  const FeatureSet eval_fs =
      extract_features(teacher, eval_tiles, patch_size, false, "mil_eval", &eval_groups);
  auto bags = bags_from_features(eval_fs);
  for (std::size_t b = 0; b < bags.size(); ++b) {
    for (int t = 0; t < tiles_per_bag; ++t) {
      const auto& tile = eval_tiles[b * static_cast<std::size_t>(tiles_per_bag) +
                                    static_cast<std::size_t>(t)];
      bags[b].tile_coords.emplace_back(tile.origin.x, tile.origin.y);
    }
  }

  std::vector<int> preds, labels;
  for (const auto& bag : bags) {
    const AdditiveMilOutput out = head.forward(bag.tile_features);
    Eigen::Index best = 0;
    out.bag_logits.maxCoeff(&best);
    preds.push_back(static_cast<int>(best));
    labels.push_back(bag.label);
  }
  const double f1 = macro_f1(preds, labels, n_classes);
  const auto report = bootstrap_metric(
      "macro_f1",
      [&](const std::vector<int>& idx) {
        std::vector<int> p(idx.size()), l(idx.size());
        for (std::size_t k = 0; k < idx.size(); ++k) {
          p[k] = preds[static_cast<std::size_t>(idx[k])];
          l[k] = labels[static_cast<std::size_t>(idx[k])];
        }
        return macro_f1(p, l, n_classes);
      },
      labels.size(), n_bootstrap, derive_seed(seed, 0xF1, 2));

  write_contribution_csv(out_dir + "/contributions.csv", bags, head);
  std::ofstream os(out_dir + "/mil_" + mode + ".csv");
  os << "metric,value\nmacro_f1," << f1 << "\nmacro_f1_boot_mean," << report.boot_mean
     << "\nmacro_f1_boot_std," << report.boot_std << "\n";
  std::cout << "mil mode=" << mode << " macro_f1=" << f1 << " (boot " << report.boot_mean
            << " +/- " << report.boot_std << ")" << std::endl;
  return 0;
}

int cmd_bench(const std::string& encoder_name, const std::string& task,
              const std::string& patch_sizes_csv, double duration, int batch,
              const std::string& out_path, std::uint64_t seed) {
  std::vector<ThroughputReport> reports;
  for (int p : parse_int_list(patch_sizes_csv)) {
    reports.push_back(throughput_bench(encoder_preset(encoder_name), task, p, duration, batch, 3,
                                       derive_seed(seed, 0xBE, static_cast<std::uint64_t>(p)),
                                       encoder_name));
    std::cout << "throughput " << task << " " << encoder_name << " p" << p << ": "
              << reports.back().tiles_per_second << " tiles/s" << std::endl;
  }
  if (!out_path.empty()) write_throughput_csv(out_path, reports);
  return 0;
}

int cmd_report(const std::string& config_path, const std::string& out_dir, std::int64_t seed) {
  SuiteConfig cfg = SuiteConfig::load(config_path);
  if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);
  const SuiteResult result = run_benchmark_suite(cfg, out_dir);
  std::cout << "report written to " << result.report_dir << " (" << result.reports.size()
            << " metric reports)" << std::endl;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Flexible-patch ViT self-supervised pre-training on synthetic image pyramids"};
  app.require_subcommand(1);

  // synth-data
  auto* synth = app.add_subcommand("synth-data", "Generate pyramids and a tile shard");
  std::string sd_out;
  int sd_n = 64, sd_base = 512, sd_tpp = 1, sd_tile = 256, sd_write_pyramids = 0;
  std::string sd_classes = "0,3", sd_probs = "0.25,0.25,0.25,0.25";
  std::uint64_t sd_seed = 0;
  synth->add_option("--out", sd_out, "Output shard directory")->required();
  synth->add_option("--n-pyramids", sd_n, "Number of pyramids");
  synth->add_option("--base-size", sd_base, "Level-0 size in pixels");
  synth->add_option("--classes", sd_classes, "Comma-separated texture class ids");
  synth->add_option("--tiles-per-pyramid", sd_tpp, "Tiles sampled per pyramid");
  synth->add_option("--tile-size", sd_tile, "Tile side in pixels");
  synth->add_option("--resolution-probs", sd_probs, "Four comma-separated level probabilities");
  synth->add_option("--seed", sd_seed, "RNG seed");
  synth->add_option("--write-pyramids", sd_write_pyramids,
                    "Also write the first N pyramids as level PNG directories");

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "Self-supervised pre-training");
  std::string pt_config, pt_out, pt_resume;
  bool pt_print = false, pt_dump = false;
  std::int64_t pt_seed = -1;
  pre->add_option("--config", pt_config, "Run config (JSON)");
  pre->add_option("--out", pt_out, "Output directory");
  pre->add_option("--resume", pt_resume, "Checkpoint to resume from");
  pre->add_flag("--print-config", pt_print, "Print the effective config and exit");
  pre->add_flag("--dump-loss-parts", pt_dump, "Echo per-step loss terms to stdout");
  pre->add_option("--seed", pt_seed, "Seed override");

  // probe
  auto* probe = app.add_subcommand("probe", "Frozen-backbone probing");
  std::string pr_ckpt, pr_head = "linear", pr_out, pr_cache;
  ProbeDataOpts pr_data;
  int pr_patch = 16, pr_boot = 1000, pr_epochs = 60;
  double pr_lr = 5e-3;
  std::uint64_t pr_seed = 0;
  bool pr_random = false;
  probe->add_option("--checkpoint", pr_ckpt, "Training checkpoint")->required();
  probe->add_option("--head", pr_head, "linear | attentive | center-cell");
  probe->add_option("--patch-size", pr_patch, "Backbone patch size (16 tissue, 8 cell)");
  probe->add_option("--out", pr_out, "Output directory")->required();
  probe->add_option("--cache-dir", pr_cache, "Feature cache directory");
  probe->add_option("--data-shard", pr_data.shard_dir, "Tile shard to probe on");
  probe->add_option("--train", pr_data.train, "Synthetic training tiles");
  probe->add_option("--eval", pr_data.eval, "Synthetic eval tiles");
  probe->add_option("--classes", pr_data.classes_csv, "Synthetic texture classes");
  probe->add_option("--base-size", pr_data.base_size, "Synthetic pyramid base size");
  probe->add_option("--tile-size", pr_data.tile_size, "Synthetic tile size");
  probe->add_option("--bootstrap", pr_boot, "Bootstrap resamples");
  probe->add_option("--fit-epochs", pr_epochs, "Head fitting epochs");
  probe->add_option("--fit-lr", pr_lr, "Head fitting learning rate");
  probe->add_option("--seed", pr_seed, "RNG seed");
  probe->add_flag("--random-baseline", pr_random,
                  "Probe a random-initialized frozen backbone instead");

  // mil
  auto* mil = app.add_subcommand("mil", "Bag-level AdditiveMIL adaptation");
  std::string mil_ckpt, mil_mode = "frozen", mil_out;
  ProbeDataOpts mil_data;
  int mil_patch = 16, mil_train_bags = 24, mil_eval_bags = 16, mil_tpb = 6, mil_boot = 1000,
      mil_epochs = 40;
  double mil_lr = 5e-3;
  std::uint64_t mil_seed = 0;
  mil->add_option("--checkpoint", mil_ckpt, "Training checkpoint")->required();
  mil->add_option("--mode", mil_mode, "frozen | finetune");
  mil->add_option("--patch-size", mil_patch, "Backbone patch size");
  mil->add_option("--out", mil_out, "Output directory")->required();
  mil->add_option("--train-bags", mil_train_bags, "Training bags");
  mil->add_option("--eval-bags", mil_eval_bags, "Eval bags");
  mil->add_option("--tiles-per-bag", mil_tpb, "Tiles per bag");
  mil->add_option("--classes", mil_data.classes_csv, "Synthetic texture classes");
  mil->add_option("--base-size", mil_data.base_size, "Synthetic pyramid base size");
  mil->add_option("--tile-size", mil_data.tile_size, "Synthetic tile size");
  mil->add_option("--bootstrap", mil_boot, "Bootstrap resamples");
  mil->add_option("--fit-epochs", mil_epochs, "Fitting epochs");
  mil->add_option("--fit-lr", mil_lr, "Fitting learning rate");
  mil->add_option("--seed", mil_seed, "RNG seed");

  // bench
  auto* bench = app.add_subcommand("bench", "Throughput benchmark");
  std::string be_encoder = "vit_s", be_task = "tile", be_patches = "8,16,32", be_out;
  double be_duration = 0.5;
  int be_batch = 4;
  std::uint64_t be_seed = 0;
  bench->add_option("--encoder", be_encoder, "vit_s | vit_b | desk | mini");
  bench->add_option("--task", be_task, "tile | mil");
  bench->add_option("--patch-sizes", be_patches, "Comma-separated patch sizes");
  bench->add_option("--duration", be_duration, "Seconds per timed repetition");
  bench->add_option("--batch", be_batch, "Batch size");
  bench->add_option("--out", be_out, "CSV output path");
  bench->add_option("--seed", be_seed, "RNG seed");

  // report
  auto* report = app.add_subcommand("report", "Run the full benchmark suite");
  std::string rp_config, rp_out;
  std::int64_t rp_seed = -1;
  report->add_option("--config", rp_config, "Suite config (JSON)")->required();
  report->add_option("--out", rp_out, "Report directory")->required();
  report->add_option("--seed", rp_seed, "Seed override");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      return cmd_synth_data(sd_out, sd_n, sd_base, sd_classes, sd_tpp, sd_tile, sd_probs, sd_seed,
                            sd_write_pyramids);
    }
    if (pre->parsed()) {
      return cmd_pretrain(pt_config, pt_out, pt_resume, pt_print, pt_dump, pt_seed);
    }
    if (probe->parsed()) {
      return cmd_probe(pr_ckpt, pr_head, pr_patch, pr_data, pr_out, pr_cache, pr_boot, pr_seed,
                       pr_random, pr_epochs, pr_lr);
    }
    if (mil->parsed()) {
      return cmd_mil(mil_ckpt, mil_mode, mil_patch, mil_train_bags, mil_eval_bags, mil_tpb,
                     mil_data, mil_out, mil_boot, mil_seed, mil_epochs, mil_lr);
    }
    if (bench->parsed()) {
      return cmd_bench(be_encoder, be_task, be_patches, be_duration, be_batch, be_out, be_seed);
    }
    if (report->parsed()) {
      return cmd_report(rp_config, rp_out, rp_seed);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 1;
}
