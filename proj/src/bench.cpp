#include "pyrvit/bench.hpp"

#include "pyrvit/adaptation.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <thread>

namespace pyrvit {

std::string hardware_descriptor() {
  std::string model = "unknown-cpu";
  std::ifstream cpuinfo("/proc/cpuinfo");
  std::string line;
  while (std::getline(cpuinfo, line)) {
    if (line.rfind("model name", 0) == 0) {
      const auto colon = line.find(':');
      if (colon != std::string::npos) {
        model = line.substr(colon + 2);
      }
      break;
    }
  }
  return model + " x" + std::to_string(std::thread::hardware_concurrency());
}

ThroughputReport throughput_bench(const EncoderConfig& encoder_cfg, const std::string& task,
                                  int patch_size, double duration_seconds, int batch_size,
                                  int repetitions, std::uint64_t seed,
                                  const std::string& encoder_name) {
  check_arg(duration_seconds > 0.0, "benchmark duration must be positive");
  check_arg(batch_size >= 1, "batch size must be at least 1");
  check_arg(repetitions >= 3, "need at least 3 timed repetitions for a median");
  check_arg(task == "tile" || task == "mil", "task must be 'tile' or 'mil'");

  VitEncoder encoder;
  encoder.init(encoder_cfg, derive_seed(seed, 0xBE7C, 0));

  Linear tile_head;
  AdditiveMilHead mil_head;
  {
    RngStream rng(derive_seed(seed, 0xBE7C, 1));
    tile_head.init(encoder_cfg.embed_dim, 4, rng);
    mil_head.init(encoder_cfg.embed_dim, 64, 4, derive_seed(seed, 0xBE7C, 2));
  }

  // Pre-generated synthetic inputs: I/O stays out of the timed region.
  RngStream rng(derive_seed(seed, 0xBE7C, 3));
  std::vector<Image> batch(static_cast<std::size_t>(batch_size), Image(kGlobalCropSize, kGlobalCropSize));
  for (auto& img : batch) {
    for (auto& c : img.ch) {
      for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = rng.uniform();
    }
  }

  const auto run_batch = [&]() {
    Mat features(batch_size, encoder_cfg.embed_dim);
    parallel_for(static_cast<std::size_t>(batch_size), [&](std::size_t i) {
      const TokenSequence seq = encoder.encode(batch[i], patch_size);
      features.row(static_cast<Eigen::Index>(i)) = seq.cls.transpose();
    });
    if (task == "tile") {
      volatile double sink = tile_head.forward(features).sum();
      (void)sink;
    } else {
      volatile double sink = mil_head.forward(features).bag_logits.sum();
      (void)sink;
    }
  };

  using clock = std::chrono::steady_clock;
  run_batch();  // warmup: excluded from the report

  ThroughputReport report;
  report.task = task;
  report.encoder = encoder_name;
  report.patch_size = patch_size;
  report.batch_size = batch_size;
  report.repetitions = repetitions;
  report.hardware = hardware_descriptor();

  for (int rep = 0; rep < repetitions; ++rep) {
    const auto start = clock::now();
    std::int64_t tiles = 0;
    double elapsed = 0.0;
    do {
      run_batch();
      tiles += batch_size;
      elapsed = std::chrono::duration<double>(clock::now() - start).count();
    } while (elapsed < duration_seconds);
    report.per_repetition.push_back(static_cast<double>(tiles) / elapsed);
  }

  std::vector<double> sorted = report.per_repetition;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t mid = sorted.size() / 2;
  report.tiles_per_second = sorted.size() % 2 == 1
                                ? sorted[mid]
                                : 0.5 * (sorted[mid - 1] + sorted[mid]);
  return report;
}

}  // namespace pyrvit
