#pragma once

#include "pyrvit/encoder.hpp"
#include "pyrvit/pyramid.hpp"

#include <string>
#include <vector>

namespace pyrvit {

struct ThroughputReport {
  std::string task;  // "tile" | "mil"
  std::string encoder;
  int patch_size = 0;
  int tile_size = kGlobalCropSize;
  int batch_size = 0;
  int repetitions = 0;
  double tiles_per_second = 0.0;  // median over timed repetitions
  std::vector<double> per_repetition;
  std::string hardware;
};

std::string hardware_descriptor();

// Median tiles/second over `repetitions` timed runs after one warmup run.
// Input batches are pre-generated so I/O never counts; each repetition
// processes batches until at least `duration_seconds` elapsed.
ThroughputReport throughput_bench(const EncoderConfig& encoder_cfg, const std::string& task,
                                  int patch_size, double duration_seconds, int batch_size = 32,
                                  int repetitions = 3, std::uint64_t seed = 0,
                                  const std::string& encoder_name = "");

}  // namespace pyrvit
