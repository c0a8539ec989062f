#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "casvit/backbone.hpp"

namespace casvit {

struct BenchOptions {
  std::size_t height = 224;
  std::size_t width = 224;
  std::size_t batch = 1;
  std::size_t warmup_iters = 1;
  std::size_t measure_iters = 5;
  std::uint64_t seed = 0;
};

struct BenchResult {
  std::vector<double> run_seconds;  // one forward pass per entry
  double median_seconds = 0.0;
  double images_per_sec = 0.0;
  std::uint64_t macs_per_image = 0;
  double macs_per_sec = 0.0;
  /// Median seconds per part: "stem", "stage1".."stage4", "embed1".."embed3", "head".
  std::map<std::string, double> per_stage;

  std::string to_text() const;
};

/// Eval-mode forward passes on random input; single thread.
template <typename T>
BenchResult bench_throughput(Model<T>& model, const BenchOptions& opts);

struct MixerTiming {
  double base_seconds = 0.0;    // median over iterations at H×W
  double double_seconds = 0.0;  // median at 2H×2W
  double ratio() const { return double_seconds / base_seconds; }
};

/// Forward time of one token mixer (all baseline mixers run single-head on H·W tokens of
/// width `channels`) at H×W and at 2H×2W.
MixerTiming time_mixer_scaling(MixerKind kind, std::size_t channels, std::size_t height,
                               std::size_t width, std::size_t batch, std::size_t iters,
                               std::uint64_t seed = 0);

double median(std::vector<double> values);

}  // namespace casvit
