#include "casvit/bench.hpp"

#include <algorithm>
#include <chrono>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "casvit/accounting.hpp"

namespace casvit {

double median(std::vector<double> values) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

namespace {

using Clock = std::chrono::steady_clock;

// Keeps large tensors on the heap instead of fresh mmap regions, so repeated forward
// passes do not pay page faults that depend on glibc's adaptive thresholds.
void stabilize_allocator() {
#if defined(__GLIBC__)
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
    return true;
  }();
  (void)done;
#endif
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

template <typename T>
Tensor<T> random_tensor(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.normal());
  return t;
}

std::string part_of(const std::string& scope) {
  const auto dot = scope.find('.');
  const std::string head = scope.substr(0, dot);
  if (head == "stages" || head == "embeds") {
    const auto next = scope.find('.', dot + 1);
    const int idx = std::stoi(scope.substr(dot + 1, next - dot - 1));
    return (head == "stages" ? "stage" : "embed") + std::to_string(idx + 1);
  }
  return head;
}

}  // namespace

std::string BenchResult::to_text() const {
  std::ostringstream os;
  os << "median " << median_seconds * 1e3 << " ms/batch, " << images_per_sec << " images/s, "
     << macs_per_image / 1e6 << " MMACs/image, " << macs_per_sec / 1e9 << " GMAC/s\n";
  for (const auto& [part, s] : per_stage) os << "  " << part << ": " << s * 1e3 << " ms\n";
  return os.str();
}

template <typename T>
BenchResult bench_throughput(Model<T>& model, const BenchOptions& opts) {
  if (opts.batch == 0 || opts.measure_iters == 0) throw ConfigError("bench needs batch and measure_iters > 0");
  stabilize_allocator();
  const Tensor<T> images = random_tensor<T>(Shape{opts.batch, 3, opts.height, opts.width}, opts.seed);
  BenchResult r;
  r.macs_per_image = model_cost(model, opts.height, opts.width).macs_total;
  std::map<std::string, std::vector<double>> parts;
  for (std::size_t it = 0; it < opts.warmup_iters + opts.measure_iters; ++it) {
    Tape<T> tape;
    Context<T> ctx(tape, Mode::eval, PaddingMode::zeros, false);
    const auto t0 = Clock::now();
    backbone_forward(ctx, model, tape.constant(images));
    const double s = seconds_since(t0);
    if (it < opts.warmup_iters) continue;
    r.run_seconds.push_back(s);
    std::map<std::string, double> acc;
    for (const auto& n : tape.nodes()) {
      if (!n.scope.empty()) acc[part_of(n.scope)] += std::chrono::duration<double>(n.elapsed).count();
    }
    for (const auto& [k, v] : acc) parts[k].push_back(v);
  }
  r.median_seconds = median(r.run_seconds);
  r.images_per_sec = static_cast<double>(opts.batch) / r.median_seconds;
  r.macs_per_sec = static_cast<double>(r.macs_per_image) * r.images_per_sec;
  for (auto& [k, v] : parts) r.per_stage[k] = median(v);
  return r;
}

namespace {

// One mixer instance at a fixed input size; run() executes a single forward pass.
class MixerRunner {
 public:
  MixerRunner(MixerKind kind, std::size_t channels, std::size_t height, std::size_t width,
              std::size_t batch, std::uint64_t seed)
      : kind_(kind), x_(random_tensor<float>(Shape{batch, channels, height, width}, seed + 1)) {
    Rng rng(seed);
    switch (kind) {
      case MixerKind::catm: catm_ = init_catm<float>(rng, channels, InteractionConfig{}); break;
      case MixerKind::msa: msa_ = init_msa<float>(rng, channels); break;
      case MixerKind::separable: sep_ = init_separable<float>(rng, channels); break;
      case MixerKind::swift: swift_ = init_swift<float>(rng, channels); break;
      case MixerKind::pool: break;
    }
  }

  // Seconds spent inside the mixer call (token reshaping excluded).
  double run() {
    Tape<float> tape;
    Context<float> ctx(tape, Mode::eval, PaddingMode::zeros, false);
    Var<float> in = tape.constant(x_);
    if (kind_ == MixerKind::msa || kind_ == MixerKind::separable || kind_ == MixerKind::swift) {
      in = map_to_tokens(tape, in);
    }
    const auto t0 = Clock::now();
    switch (kind_) {
      case MixerKind::catm: catm_forward(ctx, catm_, in, InteractionConfig{}); break;
      case MixerKind::msa: msa_forward(ctx, msa_, in); break;
      case MixerKind::separable: separable_attention(ctx, sep_, in); break;
      case MixerKind::swift: swift_attention(ctx, swift_, in); break;
      case MixerKind::pool: pool_mixer(ctx, in, 3); break;
    }
    return seconds_since(t0);
  }

  // Mean seconds per call over `reps` calls.
  double sample(std::size_t reps) {
    double total = 0.0;
    for (std::size_t i = 0; i < reps; ++i) total += run();
    return total / static_cast<double>(reps);
  }

  // Calls per sample so that one sample lasts at least `target` seconds.
  std::size_t calibrate(double target) {
    const double once = std::max(run(), 1e-7);
    return std::max<std::size_t>(1, static_cast<std::size_t>(target / once) + 1);
  }

 private:
  MixerKind kind_;
  Tensor<float> x_;
  CatmParams<float> catm_;
  MsaParams<float> msa_;
  SeparableParams<float> sep_;
  SwiftParams<float> swift_;
};

}  // namespace

MixerTiming time_mixer_scaling(MixerKind kind, std::size_t channels, std::size_t height,
                               std::size_t width, std::size_t batch, std::size_t iters,
                               std::uint64_t seed) {
  if (iters == 0) throw ConfigError("time_mixer_scaling needs iters > 0");
  stabilize_allocator();
  MixerRunner base(kind, channels, height, width, batch, seed);
  MixerRunner twice(kind, channels, 2 * height, 2 * width, batch, seed);
  constexpr double kSampleSeconds = 0.05;
  const std::size_t reps_base = base.calibrate(kSampleSeconds);
  const std::size_t reps_twice = twice.calibrate(kSampleSeconds);
  // Warm the allocator and caches at both sizes before anything is recorded.
  base.sample(reps_base);
  twice.sample(reps_twice);
  std::vector<double> a, b;
  // Alternate the two sizes so slow drifts in machine load hit both equally.
  for (std::size_t i = 0; i < iters; ++i) {
    a.push_back(base.sample(reps_base));
    b.push_back(twice.sample(reps_twice));
  }
  return MixerTiming{median(a), median(b)};
}

template BenchResult bench_throughput(Model<float>&, const BenchOptions&);
template BenchResult bench_throughput(Model<double>&, const BenchOptions&);

}  // namespace casvit
