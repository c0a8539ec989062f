// Runs the nine acceptance criteria and prints one [PASS]/[FAIL] line per criterion.
// Usage: casvit_acceptance [criterion numbers...]
#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <set>

#include "casvit/accounting.hpp"
#include "casvit/bench.hpp"
#include "casvit/checkpoint.hpp"
#include "casvit/gradcheck.hpp"
#include "casvit/train.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace casvit;
using testutil::randn;
using T4 = Tensor<double>;

namespace {

struct Check {
  bool ok = true;
  void expect(bool cond, const std::string& what) {
    if (!cond) {
      ok = false;
      std::cout << "    failed: " << what << "\n";
    }
  }
};

bool formulas() {
  Check c;
  Rng rng(2024);
  for (int i = 0; i < 50; ++i) {
    const std::uint64_t h = 1 + rng.below(224), w = 1 + rng.below(224), ch = 1 + rng.below(1024);
    c.expect(phi_cost(h, w, ch) == 13 * h * w * ch, "phi_cost");
    c.expect(catm_cost(h, w, ch) == 38 * h * w * ch, "catm_cost");
  }
  for (int i = 0; i < 5; ++i) {
    const std::size_t h = 2 + rng.below(10), w = 2 + rng.below(10), ch = 1 + rng.below(24);
    CatmParams<double> p = init_catm<double>(rng, ch, {});
    Tape<double> tape;
    Context<double> ctx(tape, Mode::eval, PaddingMode::zeros, false);
    catm_forward(ctx, p, tape.constant(randn({1, ch, h, w}, rng)), {});
    c.expect(traced_macs(tape, "catm") == catm_cost(h, w, ch), "traced catm MACs");
    c.expect(traced_macs(tape, "catm.q.spatial") + traced_macs(tape, "catm.q.channel") == phi_cost(h, w, ch),
             "traced phi MACs");
  }
  for (auto m : {MixerKind::catm, MixerKind::msa}) {
    VariantConfig cfg = variant_config("tiny");
    cfg.mixer = m;
    Model<double> model = build_variant<double>(cfg, 0);
    const CostReport r = model_cost(model, 64, 64);
    Tape<double> tape;
    Context<double> ctx(tape, Mode::eval, PaddingMode::zeros, false);
    backbone_forward(ctx, model, tape.constant(randn({1, 3, 64, 64}, rng)));
    for (const auto& l : r.per_layer) c.expect(traced_macs(tape, l.layer) == l.macs, "traced " + l.layer);
  }
  std::cout << "    50 triples exact; traced == analytic for catm, phi and every tiny-model layer\n";
  return c.ok;
}

bool cost_table() {
  Check c;
  for (const char* v : {"xs", "s", "m", "t"}) {
    VariantConfig cfg = variant_config(v);
    cfg.projection = ProjectionKind::dense_1x1;
    Model<float> model = build_variant<float>(cfg, 0);
    const CostReport r = model_cost(model, 224, 224);
    const double dp = *r.params_deviation(), dm = *r.macs_deviation();
    std::printf("    %-2s params %9.3fM (ref %6.2fM, %+6.1f%%)  MACs %8.1fM (ref %5.0fM, %+6.1f%%)  instantiated %s\n",
                cfg.name.c_str(), r.params_total / 1e6, r.reference->params / 1e6, 100 * dp, r.macs_total / 1e6,
                r.reference->macs / 1e6, 100 * dm, r.params_verified() ? "equal" : "DIFFERENT");
    c.expect(r.params_verified(), std::string(v) + " params_total == instantiated count");
    c.expect(std::abs(dp) <= 0.15, std::string(v) + " params within 15%");
    c.expect(std::abs(dm) <= 0.15, std::string(v) + " MACs within 15%");
    if (cfg.name == "XS") {
      std::cout << "    per-layer (XS):\n";
      for (const auto& l : r.per_layer)
        std::printf("      %-22s params %9llu  MACs %11llu\n", l.layer.c_str(), static_cast<unsigned long long>(l.params),
                    static_cast<unsigned long long>(l.macs));
    }
  }
  return c.ok;
}

bool gradients() {
  Check c;
  for (const char* m : {"conv2d", "batchnorm", "spatial", "channel", "catm", "catm_dense", "msa", "separable", "swift", "pool"}) {
    const GradCheckReport r = gradcheck_module(m, {});
    std::printf("    %-13s max rel err %.2e (tol 1e-5)\n", m, r.max_rel_error);
    c.expect(r.passed, std::string(m) + ": " + r.summary());
  }
  for (const char* m : {"block", "mini_backbone"}) {
    ModuleCheckOptions o;
    o.tol = 1e-4;
    const GradCheckReport r = gradcheck_module(m, o);
    std::printf("    %-13s max rel err %.2e (tol 1e-4)\n", m, r.max_rel_error);
    c.expect(r.passed, std::string(m) + ": " + r.summary());
  }
  return c.ok;
}

bool audit() {
  Check c;
  for (const char* v : {"xs", "s", "m", "t", "tiny"}) {
    for (auto proj : {ProjectionKind::depthwise_1x1, ProjectionKind::dense_1x1}) {
      VariantConfig cfg = variant_config(v);
      cfg.projection = proj;
      Model<float> model = build_variant<float>(cfg, 0);
      Tape<float> tape;
      Context<float> ctx(tape, Mode::eval, PaddingMode::zeros, false);
      backbone_forward(ctx, model, tape.constant(Tensor<float>(Shape{1, 3, 32, 32})));
      const TapeAudit a = audit_tape(tape);
      c.expect(a.catm_nodes > 0 && a.catm_clean(), std::string(v) + ": " + a.to_text());
    }
  }
  Rng rng(3);
  MsaParams<double> p = init_msa<double>(rng, 16);
  Tape<double> tape;
  Context<double> ctx(tape, Mode::eval);
  msa_forward(ctx, p, tape.constant(randn({1, 49, 16}, rng)));
  const TapeAudit a = audit_tape(tape);
  std::cout << "    msa_forward: " << a.count(OpKind::matmul) << " matmul, " << a.count(OpKind::softmax) << " softmax\n";
  c.expect(a.count(OpKind::matmul) >= 1 && a.count(OpKind::softmax) >= 1, "msa has matmul and softmax");
  return c.ok;
}

bool equivariance() {
  Check c;
  Rng rng(5);
  const VariantConfig cfg = variant_config("tiny");
  double worst = 0;
  for (int rep = 0; rep < 10; ++rep) {
    const std::size_t ch = 2 + rng.below(8), h = 3 + rng.below(8), w = 3 + rng.below(8);
    CatmParams<double> p = init_catm<double>(rng, ch, {});
    testutil::randomize(rng, [&](const ParamVisitor<double>& f) { visit("catm", p, f); });
    BlockParams<double> block = init_block<double>(rng, ch, cfg);
    testutil::randomize(rng, [&](const ParamVisitor<double>& f) { visit("block", block, f); });
    const T4 x = randn({2, ch, h, w}, rng);
    const long dh = static_cast<long>(rng.below(h)), dw = 1 + static_cast<long>(rng.below(w));
    const std::function<Var<double>(Context<double>&, Var<double>)> fs[] = {
        [&](Context<double>& ctx, Var<double> v) { return catm_forward(ctx, p, v, {}); },
        [&](Context<double>& ctx, Var<double> v) { return cas_block(ctx, block, v, cfg); }};
    for (const auto& f : fs) {
      const double d = testutil::max_diff(kernels::roll2d(testutil::run_eval(f, x, PaddingMode::circular), dh, dw),
                                          testutil::run_eval(f, kernels::roll2d(x, dh, dw), PaddingMode::circular));
      worst = std::max(worst, d);
    }
  }
  std::printf("    worst |f(shift x) - shift f(x)| = %.2e over 10 catm + 10 block instances\n", worst);
  c.expect(worst < 1e-10, "shift equivariance within 1e-10");
  return c.ok;
}

bool oracles() {
  Check c;
  Rng rng(6);
  double worst = 0;
  const auto track = [&](const T4& a, const T4& b) { worst = std::max(worst, testutil::max_diff(a, b)); };
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t ch = 2 + rng.below(8), h = 3 + rng.below(7), w = 3 + rng.below(7);
    const auto ab = static_cast<AblationVariant>(rep % 5);
    const InteractionConfig cfg = make_ablation(ab, rep % 2 ? ProjectionKind::dense_1x1 : ProjectionKind::depthwise_1x1);
    CatmParams<double> p = init_catm<double>(rng, ch, cfg);
    testutil::randomize(rng, [&](const ParamVisitor<double>& f) { visit("catm", p, f); });
    const T4 x = randn({2, ch, h, w}, rng);
    track(testutil::run_eval([&](Context<double>& ctx, Var<double> v) { return catm_forward(ctx, p, v, cfg); }, x),
          oracle::catm(x, p, cfg));

    CatmParams<double> full = init_catm<double>(rng, ch, {});
    testutil::randomize(rng, [&](const ParamVisitor<double>& f) { visit("catm", full, f); });
    auto sp = *full.q_context.spatial;
    auto chn = *full.q_context.channel;
    track(testutil::run_eval([&](Context<double>& ctx, Var<double> v) { return spatial_interaction(ctx, sp, v); }, x),
          oracle::spatial(x, sp));
    track(testutil::run_eval([&](Context<double>& ctx, Var<double> v) { return channel_interaction(ctx, chn, v); }, x),
          oracle::channel(x, chn));

    const std::size_t d = 2 + rng.below(10), n = 1 + rng.below(16);
    const T4 tokens = randn({2, n, d}, rng);
    MsaParams<double> msa = init_msa<double>(rng, d);
    SeparableParams<double> sep = init_separable<double>(rng, d);
    SwiftParams<double> sw = init_swift<double>(rng, d);
    testutil::randomize(rng, [&](const ParamVisitor<double>& f) { visit("msa", msa, f); });
    testutil::randomize(rng, [&](const ParamVisitor<double>& f) { visit("sep", sep, f); });
    testutil::randomize(rng, [&](const ParamVisitor<double>& f) { visit("swift", sw, f); });
    track(testutil::run_eval([&](Context<double>& ctx, Var<double> v) { return msa_forward(ctx, msa, v); }, tokens),
          oracle::msa(tokens, msa));
    track(testutil::run_eval([&](Context<double>& ctx, Var<double> v) { return separable_attention(ctx, sep, v); }, tokens),
          oracle::separable(tokens, sep));
    track(testutil::run_eval([&](Context<double>& ctx, Var<double> v) { return swift_attention(ctx, sw, v); }, tokens),
          oracle::swift(tokens, sw));
  }
  std::printf("    20 instances each of catm, spatial, channel, msa, separable, swift; worst diff %.2e\n", worst);
  c.expect(worst < 1e-10, "oracles within 1e-10");
  return c.ok;
}

bool learnability() {
  Check c;
  const Dataset ds = generate_shapes_dataset(4000, 32, 4, 0);
  const auto [train_set, val_set] = split_dataset(ds, 800);
  TrainConfig tc;
  tc.epochs = 6;
  tc.seed = 1;
  const std::pair<AblationVariant, double> runs[] = {
      {AblationVariant::base, 0.95}, {AblationVariant::no_spatial, 0.90}, {AblationVariant::no_channel, 0.90}};
  for (auto [ab, threshold] : runs) {
    VariantConfig cfg = variant_config("tiny");
    cfg.ablation = ab;
    Model<float> model = build_variant<float>(cfg, tc.seed);
    const auto history = train(model, tc, train_set, val_set);
    const double acc = evaluate(model, val_set).accuracy;
    std::printf("    tiny/%-11s %zu epochs  val acc %.4f (need >= %.2f)  per-epoch:", ablation_name(ab), tc.epochs, acc,
                threshold);
    for (const auto& m : history) std::printf(" %.3f", m.val_accuracy);
    std::printf("\n");
    c.expect(acc >= threshold, std::string(ablation_name(ab)) + " accuracy");
  }
  TrainConfig short_cfg = tc;
  short_cfg.epochs = 1;
  const auto [small_train, small_val] = split_dataset(generate_shapes_dataset(800, 32, 4, 0), 160);
  Model<float> a = build_variant<float>(variant_config("tiny"), 7), b = build_variant<float>(variant_config("tiny"), 7);
  const bool same = train(a, short_cfg, small_train, small_val) == train(b, short_cfg, small_train, small_val) &&
                    encode_checkpoint(a) == encode_checkpoint(b);
  std::cout << "    repeat run with the same seed: " << (same ? "identical" : "DIFFERENT") << " metrics and weights\n";
  c.expect(same, "deterministic per seed");
  return c.ok;
}

bool scaling() {
  Check c;
  const MixerTiming catm = time_mixer_scaling(MixerKind::catm, 32, 16, 16, 2, 15, 0);
  const MixerTiming msa = time_mixer_scaling(MixerKind::msa, 32, 16, 16, 2, 11, 0);
  std::printf("    C=32 B=2, 16x16 -> 32x32: catm %.3f ms -> %.3f ms (x%.2f), msa %.3f ms -> %.3f ms (x%.2f)\n",
              1e3 * catm.base_seconds, 1e3 * catm.double_seconds, catm.ratio(), 1e3 * msa.base_seconds,
              1e3 * msa.double_seconds, msa.ratio());
  c.expect(catm.ratio() >= 3 && catm.ratio() <= 6, "catm ratio in [3,6]");
  c.expect(msa.ratio() >= 12 && msa.ratio() <= 20, "msa ratio in [12,20]");
  return c.ok;
}

CheckpointErrc error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const CheckpointError& e) {
    return e.code();
  }
  return CheckpointErrc::io;
}

bool persistence() {
  Check c;
  Model<float> model = build_variant<float>(variant_config("tiny"), 3);
  const Dataset ds = generate_shapes_dataset(64, 32, 4, 9);
  const auto path = std::filesystem::temp_directory_path() / "casvit_acceptance.ckpt";
  save_checkpoint(model, path);
  Model<float> loaded = load_checkpoint<float>(path);
  std::filesystem::remove(path);
  c.expect(encode_checkpoint(loaded) == encode_checkpoint(model), "bit-exact round trip");
  const EvalResult a = evaluate(model, ds), b = evaluate(loaded, ds);
  c.expect(a.loss == b.loss && a.accuracy == b.accuracy, "evaluate preserved");

  const auto bytes = encode_checkpoint(model);
  const CheckpointView view = decode_checkpoint(bytes);
  auto corrupt = bytes;
  corrupt[0] = 'X';
  c.expect(error_of([&] { decode_checkpoint(corrupt); }) == CheckpointErrc::bad_magic, "bad_magic");
  corrupt = bytes;
  corrupt[4] = 2;
  c.expect(error_of([&] { decode_checkpoint(corrupt); }) == CheckpointErrc::version_mismatch, "version_mismatch");
  c.expect(error_of([&] { decode_checkpoint(std::span(bytes).first(bytes.size() - 1)); }) == CheckpointErrc::truncated,
           "truncated payload");
  c.expect(error_of([&] { decode_checkpoint(std::span(bytes).first(10)); }) == CheckpointErrc::truncated, "truncated header");
  Model<float> xs = build_variant<float>(variant_config("xs"), 0);
  c.expect(error_of([&] { assign_checkpoint(xs, view); }) == CheckpointErrc::shape_mismatch, "shape_mismatch");
  c.expect(error_of([&] { load_checkpoint<float>("/nonexistent/casvit.ckpt"); }) == CheckpointErrc::io, "io");
  std::cout << "    round trip bit-exact, eval loss " << a.loss << " preserved; corruption codes checked\n";
  return c.ok;
}

}  // namespace

int main(int argc, char** argv) {
  const std::pair<const char*, std::function<bool()>> criteria[] = {
      {"complexity formulas and traced MACs", formulas},
      {"cost table cross-check (dense projection)", cost_table},
      {"gradient correctness", gradients},
      {"no matmul or softmax inside CATM", audit},
      {"shift equivariance", equivariance},
      {"oracle equivalence", oracles},
      {"learnability on shapes", learnability},
      {"linear token scaling", scaling},
      {"checkpoint persistence", persistence}};
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  int failures = 0;
  for (int i = 0; i < 9; ++i) {
    if (!selected.empty() && !selected.count(i + 1)) continue;
    const auto start = std::chrono::steady_clock::now();
    bool ok = false;
    try {
      ok = criteria[i].second();
    } catch (const std::exception& e) {
      std::cout << "    exception: " << e.what() << "\n";
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("[%s] criterion %d: %s (%.1fs)\n", ok ? "PASS" : "FAIL", i + 1, criteria[i].first, secs);
    std::fflush(stdout);
    failures += !ok;
  }
  return failures == 0 ? 0 : 1;
}
