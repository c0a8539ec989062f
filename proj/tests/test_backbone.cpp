#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "casvit/checkpoint.hpp"
#include "casvit/gradcheck.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace casvit;
using testutil::randn;
using T4 = Tensor<double>;

TEST_CASE("named variants carry the published depths and widths") {
  const VariantConfig xs = variant_config("xs"), t = variant_config("T");
  CHECK(xs.blocks == std::array<std::size_t, 4>{2, 2, 4, 2});
  CHECK(xs.channels == std::array<std::size_t, 4>{48, 56, 112, 220});
  CHECK(variant_config("s").channels == std::array<std::size_t, 4>{48, 64, 128, 256});
  CHECK(variant_config("m").channels == std::array<std::size_t, 4>{64, 96, 192, 384});
  CHECK(t.blocks == std::array<std::size_t, 4>{3, 3, 6, 3});
  CHECK(t.channels == std::array<std::size_t, 4>{96, 128, 256, 512});
  CHECK(t.name == "T");
  CHECK(xs.hidden(3) == 880);
  CHECK_THROWS_AS(variant_config("xl"), ConfigError);
}

TEST_CASE("variant configs validate and round-trip through JSON") {
  VariantConfig c = variant_config("tiny");
  c.mixer = MixerKind::swift;
  c.ablation = AblationVariant::split_sc;
  c.projection = ProjectionKind::dense_1x1;
  CHECK(VariantConfig::from_json(c.to_json()) == c);
  CHECK_THROWS(VariantConfig::from_json("{not json"));
  VariantConfig bad = c;
  bad.blocks[2] = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.num_classes = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.mlp_ratio = -1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("build_variant is deterministic per seed and names every tensor uniquely") {
  const VariantConfig cfg = variant_config("tiny");
  Model<double> a = build_variant<double>(cfg, 5), b = build_variant<double>(cfg, 5), c = build_variant<double>(cfg, 6);
  CHECK(encode_checkpoint(a) == encode_checkpoint(b));
  CHECK(encode_checkpoint(a) != encode_checkpoint(c));
  std::set<std::string> names;
  std::size_t params = 0, buffers = 0;
  visit<double>(a, [&](const std::string& name, T4& t, ParamRole role) {
    CHECK(names.insert(name).second);
    (role == ParamRole::parameter ? params : buffers) += t.numel();
  });
  CHECK(names.count("stem.conv1.weight") == 1);
  CHECK(names.count("stages.2.1.mixer.wq.weight") == 1);
  CHECK(names.count("head.weight") == 1);
  CHECK(params == count_parameters(a));
  CHECK(buffers > 0);
}

TEST_CASE("forward produces finite logits for every mixer") {
  Rng rng(7);
  const T4 img = randn({2, 3, 32, 32}, rng);
  for (auto m : {MixerKind::catm, MixerKind::pool, MixerKind::msa, MixerKind::separable, MixerKind::swift}) {
    VariantConfig cfg = variant_config("tiny");
    cfg.mixer = m;
    Model<double> model = build_variant<double>(cfg, 1);
    const T4 logits = predict(model, img);
    CHECK(logits.shape() == Shape{2, 4});
    CHECK(all_finite(logits));
  }
}

TEST_CASE("every ablation arrangement builds and runs") {
  Rng rng(8);
  const T4 img = randn({1, 3, 32, 32}, rng);
  for (auto ab : {AblationVariant::base, AblationVariant::no_spatial, AblationVariant::no_channel,
                  AblationVariant::split_sc, AblationVariant::swapped_full}) {
    VariantConfig cfg = variant_config("tiny");
    cfg.ablation = ab;
    Model<double> model = build_variant<double>(cfg, 2);
    CHECK(all_finite(predict(model, img)));
  }
}

TEST_CASE("a named variant runs end to end at reduced resolution") {
  Model<float> xs = build_variant<float>(variant_config("xs"), 0);
  Tensor<float> img(Shape{1, 3, 64, 64});
  Rng rng(3);
  for (auto& v : img.data()) v = static_cast<float>(rng.normal());
  const Tensor<float> logits = predict(xs, img);
  CHECK(logits.shape() == Shape{1, 1000});
  CHECK(all_finite(logits));
}

TEST_CASE("backbone rejects inputs it cannot downsample") {
  Model<double> model = build_variant<double>(variant_config("tiny"), 0);
  CHECK_THROWS_AS(predict(model, T4(Shape{1, 3, 48, 32})), ShapeError);
  CHECK_THROWS_AS(predict(model, T4(Shape{1, 1, 32, 32})), ShapeError);
}

TEST_CASE("eval never mutates the model; train mode only moves BN statistics") {
  Model<double> model = build_variant<double>(variant_config("tiny"), 4);
  Rng rng(9);
  const T4 img = randn({4, 3, 32, 32}, rng);
  const auto before = encode_checkpoint(model);
  predict(model, img);
  CHECK(encode_checkpoint(model) == before);

  std::map<std::string, T4> snapshot;
  visit<double>(model, [&](const std::string& n, T4& t, ParamRole) { snapshot[n] = t; });
  {
    Tape<double> tape;
    Context<double> ctx(tape, Mode::train);
    backbone_forward(ctx, model, tape.constant(img));
  }
  std::size_t moved_buffers = 0;
  visit<double>(model, [&](const std::string& n, T4& t, ParamRole role) {
    const double d = testutil::max_diff(t, snapshot[n]);
    if (role == ParamRole::parameter) CHECK_MESSAGE(d == 0.0, n);
    else if (d > 0) ++moved_buffers;
  });
  CHECK(moved_buffers > 0);
}

TEST_CASE("train and eval forward agree once BN statistics match the batch") {
  // A single block whose norms hold the exact statistics of the batch behaves the same
  // in both modes, so mode only changes normalization.
  Rng rng(10);
  BatchNormParams<double> bn = make_batchnorm<double>(3);
  const T4 x = randn({5, 3, 4, 4}, rng, 2.0);
  T4 train_out;
  {
    Tape<double> tape;
    Context<double> ctx(tape, Mode::train);
    ctx.set_bn_momentum(1.0);
    train_out = batchnorm(ctx, bn, tape.constant(x), 1e-5).value();
  }
  // Momentum 1 stores the unbiased variance; rescale it to the biased one used in training.
  const double n = 5 * 16;
  for (auto& v : bn.running_var.data()) v *= (n - 1) / n;
  Tape<double> tape;
  Context<double> ctx(tape, Mode::eval);
  CHECK(testutil::max_diff(batchnorm(ctx, bn, tape.constant(x), 1e-5).value(), train_out) < 1e-12);
}

TEST_CASE("block and mini-backbone gradients pass at 1e-4") {
  for (const char* m : {"block", "mini_backbone"}) {
    ModuleCheckOptions o;
    o.tol = 1e-4;
    const auto r = gradcheck_module(m, o);
    CHECK_MESSAGE(r.passed, m << ": " << r.summary());
  }
}

TEST_CASE("CAS block matches a composition of oracles") {
  Rng rng(11);
  const VariantConfig cfg = variant_config("tiny");
  BlockParams<double> p = init_block<double>(rng, 6, cfg);
  testutil::randomize(rng, [&](const ParamVisitor<double>& f) { visit("b", p, f); });
  const T4 x = randn({2, 6, 5, 5}, rng);
  const T4 y = testutil::run_eval([&](Context<double>& c, Var<double> v) { return cas_block(c, p, v, cfg); }, x);

  const double eps = cfg.norm_eps;
  T4 h = x;
  for (std::size_t i = 0; i < 3; ++i) {
    h = oracle::batchnorm_eval(oracle::conv(h, p.integration.dw[i], 1, 6), p.integration.bn[i], eps);
    for (auto& v : h.data()) v = oracle::relu(v);
  }
  T4 x1 = x;
  for (std::size_t i = 0; i < x1.numel(); ++i) x1[i] += h[i];
  const T4 m = oracle::catm(oracle::batchnorm_eval(x1, p.norm1, eps), std::get<CatmParams<double>>(p.mixer), cfg.interaction());
  T4 x2 = x1;
  for (std::size_t i = 0; i < x2.numel(); ++i) x2[i] += m[i];
  T4 e = oracle::conv(oracle::batchnorm_eval(x2, p.norm2, eps), p.mlp.expand, 1, 1);
  for (auto& v : e.data()) v = oracle::gelu(v);
  const T4 proj = oracle::conv(e, p.mlp.project, 1, 1);
  T4 ref = x2;
  for (std::size_t i = 0; i < ref.numel(); ++i) ref[i] += proj[i];
  CHECK(testutil::max_diff(y, ref) < 1e-10);
}
