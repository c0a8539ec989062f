#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sstream>

#include "casvit/accounting.hpp"
#include "test_util.hpp"

using namespace casvit;

TEST_CASE("context mapping and CATM costs are 13HWC and 38HWC exactly") {
  Rng rng(51);
  for (int i = 0; i < 50; ++i) {
    const std::uint64_t h = 1 + rng.below(256), w = 1 + rng.below(256), c = 1 + rng.below(1024);
    CHECK(phi_cost(h, w, c) == 13 * h * w * c);
    CHECK(catm_cost(h, w, c) == 38 * h * w * c);
    CHECK(phi_cost(h, w, c) == spatial_cost(h, w, c) + channel_cost(h, w, c));
  }
}

TEST_CASE("dense projections replace 3HWC by 3HWC²") {
  InteractionConfig dense;
  dense.projection = ProjectionKind::dense_1x1;
  for (auto [h, w, c] : {std::tuple<std::uint64_t, std::uint64_t, std::uint64_t>{7, 7, 220}, {56, 56, 48}, {3, 5, 1}}) {
    CHECK(catm_cost(h, w, c, dense) == 3 * h * w * c * c + 35 * h * w * c);
  }
}

TEST_CASE("CATM is linear in tokens while MSA is quadratic") {
  for (std::uint64_t c : {32, 64}) {
    CHECK(catm_cost(32, 32, c) == 4 * catm_cost(16, 16, c));
    const double r = static_cast<double>(msa_cost(32 * 32, c).total()) / static_cast<double>(msa_cost(16 * 16, c).total());
    CHECK(r > 12.0);
    CHECK(r < 16.0);
    CHECK(msa_cost(1024, c).attention == 16 * msa_cost(256, c).attention);
  }
}

TEST_CASE("analytic parameter totals equal the instantiated element counts") {
  for (const char* v : {"xs", "s", "m", "t", "tiny"}) {
    for (auto proj : {ProjectionKind::depthwise_1x1, ProjectionKind::dense_1x1}) {
      VariantConfig cfg = variant_config(v);
      cfg.projection = proj;
      Model<float> model = build_variant<float>(cfg, 0);
      const CostReport r = model_cost(model, 224, 224);
      CHECK_MESSAGE(r.params_verified(), v);
      CHECK(r.params_total == count_parameters(model));
      for (const auto& l : r.per_layer) CHECK_MESSAGE(l.params == l.instantiated_params, l.layer);
    }
  }
  for (auto m : {MixerKind::pool, MixerKind::msa, MixerKind::separable, MixerKind::swift}) {
    for (auto ab : {AblationVariant::no_spatial, AblationVariant::split_sc}) {
      VariantConfig cfg = variant_config("tiny");
      cfg.mixer = m;
      cfg.ablation = ab;
      Model<float> model = build_variant<float>(cfg, 0);
      CHECK(model_cost(model, 32, 32).params_verified());
    }
  }
}

TEST_CASE("traced MACs equal the analytic per-layer counts") {
  for (auto m : {MixerKind::catm, MixerKind::pool, MixerKind::msa, MixerKind::separable, MixerKind::swift}) {
    for (auto proj : {ProjectionKind::depthwise_1x1, ProjectionKind::dense_1x1}) {
      VariantConfig cfg = variant_config("tiny");
      cfg.mixer = m;
      cfg.projection = proj;
      Model<double> model = build_variant<double>(cfg, 0);
      const CostReport r = model_cost(model, 64, 64);
      Tape<double> tape;
      Context<double> ctx(tape, Mode::eval, PaddingMode::zeros, false);
      Rng rng(1);
      backbone_forward(ctx, model, tape.constant(testutil::randn({1, 3, 64, 64}, rng)));
      for (const auto& l : r.per_layer) CHECK_MESSAGE(traced_macs(tape, l.layer) == l.macs, l.layer);
      CHECK(traced_macs(tape) == r.macs_total);
    }
  }
}

TEST_CASE("table references and signed deviations") {
  CHECK(table_reference("XS")->params == 3'200'000);
  CHECK(table_reference("T")->macs == 3'597'000'000);
  CHECK_FALSE(table_reference("tiny").has_value());
  VariantConfig cfg = variant_config("xs");
  cfg.projection = ProjectionKind::dense_1x1;
  Model<float> model = build_variant<float>(cfg, 0);
  const CostReport r = model_cost(model, 224, 224);
  REQUIRE(r.params_deviation().has_value());
  CHECK(*r.params_deviation() == doctest::Approx(static_cast<double>(r.params_total) / 3.2e6 - 1.0));
  Model<float> tiny = build_variant<float>(variant_config("tiny"), 0);
  CHECK_FALSE(model_cost(tiny, 32, 32).macs_deviation().has_value());
}

TEST_CASE("cost reports render as text and CSV") {
  Model<float> model = build_variant<float>(variant_config("xs"), 0);
  const CostReport r = model_cost(model, 224, 224);
  const std::string csv = r.to_csv();
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  CHECK(line == "layer,params,macs");
  std::size_t rows = 0;
  std::uint64_t macs = 0;
  std::string last;
  while (std::getline(in, line)) {
    ++rows;
    last = line;
    if (line.rfind("total,", 0) == 0) continue;
    macs += std::stoull(line.substr(line.rfind(',') + 1));
  }
  CHECK(rows == r.per_layer.size() + 1);
  CHECK(last == "total," + std::to_string(r.params_total) + "," + std::to_string(r.macs_total));
  CHECK(macs == r.macs_total);
  const std::string text = r.to_text();
  CHECK(text.find("macs-v1") != std::string::npos);
  CHECK(text.find("reference XS") != std::string::npos);
  CHECK_THROWS(model_cost(model, 100, 100));
}

TEST_CASE("mixer parameter formulas match instantiated mixers") {
  Rng rng(2);
  for (std::size_t c : {8, 24}) {
    for (auto ab : {AblationVariant::base, AblationVariant::no_spatial, AblationVariant::no_channel,
                    AblationVariant::split_sc, AblationVariant::swapped_full}) {
      for (auto proj : {ProjectionKind::depthwise_1x1, ProjectionKind::dense_1x1}) {
        const InteractionConfig cfg = make_ablation(ab, proj);
        CatmParams<float> p = init_catm<float>(rng, c, cfg);
        std::uint64_t n = 0;
        visit<float>("m", p, [&](const std::string&, Tensor<float>& t, ParamRole role) {
          if (role == ParamRole::parameter) n += t.numel();
        });
        CHECK(mixer_params(MixerKind::catm, c, cfg) == n);
      }
    }
  }
}

TEST_CASE("tape audit finds no matmul or softmax in any CATM of any variant") {
  for (const char* v : {"xs", "s", "m", "t"}) {
    for (auto proj : {ProjectionKind::depthwise_1x1, ProjectionKind::dense_1x1}) {
      VariantConfig cfg = variant_config(v);
      cfg.projection = proj;
      Model<float> model = build_variant<float>(cfg, 0);
      Tape<float> tape;
      Context<float> ctx(tape, Mode::eval, PaddingMode::zeros, false);
      backbone_forward(ctx, model, tape.constant(Tensor<float>(Shape{1, 3, 32, 32})));
      const TapeAudit a = audit_tape(tape);
      const std::size_t blocks = cfg.blocks[0] + cfg.blocks[1] + cfg.blocks[2] + cfg.blocks[3];
      CHECK(a.catm_nodes > blocks);
      CHECK_MESSAGE(a.catm_clean(), a.to_text());
      // The classifier head is the only matmul outside the mixers.
      CHECK(a.count(OpKind::matmul) == 1);
    }
  }
  VariantConfig cfg = variant_config("tiny");
  cfg.mixer = MixerKind::msa;
  Model<float> model = build_variant<float>(cfg, 0);
  Tape<float> tape;
  Context<float> ctx(tape, Mode::eval, PaddingMode::zeros, false);
  backbone_forward(ctx, model, tape.constant(Tensor<float>(Shape{1, 3, 32, 32})));
  const TapeAudit a = audit_tape(tape);
  CHECK(a.catm_nodes == 0);
  CHECK(a.count(OpKind::softmax) == 5);
  CHECK(a.count(OpKind::matmul) > 5);
}
