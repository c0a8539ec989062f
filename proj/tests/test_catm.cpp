#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "casvit/accounting.hpp"
#include "casvit/gradcheck.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace casvit;
using testutil::randn;
using T4 = Tensor<double>;

namespace {

CatmParams<double> random_catm(Rng& rng, std::size_t c, const InteractionConfig& cfg) {
  CatmParams<double> p = init_catm<double>(rng, c, cfg);
  testutil::randomize(rng, [&](const ParamVisitor<double>& f) { visit("catm", p, f); });
  return p;
}

const AblationVariant kAblations[] = {AblationVariant::base, AblationVariant::no_spatial, AblationVariant::no_channel,
                                      AblationVariant::split_sc, AblationVariant::swapped_full};

}  // namespace

TEST_CASE("spatial and channel interactions match their oracles") {
  Rng rng(31);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t c = 2 + rng.below(7), h = 3 + rng.below(6), w = 3 + rng.below(6);
    const CatmParams<double> p = random_catm(rng, c, {});
    const T4 x = randn({1 + rng.below(2), c, h, w}, rng);
    auto sp = *p.q_context.spatial;
    auto ch = *p.q_context.channel;
    const T4 ys = testutil::run_eval([&](Context<double>& ctx, Var<double> v) { return spatial_interaction(ctx, sp, v); }, x);
    const T4 yc = testutil::run_eval([&](Context<double>& ctx, Var<double> v) { return channel_interaction(ctx, ch, v); }, x);
    CHECK(testutil::max_diff(ys, oracle::spatial(x, sp)) < 1e-10);
    CHECK(testutil::max_diff(yc, oracle::channel(x, ch)) < 1e-10);
  }
}

TEST_CASE("catm_forward matches the oracle for every arrangement and projection") {
  Rng rng(32);
  for (auto proj : {ProjectionKind::depthwise_1x1, ProjectionKind::dense_1x1}) {
    for (auto ab : kAblations) {
      const InteractionConfig cfg = make_ablation(ab, proj);
      for (int rep = 0; rep < 4; ++rep) {
        const std::size_t c = 2 + rng.below(7), h = 3 + rng.below(6), w = 3 + rng.below(6);
        CatmParams<double> p = random_catm(rng, c, cfg);
        const T4 x = randn({2, c, h, w}, rng);
        const T4 y = testutil::run_eval([&](Context<double>& ctx, Var<double> v) { return catm_forward(ctx, p, v, cfg); }, x);
        CHECK(y.shape() == x.shape());
        CHECK(testutil::max_diff(y, oracle::catm(x, p, cfg)) < 1e-10);
      }
    }
  }
}

TEST_CASE("ablation arrangements allocate only the interactions they use") {
  Rng rng(1);
  const InteractionConfig ns = make_ablation(AblationVariant::no_spatial);
  CHECK(ns.q_branch == std::vector<Interaction>{Interaction::channel});
  const CatmParams<double> p = init_catm<double>(rng, 8, ns);
  CHECK_FALSE(p.q_context.spatial.has_value());
  CHECK(p.q_context.channel.has_value());
  const InteractionConfig sw = make_ablation(AblationVariant::swapped_full);
  CHECK(sw.k_branch == std::vector<Interaction>{Interaction::channel, Interaction::spatial});
  const InteractionConfig split = make_ablation(AblationVariant::split_sc);
  const CatmParams<double> ps = init_catm<double>(rng, 8, split);
  CHECK_FALSE(ps.q_context.channel.has_value());
  CHECK_FALSE(ps.k_context.spatial.has_value());
  CHECK(parse_ablation("no_channel") == AblationVariant::no_channel);
  CHECK_THROWS(parse_ablation("bogus"));
  InteractionConfig dup;
  dup.q_branch = {Interaction::spatial, Interaction::spatial};
  CHECK_THROWS_AS(dup.validate(), ConfigError);
}

TEST_CASE("catm_forward rejects mismatched inputs") {
  Rng rng(2);
  CatmParams<double> p = init_catm<double>(rng, 4, {});
  Tape<double> tape;
  Context<double> ctx(tape, Mode::eval);
  CHECK_THROWS_AS(catm_forward(ctx, p, tape.constant(T4(Shape{1, 5, 4, 4})), {}), ShapeError);
  CHECK_THROWS_AS(catm_forward(ctx, p, tape.constant(T4(Shape{4, 4, 4})), {}), ShapeError);
  InteractionConfig dense;
  dense.projection = ProjectionKind::dense_1x1;
  CHECK_THROWS_AS(catm_forward(ctx, p, tape.constant(T4(Shape{1, 4, 4, 4})), dense), ConfigError);
}

TEST_CASE("catm graph holds no matmul or softmax and its MACs equal 38HWC") {
  Rng rng(3);
  for (auto [h, w, c] : {std::tuple{4, 6, 8}, {7, 5, 3}, {8, 8, 16}}) {
    CatmParams<double> p = init_catm<double>(rng, c, {});
    Tape<double> tape;
    Context<double> ctx(tape, Mode::eval);
    catm_forward(ctx, p, tape.constant(randn({1, std::size_t(c), std::size_t(h), std::size_t(w)}, rng)), {});
    const TapeAudit audit = audit_tape(tape);
    CHECK(audit.catm_nodes > 0);
    CHECK(audit.catm_clean());
    CHECK(traced_macs(tape, "catm") == 38ull * h * w * c);
    CHECK(traced_macs(tape, "catm") == catm_cost(h, w, c));
  }
}

TEST_CASE("catm and a CAS block commute with cyclic shifts under circular padding") {
  Rng rng(4);
  const VariantConfig cfg = variant_config("tiny");
  for (int rep = 0; rep < 5; ++rep) {
    CatmParams<double> p = random_catm(rng, 6, {});
    BlockParams<double> block = init_block<double>(rng, 6, cfg);
    testutil::randomize(rng, [&](const ParamVisitor<double>& f) { visit("block", block, f); });
    const T4 x = randn({2, 6, 7, 5}, rng);
    const long dh = 1 + static_cast<long>(rng.below(6)), dw = 1 + static_cast<long>(rng.below(4));
    auto f_catm = [&](Context<double>& ctx, Var<double> v) { return catm_forward(ctx, p, v, {}); };
    auto f_block = [&](Context<double>& ctx, Var<double> v) { return cas_block(ctx, block, v, cfg); };
    for (const auto& f : {std::function<Var<double>(Context<double>&, Var<double>)>(f_catm), std::function<Var<double>(Context<double>&, Var<double>)>(f_block)}) {
      const T4 shifted_out = kernels::roll2d(testutil::run_eval(f, x, PaddingMode::circular), dh, dw);
      const T4 out_of_shifted = testutil::run_eval(f, kernels::roll2d(x, dh, dw), PaddingMode::circular);
      CHECK(testutil::max_diff(shifted_out, out_of_shifted) < 1e-10);
    }
    // Zero padding breaks the symmetry at the borders, so the check is not vacuous.
    const T4 a = kernels::roll2d(testutil::run_eval(f_catm, x), dh, dw);
    const T4 b = testutil::run_eval(f_catm, kernels::roll2d(x, dh, dw));
    CHECK(testutil::max_diff(a, b) > 1e-6);
  }
}

TEST_CASE("circular catm matches the circular oracle") {
  Rng rng(5);
  const CatmParams<double> p0 = random_catm(rng, 5, {});
  CatmParams<double> p = p0;
  const T4 x = randn({1, 5, 6, 4}, rng);
  const T4 y = testutil::run_eval([&](Context<double>& ctx, Var<double> v) { return catm_forward(ctx, p, v, {}); }, x,
                                  PaddingMode::circular);
  CHECK(testutil::max_diff(y, oracle::catm(x, p0, {}, true)) < 1e-10);
}

TEST_CASE("catm gradients pass the finite-difference check") {
  for (const char* m : {"spatial", "channel", "catm", "catm_dense"}) {
    for (std::uint64_t seed : {0, 1}) {
      ModuleCheckOptions o;
      o.seed = seed;
      const auto r = gradcheck_module(m, o);
      CHECK_MESSAGE(r.passed, m << " seed " << seed << ": " << r.summary());
    }
  }
}

TEST_CASE("train mode updates spatial BN statistics; eval mode never does") {
  Rng rng(6);
  CatmParams<double> p = init_catm<double>(rng, 4, {});
  const T4 x = randn({2, 4, 5, 5}, rng, 3.0);
  const T4 before = p.q_context.spatial->bn.running_var;
  testutil::run_eval([&](Context<double>& ctx, Var<double> v) { return catm_forward(ctx, p, v, {}); }, x);
  CHECK(testutil::max_diff(before, p.q_context.spatial->bn.running_var) == 0.0);
  Tape<double> tape;
  Context<double> ctx(tape, Mode::train);
  catm_forward(ctx, p, tape.constant(x), {});
  CHECK(testutil::max_diff(before, p.q_context.spatial->bn.running_var) > 0.0);
}
