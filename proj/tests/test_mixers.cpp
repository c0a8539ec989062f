#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <numeric>

#include "casvit/accounting.hpp"
#include "casvit/gradcheck.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace casvit;
using testutil::randn;
using T4 = Tensor<double>;

namespace {

template <typename P>
void randomize_mixer(Rng& rng, P& p, const char* prefix) {
  testutil::randomize(rng, [&](const ParamVisitor<double>& f) { visit(prefix, p, f); });
}

// Reorders tokens of [B, N, d] by perm.
T4 permute_tokens(const T4& x, const std::vector<std::size_t>& perm) {
  T4 y(x.shape());
  const std::size_t n = x.dim(1), d = x.dim(2);
  for (std::size_t b = 0; b < x.dim(0); ++b)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) y.at({b, i, c}) = x.at({b, perm[i], c});
  return y;
}

}  // namespace

TEST_CASE("baseline mixers match their oracles") {
  Rng rng(41);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t d = 2 + rng.below(9), n = 1 + rng.below(12), b = 1 + rng.below(2);
    const T4 x = randn({b, n, d}, rng);
    MsaParams<double> msa = init_msa<double>(rng, d);
    SeparableParams<double> sep = init_separable<double>(rng, d);
    SwiftParams<double> sw = init_swift<double>(rng, d);
    randomize_mixer(rng, msa, "msa");
    randomize_mixer(rng, sep, "sep");
    randomize_mixer(rng, sw, "swift");
    CHECK(testutil::max_diff(testutil::run_eval([&](Context<double>& c, Var<double> v) { return msa_forward(c, msa, v); }, x),
                             oracle::msa(x, msa)) < 1e-10);
    CHECK(testutil::max_diff(
              testutil::run_eval([&](Context<double>& c, Var<double> v) { return separable_attention(c, sep, v); }, x),
              oracle::separable(x, sep)) < 1e-10);
    CHECK(testutil::max_diff(testutil::run_eval([&](Context<double>& c, Var<double> v) { return swift_attention(c, sw, v); }, x),
                             oracle::swift(x, sw)) < 1e-10);
    const T4 img = randn({b, d, 2 + rng.below(5), 2 + rng.below(5)}, rng);
    CHECK(testutil::max_diff(testutil::run_eval([](Context<double>& c, Var<double> v) { return pool_mixer(c, v, 3); }, img),
                             oracle::pool_mixer(img)) < 1e-12);
  }
}

TEST_CASE("sequence mixers are equivariant to token permutations") {
  Rng rng(42);
  const std::size_t n = 9, d = 6;
  MsaParams<double> msa = init_msa<double>(rng, d);
  SeparableParams<double> sep = init_separable<double>(rng, d);
  SwiftParams<double> sw = init_swift<double>(rng, d);
  randomize_mixer(rng, msa, "msa");
  randomize_mixer(rng, sep, "sep");
  randomize_mixer(rng, sw, "swift");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  const T4 x = randn({2, n, d}, rng);
  const std::function<Var<double>(Context<double>&, Var<double>)> fs[] = {
      [&](Context<double>& c, Var<double> v) { return msa_forward(c, msa, v); },
      [&](Context<double>& c, Var<double> v) { return separable_attention(c, sep, v); },
      [&](Context<double>& c, Var<double> v) { return swift_attention(c, sw, v); }};
  for (const auto& f : fs) {
    CHECK(testutil::max_diff(permute_tokens(testutil::run_eval(f, x), perm), testutil::run_eval(f, permute_tokens(x, perm))) <
          1e-12);
  }
}

TEST_CASE("msa has matmul and softmax on its tape and costs 3Nd² + 2N²d") {
  Rng rng(43);
  for (auto [n, d] : {std::pair<std::size_t, std::size_t>{16, 8}, {49, 12}, {5, 3}}) {
    MsaParams<double> p = init_msa<double>(rng, d);
    Tape<double> tape;
    Context<double> ctx(tape, Mode::eval);
    msa_forward(ctx, p, tape.constant(randn({1, n, d}, rng)));
    const TapeAudit audit = audit_tape(tape);
    CHECK(audit.count(OpKind::matmul) >= 1);
    CHECK(audit.count(OpKind::softmax) >= 1);
    CHECK(traced_macs(tape) == msa_cost(n, d).total());
    CHECK(msa_cost(n, d).projection == 3 * n * d * d);
    CHECK(msa_cost(n, d).attention == 2 * n * n * d);
  }
}

TEST_CASE("linear baselines trace their analytic costs") {
  Rng rng(44);
  const std::size_t n = 20, d = 6;
  SeparableParams<double> sep = init_separable<double>(rng, d);
  SwiftParams<double> sw = init_swift<double>(rng, d);
  {
    Tape<double> tape;
    Context<double> ctx(tape, Mode::eval);
    separable_attention(ctx, sep, tape.constant(randn({1, n, d}, rng)));
    CHECK(traced_macs(tape) == separable_cost(n, d));
  }
  {
    Tape<double> tape;
    Context<double> ctx(tape, Mode::eval);
    swift_attention(ctx, sw, tape.constant(randn({1, n, d}, rng)));
    CHECK(traced_macs(tape) == swift_cost(n, d));
  }
  {
    Tape<double> tape;
    Context<double> ctx(tape, Mode::eval);
    pool_mixer(ctx, tape.constant(randn({1, d, 4, 5}, rng)), 3);
    CHECK(traced_macs(tape) == pool_cost(4, 5, d));
  }
  CHECK(separable_cost(n, d) == 2 * n * d * d + 3 * n * d);
  CHECK(swift_cost(n, d) == 3 * n * d * d + 3 * n * d);
  CHECK(pool_cost(4, 5, d) == 9 * 4 * 5 * d);
}

TEST_CASE("token maps fold back to feature maps") {
  Rng rng(45);
  const T4 x = randn({2, 3, 4, 5}, rng);
  Tape<double> tape;
  const Var<double> tokens = map_to_tokens(tape, tape.constant(x));
  CHECK(tokens.shape() == Shape{2, 20, 3});
  CHECK(tokens.value().at({1, 7, 2}) == x.at({1, 2, 1, 2}));
  CHECK(testutil::max_diff(tokens_to_map(tape, tokens, 4, 5).value(), x) == 0.0);
  CHECK_THROWS_AS(tokens_to_map(tape, tokens, 5, 5), ShapeError);
}

TEST_CASE("swift attention stays finite on all-zero queries") {
  Rng rng(46);
  SwiftParams<double> p = init_swift<double>(rng, 4);
  const T4 y = testutil::run_eval([&](Context<double>& c, Var<double> v) { return swift_attention(c, p, v); }, T4(Shape{1, 3, 4}));
  CHECK(all_finite(y));
}

TEST_CASE("mixer names parse and mixers reject wrong widths") {
  CHECK(parse_mixer("msa") == MixerKind::msa);
  CHECK(std::string(mixer_name(MixerKind::separable)) == "separable");
  CHECK_THROWS_AS(parse_mixer("conv"), ConfigError);
  Rng rng(1);
  MsaParams<double> p = init_msa<double>(rng, 4);
  Tape<double> tape;
  Context<double> ctx(tape, Mode::eval);
  CHECK_THROWS_AS(msa_forward(ctx, p, tape.constant(T4(Shape{1, 3, 5}))), ShapeError);
}

TEST_CASE("baseline mixer gradients pass the finite-difference check") {
  for (const char* m : {"msa", "separable", "swift", "pool"}) {
    const auto r = gradcheck_module(m, {});
    CHECK_MESSAGE(r.passed, m << ": " << r.summary());
  }
}
