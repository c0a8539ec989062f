#include "casvit/mixers.hpp"

#include <cmath>

namespace casvit {

const char* mixer_name(MixerKind m) {
  switch (m) {
    case MixerKind::catm: return "catm";
    case MixerKind::pool: return "pool";
    case MixerKind::msa: return "msa";
    case MixerKind::separable: return "separable";
    case MixerKind::swift: return "swift";
  }
  return "?";
}

MixerKind parse_mixer(std::string_view s) {
  for (auto m : {MixerKind::catm, MixerKind::pool, MixerKind::msa, MixerKind::separable,
                 MixerKind::swift}) {
    if (s == mixer_name(m)) return m;
  }
  throw ConfigError("unknown mixer '" + std::string(s) + "'");
}

template <typename T>
MsaParams<T> init_msa(Rng& rng, std::size_t d) {
  return MsaParams<T>{trunc_normal_tensor<T>(rng, {d, d}), trunc_normal_tensor<T>(rng, {d, d}),
                      trunc_normal_tensor<T>(rng, {d, d})};
}

template <typename T>
SeparableParams<T> init_separable(Rng& rng, std::size_t d) {
  return SeparableParams<T>{trunc_normal_tensor<T>(rng, {d, 1}), trunc_normal_tensor<T>(rng, {d, d}),
                            trunc_normal_tensor<T>(rng, {d, d})};
}

template <typename T>
SwiftParams<T> init_swift(Rng& rng, std::size_t d) {
  return SwiftParams<T>{trunc_normal_tensor<T>(rng, {d, d}), trunc_normal_tensor<T>(rng, {d, d}),
                        trunc_normal_tensor<T>(rng, {d, 1}), trunc_normal_tensor<T>(rng, {d, d})};
}

template <typename T>
void visit(const std::string& prefix, MsaParams<T>& p, const ParamVisitor<T>& f) {
  f(prefix + ".wq", p.wq, ParamRole::parameter);
  f(prefix + ".wk", p.wk, ParamRole::parameter);
  f(prefix + ".wv", p.wv, ParamRole::parameter);
}

template <typename T>
void visit(const std::string& prefix, SeparableParams<T>& p, const ParamVisitor<T>& f) {
  f(prefix + ".wq_vec", p.wq_vec, ParamRole::parameter);
  f(prefix + ".wk", p.wk, ParamRole::parameter);
  f(prefix + ".wv", p.wv, ParamRole::parameter);
}

template <typename T>
void visit(const std::string& prefix, SwiftParams<T>& p, const ParamVisitor<T>& f) {
  f(prefix + ".wq", p.wq, ParamRole::parameter);
  f(prefix + ".wk", p.wk, ParamRole::parameter);
  f(prefix + ".w_alpha", p.w_alpha, ParamRole::parameter);
  f(prefix + ".t", p.t, ParamRole::parameter);
}

namespace {
template <typename T>
std::size_t token_dim(const Var<T>& x, const Tensor<T>& w, const char* who) {
  if (x.shape().size() != 3) {
    throw ShapeError(std::string(who) + " expects tokens [B,N,d], got " + shape_str(x.shape()));
  }
  const std::size_t d = x.shape()[2];
  if (w.rank() != 2 || w.dim(0) != d) {
    throw ShapeError(std::string(who) + " projection " + shape_str(w.shape()) +
                     " does not match token width " + std::to_string(d));
  }
  return d;
}
}  // namespace

template <typename T>
Var<T> msa_forward(Context<T>& ctx, MsaParams<T>& p, Var<T> x) {
  const std::size_t d = token_dim(x, p.wq, "msa_forward");
  auto& tape = ctx.tape();
  ScopeGuard<T> scope(tape, "msa");
  const Var<T> q = ag::matmul(tape, x, ctx.param(p.wq));
  const Var<T> k = ag::matmul(tape, x, ctx.param(p.wk));
  const Var<T> v = ag::matmul(tape, x, ctx.param(p.wv));
  Var<T> logits = ag::matmul(tape, q, ag::transpose_last2(tape, k));
  logits = ag::scale(tape, logits, static_cast<T>(1.0 / std::sqrt(static_cast<double>(d))));
  const Var<T> attn = ag::softmax(tape, logits, -1);
  return ag::matmul(tape, attn, v);
}

template <typename T>
Var<T> separable_attention(Context<T>& ctx, SeparableParams<T>& p, Var<T> x) {
  token_dim(x, p.wk, "separable_attention");
  auto& tape = ctx.tape();
  ScopeGuard<T> scope(tape, "separable");
  const Var<T> scores = ag::softmax(tape, ag::matmul(tape, x, ctx.param(p.wq_vec)), 1);  // [B,N,1]
  const Var<T> k = ag::matmul(tape, x, ctx.param(p.wk));
  const Var<T> v = ag::matmul(tape, x, ctx.param(p.wv));
  const Var<T> context = ag::sum_axis(tape, ag::mul(tape, scores, k), 1);  // [B,1,d]
  return ag::mul(tape, context, v);
}

template <typename T>
Var<T> swift_attention(Context<T>& ctx, SwiftParams<T>& p, Var<T> x) {
  const std::size_t d = token_dim(x, p.wq, "swift_attention");
  auto& tape = ctx.tape();
  ScopeGuard<T> scope(tape, "swift");
  const Var<T> q = ag::matmul(tape, x, ctx.param(p.wq));
  const Var<T> k = ag::matmul(tape, x, ctx.param(p.wk));
  Var<T> alpha = ag::matmul(tape, q, ctx.param(p.w_alpha));  // [B,N,1]
  alpha = ag::scale(tape, alpha, static_cast<T>(1.0 / std::sqrt(static_cast<double>(d))));
  const Var<T> global_query = ag::sum_axis(tape, ag::mul(tape, alpha, q), 1);  // [B,1,d]
  const Var<T> mixed = ag::matmul(tape, ag::mul(tape, global_query, k), ctx.param(p.t));
  return ag::add(tape, mixed, ag::l2_normalize(tape, q, -1));
}

template <typename T>
Var<T> pool_mixer(Context<T>& ctx, Var<T> x, std::size_t k) {
  auto& tape = ctx.tape();
  ScopeGuard<T> scope(tape, "pool");
  return ag::sub(tape, ag::avg_pool2d(tape, x, k), x);
}

template <typename T>
Var<T> map_to_tokens(Tape<T>& tape, Var<T> x) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw ShapeError("map_to_tokens expects [B,C,H,W], got " + shape_str(s));
  return ag::transpose_last2(tape, ag::reshape(tape, x, Shape{s[0], s[1], s[2] * s[3]}));
}

template <typename T>
Var<T> tokens_to_map(Tape<T>& tape, Var<T> tokens, std::size_t h, std::size_t w) {
  const Shape& s = tokens.shape();
  if (s.size() != 3 || s[1] != h * w) {
    throw ShapeError("tokens_to_map cannot fold " + shape_str(s) + " into " + std::to_string(h) +
                     "x" + std::to_string(w));
  }
  return ag::reshape(tape, ag::transpose_last2(tape, tokens), Shape{s[0], s[2], h, w});
}

#define CASVIT_INSTANTIATE_MIXERS(T)                                                             \
  template MsaParams<T> init_msa(Rng&, std::size_t);                                             \
  template SeparableParams<T> init_separable(Rng&, std::size_t);                                 \
  template SwiftParams<T> init_swift(Rng&, std::size_t);                                         \
  template void visit(const std::string&, MsaParams<T>&, const ParamVisitor<T>&);                \
  template void visit(const std::string&, SeparableParams<T>&, const ParamVisitor<T>&);          \
  template void visit(const std::string&, SwiftParams<T>&, const ParamVisitor<T>&);              \
  template Var<T> msa_forward(Context<T>&, MsaParams<T>&, Var<T>);                               \
  template Var<T> separable_attention(Context<T>&, SeparableParams<T>&, Var<T>);                 \
  template Var<T> swift_attention(Context<T>&, SwiftParams<T>&, Var<T>);                         \
  template Var<T> pool_mixer(Context<T>&, Var<T>, std::size_t);                                  \
  template Var<T> map_to_tokens(Tape<T>&, Var<T>);                                               \
  template Var<T> tokens_to_map(Tape<T>&, Var<T>, std::size_t, std::size_t);

CASVIT_INSTANTIATE_MIXERS(float)
CASVIT_INSTANTIATE_MIXERS(double)
#undef CASVIT_INSTANTIATE_MIXERS

}  // namespace casvit
