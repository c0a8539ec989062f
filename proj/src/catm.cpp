#include "casvit/catm.hpp"

#include <algorithm>

namespace casvit {

const char* interaction_name(Interaction i) {
  return i == Interaction::spatial ? "spatial" : "channel";
}

const char* projection_name(ProjectionKind p) {
  return p == ProjectionKind::depthwise_1x1 ? "dw" : "dense";
}

ProjectionKind parse_projection(std::string_view s) {
  if (s == "dw" || s == "depthwise" || s == "depthwise_1x1") return ProjectionKind::depthwise_1x1;
  if (s == "dense" || s == "dense_1x1") return ProjectionKind::dense_1x1;
  throw ConfigError("unknown projection kind '" + std::string(s) + "' (expected dw or dense)");
}

void InteractionConfig::validate() const {
  for (const auto* branch : {&q_branch, &k_branch}) {
    if (branch->size() > 2 ||
        (branch->size() == 2 && (*branch)[0] == (*branch)[1])) {
      throw ConfigError("interaction branches must be duplicate-free subsets of {spatial, channel}");
    }
  }
}

const char* ablation_name(AblationVariant v) {
  switch (v) {
    case AblationVariant::base: return "base";
    case AblationVariant::no_spatial: return "no_spatial";
    case AblationVariant::no_channel: return "no_channel";
    case AblationVariant::split_sc: return "split_sc";
    case AblationVariant::swapped_full: return "swapped_full";
  }
  return "?";
}

AblationVariant parse_ablation(std::string_view s) {
  for (auto v : {AblationVariant::base, AblationVariant::no_spatial, AblationVariant::no_channel,
                 AblationVariant::split_sc, AblationVariant::swapped_full}) {
    if (s == ablation_name(v)) return v;
  }
  throw ConfigError("unknown ablation variant '" + std::string(s) + "'");
}

InteractionConfig make_ablation(AblationVariant variant, ProjectionKind projection) {
  using I = Interaction;
  InteractionConfig cfg;
  cfg.projection = projection;
  switch (variant) {
    case AblationVariant::base:
      cfg.q_branch = {I::spatial, I::channel};
      cfg.k_branch = {I::spatial, I::channel};
      break;
    case AblationVariant::no_spatial:
      cfg.q_branch = {I::channel};
      cfg.k_branch = {I::channel};
      break;
    case AblationVariant::no_channel:
      cfg.q_branch = {I::spatial};
      cfg.k_branch = {I::spatial};
      break;
    case AblationVariant::split_sc:
      cfg.q_branch = {I::spatial};
      cfg.k_branch = {I::channel};
      break;
    case AblationVariant::swapped_full:
      cfg.q_branch = {I::spatial, I::channel};
      cfg.k_branch = {I::channel, I::spatial};
      break;
  }
  return cfg;
}

template <typename T>
SpatialParams<T> init_spatial(Rng& rng, std::size_t channels) {
  SpatialParams<T> p;
  p.dw3 = make_conv<T>(rng, channels, 1, 3, false);
  p.bn = make_batchnorm<T>(channels);
  p.pw1 = make_conv<T>(rng, 1, channels, 1, true);
  return p;
}

template <typename T>
ChannelParams<T> init_channel(Rng& rng, std::size_t channels) {
  return ChannelParams<T>{make_conv<T>(rng, channels, 1, 1, true)};
}

template <typename T>
ContextParams<T> init_context(Rng& rng, std::size_t channels, std::span<const Interaction> order) {
  ContextParams<T> p;
  for (Interaction i : order) {
    if (i == Interaction::spatial) p.spatial = init_spatial<T>(rng, channels);
    if (i == Interaction::channel) p.channel = init_channel<T>(rng, channels);
  }
  return p;
}

template <typename T>
CatmParams<T> init_catm(Rng& rng, std::size_t channels, const InteractionConfig& cfg) {
  cfg.validate();
  CatmParams<T> p;
  p.channels = channels;
  p.projection = cfg.projection;
  const std::size_t in_per_group = cfg.projection == ProjectionKind::dense_1x1 ? channels : 1;
  p.wq = make_conv<T>(rng, channels, in_per_group, 1, true);
  p.wk = make_conv<T>(rng, channels, in_per_group, 1, true);
  p.wv = make_conv<T>(rng, channels, in_per_group, 1, true);
  p.q_context = init_context<T>(rng, channels, cfg.q_branch);
  p.k_context = init_context<T>(rng, channels, cfg.k_branch);
  p.gamma_dw3 = make_conv<T>(rng, channels, 1, 3, true);
  return p;
}

namespace {
template <typename T>
void visit_context(const std::string& prefix, ContextParams<T>& p, const ParamVisitor<T>& f) {
  if (p.spatial) {
    visit(prefix + ".spatial.dw3", p.spatial->dw3, f);
    visit(prefix + ".spatial.bn", p.spatial->bn, f);
    visit(prefix + ".spatial.pw1", p.spatial->pw1, f);
  }
  if (p.channel) visit(prefix + ".channel.dw1", p.channel->dw1, f);
}
}  // namespace

template <typename T>
void visit(const std::string& prefix, CatmParams<T>& p, const ParamVisitor<T>& f) {
  visit(prefix + ".wq", p.wq, f);
  visit(prefix + ".wk", p.wk, f);
  visit(prefix + ".wv", p.wv, f);
  visit_context(prefix + ".q", p.q_context, f);
  visit_context(prefix + ".k", p.k_context, f);
  visit(prefix + ".gamma", p.gamma_dw3, f);
}

template <typename T>
Var<T> spatial_interaction(Context<T>& ctx, SpatialParams<T>& p, Var<T> x) {
  if (x.shape().size() != 4) throw ShapeError("spatial_interaction expects [B,C,H,W]");
  const std::size_t c = x.shape()[1];
  ScopeGuard<T> scope(ctx.tape(), "spatial");
  auto& tape = ctx.tape();
  Var<T> h = conv(ctx, p.dw3, x, ConvSpec::same(3, c));
  h = batchnorm(ctx, p.bn, h, kCatmNormEps);
  h = ag::relu(tape, h);
  h = conv(ctx, p.pw1, h, ConvSpec::same(1));
  const Var<T> attn = ag::sigmoid(tape, h);  // [B,1,H,W]
  return ag::mul(tape, x, attn);
}

template <typename T>
Var<T> channel_interaction(Context<T>& ctx, ChannelParams<T>& p, Var<T> x) {
  if (x.shape().size() != 4) throw ShapeError("channel_interaction expects [B,C,H,W]");
  const std::size_t c = x.shape()[1];
  ScopeGuard<T> scope(ctx.tape(), "channel");
  auto& tape = ctx.tape();
  Var<T> pooled = ag::global_avg_pool(tape, x);
  Var<T> h = conv(ctx, p.dw1, pooled, ConvSpec::same(1, c));
  const Var<T> attn = ag::sigmoid(tape, h);  // [B,C,1,1]
  return ag::mul(tape, x, attn);
}

template <typename T>
Var<T> context_map_phi(Context<T>& ctx, ContextParams<T>& p, Var<T> x,
                       std::span<const Interaction> order) {
  Var<T> h = x;
  for (Interaction i : order) {
    if (i == Interaction::spatial) {
      if (!p.spatial) throw ConfigError("context mapping has no spatial parameters");
      h = spatial_interaction(ctx, *p.spatial, h);
    } else {
      if (!p.channel) throw ConfigError("context mapping has no channel parameters");
      h = channel_interaction(ctx, *p.channel, h);
    }
  }
  return h;
}

template <typename T>
Var<T> catm_forward(Context<T>& ctx, CatmParams<T>& p, Var<T> x, const InteractionConfig& cfg) {
  cfg.validate();
  if (x.shape().size() != 4 || x.shape()[1] != p.channels) {
    throw ShapeError("catm_forward expects [B," + std::to_string(p.channels) + ",H,W], got " +
                     shape_str(x.shape()));
  }
  if (cfg.projection != p.projection) {
    throw ConfigError("catm parameters were built for a different projection kind");
  }
  auto& tape = ctx.tape();
  ScopeGuard<T> scope(tape, "catm");
  const std::size_t groups = cfg.projection == ProjectionKind::dense_1x1 ? 1 : p.channels;
  const ConvSpec proj = ConvSpec::same(1, groups);
  const Var<T> q = conv(ctx, p.wq, x, proj);
  const Var<T> k = conv(ctx, p.wk, x, proj);
  const Var<T> v = conv(ctx, p.wv, x, proj);
  Var<T> phi_q, phi_k;
  {
    ScopeGuard<T> s(tape, "q");
    phi_q = context_map_phi(ctx, p.q_context, q, cfg.q_branch);
  }
  {
    ScopeGuard<T> s(tape, "k");
    phi_k = context_map_phi(ctx, p.k_context, k, cfg.k_branch);
  }
  const Var<T> sim = ag::add(tape, phi_q, phi_k);
  Var<T> ctx_map;
  {
    ScopeGuard<T> s(tape, "gamma");
    ctx_map = conv(ctx, p.gamma_dw3, sim, ConvSpec::same(3, p.channels));
  }
  return ag::mul(tape, ctx_map, v);
}

#define CASVIT_INSTANTIATE_CATM(T)                                                               \
  template SpatialParams<T> init_spatial(Rng&, std::size_t);                                     \
  template ChannelParams<T> init_channel(Rng&, std::size_t);                                     \
  template ContextParams<T> init_context(Rng&, std::size_t, std::span<const Interaction>);       \
  template CatmParams<T> init_catm(Rng&, std::size_t, const InteractionConfig&);                 \
  template void visit(const std::string&, CatmParams<T>&, const ParamVisitor<T>&);               \
  template Var<T> spatial_interaction(Context<T>&, SpatialParams<T>&, Var<T>);                   \
  template Var<T> channel_interaction(Context<T>&, ChannelParams<T>&, Var<T>);                   \
  template Var<T> context_map_phi(Context<T>&, ContextParams<T>&, Var<T>,                        \
                                  std::span<const Interaction>);                                 \
  template Var<T> catm_forward(Context<T>&, CatmParams<T>&, Var<T>, const InteractionConfig&);

CASVIT_INSTANTIATE_CATM(float)
CASVIT_INSTANTIATE_CATM(double)
#undef CASVIT_INSTANTIATE_CATM

}  // namespace casvit
