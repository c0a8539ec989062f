#include "casvit/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>

namespace casvit {

template <typename T>
double relu_margin(const Tape<T>& tape) {
  double margin = std::numeric_limits<double>::infinity();
  for (const auto& n : tape.nodes()) {
    if (n.kind != OpKind::activation || n.detail != "relu") continue;
    for (T v : tape.node(n.inputs[0]).value.data()) margin = std::min(margin, std::abs(static_cast<double>(v)));
  }
  return margin;
}
template double relu_margin(const Tape<float>&);
template double relu_margin(const Tape<double>&);

namespace {

using D = double;
using Forward = std::function<Var<D>(Context<D>&, Var<D>)>;

struct Instance {
  std::shared_ptr<void> storage;
  std::vector<std::pair<std::string, Tensor<D>*>> params;
  Tensor<D> input;
  Forward forward;
};

// Weights ~ N(0, 1/fan_in), biases and shifts small, norm scales and variances near 1, so
// activations stay O(1) through several layers.
void randomize(const std::string& name, Tensor<D>& t, Rng& rng) {
  auto ends_with = [&](const char* s) {
    const std::string suf(s);
    return name.size() >= suf.size() && name.compare(name.size() - suf.size(), suf.size(), suf) == 0;
  };
  for (auto& v : t.data()) {
    if (ends_with(".gamma")) v = rng.uniform(0.5, 1.5);
    else if (ends_with(".running_var")) v = rng.uniform(0.5, 1.5);
    else if (ends_with(".beta") || ends_with(".running_mean") || ends_with(".bias")) v = 0.1 * rng.normal();
    else if (t.rank() == 4) v = rng.normal() / std::sqrt(static_cast<double>(t.dim(1) * t.dim(2) * t.dim(3)));
    else if (t.rank() == 2) v = rng.normal() / std::sqrt(static_cast<double>(t.dim(0)));
    else v = rng.normal();
  }
}

Tensor<D> random_input(Shape shape, Rng& rng) {
  Tensor<D> t(std::move(shape));
  for (auto& v : t.data()) v = rng.normal();
  return t;
}

template <typename S>
Instance make_instance(std::shared_ptr<S> storage, Rng& rng, Shape input,
                       const std::function<void(S&, const ParamVisitor<D>&)>& visit_all, Forward fwd) {
  Instance inst;
  visit_all(*storage, [&](const std::string& name, Tensor<D>& t, ParamRole role) {
    randomize(name, t, rng);
    if (role == ParamRole::parameter) inst.params.emplace_back(name, &t);
  });
  inst.input = random_input(std::move(input), rng);
  inst.forward = std::move(fwd);
  inst.storage = std::move(storage);
  return inst;
}

struct MiniBackbone {
  StemParams<D> stem;
  BlockParams<D> block1;
  PatchEmbedParams<D> embed;
  BlockParams<D> block2;
  HeadParams<D> head;
  VariantConfig cfg;
};

Instance build_instance(const std::string& module, std::uint64_t seed) {
  Rng rng(seed);
  if (module == "conv2d") {
    auto p = std::make_shared<ConvParams<D>>(make_conv<D>(rng, 6, 2, 3, true));
    return make_instance<ConvParams<D>>(
        p, rng, {2, 4, 5, 6}, [](ConvParams<D>& s, const ParamVisitor<D>& f) { visit("conv", s, f); },
        [p](Context<D>& ctx, Var<D> x) { return conv(ctx, *p, x, ConvSpec::strided(3, 2, 2)); });
  }
  if (module == "batchnorm") {
    auto p = std::make_shared<BatchNormParams<D>>(make_batchnorm<D>(4));
    return make_instance<BatchNormParams<D>>(
        p, rng, {3, 4, 5, 5}, [](BatchNormParams<D>& s, const ParamVisitor<D>& f) { visit("bn", s, f); },
        [p](Context<D>& ctx, Var<D> x) { return batchnorm(ctx, *p, x, 1e-5); });
  }
  if (module == "spatial" || module == "channel" || module == "catm" || module == "catm_dense") {
    InteractionConfig cfg;
    if (module == "catm_dense") cfg.projection = ProjectionKind::dense_1x1;
    auto p = std::make_shared<CatmParams<D>>(init_catm<D>(rng, 8, cfg));
    Forward fwd;
    if (module == "spatial") fwd = [p](Context<D>& ctx, Var<D> x) { return spatial_interaction(ctx, *p->q_context.spatial, x); };
    else if (module == "channel") fwd = [p](Context<D>& ctx, Var<D> x) { return channel_interaction(ctx, *p->q_context.channel, x); };
    else fwd = [p, cfg](Context<D>& ctx, Var<D> x) { return catm_forward(ctx, *p, x, cfg); };
    Instance inst = make_instance<CatmParams<D>>(
        p, rng, {1, 8, 6, 6}, [](CatmParams<D>& s, const ParamVisitor<D>& f) { visit("catm", s, f); }, fwd);
    if (module == "spatial" || module == "channel") {
      const std::string keep = "catm.q." + module + ".";
      std::erase_if(inst.params, [&](const auto& e) { return e.first.rfind(keep, 0) != 0; });
    }
    return inst;
  }
  if (module == "msa") {
    auto p = std::make_shared<MsaParams<D>>(init_msa<D>(rng, 8));
    return make_instance<MsaParams<D>>(
        p, rng, {2, 10, 8}, [](MsaParams<D>& s, const ParamVisitor<D>& f) { visit("msa", s, f); },
        [p](Context<D>& ctx, Var<D> x) { return msa_forward(ctx, *p, x); });
  }
  if (module == "separable") {
    auto p = std::make_shared<SeparableParams<D>>(init_separable<D>(rng, 8));
    return make_instance<SeparableParams<D>>(
        p, rng, {2, 10, 8}, [](SeparableParams<D>& s, const ParamVisitor<D>& f) { visit("separable", s, f); },
        [p](Context<D>& ctx, Var<D> x) { return separable_attention(ctx, *p, x); });
  }
  if (module == "swift") {
    auto p = std::make_shared<SwiftParams<D>>(init_swift<D>(rng, 8));
    return make_instance<SwiftParams<D>>(
        p, rng, {2, 10, 8}, [](SwiftParams<D>& s, const ParamVisitor<D>& f) { visit("swift", s, f); },
        [p](Context<D>& ctx, Var<D> x) { return swift_attention(ctx, *p, x); });
  }
  if (module == "pool") {
    auto p = std::make_shared<int>(0);
    return make_instance<int>(
        p, rng, {2, 4, 6, 6}, [](int&, const ParamVisitor<D>&) {},
        [](Context<D>& ctx, Var<D> x) { return pool_mixer(ctx, x, 3); });
  }
  if (module == "block") {
    VariantConfig cfg = variant_config("tiny");
    auto p = std::make_shared<BlockParams<D>>(init_block<D>(rng, 8, cfg));
    return make_instance<BlockParams<D>>(
        p, rng, {1, 8, 6, 6}, [](BlockParams<D>& s, const ParamVisitor<D>& f) { visit("block", s, f); },
        [p, cfg](Context<D>& ctx, Var<D> x) { return cas_block(ctx, *p, x, cfg); });
  }
  if (module == "mini_backbone") {
    auto m = std::make_shared<MiniBackbone>();
    m->cfg = variant_config("tiny");
    m->stem = StemParams<D>{make_conv<D>(rng, 4, 3, 3, false), make_batchnorm<D>(4),
                            make_conv<D>(rng, 8, 4, 3, false), make_batchnorm<D>(8)};
    m->block1 = init_block<D>(rng, 8, m->cfg);
    m->embed = PatchEmbedParams<D>{make_conv<D>(rng, 16, 8, 3, false), make_batchnorm<D>(16)};
    m->block2 = init_block<D>(rng, 16, m->cfg);
    m->head = HeadParams<D>{make_batchnorm<D>(16), trunc_normal_tensor<D>(rng, {16, 4}), Tensor<D>(Shape{4})};
    auto visit_all = [](MiniBackbone& s, const ParamVisitor<D>& f) {
      visit("stem.conv1", s.stem.conv1, f);
      visit("stem.bn1", s.stem.bn1, f);
      visit("stem.conv2", s.stem.conv2, f);
      visit("stem.bn2", s.stem.bn2, f);
      visit("block1", s.block1, f);
      visit("embed.conv", s.embed.conv, f);
      visit("embed.bn", s.embed.bn, f);
      visit("block2", s.block2, f);
      visit("head.norm", s.head.norm, f);
      f("head.weight", s.head.weight, ParamRole::parameter);
      f("head.bias", s.head.bias, ParamRole::parameter);
    };
    return make_instance<MiniBackbone>(m, rng, {2, 3, 16, 16}, visit_all, [m](Context<D>& ctx, Var<D> x) {
      const double eps = m->cfg.norm_eps;
      Var<D> h = stem(ctx, m->stem, x, eps);
      h = cas_block(ctx, m->block1, h, m->cfg);
      h = patch_embed(ctx, m->embed, h, eps);
      h = cas_block(ctx, m->block2, h, m->cfg);
      return classifier_head(ctx, m->head, h, eps);
    });
  }
  if (module == "backbone") {
    auto m = std::make_shared<Model<D>>(build_variant<D>(variant_config("tiny"), seed));
    return make_instance<Model<D>>(
        m, rng, {1, 3, 32, 32}, [](Model<D>& s, const ParamVisitor<D>& f) { visit<D>(s, f); },
        [m](Context<D>& ctx, Var<D> x) { return backbone_forward(ctx, *m, x); });
  }
  throw ConfigError("unknown gradcheck module '" + module + "'");
}

}  // namespace

const std::vector<std::string>& gradcheck_modules() {
  static const std::vector<std::string> names{"conv2d", "batchnorm", "spatial", "channel", "catm",
                                              "catm_dense", "msa", "separable", "swift", "pool",
                                              "block", "mini_backbone", "backbone"};
  return names;
}

GradCheckReport gradcheck_module(const std::string& module, const ModuleCheckOptions& opts) {
  // Resample the instance until no relu input sits near the kink, where central
  // differences are meaningless; keep the best candidate if none is fully clear.
  constexpr double kWanted = 1e-3;
  Instance best;
  double best_margin = -1.0;
  for (std::uint64_t attempt = 0; attempt < 200 && best_margin < kWanted; ++attempt) {
    Instance inst = build_instance(module, opts.seed * 1000003ULL + attempt);
    Tape<D> tape;
    Context<D> ctx(tape, Mode::eval, opts.padding, false);
    inst.forward(ctx, tape.constant(inst.input));
    const double margin = relu_margin(tape);
    if (margin > best_margin) {
      best_margin = margin;
      best = std::move(inst);
    }
  }

  Tensor<D> weights;
  {
    Tape<D> tape;
    Context<D> ctx(tape, Mode::eval, opts.padding, false);
    Rng rng(opts.seed + 17);
    weights = random_input(best.forward(ctx, tape.constant(best.input)).shape(), rng);
  }
  std::vector<NamedTensor<D>> named{{"input", best.input}};
  for (const auto& [name, t] : best.params) named.push_back({name, *t});
  const auto& params = best.params;
  const Forward& fwd = best.forward;
  const PaddingMode padding = opts.padding;
  ScalarForward<D> scalar = [&](Tape<D>& tape, std::span<const Var<D>> leaves) {
    Context<D> ctx(tape, Mode::eval, padding);
    for (std::size_t i = 0; i < params.size(); ++i) ctx.bind(*params[i].second, leaves[i + 1]);
    const Var<D> out = fwd(ctx, leaves[0]);
    return ag::sum(tape, ag::mul(tape, out, tape.constant(weights)));
  };
  GradCheckOptions gopts;
  // Deep compositions have gradients near 1e-7 whose central differences are swamped by
  // roundoff at a 1e-5 step; a 1e-4 step stays well inside the relu margin.
  const bool deep = module == "block" || module == "mini_backbone" || module == "backbone";
  gopts.eps = opts.eps != 0.0 ? opts.eps : (deep ? 1e-4 : 1e-5);
  gopts.max_elements = opts.max_elements != 0 ? opts.max_elements : (module == "backbone" ? 4 : 0);
  return grad_check<D>(scalar, named, opts.tol, gopts);
}

}  // namespace casvit
