#include "casvit/backbone.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include <json.hpp>

namespace casvit {

std::size_t VariantConfig::hidden(std::size_t stage) const {
  return static_cast<std::size_t>(std::lround(mlp_ratio * static_cast<double>(channels.at(stage))));
}

void VariantConfig::validate() const {
  for (std::size_t i = 0; i < 4; ++i) {
    if (blocks[i] == 0) throw ConfigError("stage " + std::to_string(i + 1) + " needs at least one block");
    if (channels[i] == 0) throw ConfigError("stage " + std::to_string(i + 1) + " needs positive channels");
  }
  if (channels[0] < 2) throw ConfigError("stage 1 needs at least 2 channels for the stem");
  if (!(mlp_ratio > 0) || hidden(0) == 0) throw ConfigError("mlp_ratio must be positive");
  if (num_classes == 0) throw ConfigError("num_classes must be positive");
  if (!(norm_eps > 0)) throw ConfigError("norm_eps must be positive");
}

std::string VariantConfig::to_json() const {
  nlohmann::ordered_json j;
  j["name"] = name;
  j["blocks"] = blocks;
  j["channels"] = channels;
  j["mlp_ratio"] = mlp_ratio;
  j["projection"] = projection_name(projection);
  j["num_classes"] = num_classes;
  j["norm_eps"] = norm_eps;
  j["mixer"] = mixer_name(mixer);
  j["ablation"] = ablation_name(ablation);
  return j.dump();
}

VariantConfig VariantConfig::from_json(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
    VariantConfig c;
    c.name = j.at("name").get<std::string>();
    c.blocks = j.at("blocks").get<std::array<std::size_t, 4>>();
    c.channels = j.at("channels").get<std::array<std::size_t, 4>>();
    c.mlp_ratio = j.at("mlp_ratio").get<double>();
    c.projection = parse_projection(j.at("projection").get<std::string>());
    c.num_classes = j.at("num_classes").get<std::size_t>();
    c.norm_eps = j.at("norm_eps").get<double>();
    c.mixer = parse_mixer(j.value("mixer", std::string("catm")));
    c.ablation = parse_ablation(j.value("ablation", std::string("base")));
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid variant config: ") + e.what());
  }
}

VariantConfig variant_config(std::string_view name) {
  std::string n(name);
  std::transform(n.begin(), n.end(), n.begin(), [](unsigned char c) { return std::tolower(c); });
  VariantConfig c;
  if (n == "xs") {
    c.blocks = {2, 2, 4, 2};
    c.channels = {48, 56, 112, 220};
  } else if (n == "s") {
    c.blocks = {3, 3, 6, 3};
    c.channels = {48, 64, 128, 256};
  } else if (n == "m") {
    c.blocks = {3, 3, 6, 3};
    c.channels = {64, 96, 192, 384};
  } else if (n == "t") {
    c.blocks = {3, 3, 6, 3};
    c.channels = {96, 128, 256, 512};
  } else if (n == "tiny") {
    c.blocks = {1, 1, 2, 1};
    c.channels = {16, 24, 48, 64};
    c.num_classes = 4;
  } else {
    throw ConfigError("unknown variant '" + std::string(name) + "' (expected xs, s, m, t or tiny)");
  }
  c.name = n == "tiny" ? "tiny" : [&] {
    std::string u = n;
    std::transform(u.begin(), u.end(), u.begin(), [](unsigned char ch) { return std::toupper(ch); });
    return u;
  }();
  return c;
}

template <typename T>
IntegrationParams<T> init_integration(Rng& rng, std::size_t channels) {
  IntegrationParams<T> p;
  for (std::size_t i = 0; i < 3; ++i) {
    p.dw[i] = make_conv<T>(rng, channels, 1, 3, false);
    p.bn[i] = make_batchnorm<T>(channels);
  }
  return p;
}

template <typename T>
BlockParams<T> init_block(Rng& rng, std::size_t channels, const VariantConfig& cfg) {
  BlockParams<T> p;
  p.integration = init_integration<T>(rng, channels);
  p.norm1 = make_batchnorm<T>(channels);
  switch (cfg.mixer) {
    case MixerKind::catm: p.mixer = init_catm<T>(rng, channels, cfg.interaction()); break;
    case MixerKind::pool: p.mixer = std::monostate{}; break;
    case MixerKind::msa: p.mixer = init_msa<T>(rng, channels); break;
    case MixerKind::separable: p.mixer = init_separable<T>(rng, channels); break;
    case MixerKind::swift: p.mixer = init_swift<T>(rng, channels); break;
  }
  p.norm2 = make_batchnorm<T>(channels);
  const std::size_t hidden = static_cast<std::size_t>(
      std::lround(cfg.mlp_ratio * static_cast<double>(channels)));
  p.mlp.expand = make_conv<T>(rng, hidden, channels, 1, true);
  p.mlp.project = make_conv<T>(rng, channels, hidden, 1, true);
  return p;
}

template <typename T>
Model<T> build_variant(const VariantConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  Model<T> m;
  m.config = cfg;
  auto& p = m.params;
  const std::size_t c1 = cfg.channels[0];
  p.stem.conv1 = make_conv<T>(rng, c1 / 2, 3, 3, false);
  p.stem.bn1 = make_batchnorm<T>(c1 / 2);
  p.stem.conv2 = make_conv<T>(rng, c1, c1 / 2, 3, false);
  p.stem.bn2 = make_batchnorm<T>(c1);
  for (std::size_t s = 0; s < 4; ++s) {
    for (std::size_t b = 0; b < cfg.blocks[s]; ++b) {
      p.stages[s].push_back(init_block<T>(rng, cfg.channels[s], cfg));
    }
    if (s < 3) {
      p.embeds[s].conv = make_conv<T>(rng, cfg.channels[s + 1], cfg.channels[s], 3, false);
      p.embeds[s].bn = make_batchnorm<T>(cfg.channels[s + 1]);
    }
  }
  p.head.norm = make_batchnorm<T>(cfg.channels[3]);
  p.head.weight = trunc_normal_tensor<T>(rng, Shape{cfg.channels[3], cfg.num_classes});
  p.head.bias = Tensor<T>(Shape{cfg.num_classes});
  return m;
}

template <typename T>
void visit(const std::string& prefix, BlockParams<T>& p, const ParamVisitor<T>& f) {
  for (std::size_t i = 0; i < 3; ++i) {
    visit(prefix + ".integration.dw" + std::to_string(i), p.integration.dw[i], f);
    visit(prefix + ".integration.bn" + std::to_string(i), p.integration.bn[i], f);
  }
  visit(prefix + ".norm1", p.norm1, f);
  std::visit(
      [&](auto& mixer) {
        using M = std::decay_t<decltype(mixer)>;
        if constexpr (!std::is_same_v<M, std::monostate>) visit(prefix + ".mixer", mixer, f);
      },
      p.mixer);
  visit(prefix + ".norm2", p.norm2, f);
  visit(prefix + ".mlp.expand", p.mlp.expand, f);
  visit(prefix + ".mlp.project", p.mlp.project, f);
}

template <typename T>
void visit(Model<T>& model, const ParamVisitor<T>& f) {
  auto& p = model.params;
  visit("stem.conv1", p.stem.conv1, f);
  visit("stem.bn1", p.stem.bn1, f);
  visit("stem.conv2", p.stem.conv2, f);
  visit("stem.bn2", p.stem.bn2, f);
  for (std::size_t s = 0; s < 4; ++s) {
    for (std::size_t b = 0; b < p.stages[s].size(); ++b) {
      visit("stages." + std::to_string(s) + "." + std::to_string(b), p.stages[s][b], f);
    }
    if (s < 3) {
      visit("embeds." + std::to_string(s) + ".conv", p.embeds[s].conv, f);
      visit("embeds." + std::to_string(s) + ".bn", p.embeds[s].bn, f);
    }
  }
  visit("head.norm", p.head.norm, f);
  f("head.weight", p.head.weight, ParamRole::parameter);
  f("head.bias", p.head.bias, ParamRole::parameter);
}

template <typename T>
std::size_t count_parameters(Model<T>& model) {
  std::size_t n = 0;
  visit<T>(model, [&](const std::string&, Tensor<T>& t, ParamRole role) {
    if (role == ParamRole::parameter) n += t.numel();
  });
  return n;
}

template <typename T>
Var<T> integration_subnet(Context<T>& ctx, IntegrationParams<T>& p, Var<T> x, double eps) {
  const std::size_t c = x.shape().at(1);
  Var<T> h = x;
  for (std::size_t i = 0; i < 3; ++i) {
    h = conv(ctx, p.dw[i], h, ConvSpec::same(3, c));
    h = batchnorm(ctx, p.bn[i], h, eps);
    h = ag::relu(ctx.tape(), h);
  }
  return h;
}

template <typename T>
Var<T> token_mixer(Context<T>& ctx, TokenMixerParams<T>& p, Var<T> x, const VariantConfig& cfg) {
  auto& tape = ctx.tape();
  const std::size_t h = x.shape().at(2), w = x.shape().at(3);
  return std::visit(
      [&](auto& mixer) -> Var<T> {
        using M = std::decay_t<decltype(mixer)>;
        if constexpr (std::is_same_v<M, CatmParams<T>>) {
          return catm_forward(ctx, mixer, x, cfg.interaction());
        } else if constexpr (std::is_same_v<M, std::monostate>) {
          return pool_mixer(ctx, x, 3);
        } else {
          const Var<T> tokens = map_to_tokens(tape, x);
          Var<T> out;
          if constexpr (std::is_same_v<M, MsaParams<T>>) out = msa_forward(ctx, mixer, tokens);
          if constexpr (std::is_same_v<M, SeparableParams<T>>) out = separable_attention(ctx, mixer, tokens);
          if constexpr (std::is_same_v<M, SwiftParams<T>>) out = swift_attention(ctx, mixer, tokens);
          return tokens_to_map(tape, out, h, w);
        }
      },
      p);
}

template <typename T>
Var<T> cas_block(Context<T>& ctx, BlockParams<T>& p, Var<T> x, const VariantConfig& cfg) {
  if (x.shape().size() != 4) throw ShapeError("cas_block expects [B,C,H,W], got " + shape_str(x.shape()));
  const std::size_t c = x.shape()[1];
  if (p.norm1.gamma.numel() != c) {
    throw ShapeError("cas_block parameters are for " + std::to_string(p.norm1.gamma.numel()) +
                     " channels, input has " + std::to_string(c));
  }
  auto& tape = ctx.tape();
  const double eps = cfg.norm_eps;
  Var<T> local;
  {
    ScopeGuard<T> s(tape, "integration");
    local = integration_subnet(ctx, p.integration, x, eps);
  }
  const Var<T> x1 = ag::add(tape, x, local);
  Var<T> mixed;
  {
    ScopeGuard<T> s(tape, "norm1");
    mixed = batchnorm(ctx, p.norm1, x1, eps);
  }
  {
    ScopeGuard<T> s(tape, "mixer");
    mixed = token_mixer(ctx, p.mixer, mixed, cfg);
  }
  const Var<T> x2 = ag::add(tape, x1, mixed);
  Var<T> h;
  {
    ScopeGuard<T> s(tape, "norm2");
    h = batchnorm(ctx, p.norm2, x2, eps);
  }
  {
    ScopeGuard<T> s(tape, "mlp");
    h = conv(ctx, p.mlp.expand, h, ConvSpec::same(1));
    h = ag::gelu(tape, h);
    h = conv(ctx, p.mlp.project, h, ConvSpec::same(1));
  }
  return ag::add(tape, x2, h);
}

template <typename T>
Var<T> stem(Context<T>& ctx, StemParams<T>& p, Var<T> img, double eps) {
  const Shape& s = img.shape();
  if (s.size() != 4 || s[1] != 3) throw ShapeError("stem expects images [B,3,H,W], got " + shape_str(s));
  if (s[2] % 4 != 0 || s[3] % 4 != 0) {
    throw ShapeError("stem needs H and W divisible by 4, got " + shape_str(s));
  }
  auto& tape = ctx.tape();
  ScopeGuard<T> scope(tape, "stem");
  Var<T> h = conv(ctx, p.conv1, img, ConvSpec::strided(3, 2));
  h = ag::relu(tape, batchnorm(ctx, p.bn1, h, eps));
  h = conv(ctx, p.conv2, h, ConvSpec::strided(3, 2));
  return ag::relu(tape, batchnorm(ctx, p.bn2, h, eps));
}

template <typename T>
Var<T> patch_embed(Context<T>& ctx, PatchEmbedParams<T>& p, Var<T> x, double eps) {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0) {
    throw ShapeError("patch_embed needs even H and W, got " + shape_str(s));
  }
  return batchnorm(ctx, p.bn, conv(ctx, p.conv, x, ConvSpec::strided(3, 2)), eps);
}

template <typename T>
Var<T> classifier_head(Context<T>& ctx, HeadParams<T>& p, Var<T> x, double eps) {
  auto& tape = ctx.tape();
  Var<T> h = ag::global_avg_pool(tape, x);
  h = batchnorm(ctx, p.norm, h, eps);
  h = ag::reshape(tape, h, Shape{x.shape()[0], x.shape()[1]});
  h = ag::matmul(tape, h, ctx.param(p.weight));
  return ag::add(tape, h, ctx.param(p.bias));
}

template <typename T>
Var<T> backbone_forward(Context<T>& ctx, Model<T>& model, Var<T> img) {
  const VariantConfig& cfg = model.config;
  auto& p = model.params;
  if (p.stem.conv1.weight.empty()) throw std::logic_error("backbone parameters are not initialized");
  const Shape& s = img.shape();
  if (s.size() != 4 || s[2] % 32 != 0 || s[3] % 32 != 0) {
    throw ShapeError("backbone input needs H and W divisible by 32, got " + shape_str(s));
  }
  auto& tape = ctx.tape();
  Var<T> h = stem(ctx, p.stem, img, cfg.norm_eps);
  for (std::size_t st = 0; st < 4; ++st) {
    for (std::size_t b = 0; b < p.stages[st].size(); ++b) {
      ScopeGuard<T> scope(tape, "stages." + std::to_string(st) + "." + std::to_string(b));
      h = cas_block(ctx, p.stages[st][b], h, cfg);
    }
    if (st < 3) {
      ScopeGuard<T> scope(tape, "embeds." + std::to_string(st));
      h = patch_embed(ctx, p.embeds[st], h, cfg.norm_eps);
    }
  }
  ScopeGuard<T> scope(tape, "head");
  return classifier_head(ctx, p.head, h, cfg.norm_eps);
}

template <typename T>
Tensor<T> predict(Model<T>& model, const Tensor<T>& images) {
  Tape<T> tape;
  Context<T> ctx(tape, Mode::eval, PaddingMode::zeros, false);
  return backbone_forward(ctx, model, tape.constant(images)).value();
}

#define CASVIT_INSTANTIATE_BACKBONE(T)                                                           \
  template IntegrationParams<T> init_integration(Rng&, std::size_t);                             \
  template BlockParams<T> init_block(Rng&, std::size_t, const VariantConfig&);                   \
  template Model<T> build_variant(const VariantConfig&, std::uint64_t);                          \
  template void visit(Model<T>&, const ParamVisitor<T>&);                                        \
  template void visit(const std::string&, BlockParams<T>&, const ParamVisitor<T>&);              \
  template std::size_t count_parameters(Model<T>&);                                              \
  template Var<T> integration_subnet(Context<T>&, IntegrationParams<T>&, Var<T>, double);        \
  template Var<T> token_mixer(Context<T>&, TokenMixerParams<T>&, Var<T>, const VariantConfig&);  \
  template Var<T> cas_block(Context<T>&, BlockParams<T>&, Var<T>, const VariantConfig&);         \
  template Var<T> stem(Context<T>&, StemParams<T>&, Var<T>, double);                             \
  template Var<T> patch_embed(Context<T>&, PatchEmbedParams<T>&, Var<T>, double);                \
  template Var<T> classifier_head(Context<T>&, HeadParams<T>&, Var<T>, double);                  \
  template Var<T> backbone_forward(Context<T>&, Model<T>&, Var<T>);                              \
  template Tensor<T> predict(Model<T>&, const Tensor<T>&);

CASVIT_INSTANTIATE_BACKBONE(float)
CASVIT_INSTANTIATE_BACKBONE(double)
#undef CASVIT_INSTANTIATE_BACKBONE

}  // namespace casvit
