#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "casvit/catm.hpp"
#include "casvit/mixers.hpp"

namespace casvit {

/// Architecture of one classifier. The four named variants use the published depths and
/// widths; "tiny" is a desk-scale configuration for toy training.
struct VariantConfig {
  std::string name = "custom";
  std::array<std::size_t, 4> blocks{};
  std::array<std::size_t, 4> channels{};
  double mlp_ratio = 4.0;
  ProjectionKind projection = ProjectionKind::depthwise_1x1;
  std::size_t num_classes = 1000;
  double norm_eps = 1e-5;
  MixerKind mixer = MixerKind::catm;
  AblationVariant ablation = AblationVariant::base;

  void validate() const;
  InteractionConfig interaction() const { return make_ablation(ablation, projection); }
  std::size_t hidden(std::size_t stage) const;

  std::string to_json() const;
  static VariantConfig from_json(std::string_view text);
  bool operator==(const VariantConfig&) const = default;
};

/// xs, s, m, t (published sizes) and tiny (N=[1,1,2,1], C=[16,24,48,64]); case-insensitive.
VariantConfig variant_config(std::string_view name);

template <typename T>
struct IntegrationParams {
  std::array<ConvParams<T>, 3> dw;  // depthwise 3×3, each followed by BN and ReLU
  std::array<BatchNormParams<T>, 3> bn;
};

template <typename T>
struct MlpParams {
  ConvParams<T> expand;   // 1×1, C -> rC
  ConvParams<T> project;  // 1×1, rC -> C
};

template <typename T>
using TokenMixerParams =
    std::variant<CatmParams<T>, std::monostate, MsaParams<T>, SeparableParams<T>, SwiftParams<T>>;

template <typename T>
struct BlockParams {
  IntegrationParams<T> integration;
  BatchNormParams<T> norm1;
  TokenMixerParams<T> mixer;
  BatchNormParams<T> norm2;
  MlpParams<T> mlp;
};

template <typename T>
struct StemParams {
  ConvParams<T> conv1;  // 3×3 s2, 3 -> C1/2
  BatchNormParams<T> bn1;
  ConvParams<T> conv2;  // 3×3 s2, C1/2 -> C1
  BatchNormParams<T> bn2;
};

template <typename T>
struct PatchEmbedParams {
  ConvParams<T> conv;  // dense 3×3 s2, C_i -> C_{i+1}
  BatchNormParams<T> bn;
};

template <typename T>
struct HeadParams {
  BatchNormParams<T> norm;
  Tensor<T> weight;  // [C4, num_classes]
  Tensor<T> bias;    // [num_classes]
};

template <typename T>
struct ModelParams {
  StemParams<T> stem;
  std::array<std::vector<BlockParams<T>>, 4> stages;
  std::array<PatchEmbedParams<T>, 3> embeds;
  HeadParams<T> head;
};

template <typename T>
struct Model {
  VariantConfig config;
  ModelParams<T> params;
};

template <typename T>
IntegrationParams<T> init_integration(Rng& rng, std::size_t channels);
template <typename T>
BlockParams<T> init_block(Rng& rng, std::size_t channels, const VariantConfig& cfg);

/// Truncated-normal (std 0.02) weights, BN gamma 1 / beta 0, zero biases; deterministic per seed.
template <typename T>
Model<T> build_variant(const VariantConfig& cfg, std::uint64_t seed);

/// Visits every tensor with its hierarchical name, e.g. "stages.2.1.mixer.wq.weight".
template <typename T>
void visit(Model<T>& model, const ParamVisitor<T>& f);
template <typename T>
void visit(const std::string& prefix, BlockParams<T>& p, const ParamVisitor<T>& f);

template <typename T>
std::size_t count_parameters(Model<T>& model);

/// Three (dw3 -> BN -> ReLU) units; the caller adds the residual.
template <typename T>
Var<T> integration_subnet(Context<T>& ctx, IntegrationParams<T>& p, Var<T> x, double eps);
template <typename T>
Var<T> token_mixer(Context<T>& ctx, TokenMixerParams<T>& p, Var<T> x, const VariantConfig& cfg);
/// x1 = x + Integration(x); x2 = x1 + Mixer(Norm(x1)); out = x2 + MLP(Norm(x2)).
template <typename T>
Var<T> cas_block(Context<T>& ctx, BlockParams<T>& p, Var<T> x, const VariantConfig& cfg);
template <typename T>
Var<T> stem(Context<T>& ctx, StemParams<T>& p, Var<T> img, double eps);
template <typename T>
Var<T> patch_embed(Context<T>& ctx, PatchEmbedParams<T>& p, Var<T> x, double eps);
/// Global average pool -> norm -> dense layer, producing logits [B, K].
template <typename T>
Var<T> classifier_head(Context<T>& ctx, HeadParams<T>& p, Var<T> x, double eps);
template <typename T>
Var<T> backbone_forward(Context<T>& ctx, Model<T>& model, Var<T> img);

/// Eval-mode logits for a batch of images, on a private tape.
template <typename T>
Tensor<T> predict(Model<T>& model, const Tensor<T>& images);

}  // namespace casvit
