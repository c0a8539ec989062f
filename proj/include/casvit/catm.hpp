#pragma once

// Convolutional additive token mixer:
//
//   spatial:  S(x) = x ⊙ sigmoid(pw1(ReLU(BN(dw3(x)))))      map [B,1,H,W]
//   channel:  C(x) = x ⊙ sigmoid(dw1(avgpool(x)))             map [B,C,1,1]
//   context:  Φ(x) = interactions applied in order (spatial then channel by default)
//   output:   O    = Γ(Φ_q(Q) + Φ_k(K)) ⊙ V,  Γ a depthwise 3×3 convolution
//
// Q, K and V are per-channel (depthwise 1×1) or dense 1×1 projections of x.

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "casvit/layers.hpp"

namespace casvit {

enum class Interaction { spatial, channel };
enum class ProjectionKind { depthwise_1x1, dense_1x1 };

const char* interaction_name(Interaction i);
const char* projection_name(ProjectionKind p);
ProjectionKind parse_projection(std::string_view s);

struct InteractionConfig {
  std::vector<Interaction> q_branch{Interaction::spatial, Interaction::channel};
  std::vector<Interaction> k_branch{Interaction::spatial, Interaction::channel};
  ProjectionKind projection = ProjectionKind::depthwise_1x1;

  /// Throws ConfigError unless both branches are duplicate-free.
  void validate() const;
  bool operator==(const InteractionConfig&) const = default;
};

/// Arrangements of the context mapping used for ablations.
enum class AblationVariant { base, no_spatial, no_channel, split_sc, swapped_full };

const char* ablation_name(AblationVariant v);
AblationVariant parse_ablation(std::string_view s);
InteractionConfig make_ablation(AblationVariant variant,
                                ProjectionKind projection = ProjectionKind::depthwise_1x1);

template <typename T>
struct SpatialParams {
  ConvParams<T> dw3;  // depthwise 3×3, no bias (followed by BN)
  BatchNormParams<T> bn;
  ConvParams<T> pw1;  // dense 1×1, C -> 1
};

template <typename T>
struct ChannelParams {
  ConvParams<T> dw1;  // depthwise 1×1 on the pooled vector
};

/// Parameters of one context mapping; present only for the interactions it uses.
template <typename T>
struct ContextParams {
  std::optional<SpatialParams<T>> spatial;
  std::optional<ChannelParams<T>> channel;
};

template <typename T>
struct CatmParams {
  std::size_t channels = 0;
  ProjectionKind projection = ProjectionKind::depthwise_1x1;
  ConvParams<T> wq, wk, wv;
  ContextParams<T> q_context;
  ContextParams<T> k_context;
  ConvParams<T> gamma_dw3;
};

inline constexpr double kCatmNormEps = 1e-5;

template <typename T>
SpatialParams<T> init_spatial(Rng& rng, std::size_t channels);
template <typename T>
ChannelParams<T> init_channel(Rng& rng, std::size_t channels);
template <typename T>
ContextParams<T> init_context(Rng& rng, std::size_t channels, std::span<const Interaction> order);
template <typename T>
CatmParams<T> init_catm(Rng& rng, std::size_t channels, const InteractionConfig& cfg);

template <typename T>
void visit(const std::string& prefix, CatmParams<T>& p, const ParamVisitor<T>& f);

template <typename T>
Var<T> spatial_interaction(Context<T>& ctx, SpatialParams<T>& p, Var<T> x);
template <typename T>
Var<T> channel_interaction(Context<T>& ctx, ChannelParams<T>& p, Var<T> x);
/// Applies the listed interactions in order; an empty list is the identity.
template <typename T>
Var<T> context_map_phi(Context<T>& ctx, ContextParams<T>& p, Var<T> x,
                       std::span<const Interaction> order);
template <typename T>
Var<T> catm_forward(Context<T>& ctx, CatmParams<T>& p, Var<T> x, const InteractionConfig& cfg);

}  // namespace casvit
