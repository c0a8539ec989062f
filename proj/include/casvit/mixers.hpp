#pragma once

// Baseline token mixers operating on token sequences [B, N, d] (single head), plus
// the pooling mixer operating on feature maps [B, C, H, W].

#include <string>
#include <string_view>

#include "casvit/layers.hpp"

namespace casvit {

enum class MixerKind { catm, pool, msa, separable, swift };

const char* mixer_name(MixerKind m);
MixerKind parse_mixer(std::string_view s);

/// Softmax(Q Kᵀ / √d) V with Q = x Wq, K = x Wk, V = x Wv.
template <typename T>
struct MsaParams {
  Tensor<T> wq, wk, wv;  // [d, d]
};

/// Context scores s = softmax(x w_q) over tokens, context vector c = Σ s_i K_i, O = c ⊙ V.
template <typename T>
struct SeparableParams {
  Tensor<T> wq_vec;  // [d, 1]
  Tensor<T> wk, wv;  // [d, d]
};

/// α = Q w_α / √d, g = Σ α_i Q_i, O = (g ⊙ K) T + Q̂ with Q̂ the row-normalized Q.
template <typename T>
struct SwiftParams {
  Tensor<T> wq, wk;  // [d, d]
  Tensor<T> w_alpha;  // [d, 1]
  Tensor<T> t;        // [d, d]
};

template <typename T>
MsaParams<T> init_msa(Rng& rng, std::size_t d);
template <typename T>
SeparableParams<T> init_separable(Rng& rng, std::size_t d);
template <typename T>
SwiftParams<T> init_swift(Rng& rng, std::size_t d);

template <typename T>
void visit(const std::string& prefix, MsaParams<T>& p, const ParamVisitor<T>& f);
template <typename T>
void visit(const std::string& prefix, SeparableParams<T>& p, const ParamVisitor<T>& f);
template <typename T>
void visit(const std::string& prefix, SwiftParams<T>& p, const ParamVisitor<T>& f);

template <typename T>
Var<T> msa_forward(Context<T>& ctx, MsaParams<T>& p, Var<T> x);
template <typename T>
Var<T> separable_attention(Context<T>& ctx, SeparableParams<T>& p, Var<T> x);
template <typename T>
Var<T> swift_attention(Context<T>& ctx, SwiftParams<T>& p, Var<T> x);
/// avgpool_k(x) - x, stride 1, padding k/2, padded cells excluded from the mean.
template <typename T>
Var<T> pool_mixer(Context<T>& ctx, Var<T> x, std::size_t k = 3);

/// [B,C,H,W] -> [B,H·W,C] and back, for running sequence mixers on feature maps.
template <typename T>
Var<T> map_to_tokens(Tape<T>& tape, Var<T> x);
template <typename T>
Var<T> tokens_to_map(Tape<T>& tape, Var<T> tokens, std::size_t h, std::size_t w);

}  // namespace casvit
