#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>

#include "casvit/autograd.hpp"

namespace casvit {

/// Portable deterministic generator (splitmix-seeded xoshiro256**); streams are identical
/// across standard libraries, unlike the std distributions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);
  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();
  /// Normal(0, std) resampled until it lies within ±2 std.
  double trunc_normal(double std);

 private:
  std::uint64_t s_[4];
  std::optional<double> spare_;
};

enum class Mode { train, eval };

enum class ParamRole { parameter, buffer };

template <typename T>
using ParamVisitor = std::function<void(const std::string& name, Tensor<T>& tensor, ParamRole role)>;

template <typename T>
struct ConvParams {
  Tensor<T> weight;             // [Cout, Cin/groups, kh, kw]
  std::optional<Tensor<T>> bias;  // [Cout]
};

template <typename T>
struct BatchNormParams {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
};

/// Truncated-normal (std 0.02) weight, zero bias.
template <typename T>
ConvParams<T> make_conv(Rng& rng, std::size_t out_channels, std::size_t in_per_group,
                        std::size_t k, bool bias);
/// gamma 1, beta 0, running mean 0, running var 1.
template <typename T>
BatchNormParams<T> make_batchnorm(std::size_t channels);
template <typename T>
Tensor<T> trunc_normal_tensor(Rng& rng, Shape shape, double std = 0.02);

template <typename T>
void visit(const std::string& prefix, ConvParams<T>& p, const ParamVisitor<T>& f);
template <typename T>
void visit(const std::string& prefix, BatchNormParams<T>& p, const ParamVisitor<T>& f);

/// Binds parameter tensors to leaves of one tape. Each tensor gets exactly one leaf per
/// context, so gradients can be mapped back to the tensor that produced them.
template <typename T>
class Context {
 public:
  Context(Tape<T>& tape, Mode mode, PaddingMode padding = PaddingMode::zeros,
          bool requires_grad = true)
      : tape_(tape), mode_(mode), padding_(padding), requires_grad_(requires_grad) {}

  Tape<T>& tape() noexcept { return tape_; }
  Mode mode() const noexcept { return mode_; }
  PaddingMode padding() const noexcept { return padding_; }
  double bn_momentum() const noexcept { return bn_momentum_; }
  void set_bn_momentum(double m) { bn_momentum_ = m; }

  Var<T> param(const Tensor<T>& t);
  /// Makes param(t) return `v` (an existing leaf), e.g. for finite-difference checks.
  void bind(const Tensor<T>& t, Var<T> v);
  /// Gradient for a bound parameter, or nullptr when it received none.
  const Tensor<T>* grad(const GradMap<T>& grads, const Tensor<T>& t) const;

  /// Applies this context's padding mode to any padded spec.
  ConvSpec adapt(ConvSpec spec) const {
    if (spec.pad_h > 0 || spec.pad_w > 0) spec.padding = padding_;
    return spec;
  }

 private:
  Tape<T>& tape_;
  Mode mode_;
  PaddingMode padding_;
  bool requires_grad_;
  double bn_momentum_ = 0.1;
  std::unordered_map<const Tensor<T>*, NodeId> leaves_;
};

template <typename T>
Var<T> conv(Context<T>& ctx, const ConvParams<T>& p, Var<T> x, const ConvSpec& spec);
template <typename T>
Var<T> batchnorm(Context<T>& ctx, BatchNormParams<T>& p, Var<T> x, double eps);

}  // namespace casvit
