#include "casvit/layers.hpp"

#include <cmath>
#include <limits>

namespace casvit {

namespace {
std::uint64_t splitmix(std::uint64_t& x) {
  std::uint64_t z = (x += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}
std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
}  // namespace

Rng::Rng(std::uint64_t seed) {
  for (auto& s : s_) s = splitmix(seed);
}

std::uint64_t Rng::next_u64() {
  const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
  const std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) return 0;
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t v;
  do {
    v = next_u64();
  } while (v >= limit);
  return v % n;
}

double Rng::normal() {
  if (spare_) {
    const double v = *spare_;
    spare_.reset();
    return v;
  }
  double u1;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  spare_ = r * std::sin(2.0 * M_PI * u2);
  return r * std::cos(2.0 * M_PI * u2);
}

double Rng::trunc_normal(double std) {
  for (;;) {
    const double v = normal();
    if (v >= -2.0 && v <= 2.0) return v * std;
  }
}

template <typename T>
Tensor<T> trunc_normal_tensor(Rng& rng, Shape shape, double std) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.trunc_normal(std));
  return t;
}

template <typename T>
ConvParams<T> make_conv(Rng& rng, std::size_t out_channels, std::size_t in_per_group,
                        std::size_t k, bool bias) {
  ConvParams<T> p;
  p.weight = trunc_normal_tensor<T>(rng, Shape{out_channels, in_per_group, k, k});
  if (bias) p.bias = Tensor<T>(Shape{out_channels});
  return p;
}

template <typename T>
BatchNormParams<T> make_batchnorm(std::size_t channels) {
  return BatchNormParams<T>{Tensor<T>::ones(Shape{channels}), Tensor<T>::zeros(Shape{channels}),
                            Tensor<T>::zeros(Shape{channels}), Tensor<T>::ones(Shape{channels})};
}

template <typename T>
void visit(const std::string& prefix, ConvParams<T>& p, const ParamVisitor<T>& f) {
  f(prefix + ".weight", p.weight, ParamRole::parameter);
  if (p.bias) f(prefix + ".bias", *p.bias, ParamRole::parameter);
}

template <typename T>
void visit(const std::string& prefix, BatchNormParams<T>& p, const ParamVisitor<T>& f) {
  f(prefix + ".gamma", p.gamma, ParamRole::parameter);
  f(prefix + ".beta", p.beta, ParamRole::parameter);
  f(prefix + ".running_mean", p.running_mean, ParamRole::buffer);
  f(prefix + ".running_var", p.running_var, ParamRole::buffer);
}

template <typename T>
Var<T> Context<T>::param(const Tensor<T>& t) {
  if (t.empty()) throw std::logic_error("parameter used before initialization");
  auto it = leaves_.find(&t);
  if (it != leaves_.end()) return Var<T>(&tape_, it->second);
  const Var<T> v = tape_.leaf(t, requires_grad_);
  leaves_.emplace(&t, v.id());
  return v;
}

template <typename T>
void Context<T>::bind(const Tensor<T>& t, Var<T> v) {
  if (!tape_.owns(v)) throw std::invalid_argument("Context::bind: variable is not on this tape");
  if (v.shape() != t.shape()) {
    throw ShapeError("Context::bind: leaf " + shape_str(v.shape()) + " for tensor " + shape_str(t.shape()));
  }
  if (!leaves_.emplace(&t, v.id()).second) throw std::logic_error("Context::bind: tensor already bound");
}

template <typename T>
const Tensor<T>* Context<T>::grad(const GradMap<T>& grads, const Tensor<T>& t) const {
  auto it = leaves_.find(&t);
  if (it == leaves_.end()) return nullptr;
  auto g = grads.find(it->second);
  return g == grads.end() ? nullptr : &g->second;
}

template <typename T>
Var<T> conv(Context<T>& ctx, const ConvParams<T>& p, Var<T> x, const ConvSpec& spec) {
  std::optional<Var<T>> b;
  if (p.bias) b = ctx.param(*p.bias);
  return ag::conv2d(ctx.tape(), x, ctx.param(p.weight), b, ctx.adapt(spec));
}

template <typename T>
Var<T> batchnorm(Context<T>& ctx, BatchNormParams<T>& p, Var<T> x, double eps) {
  ag::BatchNormOptions opts;
  opts.train = ctx.mode() == Mode::train;
  opts.momentum = ctx.bn_momentum();
  opts.eps = eps;
  return ag::batchnorm(ctx.tape(), x, ctx.param(p.gamma), ctx.param(p.beta), p.running_mean,
                       p.running_var, opts);
}

#define CASVIT_INSTANTIATE_LAYERS(T)                                                             \
  template Tensor<T> trunc_normal_tensor(Rng&, Shape, double);                                   \
  template ConvParams<T> make_conv(Rng&, std::size_t, std::size_t, std::size_t, bool);           \
  template BatchNormParams<T> make_batchnorm(std::size_t);                                       \
  template void visit(const std::string&, ConvParams<T>&, const ParamVisitor<T>&);               \
  template void visit(const std::string&, BatchNormParams<T>&, const ParamVisitor<T>&);          \
  template class Context<T>;                                                                     \
  template Var<T> conv(Context<T>&, const ConvParams<T>&, Var<T>, const ConvSpec&);              \
  template Var<T> batchnorm(Context<T>&, BatchNormParams<T>&, Var<T>, double);

CASVIT_INSTANTIATE_LAYERS(float)
CASVIT_INSTANTIATE_LAYERS(double)
#undef CASVIT_INSTANTIATE_LAYERS

}  // namespace casvit
