#include "casvit/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace casvit {

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::conv2d: return "conv2d";
    case OpKind::batchnorm: return "batchnorm";
    case OpKind::activation: return "activation";
    case OpKind::global_avg_pool: return "global_avg_pool";
    case OpKind::avg_pool: return "avg_pool";
    case OpKind::matmul: return "matmul";
    case OpKind::transpose: return "transpose";
    case OpKind::softmax: return "softmax";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::sum: return "sum";
    case OpKind::sum_axis: return "sum_axis";
    case OpKind::reshape: return "reshape";
    case OpKind::l2_normalize: return "l2_normalize";
    case OpKind::cross_entropy: return "cross_entropy";
    case OpKind::custom: return "custom";
  }
  return "?";
}

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T> value, bool requires_grad, std::string name) {
  Node<T> n;
  n.kind = OpKind::leaf;
  n.detail = std::move(name);
  n.scope = current_scope();
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::record(Record r) {
  Node<T> n;
  n.kind = r.kind;
  n.detail = std::move(r.detail);
  n.scope = current_scope();
  n.inputs = std::move(r.inputs);
  n.value = std::move(r.value);
  n.requires_grad = std::any_of(n.inputs.begin(), n.inputs.end(),
                                [this](NodeId i) { return node(i).requires_grad; });
  if (n.requires_grad) n.backward = std::move(r.backward);
  n.macs = r.macs;
  n.macs_dropped = r.macs_dropped;
  n.elapsed = r.elapsed;
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
const Node<T>& Tape<T>::node(NodeId id) const {
  if (id >= nodes_.size()) {
    throw std::out_of_range("node " + std::to_string(id) + " is not on this tape");
  }
  return nodes_[id];
}

template <typename T>
std::string Tape<T>::current_scope() const {
  std::string s;
  for (const auto& part : scopes_) {
    if (!s.empty()) s += '.';
    s += part;
  }
  return s;
}

template <typename T>
GradMap<T> Tape<T>::backward(const Var<T>& loss) const {
  if (!owns(loss)) throw std::invalid_argument("loss node is not on this tape");
  const Node<T>& root = nodes_[loss.id()];
  if (root.value.numel() != 1) {
    throw ShapeError("backward needs a scalar loss, got shape " + shape_str(root.value.shape()));
  }
  std::vector<Tensor<T>> grads(loss.id() + 1);
  grads[loss.id()] = Tensor<T>(root.value.shape(), T{1});
  GradMap<T> out;
  for (NodeId i = loss.id() + 1; i-- > 0;) {
    const Node<T>& n = nodes_[i];
    if (grads[i].empty() || !n.requires_grad) continue;
    if (n.kind == OpKind::leaf) {
      out.emplace(i, std::move(grads[i]));
      continue;
    }
    std::vector<Tensor<T>> gin = n.backward(grads[i]);
    grads[i] = Tensor<T>();
    for (std::size_t j = 0; j < n.inputs.size() && j < gin.size(); ++j) {
      if (gin[j].empty()) continue;
      const NodeId in = n.inputs[j];
      if (!nodes_[in].requires_grad) continue;
      if (gin[j].shape() != nodes_[in].value.shape()) {
        throw ShapeError(std::string("backward of ") + op_name(n.kind) + " produced gradient " +
                         shape_str(gin[j].shape()) + " for input of shape " +
                         shape_str(nodes_[in].value.shape()));
      }
      if (grads[in].empty()) {
        grads[in] = std::move(gin[j]);
      } else {
        T* dst = grads[in].raw();
        const T* src = gin[j].raw();
        for (std::size_t k = 0; k < grads[in].numel(); ++k) dst[k] += src[k];
      }
    }
  }
  return out;
}

template class Tape<float>;
template class Tape<double>;

namespace ag {
namespace {

using Clock = std::chrono::steady_clock;

template <typename T>
void require_owned(const Tape<T>& tape, std::initializer_list<Var<T>> vars) {
  for (const auto& v : vars) {
    if (!tape.owns(v)) throw std::invalid_argument("variable does not belong to this tape");
  }
}

template <typename F>
auto timed(F&& f, std::chrono::nanoseconds& elapsed) {
  const auto t0 = Clock::now();
  auto r = f();
  elapsed = std::chrono::duration_cast<std::chrono::nanoseconds>(Clock::now() - t0);
  return r;
}

template <typename T>
bool needs(const Tape<T>* tp, NodeId id) {
  return tp->node(id).requires_grad;
}

}  // namespace

template <typename T>
Var<T> conv2d(Tape<T>& tape, Var<T> x, Var<T> w, std::optional<Var<T>> bias, const ConvSpec& spec) {
  require_owned(tape, {x, w});
  if (bias) require_owned(tape, {*bias});
  typename Tape<T>::Record r;
  r.kind = OpKind::conv2d;
  r.detail = std::to_string(spec.kernel_h) + "x" + std::to_string(spec.kernel_w) + "/s" +
             std::to_string(spec.stride_h) + "/g" + std::to_string(spec.groups);
  r.inputs = {x.id(), w.id()};
  if (bias) r.inputs.push_back(bias->id());
  const Tensor<T>* b = bias ? &bias->value() : nullptr;
  r.value = timed([&] { return kernels::conv2d(x.value(), w.value(), b, spec); }, r.elapsed);
  const Shape& ws = w.value().shape();
  r.macs = static_cast<std::uint64_t>(r.value.numel() * ws[1] * ws[2] * ws[3]);
  r.macs_dropped = tape.node(x.id()).kind == OpKind::global_avg_pool;
  const Tape<T>* tp = &tape;
  const NodeId xi = x.id(), wi = w.id();
  const std::optional<NodeId> bi = bias ? std::optional<NodeId>(bias->id()) : std::nullopt;
  r.backward = [tp, xi, wi, bi, spec](const Tensor<T>& g) {
    std::vector<Tensor<T>> out(bi ? 3 : 2);
    const Tensor<T>& xv = tp->node(xi).value;
    const Tensor<T>& wv = tp->node(wi).value;
    if (needs(tp, xi)) out[0] = kernels::conv2d_grad_input(g, wv, spec, xv.shape());
    if (needs(tp, wi)) out[1] = kernels::conv2d_grad_weight(g, xv, spec, wv.shape());
    if (bi && needs(tp, *bi)) out[2] = kernels::conv2d_grad_bias(g);
    return out;
  };
  return tape.record(std::move(r));
}

template <typename T>
Var<T> batchnorm(Tape<T>& tape, Var<T> x, Var<T> gamma, Var<T> beta, Tensor<T>& running_mean,
                 Tensor<T>& running_var, const BatchNormOptions& opts) {
  require_owned(tape, {x, gamma, beta});
  typename Tape<T>::Record r;
  r.kind = OpKind::batchnorm;
  r.detail = opts.train ? "train" : "eval";
  r.inputs = {x.id(), gamma.id(), beta.id()};
  const Tape<T>* tp = &tape;
  const NodeId xi = x.id(), gi = gamma.id(), bi = beta.id();
  if (opts.train) {
    auto res = timed(
        [&] {
          return kernels::batchnorm2d_train(x.value(), gamma.value(), beta.value(), running_mean,
                                            running_var, opts.momentum, opts.eps);
        },
        r.elapsed);
    r.value = std::move(res.y);
    r.backward = [tp, xi, gi, bi, x_hat = std::move(res.x_hat),
                  inv_std = std::move(res.inv_std)](const Tensor<T>& g) {
      auto grads = kernels::batchnorm2d_train_grad(g, x_hat, std::span<const T>(inv_std),
                                                   tp->node(gi).value);
      std::vector<Tensor<T>> out(3);
      if (needs(tp, xi)) out[0] = std::move(grads.x);
      if (needs(tp, gi)) out[1] = std::move(grads.gamma);
      if (needs(tp, bi)) out[2] = std::move(grads.beta);
      return out;
    };
  } else {
    r.value = timed(
        [&] {
          return kernels::batchnorm2d_eval(x.value(), gamma.value(), beta.value(), running_mean,
                                           running_var, opts.eps);
        },
        r.elapsed);
    r.backward = [tp, xi, gi, bi, rm = running_mean, rv = running_var,
                  eps = opts.eps](const Tensor<T>& g) {
      auto grads = kernels::batchnorm2d_eval_grad(g, tp->node(xi).value, tp->node(gi).value, rm,
                                                  rv, eps);
      std::vector<Tensor<T>> out(3);
      if (needs(tp, xi)) out[0] = std::move(grads.x);
      if (needs(tp, gi)) out[1] = std::move(grads.gamma);
      if (needs(tp, bi)) out[2] = std::move(grads.beta);
      return out;
    };
  }
  return tape.record(std::move(r));
}

template <typename T>
Var<T> activation(Tape<T>& tape, Var<T> x, Activation kind) {
  require_owned(tape, {x});
  typename Tape<T>::Record r;
  r.kind = OpKind::activation;
  r.detail = activation_name(kind);
  r.inputs = {x.id()};
  r.value = timed([&] { return kernels::activation(x.value(), kind); }, r.elapsed);
  const Tape<T>* tp = &tape;
  const NodeId xi = x.id();
  const NodeId self = tape.size();
  r.backward = [tp, xi, self, kind](const Tensor<T>& g) {
    std::vector<Tensor<T>> out(1);
    out[0] = kernels::activation_grad(tp->node(xi).value, tp->node(self).value, g, kind);
    return out;
  };
  return tape.record(std::move(r));
}

template <typename T>
Var<T> global_avg_pool(Tape<T>& tape, Var<T> x) {
  require_owned(tape, {x});
  typename Tape<T>::Record r;
  r.kind = OpKind::global_avg_pool;
  r.inputs = {x.id()};
  r.value = timed([&] { return kernels::global_avg_pool(x.value()); }, r.elapsed);
  r.macs = x.value().numel();
  const Shape in_shape = x.shape();
  r.backward = [in_shape](const Tensor<T>& g) {
    return std::vector<Tensor<T>>{kernels::global_avg_pool_grad(g, in_shape)};
  };
  return tape.record(std::move(r));
}

template <typename T>
Var<T> avg_pool2d(Tape<T>& tape, Var<T> x, std::size_t k) {
  require_owned(tape, {x});
  typename Tape<T>::Record r;
  r.kind = OpKind::avg_pool;
  r.detail = std::to_string(k) + "x" + std::to_string(k);
  r.inputs = {x.id()};
  r.value = timed([&] { return kernels::avg_pool2d(x.value(), k); }, r.elapsed);
  r.macs = static_cast<std::uint64_t>(x.value().numel() * k * k);
  r.backward = [k](const Tensor<T>& g) {
    return std::vector<Tensor<T>>{kernels::avg_pool2d_grad(g, k)};
  };
  return tape.record(std::move(r));
}

template <typename T>
Var<T> matmul(Tape<T>& tape, Var<T> a, Var<T> b) {
  require_owned(tape, {a, b});
  typename Tape<T>::Record r;
  r.kind = OpKind::matmul;
  r.inputs = {a.id(), b.id()};
  r.value = timed([&] { return kernels::matmul(a.value(), b.value()); }, r.elapsed);
  r.macs = static_cast<std::uint64_t>(r.value.numel() * a.value().dim(-1));
  const Tape<T>* tp = &tape;
  const NodeId ai = a.id(), bi = b.id();
  r.backward = [tp, ai, bi](const Tensor<T>& g) {
    auto [ga, gb] = kernels::matmul_grad(tp->node(ai).value, tp->node(bi).value, g);
    std::vector<Tensor<T>> out(2);
    if (needs(tp, ai)) out[0] = std::move(ga);
    if (needs(tp, bi)) out[1] = std::move(gb);
    return out;
  };
  return tape.record(std::move(r));
}

template <typename T>
Var<T> transpose_last2(Tape<T>& tape, Var<T> x) {
  require_owned(tape, {x});
  typename Tape<T>::Record r;
  r.kind = OpKind::transpose;
  r.inputs = {x.id()};
  r.value = timed([&] { return kernels::transpose_last2(x.value()); }, r.elapsed);
  r.backward = [](const Tensor<T>& g) {
    return std::vector<Tensor<T>>{kernels::transpose_last2(g)};
  };
  return tape.record(std::move(r));
}

template <typename T>
Var<T> softmax(Tape<T>& tape, Var<T> x, int axis) {
  require_owned(tape, {x});
  typename Tape<T>::Record r;
  r.kind = OpKind::softmax;
  r.detail = "axis=" + std::to_string(axis);
  r.inputs = {x.id()};
  r.value = timed([&] { return kernels::softmax(x.value(), axis); }, r.elapsed);
  const Tape<T>* tp = &tape;
  const NodeId self = tape.size();
  r.backward = [tp, self, axis](const Tensor<T>& g) {
    return std::vector<Tensor<T>>{kernels::softmax_grad(tp->node(self).value, g, axis)};
  };
  return tape.record(std::move(r));
}

namespace {
template <typename T>
Var<T> binary(Tape<T>& tape, Var<T> a, Var<T> b, BinaryOp op) {
  require_owned(tape, {a, b});
  typename Tape<T>::Record r;
  r.kind = op == BinaryOp::add ? OpKind::add : op == BinaryOp::sub ? OpKind::sub : OpKind::mul;
  r.inputs = {a.id(), b.id()};
  r.value = timed([&] { return kernels::elementwise(a.value(), b.value(), op); }, r.elapsed);
  // Broadcast (gating) products count one MAC per output element; same-shape
  // products, adds and subtractions are excluded like other elementwise ops.
  if (op == BinaryOp::mul && a.shape() != b.shape()) r.macs = r.value.numel();
  const Tape<T>* tp = &tape;
  const NodeId ai = a.id(), bi = b.id();
  r.backward = [tp, ai, bi, op](const Tensor<T>& g) {
    std::vector<Tensor<T>> out(2);
    const Tensor<T>& av = tp->node(ai).value;
    const Tensor<T>& bv = tp->node(bi).value;
    if (op == BinaryOp::mul) {
      if (needs(tp, ai)) out[0] = kernels::sum_to_shape(kernels::elementwise(g, bv, BinaryOp::mul), av.shape());
      if (needs(tp, bi)) out[1] = kernels::sum_to_shape(kernels::elementwise(g, av, BinaryOp::mul), bv.shape());
    } else {
      if (needs(tp, ai)) out[0] = kernels::sum_to_shape(g, av.shape());
      if (needs(tp, bi)) {
        out[1] = kernels::sum_to_shape(g, bv.shape());
        if (op == BinaryOp::sub) out[1] = kernels::scale(out[1], T{-1});
      }
    }
    return out;
  };
  return tape.record(std::move(r));
}
}  // namespace

template <typename T>
Var<T> add(Tape<T>& tape, Var<T> a, Var<T> b) {
  return binary(tape, a, b, BinaryOp::add);
}
template <typename T>
Var<T> sub(Tape<T>& tape, Var<T> a, Var<T> b) {
  return binary(tape, a, b, BinaryOp::sub);
}
template <typename T>
Var<T> mul(Tape<T>& tape, Var<T> a, Var<T> b) {
  return binary(tape, a, b, BinaryOp::mul);
}

template <typename T>
Var<T> scale(Tape<T>& tape, Var<T> x, T factor) {
  require_owned(tape, {x});
  typename Tape<T>::Record r;
  r.kind = OpKind::scale;
  r.inputs = {x.id()};
  r.value = timed([&] { return kernels::scale(x.value(), factor); }, r.elapsed);
  r.backward = [factor](const Tensor<T>& g) {
    return std::vector<Tensor<T>>{kernels::scale(g, factor)};
  };
  return tape.record(std::move(r));
}

template <typename T>
Var<T> sum(Tape<T>& tape, Var<T> x) {
  require_owned(tape, {x});
  typename Tape<T>::Record r;
  r.kind = OpKind::sum;
  r.inputs = {x.id()};
  r.value = timed([&] { return Tensor<T>::scalar(kernels::sum_all(x.value())); }, r.elapsed);
  const Shape in_shape = x.shape();
  r.backward = [in_shape](const Tensor<T>& g) {
    return std::vector<Tensor<T>>{Tensor<T>(in_shape, g[0])};
  };
  return tape.record(std::move(r));
}

template <typename T>
Var<T> sum_axis(Tape<T>& tape, Var<T> x, int axis) {
  require_owned(tape, {x});
  typename Tape<T>::Record r;
  r.kind = OpKind::sum_axis;
  r.detail = "axis=" + std::to_string(axis);
  r.inputs = {x.id()};
  r.value = timed([&] { return kernels::sum_axis(x.value(), axis); }, r.elapsed);
  const Shape in_shape = x.shape();
  r.backward = [in_shape](const Tensor<T>& g) {
    return std::vector<Tensor<T>>{kernels::expand_to(g, in_shape)};
  };
  return tape.record(std::move(r));
}

template <typename T>
Var<T> reshape(Tape<T>& tape, Var<T> x, Shape shape) {
  require_owned(tape, {x});
  typename Tape<T>::Record r;
  r.kind = OpKind::reshape;
  r.detail = shape_str(shape);
  r.inputs = {x.id()};
  r.value = timed([&] { return x.value().reshaped(shape); }, r.elapsed);
  const Shape in_shape = x.shape();
  r.backward = [in_shape](const Tensor<T>& g) {
    return std::vector<Tensor<T>>{g.reshaped(in_shape)};
  };
  return tape.record(std::move(r));
}

template <typename T>
Var<T> l2_normalize(Tape<T>& tape, Var<T> x, int axis, double eps) {
  require_owned(tape, {x});
  typename Tape<T>::Record r;
  r.kind = OpKind::l2_normalize;
  r.inputs = {x.id()};
  r.value = timed([&] { return kernels::l2_normalize(x.value(), axis, eps); }, r.elapsed);
  const Tape<T>* tp = &tape;
  const NodeId xi = x.id();
  r.backward = [tp, xi, axis, eps](const Tensor<T>& g) {
    return std::vector<Tensor<T>>{kernels::l2_normalize_grad(tp->node(xi).value, g, axis, eps)};
  };
  return tape.record(std::move(r));
}

template <typename T>
Var<T> cross_entropy(Tape<T>& tape, Var<T> logits, std::span<const int> labels, double smoothing) {
  require_owned(tape, {logits});
  typename Tape<T>::Record r;
  r.kind = OpKind::cross_entropy;
  r.inputs = {logits.id()};
  r.value = timed(
      [&] { return Tensor<T>::scalar(kernels::cross_entropy(logits.value(), labels, smoothing)); },
      r.elapsed);
  const Tape<T>* tp = &tape;
  const NodeId li = logits.id();
  r.backward = [tp, li, lab = std::vector<int>(labels.begin(), labels.end()),
                smoothing](const Tensor<T>& g) {
    Tensor<T> gl = kernels::cross_entropy_grad(tp->node(li).value, std::span<const int>(lab), smoothing);
    return std::vector<Tensor<T>>{kernels::scale(gl, g[0])};
  };
  return tape.record(std::move(r));
}

#define CASVIT_INSTANTIATE_AG(T)                                                                  \
  template Var<T> conv2d(Tape<T>&, Var<T>, Var<T>, std::optional<Var<T>>, const ConvSpec&);       \
  template Var<T> batchnorm(Tape<T>&, Var<T>, Var<T>, Var<T>, Tensor<T>&, Tensor<T>&,             \
                            const BatchNormOptions&);                                             \
  template Var<T> activation(Tape<T>&, Var<T>, Activation);                                       \
  template Var<T> global_avg_pool(Tape<T>&, Var<T>);                                              \
  template Var<T> avg_pool2d(Tape<T>&, Var<T>, std::size_t);                                      \
  template Var<T> matmul(Tape<T>&, Var<T>, Var<T>);                                               \
  template Var<T> transpose_last2(Tape<T>&, Var<T>);                                              \
  template Var<T> softmax(Tape<T>&, Var<T>, int);                                                 \
  template Var<T> add(Tape<T>&, Var<T>, Var<T>);                                                  \
  template Var<T> sub(Tape<T>&, Var<T>, Var<T>);                                                  \
  template Var<T> mul(Tape<T>&, Var<T>, Var<T>);                                                  \
  template Var<T> scale(Tape<T>&, Var<T>, T);                                                     \
  template Var<T> sum(Tape<T>&, Var<T>);                                                          \
  template Var<T> sum_axis(Tape<T>&, Var<T>, int);                                                \
  template Var<T> reshape(Tape<T>&, Var<T>, Shape);                                               \
  template Var<T> l2_normalize(Tape<T>&, Var<T>, int, double);                                    \
  template Var<T> cross_entropy(Tape<T>&, Var<T>, std::span<const int>, double);

CASVIT_INSTANTIATE_AG(float)
CASVIT_INSTANTIATE_AG(double)
#undef CASVIT_INSTANTIATE_AG

}  // namespace ag

template <typename T>
Tensor<T> finite_diff_grad(const std::function<T(const Tensor<T>&)>& f, const Tensor<T>& x,
                           double eps) {
  Tensor<T> g(x.shape());
  Tensor<T> probe = x;
  const T h = static_cast<T>(eps);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const T orig = probe[i];
    probe[i] = orig + h;
    const T up = f(probe);
    probe[i] = orig - h;
    const T down = f(probe);
    probe[i] = orig;
    g[i] = (up - down) / (T{2} * h);
  }
  return g;
}

std::string GradCheckReport::summary() const {
  std::ostringstream os;
  os << (passed ? "PASS" : "FAIL") << " max_rel_err=" << max_rel_error << " tol=" << tolerance;
  if (!worst_param.empty()) os << " worst=" << worst_param;
  for (const auto& p : params) {
    if (!p.passed) os << "\n  failed: " << p.name << " rel_err=" << p.max_rel_error;
  }
  return os.str();
}

template <typename T>
GradCheckReport grad_check(const ScalarForward<T>& forward, const std::vector<NamedTensor<T>>& params,
                           double tol, const GradCheckOptions& opts) {
  const double eps = opts.eps > 0 ? opts.eps : (std::is_same_v<T, double> ? 1e-5 : 1e-3);
  GradCheckReport report;
  report.tolerance = tol;

  std::vector<Tensor<T>> analytic;
  {
    Tape<T> tape;
    std::vector<Var<T>> leaves;
    for (const auto& p : params) leaves.push_back(tape.leaf(p.value, true, p.name));
    const Var<T> loss = forward(tape, leaves);
    const GradMap<T> grads = tape.backward(loss);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto it = grads.find(leaves[i].id());
      analytic.push_back(it != grads.end() ? it->second : Tensor<T>(params[i].value.shape()));
    }
  }

  std::vector<Tensor<T>> values;
  for (const auto& p : params) values.push_back(p.value);
  auto evaluate = [&]() -> double {
    Tape<T> tape;
    std::vector<Var<T>> leaves;
    for (const auto& v : values) leaves.push_back(tape.constant(v));
    return static_cast<double>(forward(tape, leaves).value()[0]);
  };

  for (std::size_t p = 0; p < params.size(); ++p) {
    ParamCheck check;
    check.name = params[p].name;
    const std::size_t n = values[p].numel();
    const std::size_t count = opts.max_elements == 0 ? n : std::min(n, opts.max_elements);
    for (std::size_t s = 0; s < count; ++s) {
      const std::size_t i = count == n ? s : s * n / count;
      const T orig = values[p][i];
      values[p][i] = static_cast<T>(static_cast<double>(orig) + eps);
      const double up = evaluate();
      values[p][i] = static_cast<T>(static_cast<double>(orig) - eps);
      const double down = evaluate();
      values[p][i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double ga = static_cast<double>(analytic[p][i]);
      const double denom = std::max({std::abs(ga), std::abs(numeric), 1e-8});
      check.max_rel_error = std::max(check.max_rel_error, std::abs(ga - numeric) / denom);
      ++check.checked;
    }
    check.passed = check.max_rel_error <= tol;
    if (check.max_rel_error >= report.max_rel_error) {
      report.max_rel_error = check.max_rel_error;
      report.worst_param = check.name;
    }
    report.params.push_back(std::move(check));
  }
  report.passed = std::all_of(report.params.begin(), report.params.end(),
                              [](const ParamCheck& c) { return c.passed; });
  return report;
}

template Tensor<float> finite_diff_grad(const std::function<float(const Tensor<float>&)>&,
                                        const Tensor<float>&, double);
template Tensor<double> finite_diff_grad(const std::function<double(const Tensor<double>&)>&,
                                         const Tensor<double>&, double);
template GradCheckReport grad_check(const ScalarForward<float>&,
                                    const std::vector<NamedTensor<float>>&, double,
                                    const GradCheckOptions&);
template GradCheckReport grad_check(const ScalarForward<double>&,
                                    const std::vector<NamedTensor<double>>&, double,
                                    const GradCheckOptions&);

}  // namespace casvit
