#pragma once

#include <chrono>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "casvit/kernels.hpp"

namespace casvit {

enum class OpKind : std::uint8_t {
  leaf,
  conv2d,
  batchnorm,
  activation,
  global_avg_pool,
  avg_pool,
  matmul,
  transpose,
  softmax,
  add,
  sub,
  mul,
  scale,
  sum,
  sum_axis,
  reshape,
  l2_normalize,
  cross_entropy,
  custom,
};

const char* op_name(OpKind kind);

using NodeId = std::size_t;

template <typename T>
class Tape;

/// Handle to a node on a tape. Cheap to copy; only valid while its tape lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(const Tape<T>* tape, NodeId id) : tape_(tape), id_(id) {}

  NodeId id() const noexcept { return id_; }
  const Tape<T>* tape() const noexcept { return tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }
  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  const Tape<T>* tape_ = nullptr;
  NodeId id_ = 0;
};

/// Gradients w.r.t. each input of a node; an empty tensor means "no gradient".
template <typename T>
using BackwardFn = std::function<std::vector<Tensor<T>>(const Tensor<T>& grad_out)>;

template <typename T>
struct Node {
  OpKind kind = OpKind::leaf;
  std::string detail;
  std::string scope;
  std::vector<NodeId> inputs;
  Tensor<T> value;
  bool requires_grad = false;
  BackwardFn<T> backward;
  // Multiply-accumulate count under the accounting convention, and whether the
  // convention drops it (ops applied to a globally pooled context vector).
  std::uint64_t macs = 0;
  bool macs_dropped = false;
  std::chrono::nanoseconds elapsed{0};
};

/// leaf id -> d(loss)/d(leaf). Absent entries mean a zero gradient.
template <typename T>
using GradMap = std::map<NodeId, Tensor<T>>;

/// Recorded computation graph. Nodes are appended in forward execution order and
/// backward visits them in exact reverse.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = delete;
  Tape& operator=(Tape&&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad, std::string name = {});
  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  struct Record {
    OpKind kind;
    std::string detail;
    std::vector<NodeId> inputs;
    Tensor<T> value;
    BackwardFn<T> backward;
    std::uint64_t macs = 0;
    bool macs_dropped = false;
    std::chrono::nanoseconds elapsed{0};
  };
  Var<T> record(Record r);

  const Node<T>& node(NodeId id) const;
  std::size_t size() const noexcept { return nodes_.size(); }
  const std::deque<Node<T>>& nodes() const noexcept { return nodes_; }
  bool owns(const Var<T>& v) const noexcept { return v.tape() == this && v.id() < nodes_.size(); }

  void push_scope(std::string name) { scopes_.push_back(std::move(name)); }
  void pop_scope() { scopes_.pop_back(); }
  std::string current_scope() const;

  GradMap<T> backward(const Var<T>& loss) const;

 private:
  std::deque<Node<T>> nodes_;
  std::vector<std::string> scopes_;
};

template <typename T>
class ScopeGuard {
 public:
  ScopeGuard(Tape<T>& tape, std::string name) : tape_(tape) { tape_.push_scope(std::move(name)); }
  ~ScopeGuard() { tape_.pop_scope(); }
  ScopeGuard(const ScopeGuard&) = delete;
  ScopeGuard& operator=(const ScopeGuard&) = delete;

 private:
  Tape<T>& tape_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape_->node(id_).value;
}

template <typename T>
GradMap<T> backward(const Tape<T>& tape, const Var<T>& loss) {
  return tape.backward(loss);
}

/// Differentiable operations. Each records one node on the tape of its inputs.
namespace ag {

template <typename T>
Var<T> conv2d(Tape<T>& tape, Var<T> x, Var<T> w, std::optional<Var<T>> bias, const ConvSpec& spec);

struct BatchNormOptions {
  bool train = false;
  double momentum = 0.1;
  double eps = 1e-5;
};
/// Running statistics are updated in place in train mode.
template <typename T>
Var<T> batchnorm(Tape<T>& tape, Var<T> x, Var<T> gamma, Var<T> beta, Tensor<T>& running_mean,
                 Tensor<T>& running_var, const BatchNormOptions& opts);

template <typename T>
Var<T> activation(Tape<T>& tape, Var<T> x, Activation kind);
template <typename T>
Var<T> relu(Tape<T>& tape, Var<T> x) { return activation(tape, x, Activation::relu); }
template <typename T>
Var<T> sigmoid(Tape<T>& tape, Var<T> x) { return activation(tape, x, Activation::sigmoid); }
template <typename T>
Var<T> gelu(Tape<T>& tape, Var<T> x) { return activation(tape, x, Activation::gelu); }

template <typename T>
Var<T> global_avg_pool(Tape<T>& tape, Var<T> x);
template <typename T>
Var<T> avg_pool2d(Tape<T>& tape, Var<T> x, std::size_t k);

template <typename T>
Var<T> matmul(Tape<T>& tape, Var<T> a, Var<T> b);
template <typename T>
Var<T> transpose_last2(Tape<T>& tape, Var<T> x);
template <typename T>
Var<T> softmax(Tape<T>& tape, Var<T> x, int axis);

template <typename T>
Var<T> add(Tape<T>& tape, Var<T> a, Var<T> b);
template <typename T>
Var<T> sub(Tape<T>& tape, Var<T> a, Var<T> b);
template <typename T>
Var<T> mul(Tape<T>& tape, Var<T> a, Var<T> b);
template <typename T>
Var<T> scale(Tape<T>& tape, Var<T> x, T factor);

/// Sum of every element, shape [1].
template <typename T>
Var<T> sum(Tape<T>& tape, Var<T> x);
template <typename T>
Var<T> sum_axis(Tape<T>& tape, Var<T> x, int axis);
template <typename T>
Var<T> reshape(Tape<T>& tape, Var<T> x, Shape shape);
template <typename T>
Var<T> l2_normalize(Tape<T>& tape, Var<T> x, int axis, double eps = 1e-12);
template <typename T>
Var<T> cross_entropy(Tape<T>& tape, Var<T> logits, std::span<const int> labels, double smoothing);

}  // namespace ag

/// Central differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps) for every element of x.
template <typename T>
Tensor<T> finite_diff_grad(const std::function<T(const Tensor<T>&)>& f, const Tensor<T>& x,
                           double eps);

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> value;
};

struct ParamCheck {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  bool passed = false;
};

struct GradCheckReport {
  std::vector<ParamCheck> params;
  double tolerance = 0.0;
  double max_rel_error = 0.0;
  std::string worst_param;
  bool passed = false;

  std::string summary() const;
};

struct GradCheckOptions {
  double eps = 0.0;  // 0 picks 1e-5 for f64 and 1e-3 for f32
  // Check at most this many elements per parameter (evenly spread); 0 checks all.
  std::size_t max_elements = 0;
};

/// Scalar-valued function of the leaves it is given (one per parameter, in order).
template <typename T>
using ScalarForward = std::function<Var<T>(Tape<T>&, std::span<const Var<T>>)>;

/// Compares backward against central differences, per parameter, with
/// rel = |g_a - g_n| / max(|g_a|, |g_n|, 1e-8). Failures are reported, not thrown.
template <typename T>
GradCheckReport grad_check(const ScalarForward<T>& forward, const std::vector<NamedTensor<T>>& params,
                           double tol, const GradCheckOptions& opts = {});

}  // namespace casvit
