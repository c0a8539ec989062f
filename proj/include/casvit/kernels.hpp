#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "casvit/tensor.hpp"

namespace casvit {

/// Zero padding is the default. Circular padding wraps around the spatial axes and exists so
/// that shift-equivariance can be checked exactly.
enum class PaddingMode { zeros, circular };

struct ConvSpec {
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t stride_h = 1;
  std::size_t stride_w = 1;
  std::size_t pad_h = 0;
  std::size_t pad_w = 0;
  std::size_t groups = 1;
  PaddingMode padding = PaddingMode::zeros;

  /// k×k, stride 1, padding k/2: preserves H and W for odd k.
  static ConvSpec same(std::size_t k, std::size_t groups = 1) {
    return ConvSpec{k, k, 1, 1, k / 2, k / 2, groups, PaddingMode::zeros};
  }
  /// k×k with the given stride and padding k/2.
  static ConvSpec strided(std::size_t k, std::size_t stride, std::size_t groups = 1) {
    return ConvSpec{k, k, stride, stride, k / 2, k / 2, groups, PaddingMode::zeros};
  }

  ConvSpec with_padding(PaddingMode mode) const {
    ConvSpec s = *this;
    s.padding = mode;
    return s;
  }

  /// floor((in + 2p - k) / s) + 1
  std::size_t out_h(std::size_t in) const;
  std::size_t out_w(std::size_t in) const;
};

enum class Activation { relu, sigmoid, gelu };
const char* activation_name(Activation a);

enum class BinaryOp { add, sub, mul };

/// Numpy-style broadcast of two shapes (right-aligned; extent 1 broadcasts).
Shape broadcast_shapes(const Shape& a, const Shape& b);

namespace kernels {

// Convolution (cross-correlation, no kernel flip).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias,
                 const ConvSpec& spec);
template <typename T>
Tensor<T> conv2d_grad_input(const Tensor<T>& grad_out, const Tensor<T>& w, const ConvSpec& spec,
                            const Shape& input_shape);
template <typename T>
Tensor<T> conv2d_grad_weight(const Tensor<T>& grad_out, const Tensor<T>& x, const ConvSpec& spec,
                             const Shape& weight_shape);
template <typename T>
Tensor<T> conv2d_grad_bias(const Tensor<T>& grad_out);
/// Shape of conv2d(x, w) after validating the combination; throws ShapeError / ConfigError.
Shape conv2d_output_shape(const Shape& x, const Shape& w, const ConvSpec& spec);

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x);
template <typename T>
Tensor<T> global_avg_pool_grad(const Tensor<T>& grad_out, const Shape& input_shape);

/// Stride-1 average pooling with padding k/2; padded positions are excluded from the mean.
template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, std::size_t k);
template <typename T>
Tensor<T> avg_pool2d_grad(const Tensor<T>& grad_out, std::size_t k);

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind);
/// Needs the forward input and output; relu uses subgradient 0 at exactly 0.
template <typename T>
Tensor<T> activation_grad(const Tensor<T>& x, const Tensor<T>& y, const Tensor<T>& grad_out,
                          Activation kind);

template <typename T>
struct BatchNormTrainResult {
  Tensor<T> y;
  Tensor<T> x_hat;
  std::vector<T> inv_std;
};

template <typename T>
struct BatchNormGrads {
  Tensor<T> x;
  Tensor<T> gamma;
  Tensor<T> beta;
};

/// Batch statistics over every axis except 1; running stats follow
/// r <- (1 - momentum) r + momentum * stat, with the unbiased variance.
template <typename T>
BatchNormTrainResult<T> batchnorm2d_train(const Tensor<T>& x, const Tensor<T>& gamma,
                                          const Tensor<T>& beta, Tensor<T>& running_mean,
                                          Tensor<T>& running_var, double momentum, double eps);
template <typename T>
Tensor<T> batchnorm2d_eval(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                           const Tensor<T>& running_mean, const Tensor<T>& running_var,
                           double eps);
template <typename T>
BatchNormGrads<T> batchnorm2d_train_grad(const Tensor<T>& grad_out, const Tensor<T>& x_hat,
                                         std::span<const T> inv_std, const Tensor<T>& gamma);
template <typename T>
BatchNormGrads<T> batchnorm2d_eval_grad(const Tensor<T>& grad_out, const Tensor<T>& x,
                                        const Tensor<T>& gamma, const Tensor<T>& running_mean,
                                        const Tensor<T>& running_var, double eps);

/// Batched matrix product over the last two axes; leading axes broadcast.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
std::pair<Tensor<T>, Tensor<T>> matmul_grad(const Tensor<T>& a, const Tensor<T>& b,
                                            const Tensor<T>& grad_out);
template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& x);

/// Max-subtracted softmax along `axis`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis);
template <typename T>
Tensor<T> softmax_grad(const Tensor<T>& y, const Tensor<T>& grad_out, int axis);

template <typename T>
Tensor<T> elementwise(const Tensor<T>& a, const Tensor<T>& b, BinaryOp op);
/// Sums `g` over broadcast axes so the result has `shape`.
template <typename T>
Tensor<T> sum_to_shape(const Tensor<T>& g, const Shape& shape);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);
/// Sum along one axis, keeping it with extent 1.
template <typename T>
Tensor<T> sum_axis(const Tensor<T>& x, int axis);
/// Broadcasts a keep-dim reduction back to `shape`.
template <typename T>
Tensor<T> expand_to(const Tensor<T>& x, const Shape& shape);
template <typename T>
T sum_all(const Tensor<T>& x);

/// x / max(||x||_2, eps) along `axis`.
template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x, int axis, double eps);
template <typename T>
Tensor<T> l2_normalize_grad(const Tensor<T>& x, const Tensor<T>& grad_out, int axis, double eps);

/// Mean label-smoothed cross entropy of logits [B, K].
template <typename T>
T cross_entropy(const Tensor<T>& logits, std::span<const int> labels, double smoothing);
template <typename T>
Tensor<T> cross_entropy_grad(const Tensor<T>& logits, std::span<const int> labels,
                             double smoothing);

/// Cyclic shift of the last two axes by (dh, dw).
template <typename T>
Tensor<T> roll2d(const Tensor<T>& x, long dh, long dw);

}  // namespace kernels
}  // namespace casvit
