#include "casvit/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace casvit {

const char* dtype_name(DType dtype) { return dtype == DType::f32 ? "f32" : "f64"; }

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, std::size_t b) { return a * b; });
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](T v) { return std::isfinite(v); });
}
template bool all_finite(const Tensor<float>&);
template bool all_finite(const Tensor<double>&);

namespace {

std::size_t conv_out(std::size_t in, std::size_t k, std::size_t s, std::size_t p) {
  if (s == 0) throw ConfigError("convolution stride must be positive");
  if (in + 2 * p < k) {
    throw ShapeError("kernel extent " + std::to_string(k) + " exceeds padded input extent " +
                     std::to_string(in + 2 * p));
  }
  return (in + 2 * p - k) / s + 1;
}

// Output columns ow in [lo, hi) for which ow*s + off lands inside [0, extent).
std::pair<long, long> valid_range(long off, long s, long extent, long out_extent) {
  long lo = 0;
  if (off < 0) lo = (-off + s - 1) / s;
  long hi = 0;
  if (extent - 1 - off >= 0) hi = (extent - 1 - off) / s + 1;
  hi = std::min(hi, out_extent);
  if (lo > hi) lo = hi;
  return {lo, hi};
}

long wrap(long i, long n) {
  long r = i % n;
  return r < 0 ? r + n : r;
}

struct Conv4 {
  long batch, cin, h, w, cout, ho, wo, cin_g, cout_g;
};

Conv4 conv_dims(const Shape& x, const Shape& w, const ConvSpec& spec) {
  const Shape out = kernels::conv2d_output_shape(x, w, spec);
  return Conv4{static_cast<long>(x[0]),   static_cast<long>(x[1]),
               static_cast<long>(x[2]),   static_cast<long>(x[3]),
               static_cast<long>(w[0]),   static_cast<long>(out[2]),
               static_cast<long>(out[3]), static_cast<long>(w[1]),
               static_cast<long>(w[0] / spec.groups)};
}

// Axis decomposition [outer, axis, inner] for reductions along one axis.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, int axis) {
  const int r = static_cast<int>(shape.size());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  }
  AxisSplit s;
  for (int i = 0; i < a; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  s.extent = shape[static_cast<std::size_t>(a)];
  for (int i = a + 1; i < r; ++i) s.inner *= shape[static_cast<std::size_t>(i)];
  return s;
}

// Strides of `in` aligned to `out` (right-aligned), zero on broadcast axes.
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t i = 0; i < in.size(); ++i) {
    const std::size_t ai = in.size() - 1 - i;
    const std::size_t ao = out.size() - 1 - i;
    strides[ao] = in[ai] == 1 ? 0 : stride;
    stride *= in[ai];
  }
  return strides;
}

// Visits every output element in row-major order, handing the callback
// (output offset, offset into a, offset into b) for the innermost run.
template <typename F>
void broadcast_walk(const Shape& out, const std::vector<std::size_t>& sa,
                    const std::vector<std::size_t>& sb, F&& body) {
  const std::size_t rank = out.size();
  const std::size_t inner = out[rank - 1];
  const std::size_t ia = sa[rank - 1];
  const std::size_t ib = sb[rank - 1];
  std::vector<std::size_t> idx(rank, 0);
  std::size_t oa = 0, ob = 0, oo = 0;
  const std::size_t total = shape_numel(out);
  while (oo < total) {
    body(oo, oa, ob, inner, ia, ib);
    oo += inner;
    // advance odometer over axes [0, rank-1)
    for (long ax = static_cast<long>(rank) - 2; ax >= 0; --ax) {
      const auto a = static_cast<std::size_t>(ax);
      ++idx[a];
      oa += sa[a];
      ob += sb[a];
      if (idx[a] < out[a]) break;
      oa -= sa[a] * out[a];
      ob -= sb[a] * out[a];
      idx[a] = 0;
    }
  }
}

// Dense (groups == 1) convolutions go through im2col and small GEMMs; the column
// matrix has rows (ic, ki, kj) and columns (oh, ow).
bool is_pointwise(const ConvSpec& s) {
  return s.kernel_h == 1 && s.kernel_w == 1 && s.stride_h == 1 && s.stride_w == 1 && s.pad_h == 0 &&
         s.pad_w == 0;
}

template <typename T>
void im2col(const T* in, const Conv4& d, const ConvSpec& s, T* col) {
  const long kh = static_cast<long>(s.kernel_h), kw = static_cast<long>(s.kernel_w);
  const long sh = static_cast<long>(s.stride_h), sw = static_cast<long>(s.stride_w);
  const long ph = static_cast<long>(s.pad_h), pw = static_cast<long>(s.pad_w);
  const bool circular = s.padding == PaddingMode::circular;
  for (long ic = 0; ic < d.cin; ++ic) {
    const T* plane = in + ic * d.h * d.w;
    for (long ki = 0; ki < kh; ++ki) {
      for (long kj = 0; kj < kw; ++kj) {
        T* row = col + ((ic * kh + ki) * kw + kj) * d.ho * d.wo;
        for (long oh = 0; oh < d.ho; ++oh) {
          long ih = oh * sh + ki - ph;
          T* out = row + oh * d.wo;
          if (circular) ih = wrap(ih, d.h);
          if (ih < 0 || ih >= d.h) {
            std::fill(out, out + d.wo, T{0});
            continue;
          }
          const T* irow = plane + ih * d.w;
          for (long ow = 0; ow < d.wo; ++ow) {
            long iw = ow * sw + kj - pw;
            if (circular) iw = wrap(iw, d.w);
            out[ow] = (iw < 0 || iw >= d.w) ? T{0} : irow[iw];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, const Conv4& d, const ConvSpec& s, T* in) {
  const long kh = static_cast<long>(s.kernel_h), kw = static_cast<long>(s.kernel_w);
  const long sh = static_cast<long>(s.stride_h), sw = static_cast<long>(s.stride_w);
  const long ph = static_cast<long>(s.pad_h), pw = static_cast<long>(s.pad_w);
  const bool circular = s.padding == PaddingMode::circular;
  for (long ic = 0; ic < d.cin; ++ic) {
    T* plane = in + ic * d.h * d.w;
    for (long ki = 0; ki < kh; ++ki) {
      for (long kj = 0; kj < kw; ++kj) {
        const T* row = col + ((ic * kh + ki) * kw + kj) * d.ho * d.wo;
        for (long oh = 0; oh < d.ho; ++oh) {
          long ih = oh * sh + ki - ph;
          if (circular) ih = wrap(ih, d.h);
          if (ih < 0 || ih >= d.h) continue;
          T* irow = plane + ih * d.w;
          const T* src = row + oh * d.wo;
          for (long ow = 0; ow < d.wo; ++ow) {
            long iw = ow * sw + kj - pw;
            if (circular) iw = wrap(iw, d.w);
            if (iw >= 0 && iw < d.w) irow[iw] += src[ow];
          }
        }
      }
    }
  }
}

// Depthwise 3×3, stride 1, zero padding 1: each output row takes three fused passes,
// one per kernel row.
bool is_depthwise3(const Conv4& d, const ConvSpec& s) {
  return d.cin_g == 1 && d.cout == d.cin && s.kernel_h == 3 && s.kernel_w == 3 && s.stride_h == 1 &&
         s.stride_w == 1 && s.pad_h == 1 && s.pad_w == 1 && s.padding == PaddingMode::zeros;
}

template <typename T>
void dw3_plane(const T* in, const T* w9, T* out, long h, long w, T init) {
  for (long oh = 0; oh < h; ++oh) {
    T* o = out + oh * w;
    std::fill(o, o + w, init);
    for (long ki = 0; ki < 3; ++ki) {
      const long ih = oh + ki - 1;
      if (ih < 0 || ih >= h) continue;
      const T* r = in + ih * w;
      const T w0 = w9[ki * 3], w1 = w9[ki * 3 + 1], w2 = w9[ki * 3 + 2];
      if (w == 1) {
        o[0] += w1 * r[0];
        continue;
      }
      o[0] += w1 * r[0] + w2 * r[1];
      for (long ow = 1; ow < w - 1; ++ow) o[ow] += w0 * r[ow - 1] + w1 * r[ow] + w2 * r[ow + 1];
      o[w - 1] += w0 * r[w - 2] + w1 * r[w - 1];
    }
  }
}

// C[M,N] += A[M,K] B[K,N]
template <typename T>
void gemm_nn(long m, long n, long k, const T* a, const T* b, T* c) {
  for (long i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (long p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      const T* brow = b + p * n;
      for (long j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[M,N] += A[M,K] B[N,K]ᵀ
template <typename T>
void gemm_nt(long m, long n, long k, const T* a, const T* b, T* c) {
  for (long i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    for (long j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc{0};
      for (long p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

// C[M,N] += A[K,M]ᵀ B[K,N]
template <typename T>
void gemm_tn(long m, long n, long k, const T* a, const T* b, T* c) {
  for (long p = 0; p < k; ++p) {
    const T* brow = b + p * n;
    for (long i = 0; i < m; ++i) {
      const T av = a[p * m + i];
      T* crow = c + i * n;
      for (long j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}
}  // namespace

std::size_t ConvSpec::out_h(std::size_t in) const { return conv_out(in, kernel_h, stride_h, pad_h); }
std::size_t ConvSpec::out_w(std::size_t in) const { return conv_out(in, kernel_w, stride_w, pad_w); }

const char* activation_name(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::gelu: return "gelu";
  }
  return "?";
}

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t ea = i < a.size() ? a[a.size() - 1 - i] : 1;
    const std::size_t eb = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError("shapes " + shape_str(a) + " and " + shape_str(b) +
                       " are not broadcast-compatible");
    }
    out[rank - 1 - i] = std::max(ea, eb);
  }
  return out;
}

namespace kernels {

Shape conv2d_output_shape(const Shape& x, const Shape& w, const ConvSpec& spec) {
  if (x.size() != 4) throw ShapeError("conv2d input must be [B,C,H,W], got " + shape_str(x));
  if (w.size() != 4) throw ShapeError("conv2d weight must be [Cout,Cin/g,kh,kw], got " + shape_str(w));
  if (spec.groups == 0) throw ConfigError("conv2d groups must be positive");
  if (x[1] % spec.groups != 0 || w[0] % spec.groups != 0) {
    throw ConfigError("conv2d groups " + std::to_string(spec.groups) +
                      " must divide in-channels " + std::to_string(x[1]) +
                      " and out-channels " + std::to_string(w[0]));
  }
  if (w[1] != x[1] / spec.groups) {
    throw ShapeError("conv2d weight " + shape_str(w) + " expects " + std::to_string(w[1]) +
                     " channels per group but input " + shape_str(x) + " provides " +
                     std::to_string(x[1] / spec.groups));
  }
  if (w[2] != spec.kernel_h || w[3] != spec.kernel_w) {
    throw ShapeError("conv2d weight " + shape_str(w) + " disagrees with kernel " +
                     std::to_string(spec.kernel_h) + "x" + std::to_string(spec.kernel_w));
  }
  if (spec.padding == PaddingMode::circular &&
      (spec.pad_h > x[2] || spec.pad_w > x[3])) {
    throw ConfigError("circular padding wider than the input");
  }
  return Shape{x[0], w[0], spec.out_h(x[2]), spec.out_w(x[3])};
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias,
                 const ConvSpec& spec) {
  const Conv4 d = conv_dims(x.shape(), w.shape(), spec);
  if (bias != nullptr && (bias->rank() != 1 || bias->dim(0) != static_cast<std::size_t>(d.cout))) {
    throw ShapeError("conv2d bias " + shape_str(bias->shape()) + " must be [" +
                     std::to_string(d.cout) + "]");
  }
  Tensor<T> y(Shape{static_cast<std::size_t>(d.batch), static_cast<std::size_t>(d.cout),
                    static_cast<std::size_t>(d.ho), static_cast<std::size_t>(d.wo)});
  const long kh = static_cast<long>(spec.kernel_h), kw = static_cast<long>(spec.kernel_w);
  const long sh = static_cast<long>(spec.stride_h), sw = static_cast<long>(spec.stride_w);
  const long ph = static_cast<long>(spec.pad_h), pw = static_cast<long>(spec.pad_w);
  const bool circular = spec.padding == PaddingMode::circular;
  const T* xp = x.raw();
  const T* wp = w.raw();
  T* yp = y.raw();
  if (is_depthwise3(d, spec)) {
    for (long b = 0; b < d.batch; ++b) {
      for (long c = 0; c < d.cout; ++c) {
        const long plane = (b * d.cout + c) * d.h * d.w;
        dw3_plane(xp + plane, wp + c * 9, yp + plane, d.h, d.w,
                  bias ? (*bias)[static_cast<std::size_t>(c)] : T{0});
      }
    }
    return y;
  }
  if (spec.groups == 1) {
    const long kdim = d.cin * kh * kw, cols = d.ho * d.wo;
    const bool pointwise = is_pointwise(spec);
    std::vector<T> col(pointwise ? 0 : static_cast<std::size_t>(kdim * cols));
    for (long b = 0; b < d.batch; ++b) {
      const T* src = xp + b * d.cin * d.h * d.w;
      if (!pointwise) {
        im2col(src, d, spec, col.data());
        src = col.data();
      }
      T* out = yp + b * d.cout * cols;
      for (long oc = 0; oc < d.cout; ++oc) {
        std::fill(out + oc * cols, out + (oc + 1) * cols, bias ? (*bias)[static_cast<std::size_t>(oc)] : T{0});
      }
      gemm_nn(d.cout, cols, kdim, wp, src, out);
    }
    return y;
  }
  for (long b = 0; b < d.batch; ++b) {
    for (long oc = 0; oc < d.cout; ++oc) {
      T* plane = yp + (b * d.cout + oc) * d.ho * d.wo;
      const T init = bias ? (*bias)[static_cast<std::size_t>(oc)] : T{0};
      std::fill(plane, plane + d.ho * d.wo, init);
      const long g = oc / d.cout_g;
      for (long icg = 0; icg < d.cin_g; ++icg) {
        const long ic = g * d.cin_g + icg;
        const T* in = xp + (b * d.cin + ic) * d.h * d.w;
        const T* wk = wp + (oc * d.cin_g + icg) * kh * kw;
        for (long ki = 0; ki < kh; ++ki) {
          for (long kj = 0; kj < kw; ++kj) {
            const T wv = wk[ki * kw + kj];
            const long off = kj - pw;
            const auto [lo, hi] = valid_range(off, sw, d.w, d.wo);
            for (long oh = 0; oh < d.ho; ++oh) {
              long ih = oh * sh + ki - ph;
              T* orow = plane + oh * d.wo;
              if (circular) {
                ih = wrap(ih, d.h);
                const T* irow = in + ih * d.w;
                for (long ow = 0; ow < d.wo; ++ow) orow[ow] += wv * irow[wrap(ow * sw + off, d.w)];
                continue;
              }
              if (ih < 0 || ih >= d.h) continue;
              const T* irow = in + ih * d.w;
              if (sw == 1) {
                const T* src = irow + off;
                for (long ow = lo; ow < hi; ++ow) orow[ow] += wv * src[ow];
              } else {
                for (long ow = lo; ow < hi; ++ow) orow[ow] += wv * irow[ow * sw + off];
              }
            }
          }
        }
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> conv2d_grad_input(const Tensor<T>& grad_out, const Tensor<T>& w, const ConvSpec& spec,
                            const Shape& input_shape) {
  const Conv4 d = conv_dims(input_shape, w.shape(), spec);
  Tensor<T> gx(input_shape);
  const long kh = static_cast<long>(spec.kernel_h), kw = static_cast<long>(spec.kernel_w);
  const long sh = static_cast<long>(spec.stride_h), sw = static_cast<long>(spec.stride_w);
  const long ph = static_cast<long>(spec.pad_h), pw = static_cast<long>(spec.pad_w);
  const bool circular = spec.padding == PaddingMode::circular;
  const T* gp = grad_out.raw();
  const T* wp = w.raw();
  T* gxp = gx.raw();
  if (is_depthwise3(d, spec)) {
    // The input gradient is the same correlation with the kernel rotated by 180 degrees.
    std::vector<T> flipped(static_cast<std::size_t>(d.cout * 9));
    for (long c = 0; c < d.cout; ++c) {
      for (long i = 0; i < 9; ++i) flipped[static_cast<std::size_t>(c * 9 + i)] = wp[c * 9 + 8 - i];
    }
    for (long b = 0; b < d.batch; ++b) {
      for (long c = 0; c < d.cout; ++c) {
        const long plane = (b * d.cout + c) * d.h * d.w;
        dw3_plane(gp + plane, flipped.data() + c * 9, gxp + plane, d.h, d.w, T{0});
      }
    }
    return gx;
  }
  if (spec.groups == 1) {
    const long kdim = d.cin * kh * kw, cols = d.ho * d.wo;
    const bool pointwise = is_pointwise(spec);
    std::vector<T> col(pointwise ? 0 : static_cast<std::size_t>(kdim * cols));
    for (long b = 0; b < d.batch; ++b) {
      T* dst = gxp + b * d.cin * d.h * d.w;
      const T* g = gp + b * d.cout * cols;
      if (pointwise) {
        gemm_tn(kdim, cols, d.cout, wp, g, dst);
        continue;
      }
      std::fill(col.begin(), col.end(), T{0});
      gemm_tn(kdim, cols, d.cout, wp, g, col.data());
      col2im(col.data(), d, spec, dst);
    }
    return gx;
  }
  for (long b = 0; b < d.batch; ++b) {
    for (long oc = 0; oc < d.cout; ++oc) {
      const T* gplane = gp + (b * d.cout + oc) * d.ho * d.wo;
      const long g = oc / d.cout_g;
      for (long icg = 0; icg < d.cin_g; ++icg) {
        const long ic = g * d.cin_g + icg;
        T* in = gxp + (b * d.cin + ic) * d.h * d.w;
        const T* wk = wp + (oc * d.cin_g + icg) * kh * kw;
        for (long ki = 0; ki < kh; ++ki) {
          for (long kj = 0; kj < kw; ++kj) {
            const T wv = wk[ki * kw + kj];
            const long off = kj - pw;
            const auto [lo, hi] = valid_range(off, sw, d.w, d.wo);
            for (long oh = 0; oh < d.ho; ++oh) {
              long ih = oh * sh + ki - ph;
              const T* grow = gplane + oh * d.wo;
              if (circular) {
                ih = wrap(ih, d.h);
                T* irow = in + ih * d.w;
                for (long ow = 0; ow < d.wo; ++ow) irow[wrap(ow * sw + off, d.w)] += wv * grow[ow];
                continue;
              }
              if (ih < 0 || ih >= d.h) continue;
              T* irow = in + ih * d.w;
              for (long ow = lo; ow < hi; ++ow) irow[ow * sw + off] += wv * grow[ow];
            }
          }
        }
      }
    }
  }
  return gx;
}

template <typename T>
Tensor<T> conv2d_grad_weight(const Tensor<T>& grad_out, const Tensor<T>& x, const ConvSpec& spec,
                             const Shape& weight_shape) {
  const Conv4 d = conv_dims(x.shape(), weight_shape, spec);
  Tensor<T> gw(weight_shape);
  const long kh = static_cast<long>(spec.kernel_h), kw = static_cast<long>(spec.kernel_w);
  const long sh = static_cast<long>(spec.stride_h), sw = static_cast<long>(spec.stride_w);
  const long ph = static_cast<long>(spec.pad_h), pw = static_cast<long>(spec.pad_w);
  const bool circular = spec.padding == PaddingMode::circular;
  const T* gp = grad_out.raw();
  const T* xp = x.raw();
  T* gwp = gw.raw();
  if (spec.groups == 1) {
    const long kdim = d.cin * kh * kw, cols = d.ho * d.wo;
    const bool pointwise = is_pointwise(spec);
    std::vector<T> col(pointwise ? 0 : static_cast<std::size_t>(kdim * cols));
    for (long b = 0; b < d.batch; ++b) {
      const T* src = xp + b * d.cin * d.h * d.w;
      if (!pointwise) {
        im2col(src, d, spec, col.data());
        src = col.data();
      }
      gemm_nt(d.cout, kdim, cols, gp + b * d.cout * cols, src, gwp);
    }
    return gw;
  }
  for (long oc = 0; oc < d.cout; ++oc) {
    const long g = oc / d.cout_g;
    for (long icg = 0; icg < d.cin_g; ++icg) {
      const long ic = g * d.cin_g + icg;
      for (long ki = 0; ki < kh; ++ki) {
        for (long kj = 0; kj < kw; ++kj) {
          const long off = kj - pw;
          const auto [lo, hi] = valid_range(off, sw, d.w, d.wo);
          T acc{0};
          for (long b = 0; b < d.batch; ++b) {
            const T* gplane = gp + (b * d.cout + oc) * d.ho * d.wo;
            const T* in = xp + (b * d.cin + ic) * d.h * d.w;
            for (long oh = 0; oh < d.ho; ++oh) {
              long ih = oh * sh + ki - ph;
              const T* grow = gplane + oh * d.wo;
              if (circular) {
                ih = wrap(ih, d.h);
                const T* irow = in + ih * d.w;
                for (long ow = 0; ow < d.wo; ++ow) acc += grow[ow] * irow[wrap(ow * sw + off, d.w)];
                continue;
              }
              if (ih < 0 || ih >= d.h) continue;
              const T* irow = in + ih * d.w;
              for (long ow = lo; ow < hi; ++ow) acc += grow[ow] * irow[ow * sw + off];
            }
          }
          gwp[((oc * d.cin_g + icg) * kh + ki) * kw + kj] = acc;
        }
      }
    }
  }
  return gw;
}

template <typename T>
Tensor<T> conv2d_grad_bias(const Tensor<T>& grad_out) {
  const std::size_t batch = grad_out.dim(0), c = grad_out.dim(1);
  const std::size_t plane = grad_out.dim(2) * grad_out.dim(3);
  Tensor<T> gb(Shape{c});
  for (std::size_t oc = 0; oc < c; ++oc) {
    T acc{0};
    for (std::size_t b = 0; b < batch; ++b) {
      const T* p = grad_out.raw() + (b * c + oc) * plane;
      for (std::size_t i = 0; i < plane; ++i) acc += p[i];
    }
    gb[oc] = acc;
  }
  return gb;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("global_avg_pool expects [B,C,H,W], got " + shape_str(x.shape()));
  const std::size_t planes = x.dim(0) * x.dim(1);
  const std::size_t n = x.dim(2) * x.dim(3);
  Tensor<T> y(Shape{x.dim(0), x.dim(1), 1, 1});
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = x.raw() + p * n;
    T acc{0};
    for (std::size_t i = 0; i < n; ++i) acc += src[i];
    y[p] = acc / static_cast<T>(n);
  }
  return y;
}

template <typename T>
Tensor<T> global_avg_pool_grad(const Tensor<T>& grad_out, const Shape& input_shape) {
  Tensor<T> gx(input_shape);
  const std::size_t n = input_shape[2] * input_shape[3];
  const std::size_t planes = input_shape[0] * input_shape[1];
  for (std::size_t p = 0; p < planes; ++p) {
    const T g = grad_out[p] / static_cast<T>(n);
    std::fill(gx.raw() + p * n, gx.raw() + (p + 1) * n, g);
  }
  return gx;
}

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, std::size_t k) {
  if (x.rank() != 4) throw ShapeError("avg_pool2d expects [B,C,H,W], got " + shape_str(x.shape()));
  if (k % 2 == 0) throw ConfigError("avg_pool2d kernel must be odd");
  const long h = static_cast<long>(x.dim(2)), w = static_cast<long>(x.dim(3));
  const long r = static_cast<long>(k / 2);
  const std::size_t planes = x.dim(0) * x.dim(1);
  Tensor<T> y(x.shape());
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = x.raw() + p * static_cast<std::size_t>(h * w);
    T* dst = y.raw() + p * static_cast<std::size_t>(h * w);
    for (long i = 0; i < h; ++i) {
      const long i0 = std::max(0L, i - r), i1 = std::min(h - 1, i + r);
      for (long j = 0; j < w; ++j) {
        const long j0 = std::max(0L, j - r), j1 = std::min(w - 1, j + r);
        T acc{0};
        for (long a = i0; a <= i1; ++a)
          for (long b = j0; b <= j1; ++b) acc += src[a * w + b];
        dst[i * w + j] = acc / static_cast<T>((i1 - i0 + 1) * (j1 - j0 + 1));
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> avg_pool2d_grad(const Tensor<T>& grad_out, std::size_t k) {
  const long h = static_cast<long>(grad_out.dim(2)), w = static_cast<long>(grad_out.dim(3));
  const long r = static_cast<long>(k / 2);
  const std::size_t planes = grad_out.dim(0) * grad_out.dim(1);
  Tensor<T> gx(grad_out.shape());
  for (std::size_t p = 0; p < planes; ++p) {
    const T* g = grad_out.raw() + p * static_cast<std::size_t>(h * w);
    T* dst = gx.raw() + p * static_cast<std::size_t>(h * w);
    for (long i = 0; i < h; ++i) {
      const long i0 = std::max(0L, i - r), i1 = std::min(h - 1, i + r);
      for (long j = 0; j < w; ++j) {
        const long j0 = std::max(0L, j - r), j1 = std::min(w - 1, j + r);
        const T share = g[i * w + j] / static_cast<T>((i1 - i0 + 1) * (j1 - j0 + 1));
        for (long a = i0; a <= i1; ++a)
          for (long b = j0; b <= j1; ++b) dst[a * w + b] += share;
      }
    }
  }
  return gx;
}

namespace {
template <typename T>
T sigmoid_scalar(T t) {
  if (t >= T{0}) return T{1} / (T{1} + std::exp(-t));
  const T e = std::exp(t);
  return e / (T{1} + e);
}
}  // namespace

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
  Tensor<T> y(x.shape());
  const std::size_t n = x.numel();
  const T* s = x.raw();
  T* d = y.raw();
  switch (kind) {
    case Activation::relu:
      for (std::size_t i = 0; i < n; ++i) d[i] = s[i] > T{0} ? s[i] : T{0};
      break;
    case Activation::sigmoid:
      for (std::size_t i = 0; i < n; ++i) d[i] = sigmoid_scalar(s[i]);
      break;
    case Activation::gelu: {
      const T inv_sqrt2 = static_cast<T>(1.0 / std::sqrt(2.0));
      for (std::size_t i = 0; i < n; ++i) d[i] = T{0.5} * s[i] * (T{1} + std::erf(s[i] * inv_sqrt2));
      break;
    }
  }
  return y;
}

template <typename T>
Tensor<T> activation_grad(const Tensor<T>& x, const Tensor<T>& y, const Tensor<T>& grad_out,
                          Activation kind) {
  Tensor<T> gx(x.shape());
  const std::size_t n = x.numel();
  const T* xs = x.raw();
  const T* ys = y.raw();
  const T* g = grad_out.raw();
  T* d = gx.raw();
  switch (kind) {
    case Activation::relu:
      for (std::size_t i = 0; i < n; ++i) d[i] = xs[i] > T{0} ? g[i] : T{0};
      break;
    case Activation::sigmoid:
      for (std::size_t i = 0; i < n; ++i) d[i] = g[i] * ys[i] * (T{1} - ys[i]);
      break;
    case Activation::gelu: {
      const T inv_sqrt2 = static_cast<T>(1.0 / std::sqrt(2.0));
      const T inv_sqrt2pi = static_cast<T>(1.0 / std::sqrt(2.0 * M_PI));
      for (std::size_t i = 0; i < n; ++i) {
        const T cdf = T{0.5} * (T{1} + std::erf(xs[i] * inv_sqrt2));
        const T pdf = inv_sqrt2pi * std::exp(T{-0.5} * xs[i] * xs[i]);
        d[i] = g[i] * (cdf + xs[i] * pdf);
      }
      break;
    }
  }
  return gx;
}

namespace {
struct NormDims {
  std::size_t batch, channels, spatial;
};

template <typename T>
NormDims norm_dims(const Tensor<T>& x, const Tensor<T>& gamma) {
  if (x.rank() < 2) throw ShapeError("batchnorm expects [B,C,...], got " + shape_str(x.shape()));
  NormDims d{x.dim(0), x.dim(1), x.numel() / (x.dim(0) * x.dim(1))};
  if (gamma.numel() != d.channels) {
    throw ShapeError("batchnorm parameters have " + std::to_string(gamma.numel()) +
                     " channels but input " + shape_str(x.shape()) + " has " +
                     std::to_string(d.channels));
  }
  return d;
}
}  // namespace

template <typename T>
BatchNormTrainResult<T> batchnorm2d_train(const Tensor<T>& x, const Tensor<T>& gamma,
                                          const Tensor<T>& beta, Tensor<T>& running_mean,
                                          Tensor<T>& running_var, double momentum, double eps) {
  if (!(eps > 0)) throw ConfigError("batchnorm eps must be positive");
  const NormDims d = norm_dims(x, gamma);
  const std::size_t count = d.batch * d.spatial;
  BatchNormTrainResult<T> r{Tensor<T>(x.shape()), Tensor<T>(x.shape()),
                            std::vector<T>(d.channels)};
  for (std::size_t c = 0; c < d.channels; ++c) {
    T sum{0};
    for (std::size_t b = 0; b < d.batch; ++b) {
      const T* p = x.raw() + (b * d.channels + c) * d.spatial;
      for (std::size_t i = 0; i < d.spatial; ++i) sum += p[i];
    }
    const T mean = sum / static_cast<T>(count);
    T sq{0};
    for (std::size_t b = 0; b < d.batch; ++b) {
      const T* p = x.raw() + (b * d.channels + c) * d.spatial;
      for (std::size_t i = 0; i < d.spatial; ++i) sq += (p[i] - mean) * (p[i] - mean);
    }
    const T var = sq / static_cast<T>(count);
    const T inv_std = T{1} / std::sqrt(var + static_cast<T>(eps));
    r.inv_std[c] = inv_std;
    for (std::size_t b = 0; b < d.batch; ++b) {
      const std::size_t base = (b * d.channels + c) * d.spatial;
      for (std::size_t i = 0; i < d.spatial; ++i) {
        const T xh = (x[base + i] - mean) * inv_std;
        r.x_hat[base + i] = xh;
        r.y[base + i] = gamma[c] * xh + beta[c];
      }
    }
    const T m = static_cast<T>(momentum);
    const T unbiased = count > 1 ? sq / static_cast<T>(count - 1) : var;
    running_mean[c] = (T{1} - m) * running_mean[c] + m * mean;
    running_var[c] = (T{1} - m) * running_var[c] + m * unbiased;
  }
  return r;
}

template <typename T>
Tensor<T> batchnorm2d_eval(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                           const Tensor<T>& running_mean, const Tensor<T>& running_var,
                           double eps) {
  if (!(eps > 0)) throw ConfigError("batchnorm eps must be positive");
  const NormDims d = norm_dims(x, gamma);
  Tensor<T> y(x.shape());
  for (std::size_t c = 0; c < d.channels; ++c) {
    const T inv_std = T{1} / std::sqrt(running_var[c] + static_cast<T>(eps));
    for (std::size_t b = 0; b < d.batch; ++b) {
      const std::size_t base = (b * d.channels + c) * d.spatial;
      for (std::size_t i = 0; i < d.spatial; ++i) {
        y[base + i] = gamma[c] * ((x[base + i] - running_mean[c]) * inv_std) + beta[c];
      }
    }
  }
  return y;
}

template <typename T>
BatchNormGrads<T> batchnorm2d_train_grad(const Tensor<T>& grad_out, const Tensor<T>& x_hat,
                                         std::span<const T> inv_std, const Tensor<T>& gamma) {
  const NormDims d = norm_dims(x_hat, gamma);
  const T count = static_cast<T>(d.batch * d.spatial);
  BatchNormGrads<T> g{Tensor<T>(x_hat.shape()), Tensor<T>(gamma.shape()), Tensor<T>(gamma.shape())};
  for (std::size_t c = 0; c < d.channels; ++c) {
    T sum_g{0}, sum_gx{0};
    for (std::size_t b = 0; b < d.batch; ++b) {
      const std::size_t base = (b * d.channels + c) * d.spatial;
      for (std::size_t i = 0; i < d.spatial; ++i) {
        sum_g += grad_out[base + i];
        sum_gx += grad_out[base + i] * x_hat[base + i];
      }
    }
    g.gamma[c] = sum_gx;
    g.beta[c] = sum_g;
    const T k = gamma[c] * inv_std[c] / count;
    for (std::size_t b = 0; b < d.batch; ++b) {
      const std::size_t base = (b * d.channels + c) * d.spatial;
      for (std::size_t i = 0; i < d.spatial; ++i) {
        g.x[base + i] = k * (count * grad_out[base + i] - sum_g - x_hat[base + i] * sum_gx);
      }
    }
  }
  return g;
}

template <typename T>
BatchNormGrads<T> batchnorm2d_eval_grad(const Tensor<T>& grad_out, const Tensor<T>& x,
                                        const Tensor<T>& gamma, const Tensor<T>& running_mean,
                                        const Tensor<T>& running_var, double eps) {
  const NormDims d = norm_dims(x, gamma);
  BatchNormGrads<T> g{Tensor<T>(x.shape()), Tensor<T>(gamma.shape()), Tensor<T>(gamma.shape())};
  for (std::size_t c = 0; c < d.channels; ++c) {
    const T inv_std = T{1} / std::sqrt(running_var[c] + static_cast<T>(eps));
    T sum_g{0}, sum_gx{0};
    for (std::size_t b = 0; b < d.batch; ++b) {
      const std::size_t base = (b * d.channels + c) * d.spatial;
      for (std::size_t i = 0; i < d.spatial; ++i) {
        const T go = grad_out[base + i];
        sum_g += go;
        sum_gx += go * (x[base + i] - running_mean[c]) * inv_std;
        g.x[base + i] = go * gamma[c] * inv_std;
      }
    }
    g.gamma[c] = sum_gx;
    g.beta[c] = sum_g;
  }
  return g;
}

namespace {

struct MatmulDims {
  Shape batch;  // broadcast leading shape
  std::size_t m, k, p;
  std::vector<std::size_t> a_off, b_off;  // per batch entry, element offsets
};

MatmulDims matmul_dims(const Shape& a, const Shape& b) {
  if (a.size() < 2 || b.size() < 2) {
    throw ShapeError("matmul needs rank >= 2 operands, got " + shape_str(a) + " and " + shape_str(b));
  }
  MatmulDims d;
  d.m = a[a.size() - 2];
  d.k = a[a.size() - 1];
  d.p = b[b.size() - 1];
  if (b[b.size() - 2] != d.k) {
    throw ShapeError("matmul inner extents differ: " + shape_str(a) + " x " + shape_str(b));
  }
  const Shape la(a.begin(), a.end() - 2);
  const Shape lb(b.begin(), b.end() - 2);
  d.batch = broadcast_shapes(la.empty() ? Shape{1} : la, lb.empty() ? Shape{1} : lb);
  const Shape ea = la.empty() ? Shape{1} : la;
  const Shape eb = lb.empty() ? Shape{1} : lb;
  const auto sa = broadcast_strides(ea, d.batch);
  const auto sb = broadcast_strides(eb, d.batch);
  const std::size_t n = shape_numel(d.batch);
  d.a_off.resize(n);
  d.b_off.resize(n);
  std::vector<std::size_t> idx(d.batch.size(), 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t oa = 0, ob = 0;
    for (std::size_t ax = 0; ax < d.batch.size(); ++ax) {
      oa += idx[ax] * sa[ax];
      ob += idx[ax] * sb[ax];
    }
    d.a_off[i] = oa * d.m * d.k;
    d.b_off[i] = ob * d.k * d.p;
    for (long ax = static_cast<long>(idx.size()) - 1; ax >= 0; --ax) {
      const auto u = static_cast<std::size_t>(ax);
      if (++idx[u] < d.batch[u]) break;
      idx[u] = 0;
    }
  }
  return d;
}

template <typename T>
void gemm_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * p;
    for (std::size_t t = 0; t < k; ++t) {
      const T av = a[i * k + t];
      const T* brow = b + t * p;
      for (std::size_t j = 0; j < p; ++j) crow[j] += av * brow[j];
    }
  }
}

Shape matmul_out_shape(const Shape& a, const Shape& b, const MatmulDims& d) {
  Shape out;
  if (a.size() > 2 || b.size() > 2) out = d.batch;
  out.push_back(d.m);
  out.push_back(d.p);
  return out;
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const MatmulDims d = matmul_dims(a.shape(), b.shape());
  Tensor<T> y(matmul_out_shape(a.shape(), b.shape(), d));
  for (std::size_t i = 0; i < d.a_off.size(); ++i) {
    gemm_acc(a.raw() + d.a_off[i], b.raw() + d.b_off[i], y.raw() + i * d.m * d.p, d.m, d.k, d.p);
  }
  return y;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> matmul_grad(const Tensor<T>& a, const Tensor<T>& b,
                                            const Tensor<T>& grad_out) {
  const MatmulDims d = matmul_dims(a.shape(), b.shape());
  Tensor<T> ga(a.shape()), gb(b.shape());
  for (std::size_t i = 0; i < d.a_off.size(); ++i) {
    const T* g = grad_out.raw() + i * d.m * d.p;
    const T* ap = a.raw() + d.a_off[i];
    const T* bp = b.raw() + d.b_off[i];
    T* gap = ga.raw() + d.a_off[i];
    T* gbp = gb.raw() + d.b_off[i];
    // dA = G B^T
    for (std::size_t r = 0; r < d.m; ++r) {
      for (std::size_t t = 0; t < d.k; ++t) {
        T acc{0};
        const T* grow = g + r * d.p;
        const T* brow = bp + t * d.p;
        for (std::size_t j = 0; j < d.p; ++j) acc += grow[j] * brow[j];
        gap[r * d.k + t] += acc;
      }
    }
    // dB = A^T G
    for (std::size_t r = 0; r < d.m; ++r) {
      const T* grow = g + r * d.p;
      for (std::size_t t = 0; t < d.k; ++t) {
        const T av = ap[r * d.k + t];
        T* gbrow = gbp + t * d.p;
        for (std::size_t j = 0; j < d.p; ++j) gbrow[j] += av * grow[j];
      }
    }
  }
  return {std::move(ga), std::move(gb)};
}

template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& x) {
  if (x.rank() < 2) throw ShapeError("transpose needs rank >= 2, got " + shape_str(x.shape()));
  Shape out = x.shape();
  const std::size_t r = out.size();
  const std::size_t m = out[r - 2], n = out[r - 1];
  std::swap(out[r - 2], out[r - 1]);
  Tensor<T> y(out);
  const std::size_t batches = x.numel() / (m * n);
  for (std::size_t b = 0; b < batches; ++b) {
    const T* s = x.raw() + b * m * n;
    T* d = y.raw() + b * m * n;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) d[j * m + i] = s[i * n + j];
  }
  return y;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  Tensor<T> y(x.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t i = 0; i < s.extent; ++i) mx = std::max(mx, x[base + i * s.inner]);
      T sum{0};
      for (std::size_t i = 0; i < s.extent; ++i) {
        const T e = std::exp(x[base + i * s.inner] - mx);
        y[base + i * s.inner] = e;
        sum += e;
      }
      for (std::size_t i = 0; i < s.extent; ++i) y[base + i * s.inner] /= sum;
    }
  }
  return y;
}

template <typename T>
Tensor<T> softmax_grad(const Tensor<T>& y, const Tensor<T>& grad_out, int axis) {
  const AxisSplit s = split_axis(y.shape(), axis);
  Tensor<T> gx(y.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      T dot{0};
      for (std::size_t i = 0; i < s.extent; ++i) {
        dot += y[base + i * s.inner] * grad_out[base + i * s.inner];
      }
      for (std::size_t i = 0; i < s.extent; ++i) {
        const std::size_t j = base + i * s.inner;
        gx[j] = y[j] * (grad_out[j] - dot);
      }
    }
  }
  return gx;
}

template <typename T>
Tensor<T> elementwise(const Tensor<T>& a, const Tensor<T>& b, BinaryOp op) {
  if (a.shape() == b.shape()) {
    Tensor<T> y(a.shape());
    const std::size_t n = a.numel();
    const T* pa = a.raw();
    const T* pb = b.raw();
    T* py = y.raw();
    switch (op) {
      case BinaryOp::add: for (std::size_t i = 0; i < n; ++i) py[i] = pa[i] + pb[i]; break;
      case BinaryOp::sub: for (std::size_t i = 0; i < n; ++i) py[i] = pa[i] - pb[i]; break;
      case BinaryOp::mul: for (std::size_t i = 0; i < n; ++i) py[i] = pa[i] * pb[i]; break;
    }
    return y;
  }
  const Shape out = broadcast_shapes(a.shape(), b.shape());
  Tensor<T> y(out);
  const auto sa = broadcast_strides(a.shape(), out);
  const auto sb = broadcast_strides(b.shape(), out);
  const T* pa = a.raw();
  const T* pb = b.raw();
  T* py = y.raw();
  broadcast_walk(out, sa, sb,
                 [&](std::size_t oo, std::size_t oa, std::size_t ob, std::size_t inner,
                     std::size_t ia, std::size_t ib) {
                   for (std::size_t i = 0; i < inner; ++i) {
                     const T va = pa[oa + i * ia];
                     const T vb = pb[ob + i * ib];
                     py[oo + i] = op == BinaryOp::add ? va + vb
                                  : op == BinaryOp::sub ? va - vb
                                                        : va * vb;
                   }
                 });
  return y;
}

template <typename T>
Tensor<T> sum_to_shape(const Tensor<T>& g, const Shape& shape) {
  if (g.shape() == shape) return g;
  const Shape out = broadcast_shapes(g.shape(), shape);
  if (out != g.shape()) {
    throw ShapeError("cannot reduce " + shape_str(g.shape()) + " to " + shape_str(shape));
  }
  Tensor<T> r(shape);
  const auto sr = broadcast_strides(shape, out);
  const std::vector<std::size_t> sg = broadcast_strides(g.shape(), out);
  const T* pg = g.raw();
  T* pr = r.raw();
  broadcast_walk(out, sr, sg,
                 [&](std::size_t, std::size_t orr, std::size_t og, std::size_t inner,
                     std::size_t ir, std::size_t ig) {
                   for (std::size_t i = 0; i < inner; ++i) pr[orr + i * ir] += pg[og + i * ig];
                 });
  return r;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = x[i] * factor;
  return y;
}

template <typename T>
Tensor<T> sum_axis(const Tensor<T>& x, int axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  Shape out = x.shape();
  const int r = static_cast<int>(out.size());
  out[static_cast<std::size_t>(axis < 0 ? axis + r : axis)] = 1;
  Tensor<T> y(out);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      T acc{0};
      for (std::size_t i = 0; i < s.extent; ++i) acc += x[(o * s.extent + i) * s.inner + in];
      y[o * s.inner + in] = acc;
    }
  }
  return y;
}

template <typename T>
Tensor<T> expand_to(const Tensor<T>& x, const Shape& shape) {
  return elementwise(Tensor<T>(shape, T{0}), x, BinaryOp::add);
}

template <typename T>
T sum_all(const Tensor<T>& x) {
  T acc{0};
  for (T v : x.data()) acc += v;
  return acc;
}

template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x, int axis, double eps) {
  const AxisSplit s = split_axis(x.shape(), axis);
  Tensor<T> y(x.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      T sq{0};
      for (std::size_t i = 0; i < s.extent; ++i) sq += x[base + i * s.inner] * x[base + i * s.inner];
      const T norm = std::max(std::sqrt(sq), static_cast<T>(eps));
      for (std::size_t i = 0; i < s.extent; ++i) y[base + i * s.inner] = x[base + i * s.inner] / norm;
    }
  }
  return y;
}

template <typename T>
Tensor<T> l2_normalize_grad(const Tensor<T>& x, const Tensor<T>& grad_out, int axis, double eps) {
  const AxisSplit s = split_axis(x.shape(), axis);
  Tensor<T> gx(x.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      T sq{0};
      for (std::size_t i = 0; i < s.extent; ++i) sq += x[base + i * s.inner] * x[base + i * s.inner];
      const T norm = std::sqrt(sq);
      if (norm < static_cast<T>(eps)) {
        for (std::size_t i = 0; i < s.extent; ++i) {
          gx[base + i * s.inner] = grad_out[base + i * s.inner] / static_cast<T>(eps);
        }
        continue;
      }
      T dot{0};
      for (std::size_t i = 0; i < s.extent; ++i) dot += x[base + i * s.inner] * grad_out[base + i * s.inner];
      for (std::size_t i = 0; i < s.extent; ++i) {
        const std::size_t j = base + i * s.inner;
        gx[j] = (grad_out[j] - x[j] * dot / (norm * norm)) / norm;
      }
    }
  }
  return gx;
}

namespace {
template <typename T>
void check_logits(const Tensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy expects logits [B,K], got " + shape_str(logits.shape()));
  if (labels.size() != logits.dim(0)) {
    throw ShapeError("cross_entropy got " + std::to_string(labels.size()) + " labels for batch " +
                     std::to_string(logits.dim(0)));
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= logits.dim(1)) {
      throw ShapeError("label " + std::to_string(l) + " out of range for " +
                       std::to_string(logits.dim(1)) + " classes");
    }
  }
}
}  // namespace

template <typename T>
T cross_entropy(const Tensor<T>& logits, std::span<const int> labels, double smoothing) {
  check_logits(logits, labels);
  const std::size_t batch = logits.dim(0), k = logits.dim(1);
  const T off = static_cast<T>(smoothing / static_cast<double>(k));
  const T on = static_cast<T>(1.0 - smoothing) + off;
  T total{0};
  for (std::size_t b = 0; b < batch; ++b) {
    const T* row = logits.raw() + b * k;
    const T mx = *std::max_element(row, row + k);
    T sum{0};
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(row[j] - mx);
    const T lse = mx + std::log(sum);
    for (std::size_t j = 0; j < k; ++j) {
      const T q = static_cast<int>(j) == labels[b] ? on : off;
      total -= q * (row[j] - lse);
    }
  }
  return total / static_cast<T>(batch);
}

template <typename T>
Tensor<T> cross_entropy_grad(const Tensor<T>& logits, std::span<const int> labels,
                             double smoothing) {
  check_logits(logits, labels);
  const std::size_t batch = logits.dim(0), k = logits.dim(1);
  const T off = static_cast<T>(smoothing / static_cast<double>(k));
  const T on = static_cast<T>(1.0 - smoothing) + off;
  Tensor<T> g(logits.shape());
  for (std::size_t b = 0; b < batch; ++b) {
    const T* row = logits.raw() + b * k;
    const T mx = *std::max_element(row, row + k);
    T sum{0};
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(row[j] - mx);
    for (std::size_t j = 0; j < k; ++j) {
      const T p = std::exp(row[j] - mx) / sum;
      const T q = static_cast<int>(j) == labels[b] ? on : off;
      g[b * k + j] = (p - q) / static_cast<T>(batch);
    }
  }
  return g;
}

template <typename T>
Tensor<T> roll2d(const Tensor<T>& x, long dh, long dw) {
  if (x.rank() < 2) throw ShapeError("roll2d needs rank >= 2");
  const long h = static_cast<long>(x.dim(-2)), w = static_cast<long>(x.dim(-1));
  const std::size_t planes = x.numel() / static_cast<std::size_t>(h * w);
  Tensor<T> y(x.shape());
  for (std::size_t p = 0; p < planes; ++p) {
    const T* s = x.raw() + p * static_cast<std::size_t>(h * w);
    T* d = y.raw() + p * static_cast<std::size_t>(h * w);
    for (long i = 0; i < h; ++i)
      for (long j = 0; j < w; ++j) d[wrap(i + dh, h) * w + wrap(j + dw, w)] = s[i * w + j];
  }
  return y;
}

#define CASVIT_INSTANTIATE_KERNELS(T)                                                            \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*, const ConvSpec&); \
  template Tensor<T> conv2d_grad_input(const Tensor<T>&, const Tensor<T>&, const ConvSpec&,        \
                                       const Shape&);                                            \
  template Tensor<T> conv2d_grad_weight(const Tensor<T>&, const Tensor<T>&, const ConvSpec&,       \
                                        const Shape&);                                           \
  template Tensor<T> conv2d_grad_bias(const Tensor<T>&);                                         \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                          \
  template Tensor<T> global_avg_pool_grad(const Tensor<T>&, const Shape&);                       \
  template Tensor<T> avg_pool2d(const Tensor<T>&, std::size_t);                                  \
  template Tensor<T> avg_pool2d_grad(const Tensor<T>&, std::size_t);                             \
  template Tensor<T> activation(const Tensor<T>&, Activation);                                   \
  template Tensor<T> activation_grad(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,       \
                                     Activation);                                                \
  template BatchNormTrainResult<T> batchnorm2d_train(const Tensor<T>&, const Tensor<T>&,         \
                                                     const Tensor<T>&, Tensor<T>&, Tensor<T>&,   \
                                                     double, double);                            \
  template Tensor<T> batchnorm2d_eval(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,      \
                                      const Tensor<T>&, const Tensor<T>&, double);               \
  template BatchNormGrads<T> batchnorm2d_train_grad(const Tensor<T>&, const Tensor<T>&,          \
                                                    std::span<const T>, const Tensor<T>&);       \
  template BatchNormGrads<T> batchnorm2d_eval_grad(const Tensor<T>&, const Tensor<T>&,           \
                                                   const Tensor<T>&, const Tensor<T>&,           \
                                                   const Tensor<T>&, double);                    \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                 \
  template std::pair<Tensor<T>, Tensor<T>> matmul_grad(const Tensor<T>&, const Tensor<T>&,       \
                                                       const Tensor<T>&);                        \
  template Tensor<T> transpose_last2(const Tensor<T>&);                                          \
  template Tensor<T> softmax(const Tensor<T>&, int);                                             \
  template Tensor<T> softmax_grad(const Tensor<T>&, const Tensor<T>&, int);                      \
  template Tensor<T> elementwise(const Tensor<T>&, const Tensor<T>&, BinaryOp);                  \
  template Tensor<T> sum_to_shape(const Tensor<T>&, const Shape&);                               \
  template Tensor<T> scale(const Tensor<T>&, T);                                                 \
  template Tensor<T> sum_axis(const Tensor<T>&, int);                                            \
  template Tensor<T> expand_to(const Tensor<T>&, const Shape&);                                  \
  template T sum_all(const Tensor<T>&);                                                          \
  template Tensor<T> l2_normalize(const Tensor<T>&, int, double);                                \
  template Tensor<T> l2_normalize_grad(const Tensor<T>&, const Tensor<T>&, int, double);         \
  template T cross_entropy(const Tensor<T>&, std::span<const int>, double);                      \
  template Tensor<T> cross_entropy_grad(const Tensor<T>&, std::span<const int>, double);         \
  template Tensor<T> roll2d(const Tensor<T>&, long, long);

CASVIT_INSTANTIATE_KERNELS(float)
CASVIT_INSTANTIATE_KERNELS(double)

#undef CASVIT_INSTANTIATE_KERNELS

}  // namespace kernels
}  // namespace casvit
