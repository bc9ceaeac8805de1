#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "sde/tensor.hpp"

namespace sde {

namespace detail {

// Reductions accumulate in double regardless of the storage type; per output
// element the term order is fixed, which keeps kernels bitwise deterministic
// under any thread count.
using Acc = double;

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b,
                      const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename T>
void check_rank(const Tensor<T>& a, int rank, const char* op) {
  if (a.rank() != rank)
    throw ShapeError(std::string(op) + ": expected rank " +
                     std::to_string(rank) + " tensor, got shape " +
                     shape_str(a.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "add");
  auto an = a.node(), bn = b.node();
  auto out = detail::make_op<T>(
      a.shape(), {an, bn}, [an, bn](detail::Node<T>& o) {
        if (an->requires_grad) {
          an->ensure_grad();
          for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] += o.grad[i];
        }
      });
  auto& v = out.values();
  for (size_t i = 0; i < v.size(); ++i) v[i] = an->value[i] + bn->value[i];
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "sub");
  auto an = a.node(), bn = b.node();
  auto out = detail::make_op<T>(
      a.shape(), {an, bn}, [an, bn](detail::Node<T>& o) {
        if (an->requires_grad) {
          an->ensure_grad();
          for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] -= o.grad[i];
        }
      });
  auto& v = out.values();
  for (size_t i = 0; i < v.size(); ++i) v[i] = an->value[i] - bn->value[i];
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "mul");
  auto an = a.node(), bn = b.node();
  auto out = detail::make_op<T>(
      a.shape(), {an, bn}, [an, bn](detail::Node<T>& o) {
        if (an->requires_grad) {
          an->ensure_grad();
          for (size_t i = 0; i < o.grad.size(); ++i)
            an->grad[i] += o.grad[i] * bn->value[i];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (size_t i = 0; i < o.grad.size(); ++i)
            bn->grad[i] += o.grad[i] * an->value[i];
        }
      });
  auto& v = out.values();
  for (size_t i = 0; i < v.size(); ++i) v[i] = an->value[i] * bn->value[i];
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, double c) {
  auto an = a.node();
  auto out = detail::make_op<T>(
      a.shape(), {an}, [an, c](detail::Node<T>& o) {
        an->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i)
          an->grad[i] += o.grad[i] * static_cast<T>(c);
      });
  auto& v = out.values();
  for (size_t i = 0; i < v.size(); ++i)
    v[i] = an->value[i] * static_cast<T>(c);
  return out;
}

namespace detail {

// Generic unary op: fwd(x) and dfdx(x, y).
template <typename T, typename FwdFn, typename GradFn>
Tensor<T> unary_op(const Tensor<T>& a, FwdFn fwd, GradFn dfdx) {
  auto an = a.node();
  auto out = detail::make_op<T>(
      a.shape(), {an}, [an, dfdx](detail::Node<T>& o) {
        an->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i)
          an->grad[i] += o.grad[i] * dfdx(an->value[i], o.value[i]);
      });
  auto& v = out.values();
  for (size_t i = 0; i < v.size(); ++i) v[i] = fwd(an->value[i]);
  return out;
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace detail

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::unary_op(
      a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> relu6(const Tensor<T>& a) {
  return detail::unary_op(
      a, [](T x) { return std::min(std::max(x, T(0)), T(6)); },
      [](T x, T) { return (x > T(0) && x < T(6)) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::unary_op(
      a, [](T x) { return detail::stable_sigmoid(x); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> tanh_op(const Tensor<T>& a) {
  return detail::unary_op(
      a, [](T x) { return std::tanh(x); },
      [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
  return detail::unary_op(
      a, [](T x) { return x * detail::stable_sigmoid(x); },
      [](T x, T) {
        T s = detail::stable_sigmoid(x);
        return s * (T(1) + x * (T(1) - s));
      });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  constexpr double kInvSqrt2Pi = 0.3989422804014326779;
  return detail::unary_op(
      a,
      [](T x) {
        return static_cast<T>(0.5 * x * (1.0 + std::erf(x * kInvSqrt2)));
      },
      [](T x, T) {
        double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        double pdf = kInvSqrt2Pi * std::exp(-0.5 * double(x) * double(x));
        return static_cast<T>(cdf + x * pdf);
      });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  auto an = a.node();
  auto out = detail::make_op<T>(
      {1}, {an}, [an](detail::Node<T>& o) {
        an->ensure_grad();
        for (auto& g : an->grad) g += o.grad[0];
      });
  detail::Acc acc = 0;
  for (T v : an->value) acc += v;
  out.values()[0] = static_cast<T>(acc);
  return out;
}

template <typename T>
Tensor<T> reduce_max(const Tensor<T>& a) {
  auto an = a.node();
  if (a.numel() == 0) throw ShapeError("reduce_max: empty tensor");
  size_t arg = 0;
  for (size_t i = 1; i < an->value.size(); ++i)
    if (an->value[i] > an->value[arg]) arg = i;
  auto out = detail::make_op<T>(
      {1}, {an}, [an, arg](detail::Node<T>& o) {
        an->ensure_grad();
        an->grad[arg] += o.grad[0];
      });
  out.values()[0] = an->value[arg];
  return out;
}

template <typename T>
Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "maximum");
  auto an = a.node(), bn = b.node();
  auto out = detail::make_op<T>(
      a.shape(), {an, bn}, [an, bn](detail::Node<T>& o) {
        for (size_t i = 0; i < o.grad.size(); ++i) {
          bool take_a = an->value[i] >= bn->value[i];
          if (take_a && an->requires_grad) {
            an->ensure_grad();
            an->grad[i] += o.grad[i];
          } else if (!take_a && bn->requires_grad) {
            bn->ensure_grad();
            bn->grad[i] += o.grad[i];
          }
        }
      });
  auto& v = out.values();
  for (size_t i = 0; i < v.size(); ++i)
    v[i] = std::max(an->value[i], bn->value[i]);
  return out;
}

// ---------------------------------------------------------------------------
// shape manipulation
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(shape));
  auto an = a.node();
  auto out = detail::make_op<T>(
      std::move(shape), {an}, [an](detail::Node<T>& o) {
        an->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
      });
  out.values() = an->value;
  return out;
}

template <typename T>
Tensor<T> transpose2(const Tensor<T>& a) {
  detail::check_rank(a, 2, "transpose2");
  const int m = a.dim(0), n = a.dim(1);
  auto an = a.node();
  auto out = detail::make_op<T>(
      {n, m}, {an}, [an, m, n](detail::Node<T>& o) {
        an->ensure_grad();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j)
            an->grad[size_t(i) * n + j] += o.grad[size_t(j) * m + i];
      });
  auto& v = out.values();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      v[size_t(j) * m + i] = an->value[size_t(i) * n + j];
  return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis < 0 || axis >= static_cast<int>(s0.size()))
    throw ShapeError("concat: invalid axis " + std::to_string(axis) +
                     " for shape " + shape_str(s0));
  Shape out_shape = s0;
  int total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != s0.size())
      throw ShapeError("concat: rank mismatch " + shape_str(s0) + " vs " +
                       shape_str(s));
    for (size_t d = 0; d < s.size(); ++d)
      if (static_cast<int>(d) != axis && s[d] != s0[d])
        throw ShapeError("concat: shape mismatch " + shape_str(s0) + " vs " +
                         shape_str(s));
    total += s[axis];
  }
  out_shape[axis] = total;

  size_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= size_t(s0[d]);
  for (size_t d = size_t(axis) + 1; d < s0.size(); ++d) inner *= size_t(s0[d]);

  std::vector<typename Tensor<T>::NodePtr> nodes;
  std::vector<int> lens;
  for (const auto& p : parts) {
    nodes.push_back(p.node());
    lens.push_back(p.shape()[axis]);
  }
  auto out = detail::make_op<T>(
      out_shape, {nodes.begin(), nodes.end()},
      [nodes, lens, outer, inner, total](detail::Node<T>& o) {
        int off = 0;
        for (size_t t = 0; t < nodes.size(); ++t) {
          auto& n = nodes[t];
          const int len = lens[t];
          if (n->requires_grad) {
            n->ensure_grad();
            for (size_t ou = 0; ou < outer; ++ou)
              for (int k = 0; k < len; ++k)
                for (size_t in = 0; in < inner; ++in)
                  n->grad[(ou * len + k) * inner + in] +=
                      o.grad[(ou * size_t(total) + size_t(off + k)) * inner +
                             in];
          }
          off += len;
        }
      });
  auto& v = out.values();
  int off = 0;
  for (size_t t = 0; t < nodes.size(); ++t) {
    const auto& src = nodes[t]->value;
    const int len = lens[t];
    for (size_t ou = 0; ou < outer; ++ou)
      for (int k = 0; k < len; ++k)
        for (size_t in = 0; in < inner; ++in)
          v[(ou * size_t(total) + size_t(off + k)) * inner + in] =
              src[(ou * len + k) * inner + in];
    off += len;
  }
  return out;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, int axis, int start, int len) {
  const Shape& s = a.shape();
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    throw ShapeError("slice: invalid axis " + std::to_string(axis) +
                     " for shape " + shape_str(s));
  if (start < 0 || len <= 0 || start + len > s[axis])
    throw ShapeError("slice: range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") out of bounds for " +
                     shape_str(s));
  Shape out_shape = s;
  out_shape[axis] = len;
  size_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= size_t(s[d]);
  for (size_t d = size_t(axis) + 1; d < s.size(); ++d) inner *= size_t(s[d]);
  const int full = s[axis];

  auto an = a.node();
  auto out = detail::make_op<T>(
      out_shape, {an},
      [an, outer, inner, full, start, len](detail::Node<T>& o) {
        an->ensure_grad();
        for (size_t ou = 0; ou < outer; ++ou)
          for (int k = 0; k < len; ++k)
            for (size_t in = 0; in < inner; ++in)
              an->grad[(ou * size_t(full) + size_t(start + k)) * inner + in] +=
                  o.grad[(ou * size_t(len) + size_t(k)) * inner + in];
      });
  auto& v = out.values();
  for (size_t ou = 0; ou < outer; ++ou)
    for (int k = 0; k < len; ++k)
      for (size_t in = 0; in < inner; ++in)
        v[(ou * size_t(len) + size_t(k)) * inner + in] =
            an->value[(ou * size_t(full) + size_t(start + k)) * inner + in];
  return out;
}

// [C,H,W] -> [H*W, C] row-major token matrix.
template <typename T>
Tensor<T> chw_to_tokens(const Tensor<T>& x) {
  detail::check_rank(x, 3, "chw_to_tokens");
  const int c = x.dim(0);
  return transpose2(reshape(x, {c, x.dim(1) * x.dim(2)}));
}

template <typename T>
Tensor<T> tokens_to_chw(const Tensor<T>& t, int h, int w) {
  detail::check_rank(t, 2, "tokens_to_chw");
  if (t.dim(0) != h * w)
    throw ShapeError("tokens_to_chw: " + std::to_string(t.dim(0)) +
                     " tokens cannot fill " + std::to_string(h) + "x" +
                     std::to_string(w));
  return reshape(transpose2(t), {t.dim(1), h, w});
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_rank(a, 2, "matmul");
  detail::check_rank(b, 2, "matmul");
  if (a.dim(1) != b.dim(0))
    throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto an = a.node(), bn = b.node();
  auto out = detail::make_op<T>(
      {m, n}, {an, bn}, [an, bn, m, k, n](detail::Node<T>& o) {
        if (an->requires_grad) {
          an->ensure_grad();
          // dA = dC * B^T
          for (int i = 0; i < m; ++i)
            for (int t = 0; t < k; ++t) {
              detail::Acc acc = 0;
              for (int j = 0; j < n; ++j)
                acc += double(o.grad[size_t(i) * n + j]) *
                       double(bn->value[size_t(t) * n + j]);
              an->grad[size_t(i) * k + t] += static_cast<T>(acc);
            }
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          // dB = A^T * dC
          for (int t = 0; t < k; ++t)
            for (int j = 0; j < n; ++j) {
              detail::Acc acc = 0;
              for (int i = 0; i < m; ++i)
                acc += double(an->value[size_t(i) * k + t]) *
                       double(o.grad[size_t(i) * n + j]);
              bn->grad[size_t(t) * n + j] += static_cast<T>(acc);
            }
        }
      });
  auto* ov = out.values().data();
  const T* av = an->value.data();
  const T* bv = bn->value.data();
  parallel_for(m, [&](int64_t r0, int64_t r1) {
    for (int64_t i = r0; i < r1; ++i)
      for (int j = 0; j < n; ++j) {
        detail::Acc acc = 0;
        for (int t = 0; t < k; ++t)
          acc += double(av[size_t(i) * k + t]) * double(bv[size_t(t) * n + j]);
        ov[size_t(i) * n + j] = static_cast<T>(acc);
      }
  });
  return out;
}

// a[m,k] * b[n,k]^T -> [m,n]; avoids materializing transposes in attention.
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_rank(a, 2, "matmul_nt");
  detail::check_rank(b, 2, "matmul_nt");
  if (a.dim(1) != b.dim(1))
    throw ShapeError("matmul_nt: inner extents differ, " +
                     shape_str(a.shape()) + " x " + shape_str(b.shape()) +
                     "^T");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  auto an = a.node(), bn = b.node();
  auto out = detail::make_op<T>(
      {m, n}, {an, bn}, [an, bn, m, k, n](detail::Node<T>& o) {
        if (an->requires_grad) {
          an->ensure_grad();
          // dA = dC * B
          for (int i = 0; i < m; ++i)
            for (int t = 0; t < k; ++t) {
              detail::Acc acc = 0;
              for (int j = 0; j < n; ++j)
                acc += double(o.grad[size_t(i) * n + j]) *
                       double(bn->value[size_t(j) * k + t]);
              an->grad[size_t(i) * k + t] += static_cast<T>(acc);
            }
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          // dB = dC^T * A
          for (int j = 0; j < n; ++j)
            for (int t = 0; t < k; ++t) {
              detail::Acc acc = 0;
              for (int i = 0; i < m; ++i)
                acc += double(o.grad[size_t(i) * n + j]) *
                       double(an->value[size_t(i) * k + t]);
              bn->grad[size_t(j) * k + t] += static_cast<T>(acc);
            }
        }
      });
  auto* ov = out.values().data();
  const T* av = an->value.data();
  const T* bv = bn->value.data();
  parallel_for(m, [&](int64_t r0, int64_t r1) {
    for (int64_t i = r0; i < r1; ++i)
      for (int j = 0; j < n; ++j) {
        detail::Acc acc = 0;
        for (int t = 0; t < k; ++t)
          acc += double(av[size_t(i) * k + t]) * double(bv[size_t(j) * k + t]);
        ov[size_t(i) * n + j] = static_cast<T>(acc);
      }
  });
  return out;
}

// ---------------------------------------------------------------------------
// convolutions
// ---------------------------------------------------------------------------

namespace detail {

inline int conv_out_extent(int in, int k, int stride, int pad,
                           const char* op) {
  if (k > in + 2 * pad)
    throw ShapeError(std::string(op) + ": kernel extent " + std::to_string(k) +
                     " exceeds padded input " + std::to_string(in + 2 * pad));
  return (in + 2 * pad - k) / stride + 1;
}

}  // namespace detail

// Cross-correlation of [Cin,H,W] with [Cout,Cin,kh,kw], zero padding.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad) {
  detail::check_rank(x, 3, "conv2d");
  detail::check_rank(w, 4, "conv2d");
  if (w.dim(1) != x.dim(0))
    throw ShapeError("conv2d: input channels " + shape_str(x.shape()) +
                     " do not match weight " + shape_str(w.shape()));
  if (stride < 1 || pad < 0)
    throw ShapeError("conv2d: invalid stride/pad " + std::to_string(stride) +
                     "/" + std::to_string(pad));
  const int ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int ho = detail::conv_out_extent(h, kh, stride, pad, "conv2d");
  const int wo = detail::conv_out_extent(wd, kw, stride, pad, "conv2d");

  auto xn = x.node(), wn = w.node();
  auto out = detail::make_op<T>(
      {co, ho, wo}, {xn, wn},
      [xn, wn, ci, h, wd, co, kh, kw, ho, wo, stride,
       pad](detail::Node<T>& o) {
        const bool gx = xn->requires_grad, gw = wn->requires_grad;
        if (gx) xn->ensure_grad();
        if (gw) wn->ensure_grad();
        for (int oc = 0; oc < co; ++oc)
          for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
              const T g =
                  o.grad[(size_t(oc) * ho + oy) * wo + ox];
              if (g == T(0)) continue;
              const int iy0 = oy * stride - pad, ix0 = ox * stride - pad;
              for (int ic = 0; ic < ci; ++ic)
                for (int ky = 0; ky < kh; ++ky) {
                  const int iy = iy0 + ky;
                  if (iy < 0 || iy >= h) continue;
                  for (int kx = 0; kx < kw; ++kx) {
                    const int ix = ix0 + kx;
                    if (ix < 0 || ix >= wd) continue;
                    const size_t xi = (size_t(ic) * h + iy) * wd + ix;
                    const size_t wi =
                        ((size_t(oc) * ci + ic) * kh + ky) * kw + kx;
                    if (gx) xn->grad[xi] += g * wn->value[wi];
                    if (gw) wn->grad[wi] += g * xn->value[xi];
                  }
                }
            }
      });
  T* ov = out.values().data();
  const T* xv = xn->value.data();
  const T* wv = wn->value.data();
  parallel_for(int64_t(co) * ho, [&](int64_t r0, int64_t r1) {
    for (int64_t r = r0; r < r1; ++r) {
      const int oc = static_cast<int>(r / ho);
      const int oy = static_cast<int>(r % ho);
      const int iy0 = oy * stride - pad;
      for (int ox = 0; ox < wo; ++ox) {
        const int ix0 = ox * stride - pad;
        detail::Acc acc = 0;
        for (int ic = 0; ic < ci; ++ic) {
          const T* xc = xv + size_t(ic) * h * wd;
          const T* wc = wv + (size_t(oc) * ci + ic) * kh * kw;
          for (int ky = 0; ky < kh; ++ky) {
            const int iy = iy0 + ky;
            if (iy < 0 || iy >= h) continue;
            const T* xrow = xc + size_t(iy) * wd;
            const T* wrow = wc + size_t(ky) * kw;
            for (int kx = 0; kx < kw; ++kx) {
              const int ix = ix0 + kx;
              if (ix < 0 || ix >= wd) continue;
              acc += double(xrow[ix]) * double(wrow[kx]);
            }
          }
        }
        ov[(size_t(oc) * ho + oy) * wo + ox] = static_cast<T>(acc);
      }
    }
  });
  return out;
}

// Per-channel convolution of [C,H,W] with [C,kh,kw]; no cross-channel mixing.
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& w, int stride,
                           int pad) {
  detail::check_rank(x, 3, "depthwise_conv2d");
  detail::check_rank(w, 3, "depthwise_conv2d");
  if (w.dim(0) != x.dim(0))
    throw ShapeError("depthwise_conv2d: channel mismatch " +
                     shape_str(x.shape()) + " vs " + shape_str(w.shape()));
  const int c = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int kh = w.dim(1), kw = w.dim(2);
  const int ho = detail::conv_out_extent(h, kh, stride, pad, "depthwise_conv2d");
  const int wo = detail::conv_out_extent(wd, kw, stride, pad, "depthwise_conv2d");

  auto xn = x.node(), wn = w.node();
  auto out = detail::make_op<T>(
      {c, ho, wo}, {xn, wn},
      [xn, wn, c, h, wd, kh, kw, ho, wo, stride, pad](detail::Node<T>& o) {
        const bool gx = xn->requires_grad, gw = wn->requires_grad;
        if (gx) xn->ensure_grad();
        if (gw) wn->ensure_grad();
        for (int ch = 0; ch < c; ++ch)
          for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
              const T g = o.grad[(size_t(ch) * ho + oy) * wo + ox];
              if (g == T(0)) continue;
              const int iy0 = oy * stride - pad, ix0 = ox * stride - pad;
              for (int ky = 0; ky < kh; ++ky) {
                const int iy = iy0 + ky;
                if (iy < 0 || iy >= h) continue;
                for (int kx = 0; kx < kw; ++kx) {
                  const int ix = ix0 + kx;
                  if (ix < 0 || ix >= wd) continue;
                  const size_t xi = (size_t(ch) * h + iy) * wd + ix;
                  const size_t wi = (size_t(ch) * kh + ky) * kw + kx;
                  if (gx) xn->grad[xi] += g * wn->value[wi];
                  if (gw) wn->grad[wi] += g * xn->value[xi];
                }
              }
            }
      });
  T* ov = out.values().data();
  const T* xv = xn->value.data();
  const T* wv = wn->value.data();
  parallel_for(int64_t(c) * ho, [&](int64_t r0, int64_t r1) {
    for (int64_t r = r0; r < r1; ++r) {
      const int ch = static_cast<int>(r / ho);
      const int oy = static_cast<int>(r % ho);
      const int iy0 = oy * stride - pad;
      for (int ox = 0; ox < wo; ++ox) {
        const int ix0 = ox * stride - pad;
        detail::Acc acc = 0;
        for (int ky = 0; ky < kh; ++ky) {
          const int iy = iy0 + ky;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < kw; ++kx) {
            const int ix = ix0 + kx;
            if (ix < 0 || ix >= wd) continue;
            acc += double(xv[(size_t(ch) * h + iy) * wd + ix]) *
                   double(wv[(size_t(ch) * kh + ky) * kw + kx]);
          }
        }
        ov[(size_t(ch) * ho + oy) * wo + ox] = static_cast<T>(acc);
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// broadcasts over [C,H,W]
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add_bias_channels(const Tensor<T>& x, const Tensor<T>& b) {
  detail::check_rank(x, 3, "add_bias_channels");
  detail::check_rank(b, 1, "add_bias_channels");
  if (b.dim(0) != x.dim(0))
    throw ShapeError("add_bias_channels: " + shape_str(x.shape()) + " vs " +
                     shape_str(b.shape()));
  const int c = x.dim(0);
  const size_t hw = size_t(x.dim(1)) * x.dim(2);
  auto xn = x.node(), bn = b.node();
  auto out = detail::make_op<T>(
      x.shape(), {xn, bn}, [xn, bn, c, hw](detail::Node<T>& o) {
        if (xn->requires_grad) {
          xn->ensure_grad();
          for (size_t i = 0; i < o.grad.size(); ++i) xn->grad[i] += o.grad[i];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (int ch = 0; ch < c; ++ch) {
            detail::Acc acc = 0;
            for (size_t i = 0; i < hw; ++i) acc += o.grad[size_t(ch) * hw + i];
            bn->grad[ch] += static_cast<T>(acc);
          }
        }
      });
  auto& v = out.values();
  for (int ch = 0; ch < c; ++ch)
    for (size_t i = 0; i < hw; ++i)
      v[size_t(ch) * hw + i] = xn->value[size_t(ch) * hw + i] + bn->value[ch];
  return out;
}

template <typename T>
Tensor<T> add_bias_cols(const Tensor<T>& x, const Tensor<T>& b) {
  detail::check_rank(x, 2, "add_bias_cols");
  detail::check_rank(b, 1, "add_bias_cols");
  if (b.dim(0) != x.dim(1))
    throw ShapeError("add_bias_cols: " + shape_str(x.shape()) + " vs " +
                     shape_str(b.shape()));
  const int n = x.dim(0), c = x.dim(1);
  auto xn = x.node(), bn = b.node();
  auto out = detail::make_op<T>(
      x.shape(), {xn, bn}, [xn, bn, n, c](detail::Node<T>& o) {
        if (xn->requires_grad) {
          xn->ensure_grad();
          for (size_t i = 0; i < o.grad.size(); ++i) xn->grad[i] += o.grad[i];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (int j = 0; j < c; ++j) {
            detail::Acc acc = 0;
            for (int i = 0; i < n; ++i) acc += o.grad[size_t(i) * c + j];
            bn->grad[j] += static_cast<T>(acc);
          }
        }
      });
  auto& v = out.values();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j)
      v[size_t(i) * c + j] = xn->value[size_t(i) * c + j] + bn->value[j];
  return out;
}

// y = x * s[c] + t[c]; inference-form batch norm collapses to this.
template <typename T>
Tensor<T> affine_channels(const Tensor<T>& x, const Tensor<T>& s,
                          const Tensor<T>& t) {
  detail::check_rank(x, 3, "affine_channels");
  if (s.shape() != Shape{x.dim(0)} || t.shape() != Shape{x.dim(0)})
    throw ShapeError("affine_channels: params " + shape_str(s.shape()) + "/" +
                     shape_str(t.shape()) + " vs input " +
                     shape_str(x.shape()));
  const int c = x.dim(0);
  const size_t hw = size_t(x.dim(1)) * x.dim(2);
  auto xn = x.node(), sn = s.node(), tn = t.node();
  auto out = detail::make_op<T>(
      x.shape(), {xn, sn, tn}, [xn, sn, tn, c, hw](detail::Node<T>& o) {
        if (xn->requires_grad) {
          xn->ensure_grad();
          for (int ch = 0; ch < c; ++ch)
            for (size_t i = 0; i < hw; ++i)
              xn->grad[size_t(ch) * hw + i] +=
                  o.grad[size_t(ch) * hw + i] * sn->value[ch];
        }
        if (sn->requires_grad) {
          sn->ensure_grad();
          for (int ch = 0; ch < c; ++ch) {
            detail::Acc acc = 0;
            for (size_t i = 0; i < hw; ++i)
              acc += double(o.grad[size_t(ch) * hw + i]) *
                     double(xn->value[size_t(ch) * hw + i]);
            sn->grad[ch] += static_cast<T>(acc);
          }
        }
        if (tn->requires_grad) {
          tn->ensure_grad();
          for (int ch = 0; ch < c; ++ch) {
            detail::Acc acc = 0;
            for (size_t i = 0; i < hw; ++i) acc += o.grad[size_t(ch) * hw + i];
            tn->grad[ch] += static_cast<T>(acc);
          }
        }
      });
  auto& v = out.values();
  for (int ch = 0; ch < c; ++ch)
    for (size_t i = 0; i < hw; ++i)
      v[size_t(ch) * hw + i] =
          xn->value[size_t(ch) * hw + i] * sn->value[ch] + tn->value[ch];
  return out;
}

// Per-channel spatial standardization with affine, eps under the root.
template <typename T>
Tensor<T> standardize_channels(const Tensor<T>& x, const Tensor<T>& gamma,
                               const Tensor<T>& beta, double eps = 1e-5) {
  detail::check_rank(x, 3, "standardize_channels");
  if (gamma.shape() != Shape{x.dim(0)} || beta.shape() != Shape{x.dim(0)})
    throw ShapeError("standardize_channels: params vs input " +
                     shape_str(x.shape()));
  const int c = x.dim(0);
  const size_t hw = size_t(x.dim(1)) * x.dim(2);
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();

  // Forward stats are recomputed in the closure from stored values.
  auto stats = [hw](const std::vector<T>& vals, int ch) {
    detail::Acc m = 0;
    for (size_t i = 0; i < hw; ++i) m += vals[size_t(ch) * hw + i];
    m /= double(hw);
    detail::Acc var = 0;
    for (size_t i = 0; i < hw; ++i) {
      double d = double(vals[size_t(ch) * hw + i]) - m;
      var += d * d;
    }
    var /= double(hw);
    return std::pair<double, double>(m, var);
  };

  auto out = detail::make_op<T>(
      x.shape(), {xn, gn, bn},
      [xn, gn, bn, c, hw, eps, stats](detail::Node<T>& o) {
        const bool gx = xn->requires_grad;
        if (gx) xn->ensure_grad();
        if (gn->requires_grad) gn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        for (int ch = 0; ch < c; ++ch) {
          auto [m, var] = stats(xn->value, ch);
          const double inv = 1.0 / std::sqrt(var + eps);
          detail::Acc gsum = 0, gxhat = 0;
          for (size_t i = 0; i < hw; ++i) {
            const size_t idx = size_t(ch) * hw + i;
            const double xhat = (double(xn->value[idx]) - m) * inv;
            const double g = o.grad[idx];
            gsum += g;
            gxhat += g * xhat;
          }
          if (bn->requires_grad) bn->grad[ch] += static_cast<T>(gsum);
          if (gn->requires_grad) gn->grad[ch] += static_cast<T>(gxhat);
          if (gx) {
            const double gam = gn->value[ch];
            for (size_t i = 0; i < hw; ++i) {
              const size_t idx = size_t(ch) * hw + i;
              const double xhat = (double(xn->value[idx]) - m) * inv;
              const double g = o.grad[idx];
              xn->grad[idx] += static_cast<T>(
                  gam * inv *
                  (g - gsum / double(hw) - xhat * gxhat / double(hw)));
            }
          }
        }
      });
  auto& v = out.values();
  for (int ch = 0; ch < c; ++ch) {
    auto [m, var] = stats(xn->value, ch);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (size_t i = 0; i < hw; ++i) {
      const size_t idx = size_t(ch) * hw + i;
      v[idx] = static_cast<T>((double(xn->value[idx]) - m) * inv *
                                  double(gn->value[ch]) +
                              double(bn->value[ch]));
    }
  }
  return out;
}

// Gate maps for channel-grouped attention: broadcast multiplies along one axis.
template <typename T>
Tensor<T> mul_hgate(const Tensor<T>& x, const Tensor<T>& g) {
  detail::check_rank(x, 3, "mul_hgate");
  if (g.shape() != Shape{x.dim(0), x.dim(1)})
    throw ShapeError("mul_hgate: gate " + shape_str(g.shape()) +
                     " vs input " + shape_str(x.shape()));
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  auto xn = x.node(), gn = g.node();
  auto out = detail::make_op<T>(
      x.shape(), {xn, gn}, [xn, gn, c, h, w](detail::Node<T>& o) {
        if (xn->requires_grad) {
          xn->ensure_grad();
          for (int ch = 0; ch < c; ++ch)
            for (int i = 0; i < h; ++i)
              for (int j = 0; j < w; ++j)
                xn->grad[(size_t(ch) * h + i) * w + j] +=
                    o.grad[(size_t(ch) * h + i) * w + j] *
                    gn->value[size_t(ch) * h + i];
        }
        if (gn->requires_grad) {
          gn->ensure_grad();
          for (int ch = 0; ch < c; ++ch)
            for (int i = 0; i < h; ++i) {
              detail::Acc acc = 0;
              for (int j = 0; j < w; ++j)
                acc += double(o.grad[(size_t(ch) * h + i) * w + j]) *
                       double(xn->value[(size_t(ch) * h + i) * w + j]);
              gn->grad[size_t(ch) * h + i] += static_cast<T>(acc);
            }
        }
      });
  auto& v = out.values();
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j)
        v[(size_t(ch) * h + i) * w + j] =
            xn->value[(size_t(ch) * h + i) * w + j] *
            gn->value[size_t(ch) * h + i];
  return out;
}

template <typename T>
Tensor<T> mul_wgate(const Tensor<T>& x, const Tensor<T>& g) {
  detail::check_rank(x, 3, "mul_wgate");
  if (g.shape() != Shape{x.dim(0), x.dim(2)})
    throw ShapeError("mul_wgate: gate " + shape_str(g.shape()) +
                     " vs input " + shape_str(x.shape()));
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  auto xn = x.node(), gn = g.node();
  auto out = detail::make_op<T>(
      x.shape(), {xn, gn}, [xn, gn, c, h, w](detail::Node<T>& o) {
        if (xn->requires_grad) {
          xn->ensure_grad();
          for (int ch = 0; ch < c; ++ch)
            for (int i = 0; i < h; ++i)
              for (int j = 0; j < w; ++j)
                xn->grad[(size_t(ch) * h + i) * w + j] +=
                    o.grad[(size_t(ch) * h + i) * w + j] *
                    gn->value[size_t(ch) * w + j];
        }
        if (gn->requires_grad) {
          gn->ensure_grad();
          for (int ch = 0; ch < c; ++ch)
            for (int j = 0; j < w; ++j) {
              detail::Acc acc = 0;
              for (int i = 0; i < h; ++i)
                acc += double(o.grad[(size_t(ch) * h + i) * w + j]) *
                       double(xn->value[(size_t(ch) * h + i) * w + j]);
              gn->grad[size_t(ch) * w + j] += static_cast<T>(acc);
            }
        }
      });
  auto& v = out.values();
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j)
        v[(size_t(ch) * h + i) * w + j] =
            xn->value[(size_t(ch) * h + i) * w + j] *
            gn->value[size_t(ch) * w + j];
  return out;
}

template <typename T>
Tensor<T> mul_spatial_gate(const Tensor<T>& x, const Tensor<T>& g) {
  detail::check_rank(x, 3, "mul_spatial_gate");
  if (g.shape() != Shape{x.dim(1), x.dim(2)})
    throw ShapeError("mul_spatial_gate: gate " + shape_str(g.shape()) +
                     " vs input " + shape_str(x.shape()));
  const int c = x.dim(0);
  const size_t hw = size_t(x.dim(1)) * x.dim(2);
  auto xn = x.node(), gn = g.node();
  auto out = detail::make_op<T>(
      x.shape(), {xn, gn}, [xn, gn, c, hw](detail::Node<T>& o) {
        if (xn->requires_grad) {
          xn->ensure_grad();
          for (int ch = 0; ch < c; ++ch)
            for (size_t i = 0; i < hw; ++i)
              xn->grad[size_t(ch) * hw + i] +=
                  o.grad[size_t(ch) * hw + i] * gn->value[i];
        }
        if (gn->requires_grad) {
          gn->ensure_grad();
          for (size_t i = 0; i < hw; ++i) {
            detail::Acc acc = 0;
            for (int ch = 0; ch < c; ++ch)
              acc += double(o.grad[size_t(ch) * hw + i]) *
                     double(xn->value[size_t(ch) * hw + i]);
            gn->grad[i] += static_cast<T>(acc);
          }
        }
      });
  auto& v = out.values();
  for (int ch = 0; ch < c; ++ch)
    for (size_t i = 0; i < hw; ++i)
      v[size_t(ch) * hw + i] = xn->value[size_t(ch) * hw + i] * gn->value[i];
  return out;
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const Shape& s = x.shape();
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    throw ShapeError("softmax: invalid axis " + std::to_string(axis) +
                     " for shape " + shape_str(s));
  size_t outer = 1, inner = 1;
  const int len = s[axis];
  for (int d = 0; d < axis; ++d) outer *= size_t(s[d]);
  for (size_t d = size_t(axis) + 1; d < s.size(); ++d) inner *= size_t(s[d]);

  auto xn = x.node();
  auto out = detail::make_op<T>(
      s, {xn}, [xn, outer, inner, len](detail::Node<T>& o) {
        xn->ensure_grad();
        for (size_t ou = 0; ou < outer; ++ou)
          for (size_t in = 0; in < inner; ++in) {
            detail::Acc dot = 0;
            for (int k = 0; k < len; ++k) {
              const size_t idx = (ou * len + k) * inner + in;
              dot += double(o.grad[idx]) * double(o.value[idx]);
            }
            for (int k = 0; k < len; ++k) {
              const size_t idx = (ou * len + k) * inner + in;
              xn->grad[idx] += static_cast<T>(
                  double(o.value[idx]) * (double(o.grad[idx]) - dot));
            }
          }
      });
  auto& v = out.values();
  for (size_t ou = 0; ou < outer; ++ou)
    for (size_t in = 0; in < inner; ++in) {
      T mx = xn->value[(ou * len) * inner + in];
      for (int k = 1; k < len; ++k)
        mx = std::max(mx, xn->value[(ou * len + k) * inner + in]);
      detail::Acc z = 0;
      for (int k = 0; k < len; ++k) {
        const size_t idx = (ou * len + k) * inner + in;
        const T e = std::exp(xn->value[idx] - mx);
        v[idx] = e;
        z += e;
      }
      for (int k = 0; k < len; ++k) v[(ou * len + k) * inner + in] /= T(z);
    }
  return out;
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::check_rank(x, 3, "global_avg_pool");
  const int c = x.dim(0);
  const size_t hw = size_t(x.dim(1)) * x.dim(2);
  if (hw == 0) throw ShapeError("global_avg_pool: empty spatial extent");
  auto xn = x.node();
  auto out = detail::make_op<T>(
      {c}, {xn}, [xn, c, hw](detail::Node<T>& o) {
        xn->ensure_grad();
        for (int ch = 0; ch < c; ++ch) {
          const T g = o.grad[ch] / static_cast<T>(hw);
          for (size_t i = 0; i < hw; ++i) xn->grad[size_t(ch) * hw + i] += g;
        }
      });
  auto& v = out.values();
  for (int ch = 0; ch < c; ++ch) {
    detail::Acc acc = 0;
    for (size_t i = 0; i < hw; ++i) acc += xn->value[size_t(ch) * hw + i];
    v[ch] = static_cast<T>(acc / double(hw));
  }
  return out;
}

enum class PoolAxis { kH, kW };

// Mean along one spatial axis only: kH -> [C,1,W], kW -> [C,H,1].
template <typename T>
Tensor<T> avg_pool_axis(const Tensor<T>& x, PoolAxis axis) {
  detail::check_rank(x, 3, "avg_pool_axis");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const bool along_h = axis == PoolAxis::kH;
  Shape out_shape = along_h ? Shape{c, 1, w} : Shape{c, h, 1};
  auto xn = x.node();
  auto out = detail::make_op<T>(
      out_shape, {xn}, [xn, c, h, w, along_h](detail::Node<T>& o) {
        xn->ensure_grad();
        if (along_h) {
          for (int ch = 0; ch < c; ++ch)
            for (int j = 0; j < w; ++j) {
              const T g = o.grad[size_t(ch) * w + j] / static_cast<T>(h);
              for (int i = 0; i < h; ++i)
                xn->grad[(size_t(ch) * h + i) * w + j] += g;
            }
        } else {
          for (int ch = 0; ch < c; ++ch)
            for (int i = 0; i < h; ++i) {
              const T g = o.grad[size_t(ch) * h + i] / static_cast<T>(w);
              for (int j = 0; j < w; ++j)
                xn->grad[(size_t(ch) * h + i) * w + j] += g;
            }
        }
      });
  auto& v = out.values();
  if (along_h) {
    for (int ch = 0; ch < c; ++ch)
      for (int j = 0; j < w; ++j) {
        detail::Acc acc = 0;
        for (int i = 0; i < h; ++i)
          acc += xn->value[(size_t(ch) * h + i) * w + j];
        v[size_t(ch) * w + j] = static_cast<T>(acc / double(h));
      }
  } else {
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < h; ++i) {
        detail::Acc acc = 0;
        for (int j = 0; j < w; ++j)
          acc += xn->value[(size_t(ch) * h + i) * w + j];
        v[size_t(ch) * h + i] = static_cast<T>(acc / double(w));
      }
  }
  return out;
}

// Windowed maximum; padded cells are ignored rather than compared.
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, int k, int stride, int pad) {
  detail::check_rank(x, 3, "max_pool2d");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int ho = detail::conv_out_extent(h, k, stride, pad, "max_pool2d");
  const int wo = detail::conv_out_extent(w, k, stride, pad, "max_pool2d");
  auto xn = x.node();
  // arg indices recorded for the backward scatter; -1 marks an empty window
  auto args = std::make_shared<std::vector<int64_t>>(
      size_t(c) * ho * wo, int64_t{-1});
  auto out = detail::make_op<T>(
      {c, ho, wo}, {xn}, [xn, args](detail::Node<T>& o) {
        xn->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i)
          if ((*args)[i] >= 0) xn->grad[size_t((*args)[i])] += o.grad[i];
      });
  auto& v = out.values();
  for (int ch = 0; ch < c; ++ch)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        const int iy0 = oy * stride - pad, ix0 = ox * stride - pad;
        int64_t arg = -1;
        T best = T(0);
        for (int ky = 0; ky < k; ++ky) {
          const int iy = iy0 + ky;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ix0 + kx;
            if (ix < 0 || ix >= w) continue;
            const size_t idx = (size_t(ch) * h + iy) * w + ix;
            if (arg < 0 || xn->value[idx] > best) {
              best = xn->value[idx];
              arg = int64_t(idx);
            }
          }
        }
        const size_t oi = (size_t(ch) * ho + oy) * wo + ox;
        v[oi] = arg >= 0 ? best : T(0);
        (*args)[oi] = arg;
      }
  return out;
}

// ---------------------------------------------------------------------------
// resampling
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
  detail::check_rank(x, 3, "upsample_nearest2x");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  auto xn = x.node();
  auto out = detail::make_op<T>(
      {c, 2 * h, 2 * w}, {xn}, [xn, c, h, w](detail::Node<T>& o) {
        xn->ensure_grad();
        for (int ch = 0; ch < c; ++ch)
          for (int i = 0; i < 2 * h; ++i)
            for (int j = 0; j < 2 * w; ++j)
              xn->grad[(size_t(ch) * h + i / 2) * w + j / 2] +=
                  o.grad[(size_t(ch) * 2 * h + i) * 2 * w + j];
      });
  auto& v = out.values();
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < 2 * h; ++i)
      for (int j = 0; j < 2 * w; ++j)
        v[(size_t(ch) * 2 * h + i) * 2 * w + j] =
            xn->value[(size_t(ch) * h + i / 2) * w + j / 2];
  return out;
}

template <typename T>
Tensor<T> pad_replicate(const Tensor<T>& x, int p) {
  detail::check_rank(x, 3, "pad_replicate");
  if (p < 0) throw ShapeError("pad_replicate: negative pad");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int ho = h + 2 * p, wo = w + 2 * p;
  auto clampi = [](int v, int lo, int hi) {
    return std::min(std::max(v, lo), hi);
  };
  auto xn = x.node();
  auto out = detail::make_op<T>(
      {c, ho, wo}, {xn}, [xn, c, h, w, ho, wo, p, clampi](detail::Node<T>& o) {
        xn->ensure_grad();
        for (int ch = 0; ch < c; ++ch)
          for (int i = 0; i < ho; ++i)
            for (int j = 0; j < wo; ++j)
              xn->grad[(size_t(ch) * h + clampi(i - p, 0, h - 1)) * w +
                       clampi(j - p, 0, w - 1)] +=
                  o.grad[(size_t(ch) * ho + i) * wo + j];
      });
  auto& v = out.values();
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < ho; ++i)
      for (int j = 0; j < wo; ++j)
        v[(size_t(ch) * ho + i) * wo + j] =
            xn->value[(size_t(ch) * h + clampi(i - p, 0, h - 1)) * w +
                      clampi(j - p, 0, w - 1)];
  return out;
}

// ---------------------------------------------------------------------------
// bilinear sampling
// ---------------------------------------------------------------------------

namespace detail {

// Normalized (u,v) in [-1,1]^2 maps to pixel centers at integer coordinates:
// px = (u+1)/2*W - 1/2. Corners outside the map contribute zero.
struct BilinearTaps {
  int x0, y0;
  double fx, fy;
};

inline BilinearTaps bilinear_taps(double u, double v, int h, int w) {
  const double px = (u + 1.0) * 0.5 * w - 0.5;
  const double py = (v + 1.0) * 0.5 * h - 0.5;
  BilinearTaps t;
  t.x0 = static_cast<int>(std::floor(px));
  t.y0 = static_cast<int>(std::floor(py));
  t.fx = px - t.x0;
  t.fy = py - t.y0;
  return t;
}

}  // namespace detail

// Single-point sample of [C,H,W] at normalized (u,v); zero padding outside.
template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& map, double u, double v) {
  detail::check_rank(map, 3, "bilinear_sample");
  const int c = map.dim(0), h = map.dim(1), w = map.dim(2);
  if (h < 1 || w < 1) throw ShapeError("bilinear_sample: empty map");
  const auto t = detail::bilinear_taps(u, v, h, w);
  auto mn = map.node();
  auto corner = [&](int dy, int dx) {
    const int y = t.y0 + dy, x = t.x0 + dx;
    return (y >= 0 && y < h && x >= 0 && x < w) ? int64_t((size_t(y)) * w + x)
                                                : int64_t{-1};
  };
  const int64_t i00 = corner(0, 0), i01 = corner(0, 1), i10 = corner(1, 0),
                i11 = corner(1, 1);
  const double w00 = (1 - t.fy) * (1 - t.fx), w01 = (1 - t.fy) * t.fx,
               w10 = t.fy * (1 - t.fx), w11 = t.fy * t.fx;
  auto out = detail::make_op<T>(
      {c}, {mn},
      [mn, c, h, w, i00, i01, i10, i11, w00, w01, w10,
       w11](detail::Node<T>& o) {
        mn->ensure_grad();
        const size_t plane = size_t(h) * w;
        for (int ch = 0; ch < c; ++ch) {
          const T g = o.grad[ch];
          if (i00 >= 0) mn->grad[size_t(ch) * plane + i00] += g * T(w00);
          if (i01 >= 0) mn->grad[size_t(ch) * plane + i01] += g * T(w01);
          if (i10 >= 0) mn->grad[size_t(ch) * plane + i10] += g * T(w10);
          if (i11 >= 0) mn->grad[size_t(ch) * plane + i11] += g * T(w11);
        }
      });
  auto& out_v = out.values();
  const size_t plane = size_t(h) * w;
  for (int ch = 0; ch < c; ++ch) {
    const T* base = mn->value.data() + size_t(ch) * plane;
    double acc = 0;
    if (i00 >= 0) acc += w00 * base[i00];
    if (i01 >= 0) acc += w01 * base[i01];
    if (i10 >= 0) acc += w10 * base[i10];
    if (i11 >= 0) acc += w11 * base[i11];
    out_v[ch] = static_cast<T>(acc);
  }
  return out;
}

// Batched sampling at pts[N,2] (u,v rows). Differentiable in both the map
// and the sampling positions, which is what lets offsets learn.
template <typename T>
Tensor<T> sample_points(const Tensor<T>& map, const Tensor<T>& pts) {
  detail::check_rank(map, 3, "sample_points");
  detail::check_rank(pts, 2, "sample_points");
  if (pts.dim(1) != 2)
    throw ShapeError("sample_points: points must be [N,2], got " +
                     shape_str(pts.shape()));
  const int c = map.dim(0), h = map.dim(1), w = map.dim(2);
  const int n = pts.dim(0);
  auto mn = map.node(), pn = pts.node();
  auto out = detail::make_op<T>(
      {n, c}, {mn, pn}, [mn, pn, c, h, w, n](detail::Node<T>& o) {
        const bool gm = mn->requires_grad, gp = pn->requires_grad;
        if (gm) mn->ensure_grad();
        if (gp) pn->ensure_grad();
        const size_t plane = size_t(h) * w;
        for (int i = 0; i < n; ++i) {
          const double u = pn->value[size_t(i) * 2];
          const double v = pn->value[size_t(i) * 2 + 1];
          const auto t = detail::bilinear_taps(u, v, h, w);
          const bool in00 = t.y0 >= 0 && t.y0 < h && t.x0 >= 0 && t.x0 < w;
          const bool in01 = t.y0 >= 0 && t.y0 < h && t.x0 + 1 >= 0 && t.x0 + 1 < w;
          const bool in10 = t.y0 + 1 >= 0 && t.y0 + 1 < h && t.x0 >= 0 && t.x0 < w;
          const bool in11 =
              t.y0 + 1 >= 0 && t.y0 + 1 < h && t.x0 + 1 >= 0 && t.x0 + 1 < w;
          double du = 0, dv = 0;
          for (int ch = 0; ch < c; ++ch) {
            const double g = o.grad[size_t(i) * c + ch];
            if (g == 0 && !gp) continue;
            const T* base = mn->value.data() + size_t(ch) * plane;
            const double v00 = in00 ? base[size_t(t.y0) * w + t.x0] : 0.0;
            const double v01 = in01 ? base[size_t(t.y0) * w + t.x0 + 1] : 0.0;
            const double v10 = in10 ? base[size_t(t.y0 + 1) * w + t.x0] : 0.0;
            const double v11 =
                in11 ? base[size_t(t.y0 + 1) * w + t.x0 + 1] : 0.0;
            if (gm) {
              T* gbase = mn->grad.data() + size_t(ch) * plane;
              if (in00)
                gbase[size_t(t.y0) * w + t.x0] +=
                    static_cast<T>(g * (1 - t.fy) * (1 - t.fx));
              if (in01)
                gbase[size_t(t.y0) * w + t.x0 + 1] +=
                    static_cast<T>(g * (1 - t.fy) * t.fx);
              if (in10)
                gbase[size_t(t.y0 + 1) * w + t.x0] +=
                    static_cast<T>(g * t.fy * (1 - t.fx));
              if (in11)
                gbase[size_t(t.y0 + 1) * w + t.x0 + 1] +=
                    static_cast<T>(g * t.fy * t.fx);
            }
            if (gp) {
              const double dfx = (1 - t.fy) * (v01 - v00) + t.fy * (v11 - v10);
              const double dfy = (1 - t.fx) * (v10 - v00) + t.fx * (v11 - v01);
              du += g * dfx * 0.5 * w;  // d(px)/du = W/2
              dv += g * dfy * 0.5 * h;
            }
          }
          if (gp) {
            pn->grad[size_t(i) * 2] += static_cast<T>(du);
            pn->grad[size_t(i) * 2 + 1] += static_cast<T>(dv);
          }
        }
      });
  auto& out_v = out.values();
  const size_t plane = size_t(h) * w;
  for (int i = 0; i < n; ++i) {
    const double u = pn->value[size_t(i) * 2];
    const double v = pn->value[size_t(i) * 2 + 1];
    const auto t = detail::bilinear_taps(u, v, h, w);
    const double w00 = (1 - t.fy) * (1 - t.fx), w01 = (1 - t.fy) * t.fx,
                 w10 = t.fy * (1 - t.fx), w11 = t.fy * t.fx;
    for (int ch = 0; ch < c; ++ch) {
      const T* base = mn->value.data() + size_t(ch) * plane;
      double acc = 0;
      if (t.y0 >= 0 && t.y0 < h) {
        if (t.x0 >= 0 && t.x0 < w) acc += w00 * base[size_t(t.y0) * w + t.x0];
        if (t.x0 + 1 >= 0 && t.x0 + 1 < w)
          acc += w01 * base[size_t(t.y0) * w + t.x0 + 1];
      }
      if (t.y0 + 1 >= 0 && t.y0 + 1 < h) {
        if (t.x0 >= 0 && t.x0 < w)
          acc += w10 * base[size_t(t.y0 + 1) * w + t.x0];
        if (t.x0 + 1 >= 0 && t.x0 + 1 < w)
          acc += w11 * base[size_t(t.y0 + 1) * w + t.x0 + 1];
      }
      out_v[size_t(i) * c + ch] = static_cast<T>(acc);
    }
  }
  return out;
}

}  // namespace sde
