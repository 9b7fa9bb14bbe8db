#pragma once

#include <cmath>
#include <cstring>
#include <limits>
#include <random>
#include <string>

#include "multiformer/tensor.hpp"

// Differentiable primitives. Every op computes its forward result, and when a
// tape is active and any input requires a gradient, appends one backward node
// that accumulates input gradients from the output gradient. Captured tensors
// alias the live buffers, so a node sees exactly the values the forward pass
// produced.

namespace mf {

namespace detail {

template <typename T>
inline void check_finite(const Tensor<T>& t, const char* op) {
  if (!checked_mode()) return;
  if (!t.all_finite())
    throw NumericError(std::string(op) + " produced a non-finite value");
}

template <typename T>
inline bool want_tape(std::initializer_list<const Tensor<T>*> inputs) {
  if (active_tape<T>() == nullptr) return false;
  for (const Tensor<T>* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
inline void gemm_acc(const T* a, const T* b, T* c, std::size_t m,
                     std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T s = a[i * k + p];
      if (s == T(0)) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += s * brow[j];
    }
  }
}

// C[m,k] += A[m,n] * B[k,n]^T
template <typename T>
inline void gemm_nt_acc(const T* a, const T* b, T* c, std::size_t m,
                        std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * n;
    for (std::size_t j = 0; j < k; ++j) {
      const T* brow = b + j * n;
      T acc = T(0);
      for (std::size_t p = 0; p < n; ++p) acc += arow[p] * brow[p];
      c[i * k + j] += acc;
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
template <typename T>
inline void gemm_tn_acc(const T* a, const T* b, T* c, std::size_t m,
                        std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < m; ++p) {
    const T* arow = a + p * k;
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < k; ++i) {
      const T s = arow[i];
      if (s == T(0)) continue;
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += s * brow[j];
    }
  }
}

template <typename T>
inline void require_same_shape(const Tensor<T>& a, const Tensor<T>& b,
                               const char* op) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()) + " differ");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = a[i] + b[i];
  detail::check_finite(y, "add");
  if (detail::want_tape<T>({&a, &b})) {
    y.set_requires_grad();
    Tensor<T> ac = a, bc = b, yc = y;
    active_tape<T>()->record([ac, bc, yc]() mutable {
      const auto& g = yc.grad();
      if (ac.requires_grad()) {
        auto& ga = ac.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (bc.requires_grad()) {
        auto& gb = bc.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = a[i] - b[i];
  detail::check_finite(y, "sub");
  if (detail::want_tape<T>({&a, &b})) {
    y.set_requires_grad();
    Tensor<T> ac = a, bc = b, yc = y;
    active_tape<T>()->record([ac, bc, yc]() mutable {
      const auto& g = yc.grad();
      if (ac.requires_grad()) {
        auto& ga = ac.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (bc.requires_grad()) {
        auto& gb = bc.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = a[i] * b[i];
  detail::check_finite(y, "mul");
  if (detail::want_tape<T>({&a, &b})) {
    y.set_requires_grad();
    Tensor<T> ac = a, bc = b, yc = y;
    active_tape<T>()->record([ac, bc, yc]() mutable {
      const auto& g = yc.grad();
      if (ac.requires_grad()) {
        auto& ga = ac.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bc[i];
      }
      if (bc.requires_grad()) {
        auto& gb = bc.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ac[i];
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = a[i] * s;
  detail::check_finite(y, "scale");
  if (detail::want_tape<T>({&a})) {
    y.set_requires_grad();
    Tensor<T> ac = a, yc = y;
    active_tape<T>()->record([ac, yc, s]() mutable {
      const auto& g = yc.grad();
      auto& ga = ac.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Matrix products

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " do not chain");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> y({m, n});
  detail::gemm_acc(a.data(), b.data(), y.data(), m, k, n);
  detail::check_finite(y, "matmul");
  if (detail::want_tape<T>({&a, &b})) {
    y.set_requires_grad();
    Tensor<T> ac = a, bc = b, yc = y;
    active_tape<T>()->record([ac, bc, yc, m, k, n]() mutable {
      const T* g = yc.grad().data();
      if (ac.requires_grad())
        detail::gemm_nt_acc(g, bc.data(), ac.grad().data(), m, n, k);
      if (bc.requires_grad())
        detail::gemm_tn_acc(ac.data(), g, bc.grad().data(), m, k, n);
    });
  }
  return y;
}

/// y = a * b^T  (a: [m,k], b: [n,k] -> y: [m,n])
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
    throw ShapeError("matmul_nt: shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " do not chain");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  Tensor<T> y({m, n});
  detail::gemm_nt_acc(a.data(), b.data(), y.data(), m, k, n);
  detail::check_finite(y, "matmul_nt");
  if (detail::want_tape<T>({&a, &b})) {
    y.set_requires_grad();
    Tensor<T> ac = a, bc = b, yc = y;
    active_tape<T>()->record([ac, bc, yc, m, k, n]() mutable {
      const T* g = yc.grad().data();
      // y = a b^T: da += g b ; db += g^T a
      if (ac.requires_grad())
        detail::gemm_acc(g, bc.data(), ac.grad().data(), m, n, k);
      if (bc.requires_grad())
        detail::gemm_tn_acc(g, ac.data(), bc.grad().data(), m, n, k);
    });
  }
  return y;
}

/// y = x W + b, x: [n, d_in] (or [d_in]), W: [d_in, d_out], b: [d_out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  Tensor<T> x2 = x;
  const bool was_vector = x.rank() == 1;
  if (was_vector) x2 = reshape(x, {1, x.dim(0)});
  if (x2.rank() != 2 || w.rank() != 2 || x2.dim(1) != w.dim(0) ||
      b.numel() != w.dim(1))
    throw ShapeError("linear: x " + shape_str(x.shape()) + " vs W " +
                     shape_str(w.shape()) + " / b " + shape_str(b.shape()));
  const std::size_t n = x2.dim(0), din = x2.dim(1), dout = w.dim(1);
  Tensor<T> y({n, dout});
  for (std::size_t i = 0; i < n; ++i)
    std::memcpy(y.data() + i * dout, b.data(), dout * sizeof(T));
  detail::gemm_acc(x2.data(), w.data(), y.data(), n, din, dout);
  detail::check_finite(y, "linear");
  if (detail::want_tape<T>({&x2, &w, &b})) {
    y.set_requires_grad();
    Tensor<T> xc = x2, wc = w, bc = b, yc = y;
    active_tape<T>()->record([xc, wc, bc, yc, n, din, dout]() mutable {
      const T* g = yc.grad().data();
      if (xc.requires_grad())
        detail::gemm_nt_acc(g, wc.data(), xc.grad().data(), n, dout, din);
      if (wc.requires_grad())
        detail::gemm_tn_acc(xc.data(), g, wc.grad().data(), n, din, dout);
      if (bc.requires_grad()) {
        auto& gb = bc.grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < dout; ++j) gb[j] += g[i * dout + j];
      }
    });
  }
  return was_vector ? reshape(y, {dout}) : y;
}

// ---------------------------------------------------------------------------
// Shape ops

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape: " + shape_str(x.shape()) + " to " +
                     shape_str(shape) + " changes element count");
  Tensor<T> y(shape, x.values());
  if (detail::want_tape<T>({&x})) {
    y.set_requires_grad();
    Tensor<T> xc = x, yc = y;
    active_tape<T>()->record([xc, yc]() mutable {
      const auto& g = yc.grad();
      auto& gx = xc.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return y;
}

/// Concatenate along axis 0 of rank-3 tensors ([C,H,W] images).
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(1) != b.dim(1) ||
      a.dim(2) != b.dim(2))
    throw ShapeError("concat_channels: shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()) + " do not stack");
  Tensor<T> y({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)});
  std::memcpy(y.data(), a.data(), a.numel() * sizeof(T));
  std::memcpy(y.data() + a.numel(), b.data(), b.numel() * sizeof(T));
  if (detail::want_tape<T>({&a, &b})) {
    y.set_requires_grad();
    Tensor<T> ac = a, bc = b, yc = y;
    active_tape<T>()->record([ac, bc, yc]() mutable {
      const auto& g = yc.grad();
      if (ac.requires_grad()) {
        auto& ga = ac.grad();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
      }
      if (bc.requires_grad()) {
        auto& gb = bc.grad();
        const std::size_t off = ac.numel();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[off + i];
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Activations

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  detail::check_finite(y, "relu");
  if (detail::want_tape<T>({&x})) {
    y.set_requires_grad();
    Tensor<T> xc = x, yc = y;
    active_tape<T>()->record([xc, yc]() mutable {
      const auto& g = yc.grad();
      auto& gx = xc.grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (xc[i] > T(0)) gx[i] += g[i];
    });
  }
  return y;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < y.numel(); ++i)
    y[i] = T(1) / (T(1) + std::exp(-x[i]));
  detail::check_finite(y, "sigmoid");
  if (detail::want_tape<T>({&x})) {
    y.set_requires_grad();
    Tensor<T> xc = x, yc = y;
    active_tape<T>()->record([xc, yc]() mutable {
      const auto& g = yc.grad();
      auto& gx = xc.grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        gx[i] += g[i] * yc[i] * (T(1) - yc[i]);
    });
  }
  return y;
}

/// Softmax along `axis` (negative counts from the end). Subtract-max
/// stabilized, so constant shifts of the input leave the output unchanged.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1) {
  const int r = static_cast<int>(x.rank());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r)
    throw ShapeError("softmax: axis out of range for " + shape_str(x.shape()));
  std::size_t outer = 1, inner = 1;
  const std::size_t n = x.dim(axis);
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < r; ++i) inner *= x.dim(i);

  Tensor<T> y(x.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t i = 0; i < n; ++i)
        mx = std::max(mx, x[base + i * inner]);
      T denom = T(0);
      for (std::size_t i = 0; i < n; ++i) {
        const T e = std::exp(x[base + i * inner] - mx);
        y[base + i * inner] = e;
        denom += e;
      }
      for (std::size_t i = 0; i < n; ++i) y[base + i * inner] /= denom;
    }
  }
  detail::check_finite(y, "softmax");
  if (detail::want_tape<T>({&x})) {
    y.set_requires_grad();
    Tensor<T> xc = x, yc = y;
    active_tape<T>()->record([xc, yc, outer, inner, n]() mutable {
      const auto& g = yc.grad();
      auto& gx = xc.grad();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * n * inner + in;
          T dot = T(0);
          for (std::size_t i = 0; i < n; ++i)
            dot += g[base + i * inner] * yc[base + i * inner];
          for (std::size_t i = 0; i < n; ++i)
            gx[base + i * inner] +=
                yc[base + i * inner] * (g[base + i * inner] - dot);
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Convolution (2D cross-correlation, zero padding, square kernel)

template <typename T>
struct Conv2dSpec {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

namespace detail {

template <typename T>
void im2col(const T* x, std::size_t cin, std::size_t h, std::size_t w,
            std::size_t k, std::size_t stride, std::size_t pad,
            std::size_t ho, std::size_t wo, T* cols) {
  // cols: [cin*k*k, ho*wo]
  const std::size_t span = ho * wo;
  for (std::size_t c = 0; c < cin; ++c) {
    for (std::size_t kr = 0; kr < k; ++kr) {
      for (std::size_t kc = 0; kc < k; ++kc) {
        T* dst = cols + ((c * k + kr) * k + kc) * span;
        for (std::size_t r = 0; r < ho; ++r) {
          const std::ptrdiff_t sr =
              std::ptrdiff_t(r * stride + kr) - std::ptrdiff_t(pad);
          for (std::size_t cc = 0; cc < wo; ++cc) {
            const std::ptrdiff_t sc =
                std::ptrdiff_t(cc * stride + kc) - std::ptrdiff_t(pad);
            dst[r * wo + cc] =
                (sr >= 0 && sr < std::ptrdiff_t(h) && sc >= 0 &&
                 sc < std::ptrdiff_t(w))
                    ? x[(c * h + std::size_t(sr)) * w + std::size_t(sc)]
                    : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_acc(const T* cols, std::size_t cin, std::size_t h, std::size_t w,
                std::size_t k, std::size_t stride, std::size_t pad,
                std::size_t ho, std::size_t wo, T* x) {
  const std::size_t span = ho * wo;
  for (std::size_t c = 0; c < cin; ++c) {
    for (std::size_t kr = 0; kr < k; ++kr) {
      for (std::size_t kc = 0; kc < k; ++kc) {
        const T* src = cols + ((c * k + kr) * k + kc) * span;
        for (std::size_t r = 0; r < ho; ++r) {
          const std::ptrdiff_t sr =
              std::ptrdiff_t(r * stride + kr) - std::ptrdiff_t(pad);
          if (sr < 0 || sr >= std::ptrdiff_t(h)) continue;
          for (std::size_t cc = 0; cc < wo; ++cc) {
            const std::ptrdiff_t sc =
                std::ptrdiff_t(cc * stride + kc) - std::ptrdiff_t(pad);
            if (sc < 0 || sc >= std::ptrdiff_t(w)) continue;
            x[(c * h + std::size_t(sr)) * w + std::size_t(sc)] +=
                src[r * wo + cc];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// x: [C_in,H,W], w: [C_out,C_in,k,k], b: [C_out] -> [C_out,H',W'].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 std::size_t stride = 1, std::size_t pad = 0) {
  if (x.rank() != 3 || w.rank() != 4 || w.dim(1) != x.dim(0) ||
      w.dim(2) != w.dim(3))
    throw ShapeError("conv2d: x " + shape_str(x.shape()) + " vs kernel " +
                     shape_str(w.shape()));
  const std::size_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::size_t cout = w.dim(0), k = w.dim(2);
  if (b.numel() != cout)
    throw ShapeError("conv2d: bias " + shape_str(b.shape()) + " vs " +
                     std::to_string(cout) + " output channels");
  if (h + 2 * pad < k || wd + 2 * pad < k ||
      (h + 2 * pad - k) % stride != 0 || (wd + 2 * pad - k) % stride != 0)
    throw ConfigError("conv2d: output size (" + std::to_string(h) + "+2*" +
                      std::to_string(pad) + "-" + std::to_string(k) + ")/" +
                      std::to_string(stride) + "+1 is not a positive integer");
  const std::size_t ho = (h + 2 * pad - k) / stride + 1;
  const std::size_t wo = (wd + 2 * pad - k) / stride + 1;

  Tensor<T> cols({cin * k * k, ho * wo});
  detail::im2col(x.data(), cin, h, wd, k, stride, pad, ho, wo, cols.data());

  Tensor<T> y({cout, ho, wo});
  for (std::size_t c = 0; c < cout; ++c) {
    T* plane = y.data() + c * ho * wo;
    for (std::size_t i = 0; i < ho * wo; ++i) plane[i] = b[c];
  }
  detail::gemm_acc(w.data(), cols.data(), y.data(), cout, cin * k * k,
                   ho * wo);
  detail::check_finite(y, "conv2d");

  if (detail::want_tape<T>({&x, &w, &b})) {
    y.set_requires_grad();
    Tensor<T> xc = x, wc = w, bc = b, yc = y, colsc = cols;
    active_tape<T>()->record(
        [xc, wc, bc, yc, colsc, cin, h, wd, cout, k, stride, pad, ho,
         wo]() mutable {
          const T* g = yc.grad().data();  // [cout, ho*wo]
          const std::size_t span = ho * wo, kk = cin * k * k;
          if (bc.requires_grad()) {
            auto& gb = bc.grad();
            for (std::size_t c = 0; c < cout; ++c)
              for (std::size_t i = 0; i < span; ++i) gb[c] += g[c * span + i];
          }
          if (wc.requires_grad())
            detail::gemm_nt_acc(g, colsc.data(), wc.grad().data(), cout, span,
                                kk);
          if (xc.requires_grad()) {
            Tensor<T> dcols({kk, span});
            detail::gemm_tn_acc(wc.data(), g, dcols.data(), cout, kk, span);
            detail::col2im_acc(dcols.data(), cin, h, wd, k, stride, pad, ho,
                               wo, xc.grad().data());
          }
        });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Reductions and pooling

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (std::size_t i = 0; i < x.numel(); ++i) acc += x[i];
  Tensor<T> y = Tensor<T>::scalar(acc);
  detail::check_finite(y, "sum");
  if (detail::want_tape<T>({&x})) {
    y.set_requires_grad();
    Tensor<T> xc = x, yc = y;
    active_tape<T>()->record([xc, yc]() mutable {
      const T g = yc.grad()[0];
      auto& gx = xc.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
  }
  return y;
}

/// Sum of squared differences over all elements (the ||.||_2^2 loss form).
template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mse");
  T acc = T(0);
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const T d = a[i] - b[i];
    acc += d * d;
  }
  Tensor<T> y = Tensor<T>::scalar(acc);
  detail::check_finite(y, "mse");
  if (detail::want_tape<T>({&a, &b})) {
    y.set_requires_grad();
    Tensor<T> ac = a, bc = b, yc = y;
    active_tape<T>()->record([ac, bc, yc]() mutable {
      const T g = yc.grad()[0];
      if (ac.requires_grad()) {
        auto& ga = ac.grad();
        for (std::size_t i = 0; i < ga.size(); ++i)
          ga[i] += g * T(2) * (ac[i] - bc[i]);
      }
      if (bc.requires_grad()) {
        auto& gb = bc.grad();
        for (std::size_t i = 0; i < gb.size(); ++i)
          gb[i] -= g * T(2) * (ac[i] - bc[i]);
      }
    });
  }
  return y;
}

/// Global pooling over the spatial grid of a [C,H,W] map -> [C].
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.rank() != 3)
    throw ShapeError("global_avg_pool: want [C,H,W], got " +
                     shape_str(x.shape()));
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  Tensor<T> y({c});
  for (std::size_t i = 0; i < c; ++i) {
    T acc = T(0);
    for (std::size_t j = 0; j < hw; ++j) acc += x[i * hw + j];
    y[i] = acc / T(hw);
  }
  if (detail::want_tape<T>({&x})) {
    y.set_requires_grad();
    Tensor<T> xc = x, yc = y;
    active_tape<T>()->record([xc, yc, c, hw]() mutable {
      const auto& g = yc.grad();
      auto& gx = xc.grad();
      for (std::size_t i = 0; i < c; ++i)
        for (std::size_t j = 0; j < hw; ++j) gx[i * hw + j] += g[i] / T(hw);
    });
  }
  return y;
}

template <typename T>
Tensor<T> global_max_pool(const Tensor<T>& x) {
  if (x.rank() != 3)
    throw ShapeError("global_max_pool: want [C,H,W], got " +
                     shape_str(x.shape()));
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  Tensor<T> y({c});
  std::vector<std::size_t> arg(c, 0);
  for (std::size_t i = 0; i < c; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < hw; ++j)
      if (x[i * hw + j] > x[i * hw + best]) best = j;
    arg[i] = best;
    y[i] = x[i * hw + best];
  }
  if (detail::want_tape<T>({&x})) {
    y.set_requires_grad();
    Tensor<T> xc = x, yc = y;
    active_tape<T>()->record([xc, yc, arg, hw]() mutable {
      const auto& g = yc.grad();
      auto& gx = xc.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i * hw + arg[i]] += g[i];
    });
  }
  return y;
}

/// Windowed pooling with square window k and stride s -> [C,H',W'].
template <typename T>
Tensor<T> pool2d(const Tensor<T>& x, bool max_kind, std::size_t k,
                 std::size_t s) {
  if (x.rank() != 3)
    throw ShapeError("pool2d: want [C,H,W], got " + shape_str(x.shape()));
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h < k || w < k || (h - k) % s != 0 || (w - k) % s != 0)
    throw ConfigError("pool2d: window " + std::to_string(k) + " stride " +
                      std::to_string(s) + " does not tile " +
                      shape_str(x.shape()));
  const std::size_t ho = (h - k) / s + 1, wo = (w - k) / s + 1;
  Tensor<T> y({c, ho, wo});
  std::vector<std::size_t> arg(max_kind ? c * ho * wo : 0, 0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t r = 0; r < ho; ++r) {
      for (std::size_t cc = 0; cc < wo; ++cc) {
        const std::size_t out = (ch * ho + r) * wo + cc;
        if (max_kind) {
          std::size_t best = (ch * h + r * s) * w + cc * s;
          for (std::size_t kr = 0; kr < k; ++kr)
            for (std::size_t kc = 0; kc < k; ++kc) {
              const std::size_t idx = (ch * h + r * s + kr) * w + cc * s + kc;
              if (x[idx] > x[best]) best = idx;
            }
          arg[out] = best;
          y[out] = x[best];
        } else {
          T acc = T(0);
          for (std::size_t kr = 0; kr < k; ++kr)
            for (std::size_t kc = 0; kc < k; ++kc)
              acc += x[(ch * h + r * s + kr) * w + cc * s + kc];
          y[out] = acc / T(k * k);
        }
      }
    }
  }
  if (detail::want_tape<T>({&x})) {
    y.set_requires_grad();
    Tensor<T> xc = x, yc = y;
    active_tape<T>()->record([xc, yc, arg, max_kind, c, h, w, k, s, ho,
                              wo]() mutable {
      const auto& g = yc.grad();
      auto& gx = xc.grad();
      if (max_kind) {
        for (std::size_t i = 0; i < g.size(); ++i) gx[arg[i]] += g[i];
      } else {
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t r = 0; r < ho; ++r)
            for (std::size_t cc = 0; cc < wo; ++cc) {
              const T gv = g[(ch * ho + r) * wo + cc] / T(k * k);
              for (std::size_t kr = 0; kr < k; ++kr)
                for (std::size_t kc = 0; kc < k; ++kc)
                  gx[(ch * h + r * s + kr) * w + cc * s + kc] += gv;
            }
      }
    });
  }
  return y;
}

/// Per-pixel max over channels: [C,H,W] -> [1,H,W]. Gradient routes to the
/// first argmax channel.
template <typename T>
Tensor<T> channel_max(const Tensor<T>& x) {
  if (x.rank() != 3)
    throw ShapeError("channel_max: want [C,H,W], got " + shape_str(x.shape()));
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  Tensor<T> y({1, x.dim(1), x.dim(2)});
  std::vector<std::size_t> arg(hw, 0);
  for (std::size_t j = 0; j < hw; ++j) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < c; ++i)
      if (x[i * hw + j] > x[best * hw + j]) best = i;
    arg[j] = best;
    y[j] = x[best * hw + j];
  }
  if (detail::want_tape<T>({&x})) {
    y.set_requires_grad();
    Tensor<T> xc = x, yc = y;
    active_tape<T>()->record([xc, yc, arg, hw]() mutable {
      const auto& g = yc.grad();
      auto& gx = xc.grad();
      for (std::size_t j = 0; j < hw; ++j) gx[arg[j] * hw + j] += g[j];
    });
  }
  return y;
}

/// Per-pixel mean over channels: [C,H,W] -> [1,H,W].
template <typename T>
Tensor<T> channel_mean(const Tensor<T>& x) {
  if (x.rank() != 3)
    throw ShapeError("channel_mean: want [C,H,W], got " +
                     shape_str(x.shape()));
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  Tensor<T> y({1, x.dim(1), x.dim(2)});
  for (std::size_t j = 0; j < hw; ++j) {
    T acc = T(0);
    for (std::size_t i = 0; i < c; ++i) acc += x[i * hw + j];
    y[j] = acc / T(c);
  }
  if (detail::want_tape<T>({&x})) {
    y.set_requires_grad();
    Tensor<T> xc = x, yc = y;
    active_tape<T>()->record([xc, yc, c, hw]() mutable {
      const auto& g = yc.grad();
      auto& gx = xc.grad();
      for (std::size_t j = 0; j < hw; ++j)
        for (std::size_t i = 0; i < c; ++i) gx[i * hw + j] += g[j] / T(c);
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Broadcast products

/// y[c,u,v] = phi[c,u,v] * wc[c] * ws[u,v] — the channel/spatial attention
/// reweighting (outer product of the two weight vectors, broadcast over phi).
template <typename T>
Tensor<T> scale_channels_spatial(const Tensor<T>& phi, const Tensor<T>& wc,
                                 const Tensor<T>& ws) {
  if (phi.rank() != 3 || wc.numel() != phi.dim(0) || ws.rank() != 2 ||
      ws.dim(0) != phi.dim(1) || ws.dim(1) != phi.dim(2))
    throw ShapeError("scale_channels_spatial: phi " + shape_str(phi.shape()) +
                     " wc " + shape_str(wc.shape()) + " ws " +
                     shape_str(ws.shape()));
  const std::size_t c = phi.dim(0), hw = phi.dim(1) * phi.dim(2);
  Tensor<T> y(phi.shape());
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < hw; ++j)
      y[i * hw + j] = phi[i * hw + j] * wc[i] * ws[j];
  detail::check_finite(y, "scale_channels_spatial");
  if (detail::want_tape<T>({&phi, &wc, &ws})) {
    y.set_requires_grad();
    Tensor<T> pc = phi, wcc = wc, wsc = ws, yc = y;
    active_tape<T>()->record([pc, wcc, wsc, yc, c, hw]() mutable {
      const auto& g = yc.grad();
      if (pc.requires_grad()) {
        auto& gp = pc.grad();
        for (std::size_t i = 0; i < c; ++i)
          for (std::size_t j = 0; j < hw; ++j)
            gp[i * hw + j] += g[i * hw + j] * wcc[i] * wsc[j];
      }
      if (wcc.requires_grad()) {
        auto& gc = wcc.grad();
        for (std::size_t i = 0; i < c; ++i) {
          T acc = T(0);
          for (std::size_t j = 0; j < hw; ++j)
            acc += g[i * hw + j] * pc[i * hw + j] * wsc[j];
          gc[i] += acc;
        }
      }
      if (wsc.requires_grad()) {
        auto& gs = wsc.grad();
        for (std::size_t j = 0; j < hw; ++j) {
          T acc = T(0);
          for (std::size_t i = 0; i < c; ++i)
            acc += g[i * hw + j] * pc[i * hw + j] * wcc[i];
          gs[j] += acc;
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Normalization

/// Layer normalization over the last axis of a [n,d] tensor, gamma/beta [d].
/// Population variance, epsilon inside the square root denominator.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma,
                    const Tensor<T>& beta, T eps = T(1e-5)) {
  if (x.rank() != 2 || gamma.numel() != x.dim(1) || beta.numel() != x.dim(1))
    throw ShapeError("layernorm: x " + shape_str(x.shape()) + " gamma " +
                     shape_str(gamma.shape()) + " beta " +
                     shape_str(beta.shape()));
  const std::size_t n = x.dim(0), d = x.dim(1);
  Tensor<T> y(x.shape());
  Tensor<T> xhat(x.shape());
  std::vector<T> inv_std(n);
  for (std::size_t i = 0; i < n; ++i) {
    T mean = T(0);
    for (std::size_t j = 0; j < d; ++j) mean += x[i * d + j];
    mean /= T(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) {
      const T c = x[i * d + j] - mean;
      var += c * c;
    }
    var /= T(d);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (x[i * d + j] - mean) * is;
      xhat[i * d + j] = h;
      y[i * d + j] = gamma[j] * h + beta[j];
    }
  }
  detail::check_finite(y, "layernorm");
  if (detail::want_tape<T>({&x, &gamma, &beta})) {
    y.set_requires_grad();
    Tensor<T> xc = x, gc = gamma, bc = beta, yc = y, xh = xhat;
    active_tape<T>()->record([xc, gc, bc, yc, xh, inv_std, n, d]() mutable {
      const auto& g = yc.grad();
      if (gc.requires_grad()) {
        auto& gg = gc.grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j)
            gg[j] += g[i * d + j] * xh[i * d + j];
      }
      if (bc.requires_grad()) {
        auto& gb = bc.grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
      }
      if (xc.requires_grad()) {
        auto& gx = xc.grad();
        for (std::size_t i = 0; i < n; ++i) {
          T mg = T(0), mgx = T(0);
          for (std::size_t j = 0; j < d; ++j) {
            const T gh = g[i * d + j] * gc[j];
            mg += gh;
            mgx += gh * xh[i * d + j];
          }
          mg /= T(d);
          mgx /= T(d);
          for (std::size_t j = 0; j < d; ++j) {
            const T gh = g[i * d + j] * gc[j];
            gx[i * d + j] += inv_std[i] * (gh - mg - xh[i * d + j] * mgx);
          }
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Dropout (inverted scaling; identity when not training)

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, std::mt19937_64& rng,
                  bool training) {
  if (rate < 0.0 || rate >= 1.0)
    throw ConfigError("dropout: rate must be in [0,1), got " +
                      std::to_string(rate));
  if (!training || rate == 0.0) return x;
  Tensor<T> y(x.shape());
  std::vector<T> mask(x.numel());
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const T keep_scale = T(1.0 / (1.0 - rate));
  for (std::size_t i = 0; i < x.numel(); ++i) {
    mask[i] = u(rng) < rate ? T(0) : keep_scale;
    y[i] = x[i] * mask[i];
  }
  if (detail::want_tape<T>({&x})) {
    y.set_requires_grad();
    Tensor<T> xc = x, yc = y;
    active_tape<T>()->record([xc, yc, mask]() mutable {
      const auto& g = yc.grad();
      auto& gx = xc.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
    });
  }
  return y;
}

}  // namespace mf
