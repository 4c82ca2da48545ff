#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#ifndef EIGEN_DONT_PARALLELIZE
#define EIGEN_DONT_PARALLELIZE
#endif
#include <Eigen/Core>

#include "civsf/errors.hpp"
#include "civsf/numerics/autograd.hpp"
#include "civsf/numerics/tensor.hpp"

namespace civsf {

// Pre-softmax logit assigned to future positions under a causal mask.
inline constexpr double kMaskedLogit = -1e9;

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
MatMap<T> as_mat(Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return MatMap<T>(t.data(), static_cast<Eigen::Index>(rows),
                   static_cast<Eigen::Index>(cols));
}
template <typename T>
ConstMatMap<T> as_mat(const Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return ConstMatMap<T>(t.data(), static_cast<Eigen::Index>(rows),
                        static_cast<Eigen::Index>(cols));
}

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()) + " differ");
  }
}

template <typename T>
void accumulate(Node<T>& parent, const Tensor<T>& g) {
  if (!parent.requires_grad) return;
  auto& buf = parent.grad_buffer();
  T* d = buf.data();
  const T* s = g.data();
  for (std::size_t i = 0; i < g.numel(); ++i) d[i] += s[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

// C = A B for A [m x k], B [k x n].
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 ||
      a.shape()[1] != b.shape()[0]) {
    throw ShapeError("matmul: inner extents disagree for " +
                     shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  Tensor<T> out({m, n});
  detail::as_mat(out, m, n).noalias() =
      detail::as_mat(a.value(), m, k) * detail::as_mat(b.value(), k, n);
  return record<T>(std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    auto g = detail::as_mat(std::as_const(self.grad), m, n);
    if (pa.requires_grad) {
      detail::as_mat(pa.grad_buffer(), m, k).noalias() +=
          g * detail::as_mat(std::as_const(pb.value), k, n).transpose();
    }
    if (pb.requires_grad) {
      detail::as_mat(pb.grad_buffer(), k, n).noalias() +=
          detail::as_mat(std::as_const(pa.value), m, k).transpose() * g;
    }
  });
}

// X [m x n] + b [n], broadcast over rows.
template <typename T>
Var<T> add_bias(const Var<T>& x, const Var<T>& bias) {
  const std::size_t n = x.cols(), m = x.rows();
  if (bias.numel() != n) {
    throw ShapeError("add_bias: bias " + shape_str(bias.shape()) +
                     " does not match columns of " + shape_str(x.shape()));
  }
  Tensor<T> out = x.value();
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] += bias.value()[c];
  return record<T>(std::move(out), {x, bias}, [m, n](Node<T>& self) {
    detail::accumulate(*self.parents[0], self.grad);
    auto& pb = *self.parents[1];
    if (pb.requires_grad) {
      auto& gb = pb.grad_buffer();
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) gb[c] += self.grad[r * n + c];
    }
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  return add_bias(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
  return record<T>(std::move(out), {a, b}, [](Node<T>& self) {
    detail::accumulate(*self.parents[0], self.grad);
    detail::accumulate(*self.parents[1], self.grad);
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
  return record<T>(std::move(out), {a, b}, [](Node<T>& self) {
    detail::accumulate(*self.parents[0], self.grad);
    auto& pb = *self.parents[1];
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  return record<T>(std::move(out), {a, b}, [](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i)
        g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i)
        g[i] += self.grad[i] * pa.value[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out = a.value();
  for (auto& v : out.vec()) v *= factor;
  return record<T>(std::move(out), {a}, [factor](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& g = pa.grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * factor;
  });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T offset) {
  Tensor<T> out = a.value();
  for (auto& v : out.vec()) v += offset;
  return record<T>(std::move(out), {a}, [](Node<T>& self) {
    detail::accumulate(*self.parents[0], self.grad);
  });
}

namespace detail {

// Unary op whose derivative is expressed through input x and output y.
template <typename T, typename F, typename D>
Var<T> unary(const Var<T>& a, F f, D dfdx) {
  Tensor<T> out = a.value();
  for (auto& v : out.vec()) v = f(v);
  return record<T>(std::move(out), {a}, [dfdx](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& g = pa.grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i)
      g[i] += self.grad[i] * dfdx(pa.value[i], self.value[i]);
  });
}

}  // namespace detail

template <typename T>
Var<T> tanh(const Var<T>& a) {
  return detail::unary(
      a, [](T x) { return std::tanh(x); },
      [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  return detail::unary(
      a, [](T x) { return T(1) / (T(1) + std::exp(-x)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  return detail::unary(
      a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

// GELU, tanh approximation. Smooth everywhere, which keeps finite-difference
// checks meaningful.
template <typename T>
Var<T> gelu(const Var<T>& a) {
  constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T k = T(0.044715);
  return detail::unary(
      a,
      [](T x) { return T(0.5) * x * (T(1) + std::tanh(c * (x + k * x * x * x))); },
      [](T x, T) {
        const T u = c * (x + k * x * x * x);
        const T th = std::tanh(u);
        const T du = c * (T(1) + T(3) * k * x * x);
        return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du;
      });
}

// ---------------------------------------------------------------------------
// Row gathering and layout
// ---------------------------------------------------------------------------

// Row i of the result is row idx[i] of x, or a zero row when idx[i] < 0.
template <typename T>
Var<T> gather_rows(const Var<T>& x, std::vector<std::int64_t> idx) {
  const std::size_t n = x.cols(), rows = x.rows();
  Tensor<T> out({idx.size(), n});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0) continue;
    if (static_cast<std::size_t>(idx[i]) >= rows) {
      throw RangeError("gather_rows: index " + std::to_string(idx[i]) +
                       " outside " + std::to_string(rows) + " rows");
    }
    std::copy_n(x.value().data() + idx[i] * n, n, out.data() + i * n);
  }
  return record<T>(std::move(out), {x},
                   [idx = std::move(idx), n](Node<T>& self) {
                     auto& g = self.parents[0]->grad_buffer();
                     for (std::size_t i = 0; i < idx.size(); ++i) {
                       if (idx[i] < 0) continue;
                       T* dst = g.data() + idx[i] * n;
                       const T* src = self.grad.data() + i * n;
                       for (std::size_t c = 0; c < n; ++c) dst[c] += src[c];
                     }
                   });
}

template <typename T>
Var<T> slice_rows(const Var<T>& x, std::size_t start, std::size_t count) {
  std::vector<std::int64_t> idx(count);
  for (std::size_t i = 0; i < count; ++i)
    idx[i] = static_cast<std::int64_t>(start + i);
  return gather_rows(x, std::move(idx));
}

// Row i of the result is row floor(i / times) of x.
template <typename T>
Var<T> repeat_rows(const Var<T>& x, std::size_t times) {
  std::vector<std::int64_t> idx(x.rows() * times);
  for (std::size_t i = 0; i < idx.size(); ++i)
    idx[i] = static_cast<std::int64_t>(i / times);
  return gather_rows(x, std::move(idx));
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t n = parts.front().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != n) throw ShapeError("concat_rows: column mismatch");
    rows += p.rows();
  }
  Tensor<T> out({rows, n});
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy_n(p.value().data(), p.numel(), out.data() + off);
    off += p.numel();
  }
  return record<T>(std::move(out), parts, [](Node<T>& self) {
    std::size_t off = 0;
    for (auto& p : self.parents) {
      const std::size_t len = p->value.numel();
      if (p->requires_grad) {
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < len; ++i) g[i] += self.grad[off + i];
      }
      off += len;
    }
  });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return record<T>(std::move(out), {x}, [](Node<T>& self) {
    detail::accumulate(*self.parents[0], self.grad);
  });
}

// Element i of the result is element idx[i] of x (flat indices). Used for
// patchify/unpatchify and pixel shuffles.
template <typename T>
Var<T> permute_elems(const Var<T>& x, std::vector<std::int64_t> idx,
                     Shape shape) {
  if (shape_numel(shape) != idx.size()) {
    throw ShapeError("permute_elems: index count does not match " +
                     shape_str(shape));
  }
  Tensor<T> out(std::move(shape));
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = x.value()[idx[i]];
  return record<T>(std::move(out), {x}, [idx = std::move(idx)](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i) g[idx[i]] += self.grad[i];
  });
}

// Mean over consecutive groups of rows: [groups*size x n] -> [groups x n].
template <typename T>
Var<T> mean_groups(const Var<T>& x, std::size_t size) {
  const std::size_t n = x.cols();
  if (size == 0 || x.rows() % size != 0) {
    throw ShapeError("mean_groups: rows not divisible by group size");
  }
  const std::size_t groups = x.rows() / size;
  Tensor<T> out({groups, n});
  const T inv = T(1) / static_cast<T>(size);
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t s = 0; s < size; ++s)
      for (std::size_t c = 0; c < n; ++c)
        out[g * n + c] += x.value()[(g * size + s) * n + c] * inv;
  return record<T>(std::move(out), {x}, [groups, size, n, inv](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t q = 0; q < groups; ++q)
      for (std::size_t s = 0; s < size; ++s)
        for (std::size_t c = 0; c < n; ++c)
          g[(q * size + s) * n + c] += self.grad[q * n + c] * inv;
  });
}

// out[q] = sum_s w[q, s] * x[q*size + s] for w [groups x size],
// x [groups*size x n].
template <typename T>
Var<T> group_weighted_sum(const Var<T>& w, const Var<T>& x) {
  const std::size_t groups = w.rows(), size = w.cols(), n = x.cols();
  if (x.rows() != groups * size) {
    throw ShapeError("group_weighted_sum: " + shape_str(w.shape()) + " vs " +
                     shape_str(x.shape()));
  }
  Tensor<T> out({groups, n});
  for (std::size_t q = 0; q < groups; ++q)
    for (std::size_t s = 0; s < size; ++s) {
      const T ws = w.value()[q * size + s];
      for (std::size_t c = 0; c < n; ++c)
        out[q * n + c] += ws * x.value()[(q * size + s) * n + c];
    }
  return record<T>(std::move(out), {w, x}, [groups, size, n](Node<T>& self) {
    auto& pw = *self.parents[0];
    auto& px = *self.parents[1];
    for (std::size_t q = 0; q < groups; ++q)
      for (std::size_t s = 0; s < size; ++s) {
        T acc = 0;
        for (std::size_t c = 0; c < n; ++c) {
          const T go = self.grad[q * n + c];
          acc += go * px.value[(q * size + s) * n + c];
          if (px.requires_grad)
            px.grad_buffer()[(q * size + s) * n + c] +=
                go * pw.value[q * size + s];
        }
        if (pw.requires_grad) pw.grad_buffer()[q * size + s] += acc;
      }
  });
}

// ---------------------------------------------------------------------------
// Normalization, softmax, attention
// ---------------------------------------------------------------------------

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  T eps = T(1e-5)) {
  const std::size_t m = x.rows(), n = x.cols();
  if (gamma.numel() != n || beta.numel() != n) {
    throw ShapeError("layer_norm: affine size does not match " +
                     shape_str(x.shape()));
  }
  Tensor<T> out(x.shape());
  Tensor<T> xhat(x.shape());
  std::vector<T> inv(m);
  for (std::size_t r = 0; r < m; ++r) {
    const T* xr = x.value().data() + r * n;
    T mean = 0;
    for (std::size_t c = 0; c < n; ++c) mean += xr[c];
    mean /= static_cast<T>(n);
    T var = 0;
    for (std::size_t c = 0; c < n; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= static_cast<T>(n);
    inv[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < n; ++c) {
      const T h = (xr[c] - mean) * inv[r];
      xhat[r * n + c] = h;
      out[r * n + c] = h * gamma.value()[c] + beta.value()[c];
    }
  }
  return record<T>(
      std::move(out), {x, gamma, beta},
      [m, n, xhat = std::move(xhat), inv = std::move(inv)](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        std::vector<T> dxhat(n);
        for (std::size_t r = 0; r < m; ++r) {
          const T* gy = self.grad.data() + r * n;
          const T* h = xhat.data() + r * n;
          T sum_d = 0, sum_dh = 0;
          for (std::size_t c = 0; c < n; ++c) {
            dxhat[c] = gy[c] * pg.value[c];
            sum_d += dxhat[c];
            sum_dh += dxhat[c] * h[c];
            if (pg.requires_grad) pg.grad_buffer()[c] += gy[c] * h[c];
            if (pb.requires_grad) pb.grad_buffer()[c] += gy[c];
          }
          if (px.requires_grad) {
            T* gx = px.grad_buffer().data() + r * n;
            const T k = inv[r] / static_cast<T>(n);
            for (std::size_t c = 0; c < n; ++c)
              gx[c] += k * (static_cast<T>(n) * dxhat[c] - sum_d - h[c] * sum_dh);
          }
        }
      });
}

template <typename T>
Var<T> softmax_rows(const Var<T>& x) {
  const std::size_t m = x.rows(), n = x.cols();
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < m; ++r) {
    const T* xr = x.value().data() + r * n;
    T mx = xr[0];
    for (std::size_t c = 1; c < n; ++c) mx = std::max(mx, xr[c]);
    T z = 0;
    for (std::size_t c = 0; c < n; ++c) {
      out[r * n + c] = std::exp(xr[c] - mx);
      z += out[r * n + c];
    }
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] /= z;
  }
  return record<T>(std::move(out), {x}, [m, n](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < m; ++r) {
      const T* y = self.value.data() + r * n;
      const T* gy = self.grad.data() + r * n;
      T dot = 0;
      for (std::size_t c = 0; c < n; ++c) dot += gy[c] * y[c];
      for (std::size_t c = 0; c < n; ++c) g[r * n + c] += y[c] * (gy[c] - dot);
    }
  });
}

// Multi-head scaled dot-product attention over `groups` independent
// sequences of length `seq`; q, k, v are [groups*seq x D] with row
// g*seq + s. With `causal`, position s attends to positions <= s only: the
// logits of later positions are set to kMaskedLogit before the softmax.
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v,
                 std::size_t groups, std::size_t seq, std::size_t heads,
                 bool causal) {
  const std::size_t d = q.cols();
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("attention: hidden " + std::to_string(d) +
                      " not divisible by heads " + std::to_string(heads));
  }
  if (seq == 0 || q.rows() != groups * seq) {
    throw ShapeError("attention: " + shape_str(q.shape()) + " is not " +
                     std::to_string(groups) + " groups of " +
                     std::to_string(seq));
  }
  detail::require_same_shape(q, k, "attention");
  detail::require_same_shape(q, v, "attention");
  const std::size_t dh = d / heads;
  const T scl = T(1) / std::sqrt(static_cast<T>(dh));
  // probs[((g*heads + h)*seq + i)*seq + j]
  std::vector<T> probs(groups * heads * seq * seq, T(0));
  Tensor<T> out(q.shape());
  const T* Q = q.value().data();
  const T* K = k.value().data();
  const T* V = v.value().data();
  std::vector<T> logits(seq);
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < seq; ++i) {
        const T* qi = Q + (g * seq + i) * d + h * dh;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < seq; ++j) {
          if (causal && j > i) {
            logits[j] = static_cast<T>(kMaskedLogit);
          } else {
            const T* kj = K + (g * seq + j) * d + h * dh;
            T s = 0;
            for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
            logits[j] = s * scl;
          }
          mx = std::max(mx, logits[j]);
        }
        T* p = probs.data() + ((g * heads + h) * seq + i) * seq;
        T z = 0;
        for (std::size_t j = 0; j < seq; ++j) {
          p[j] = std::exp(logits[j] - mx);
          z += p[j];
        }
        for (std::size_t j = 0; j < seq; ++j) p[j] /= z;
        T* oi = out.data() + (g * seq + i) * d + h * dh;
        const std::size_t last = causal ? i + 1 : seq;
        for (std::size_t j = 0; j < last; ++j) {
          const T* vj = V + (g * seq + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += p[j] * vj[c];
        }
      }
  return record<T>(
      std::move(out), {q, k, v},
      [groups, seq, heads, d, dh, scl, causal,
       probs = std::move(probs)](Node<T>& self) {
        auto& pq = *self.parents[0];
        auto& pk = *self.parents[1];
        auto& pv = *self.parents[2];
        T* dQ = pq.requires_grad ? pq.grad_buffer().data() : nullptr;
        T* dK = pk.requires_grad ? pk.grad_buffer().data() : nullptr;
        T* dV = pv.requires_grad ? pv.grad_buffer().data() : nullptr;
        const T* Q = pq.value.data();
        const T* K = pk.value.data();
        const T* V = pv.value.data();
        std::vector<T> dp(seq);
        for (std::size_t g = 0; g < groups; ++g)
          for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i < seq; ++i) {
              const T* p = probs.data() + ((g * heads + h) * seq + i) * seq;
              const T* go = self.grad.data() + (g * seq + i) * d + h * dh;
              const std::size_t last = causal ? i + 1 : seq;
              T dot = 0;
              for (std::size_t j = 0; j < last; ++j) {
                const T* vj = V + (g * seq + j) * d + h * dh;
                T s = 0;
                for (std::size_t c = 0; c < dh; ++c) s += go[c] * vj[c];
                dp[j] = s;
                dot += s * p[j];
                if (dV) {
                  T* dvj = dV + (g * seq + j) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) dvj[c] += p[j] * go[c];
                }
              }
              const T* qi = Q + (g * seq + i) * d + h * dh;
              for (std::size_t j = 0; j < last; ++j) {
                const T ds = p[j] * (dp[j] - dot) * scl;
                if (ds == T(0)) continue;
                const T* kj = K + (g * seq + j) * d + h * dh;
                if (dQ) {
                  T* dqi = dQ + (g * seq + i) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) dqi[c] += ds * kj[c];
                }
                if (dK) {
                  T* dkj = dK + (g * seq + j) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) dkj[c] += ds * qi[c];
                }
              }
            }
      });
}

// ---------------------------------------------------------------------------
// Recurrent
// ---------------------------------------------------------------------------

// Unidirectional LSTM over `batch` sequences of `steps` rows each; x is
// [batch*steps x in] with row b*steps + t. Gate order (input, forget, cell,
// output); zero initial state. Returns hidden states [batch*steps x H].
template <typename T>
Var<T> lstm(const Var<T>& x, const Var<T>& w_ih, const Var<T>& w_hh,
            const Var<T>& bias, std::size_t batch, std::size_t steps) {
  const std::size_t in = x.cols();
  const std::size_t H = w_hh.shape()[0];
  if (x.rows() != batch * steps || w_ih.shape() != Shape{in, 4 * H} ||
      w_hh.shape() != Shape{H, 4 * H} || bias.numel() != 4 * H) {
    throw ShapeError("lstm: inconsistent shapes x" + shape_str(x.shape()) +
                     " w_ih" + shape_str(w_ih.shape()) + " w_hh" +
                     shape_str(w_hh.shape()));
  }
  const std::size_t G4 = 4 * H;
  // Pre-activations from the input for every row at once.
  Tensor<T> xw({batch * steps, G4});
  detail::as_mat(xw, batch * steps, G4).noalias() =
      detail::as_mat(x.value(), batch * steps, in) *
      detail::as_mat(w_ih.value(), in, G4);
  // Activated gates [batch*steps x 4H] and cell states [batch*steps x H].
  Tensor<T> gates({batch * steps, G4});
  Tensor<T> cells({batch * steps, H});
  Tensor<T> out({batch * steps, H});
  Tensor<T> hprev({batch, H});
  Tensor<T> pre({batch, G4});
  for (std::size_t t = 0; t < steps; ++t) {
    detail::as_mat(pre, batch, G4).noalias() =
        detail::as_mat(std::as_const(hprev), batch, H) *
        detail::as_mat(w_hh.value(), H, G4);
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t row = b * steps + t;
      T* gr = gates.data() + row * G4;
      const T* xr = xw.data() + row * G4;
      const T* pr = pre.data() + b * G4;
      for (std::size_t c = 0; c < G4; ++c) gr[c] = xr[c] + pr[c] + bias.value()[c];
      for (std::size_t c = 0; c < H; ++c) {
        const T ig = T(1) / (T(1) + std::exp(-gr[c]));
        const T fg = T(1) / (T(1) + std::exp(-gr[H + c]));
        const T gg = std::tanh(gr[2 * H + c]);
        const T og = T(1) / (T(1) + std::exp(-gr[3 * H + c]));
        gr[c] = ig;
        gr[H + c] = fg;
        gr[2 * H + c] = gg;
        gr[3 * H + c] = og;
        const T cp = t ? cells[(row - 1) * H + c] : T(0);
        const T cn = fg * cp + ig * gg;
        cells[row * H + c] = cn;
        out[row * H + c] = og * std::tanh(cn);
        hprev[b * H + c] = out[row * H + c];
      }
    }
  }
  return record<T>(
      std::move(out), {x, w_ih, w_hh, bias},
      [batch, steps, in, H, G4, gates = std::move(gates),
       cells = std::move(cells)](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pih = *self.parents[1];
        auto& phh = *self.parents[2];
        auto& pb = *self.parents[3];
        Tensor<T> dgates({batch * steps, G4});
        Tensor<T> dh_next({batch, H});
        Tensor<T> dc_next({batch, H});
        Tensor<T> dpre({batch, G4});
        Tensor<T> hprev({batch, H});
        for (std::size_t tt = steps; tt-- > 0;) {
          for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t row = b * steps + tt;
            const T* gr = gates.data() + row * G4;
            T* dg = dgates.data() + row * G4;
            for (std::size_t c = 0; c < H; ++c) {
              const T ig = gr[c], fg = gr[H + c], gg = gr[2 * H + c],
                      og = gr[3 * H + c];
              const T cn = cells[row * H + c];
              const T cp = tt ? cells[(row - 1) * H + c] : T(0);
              const T tc = std::tanh(cn);
              const T dh = self.grad[row * H + c] + dh_next[b * H + c];
              const T dc = dh * og * (T(1) - tc * tc) + dc_next[b * H + c];
              dg[c] = dc * gg * ig * (T(1) - ig);
              dg[H + c] = dc * cp * fg * (T(1) - fg);
              dg[2 * H + c] = dc * ig * (T(1) - gg * gg);
              dg[3 * H + c] = dh * tc * og * (T(1) - og);
              dc_next[b * H + c] = dc * fg;
            }
            std::copy_n(dg, G4, dpre.data() + b * G4);
          }
          detail::as_mat(dh_next, batch, H).noalias() =
              detail::as_mat(std::as_const(dpre), batch, G4) *
              detail::as_mat(std::as_const(phh.value), H, G4).transpose();
          if (phh.requires_grad && tt > 0) {
            for (std::size_t b = 0; b < batch; ++b)
              std::copy_n(self.value.data() + (b * steps + tt - 1) * H, H,
                          hprev.data() + b * H);
            detail::as_mat(phh.grad_buffer(), H, G4).noalias() +=
                detail::as_mat(std::as_const(hprev), batch, H).transpose() *
                detail::as_mat(std::as_const(dpre), batch, G4);
          }
        }
        const auto DG = detail::as_mat(std::as_const(dgates), batch * steps, G4);
        if (px.requires_grad) {
          detail::as_mat(px.grad_buffer(), batch * steps, in).noalias() +=
              DG * detail::as_mat(std::as_const(pih.value), in, G4).transpose();
        }
        if (pih.requires_grad) {
          detail::as_mat(pih.grad_buffer(), in, G4).noalias() +=
              detail::as_mat(std::as_const(px.value), batch * steps, in)
                  .transpose() *
              DG;
        }
        if (pb.requires_grad) {
          auto& gb = pb.grad_buffer();
          for (std::size_t r = 0; r < batch * steps; ++r)
            for (std::size_t c = 0; c < G4; ++c) gb[c] += dgates[r * G4 + c];
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

template <typename T>
Var<T> sum(const Var<T>& a) {
  T s = 0;
  for (T v : a.value().vec()) s += v;
  return record<T>(Tensor<T>({1}, std::vector<T>{s}), {a}, [](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[0];
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Var<T> mse(const Var<T>& pred, const Var<T>& target) {
  detail::require_same_shape(pred, target, "mse");
  const std::size_t n = pred.numel();
  if (n == 0) throw DomainError("mse: empty input");
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T e = pred.value()[i] - target.value()[i];
    s += e * e;
  }
  s /= static_cast<T>(n);
  return record<T>(Tensor<T>({1}, std::vector<T>{s}), {pred, target},
                   [n](Node<T>& self) {
                     auto& pp = *self.parents[0];
                     auto& pt = *self.parents[1];
                     const T k = T(2) * self.grad[0] / static_cast<T>(n);
                     for (std::size_t i = 0; i < n; ++i) {
                       const T e = pp.value[i] - pt.value[i];
                       if (pp.requires_grad) pp.grad_buffer()[i] += k * e;
                       if (pt.requires_grad) pt.grad_buffer()[i] -= k * e;
                     }
                   });
}

template <typename T>
Var<T> mae(const Var<T>& pred, const Var<T>& target) {
  detail::require_same_shape(pred, target, "mae");
  const std::size_t n = pred.numel();
  if (n == 0) throw DomainError("mae: empty input");
  T s = 0;
  for (std::size_t i = 0; i < n; ++i)
    s += std::abs(pred.value()[i] - target.value()[i]);
  s /= static_cast<T>(n);
  return record<T>(Tensor<T>({1}, std::vector<T>{s}), {pred, target},
                   [n](Node<T>& self) {
                     auto& pp = *self.parents[0];
                     auto& pt = *self.parents[1];
                     const T k = self.grad[0] / static_cast<T>(n);
                     for (std::size_t i = 0; i < n; ++i) {
                       const T e = pp.value[i] - pt.value[i];
                       const T sg = e > T(0) ? T(1) : (e < T(0) ? T(-1) : T(0));
                       if (pp.requires_grad) pp.grad_buffer()[i] += k * sg;
                       if (pt.requires_grad) pt.grad_buffer()[i] -= k * sg;
                     }
                   });
}

// Mean cross-entropy of logits [N x K] against integer labels.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::vector<int> labels) {
  const std::size_t n = logits.rows(), k = logits.cols();
  if (labels.size() != n || n == 0) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) +
                     " labels for " + shape_str(logits.shape()));
  }
  Tensor<T> probs(logits.shape());
  T total = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const T* x = logits.value().data() + r * k;
    T mx = x[0];
    for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, x[c]);
    T z = 0;
    for (std::size_t c = 0; c < k; ++c) z += std::exp(x[c] - mx);
    const T lz = std::log(z) + mx;
    for (std::size_t c = 0; c < k; ++c) probs[r * k + c] = std::exp(x[c] - lz);
    const int y = labels[r];
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw DomainError("cross_entropy: label " + std::to_string(y) +
                        " outside [0, " + std::to_string(k) + ")");
    }
    total += lz - x[y];
  }
  total /= static_cast<T>(n);
  return record<T>(Tensor<T>({1}, std::vector<T>{total}), {logits},
                   [n, k, probs = std::move(probs),
                    labels = std::move(labels)](Node<T>& self) {
                     auto& g = self.parents[0]->grad_buffer();
                     const T s = self.grad[0] / static_cast<T>(n);
                     for (std::size_t r = 0; r < n; ++r)
                       for (std::size_t c = 0; c < k; ++c)
                         g[r * k + c] += s * (probs[r * k + c] -
                                              (static_cast<int>(c) == labels[r]
                                                   ? T(1)
                                                   : T(0)));
                   });
}

}  // namespace civsf
