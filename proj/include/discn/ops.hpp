#pragma once

#include <Eigen/Core>
#include <cmath>
#include <vector>

#include "discn/tensor.hpp"

namespace discn {

template <class T>
using EigenMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<EigenMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const EigenMat<T>>;

// ---------------------------------------------------------------------------
// broadcasting helpers (NumPy-style, right-aligned)
// ---------------------------------------------------------------------------

inline Shape bcast_shape(const Shape& a, const Shape& b) {
  int nd = static_cast<int>(std::max(a.size(), b.size()));
  Shape out(nd, 1);
  for (int i = 0; i < nd; ++i) {
    long da = i < static_cast<int>(a.size()) ? a[a.size() - 1 - i] : 1;
    long db = i < static_cast<int>(b.size()) ? b[b.size() - 1 - i] : 1;
    require_dim(da == db || da == 1 || db == 1,
                "cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    out[nd - 1 - i] = std::max(da, db);
  }
  return out;
}

inline std::vector<long> bcast_strides(const Shape& in, const Shape& out) {
  std::vector<long> strides(out.size(), 0);
  long s = 1;
  for (int i = static_cast<int>(in.size()) - 1, o = static_cast<int>(out.size()) - 1; o >= 0; --o, --i) {
    if (i >= 0) {
      strides[o] = (in[i] == 1 && out[o] != 1) ? 0 : s;
      s *= in[i];
    } else {
      strides[o] = 0;
    }
  }
  return strides;
}

template <class F>
void for_each_bcast(const Shape& out, const std::vector<long>& sa, const std::vector<long>& sb, F&& f) {
  long n = numel(out);
  int nd = static_cast<int>(out.size());
  if (nd == 0) {
    f(0, 0, 0);
    return;
  }
  std::vector<long> ctr(nd, 0);
  long ia = 0, ib = 0;
  for (long i = 0; i < n; ++i) {
    f(i, ia, ib);
    for (int d = nd - 1; d >= 0; --d) {
      ++ctr[d];
      ia += sa[d];
      ib += sb[d];
      if (ctr[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      ctr[d] = 0;
    }
  }
}

namespace detail {

enum class BinOp { Add, Sub, Mul };

template <class T>
Tensor<T> binary_bcast(const Tensor<T>& a, const Tensor<T>& b, BinOp op) {
  Shape out_shape = bcast_shape(a.shape(), b.shape());
  auto sa = bcast_strides(a.shape(), out_shape);
  auto sb = bcast_strides(b.shape(), out_shape);
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<T> out(static_cast<size_t>(numel(out_shape)));
  bool same = a.shape() == b.shape();
  if (same) {
    switch (op) {
      case BinOp::Add:
        for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
        break;
      case BinOp::Sub:
        for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
        break;
      case BinOp::Mul:
        for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
        break;
    }
  } else {
    for_each_bcast(out_shape, sa, sb, [&](long i, long ia, long ib) {
      switch (op) {
        case BinOp::Add: out[i] = av[ia] + bv[ib]; break;
        case BinOp::Sub: out[i] = av[ia] - bv[ib]; break;
        case BinOp::Mul: out[i] = av[ia] * bv[ib]; break;
      }
    });
  }
  Shape ash = a.shape(), bsh = b.shape();
  return make_op_node<T>(
      out_shape, std::move(out), {a, b},
      [op, out_shape, sa, sb, ash, bsh](Node<T>& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        const auto& g = n.grad;
        if (pa.requires_grad) {
          pa.ensure_grad();
          for_each_bcast(out_shape, sa, sb, [&](long i, long ia, long ib) {
            switch (op) {
              case BinOp::Add:
              case BinOp::Sub: pa.grad[ia] += g[i]; break;
              case BinOp::Mul: pa.grad[ia] += g[i] * pb.value[ib]; break;
            }
          });
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          for_each_bcast(out_shape, sa, sb, [&](long i, long ia, long ib) {
            switch (op) {
              case BinOp::Add: pb.grad[ib] += g[i]; break;
              case BinOp::Sub: pb.grad[ib] -= g[i]; break;
              case BinOp::Mul: pb.grad[ib] += g[i] * pa.value[ia]; break;
            }
          });
        }
      });
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_bcast(a, b, detail::BinOp::Add);
}
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_bcast(a, b, detail::BinOp::Sub);
}
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_bcast(a, b, detail::BinOp::Mul);
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  std::vector<T> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
  return make_op_node<T>(a.shape(), std::move(out), {a}, [c](Node<T>& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i] * c;
  });
}

// ---------------------------------------------------------------------------
// matmul / transpose
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
void gemm(const T* a, const T* b, T* c, long m, long k, long n, bool accumulate) {
  ConstMatMap<T> A(a, m, k), B(b, k, n);
  MatMap<T> C(c, m, n);
  if (accumulate)
    C.noalias() += A * B;
  else
    C.noalias() = A * B;
}

// C[m,n] -> A gets C * B^T
template <class T>
void gemm_nt(const T* a, const T* b, T* c, long m, long k, long n, bool accumulate) {
  // a: [m,k] times b^T where b: [n,k]
  ConstMatMap<T> A(a, m, k), B(b, n, k);
  MatMap<T> C(c, m, n);
  if (accumulate)
    C.noalias() += A * B.transpose();
  else
    C.noalias() = A * B.transpose();
}

template <class T>
void gemm_tn(const T* a, const T* b, T* c, long m, long k, long n, bool accumulate) {
  // a^T where a: [k,m], times b: [k,n]
  ConstMatMap<T> A(a, k, m), B(b, k, n);
  MatMap<T> C(c, m, n);
  if (accumulate)
    C.noalias() += A.transpose() * B;
  else
    C.noalias() = A.transpose() * B;
}

}  // namespace detail

// Supports [m,k]x[k,n], and batched forms [B,m,k]x[k,n], [m,k]x[B,k,n],
// [B,m,k]x[B,k,n]. A 2-D operand is broadcast over the batch and its gradient
// accumulates across it.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  require_dim((as.size() == 2 || as.size() == 3) && (bs.size() == 2 || bs.size() == 3),
              "matmul expects 2-D or 3-D operands, got " + shape_str(as) + " and " + shape_str(bs));
  long Ba = as.size() == 3 ? as[0] : 0;
  long Bb = bs.size() == 3 ? bs[0] : 0;
  long m = as[as.size() - 2], k = as[as.size() - 1];
  long k2 = bs[bs.size() - 2], n = bs[bs.size() - 1];
  require_dim(k == k2, "matmul inner extents differ: " + shape_str(as) + " vs " + shape_str(bs));
  if (Ba && Bb)
    require_dim(Ba == Bb, "matmul batch extents differ: " + shape_str(as) + " vs " + shape_str(bs));
  long B = std::max<long>({Ba, Bb, 0});

  Shape out_shape = (B > 0) ? Shape{B, m, n} : Shape{m, n};
  std::vector<T> out(static_cast<size_t>(numel(out_shape)));
  long nb = std::max<long>(B, 1);
  for (long i = 0; i < nb; ++i) {
    const T* pa = a.data().data() + (Ba ? i * m * k : 0);
    const T* pb = b.data().data() + (Bb ? i * k * n : 0);
    detail::gemm(pa, pb, out.data() + i * m * n, m, k, n, false);
  }
  return make_op_node<T>(
      out_shape, std::move(out), {a, b}, [Ba, Bb, m, k, n](Node<T>& node) {
        long nb = std::max<long>({Ba, Bb, 1});
        auto& pa = *node.parents[0];
        auto& pb = *node.parents[1];
        if (pa.requires_grad) {
          pa.ensure_grad();
          for (long i = 0; i < nb; ++i) {
            const T* g = node.grad.data() + i * m * n;
            const T* vb = pb.value.data() + (Bb ? i * k * n : 0);
            T* ga = pa.grad.data() + (Ba ? i * m * k : 0);
            detail::gemm_nt(g, vb, ga, m, n, k, true);  // dA = dC * B^T
          }
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          for (long i = 0; i < nb; ++i) {
            const T* g = node.grad.data() + i * m * n;
            const T* va = pa.value.data() + (Ba ? i * m * k : 0);
            T* gb = pb.grad.data() + (Bb ? i * k * n : 0);
            detail::gemm_tn(va, g, gb, k, m, n, true);  // dB = A^T * dC
          }
        }
      });
}

template <class T>
Tensor<T> transpose_last2(const Tensor<T>& a) {
  const Shape& s = a.shape();
  require_dim(s.size() >= 2, "transpose_last2 expects rank >= 2, got " + shape_str(s));
  long m = s[s.size() - 2], n = s[s.size() - 1];
  long batch = numel(s) / (m * n);
  Shape out_shape = s;
  std::swap(out_shape[s.size() - 2], out_shape[s.size() - 1]);
  std::vector<T> out(a.data().size());
  for (long b = 0; b < batch; ++b)
    for (long i = 0; i < m; ++i)
      for (long j = 0; j < n; ++j) out[b * m * n + j * m + i] = a.data()[b * m * n + i * n + j];
  return make_op_node<T>(out_shape, std::move(out), {a}, [m, n, batch](Node<T>& node) {
    auto& p = *node.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (long b = 0; b < batch; ++b)
      for (long i = 0; i < m; ++i)
        for (long j = 0; j < n; ++j) p.grad[b * m * n + i * n + j] += node.grad[b * m * n + j * m + i];
  });
}

// ---------------------------------------------------------------------------
// pointwise nonlinearities
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] > T(0) ? a.data()[i] : T(0);
  return make_op_node<T>(a.shape(), std::move(out), {a}, [](Node<T>& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i)
      if (p.value[i] > T(0)) p.grad[i] += n.grad[i];
  });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  std::vector<T> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-a.data()[i]));
  return make_op_node<T>(a.shape(), std::move(out), {a}, [](Node<T>& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) {
      T y = n.value[i];
      p.grad[i] += n.grad[i] * y * (T(1) - y);
    }
  });
}

template <class T>
Tensor<T> tanh_op(const Tensor<T>& a) {
  std::vector<T> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a.data()[i]);
  return make_op_node<T>(a.shape(), std::move(out), {a}, [](Node<T>& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) {
      T y = n.value[i];
      p.grad[i] += n.grad[i] * (T(1) - y * y);
    }
  });
}

// ---------------------------------------------------------------------------
// softmax / layer norm
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> softmax(const Tensor<T>& a, int axis) {
  const Shape& s = a.shape();
  int nd = static_cast<int>(s.size());
  if (axis < 0) axis += nd;
  require_dim(axis >= 0 && axis < nd, "softmax axis out of range for " + shape_str(s));
  long len = s[axis];
  long inner = 1, outer = 1;
  for (int i = axis + 1; i < nd; ++i) inner *= s[i];
  for (int i = 0; i < axis; ++i) outer *= s[i];

  std::vector<T> out(a.data().size());
  const auto& x = a.data();
  for (long o = 0; o < outer; ++o) {
    for (long in = 0; in < inner; ++in) {
      long base = o * len * inner + in;
      T mx = x[base];
      for (long j = 1; j < len; ++j) mx = std::max(mx, x[base + j * inner]);
      T sum = T(0);
      for (long j = 0; j < len; ++j) {
        T e = std::exp(x[base + j * inner] - mx);
        out[base + j * inner] = e;
        sum += e;
      }
      for (long j = 0; j < len; ++j) out[base + j * inner] /= sum;
    }
  }
  return make_op_node<T>(s, std::move(out), {a}, [len, inner, outer](Node<T>& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (long o = 0; o < outer; ++o) {
      for (long in = 0; in < inner; ++in) {
        long base = o * len * inner + in;
        T dot = T(0);
        for (long j = 0; j < len; ++j) dot += n.grad[base + j * inner] * n.value[base + j * inner];
        for (long j = 0; j < len; ++j) {
          long idx = base + j * inner;
          p.grad[idx] += n.value[idx] * (n.grad[idx] - dot);
        }
      }
    }
  });
}

// Normalization over the last dimension with learnable gain/offset.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  const Shape& s = x.shape();
  long d = s.back();
  require_dim(gamma.numel() == d && beta.numel() == d,
              "layer_norm gain/offset must have length " + std::to_string(d));
  long rows = numel(s) / d;
  std::vector<T> out(x.data().size());
  std::vector<T> mu(rows), istd(rows);
  const auto& xv = x.data();
  const auto& gv = gamma.data();
  const auto& bv = beta.data();
  for (long r = 0; r < rows; ++r) {
    const T* px = xv.data() + r * d;
    T m = T(0);
    for (long j = 0; j < d; ++j) m += px[j];
    m /= T(d);
    T var = T(0);
    for (long j = 0; j < d; ++j) var += (px[j] - m) * (px[j] - m);
    var /= T(d);
    T is = T(1) / std::sqrt(var + eps);
    mu[r] = m;
    istd[r] = is;
    for (long j = 0; j < d; ++j) out[r * d + j] = gv[j] * (px[j] - m) * is + bv[j];
  }
  return make_op_node<T>(
      s, std::move(out), {x, gamma, beta},
      [rows, d, mu = std::move(mu), istd = std::move(istd)](Node<T>& n) {
        auto& px = *n.parents[0];
        auto& pg = *n.parents[1];
        auto& pb = *n.parents[2];
        const auto& g = n.grad;
        for (long r = 0; r < rows; ++r) {
          const T* xrow = px.value.data() + r * d;
          const T* grow = g.data() + r * d;
          T m = mu[r], is = istd[r];
          if (pg.requires_grad || pb.requires_grad) {
            pg.ensure_grad();
            pb.ensure_grad();
            for (long j = 0; j < d; ++j) {
              T xh = (xrow[j] - m) * is;
              pg.grad[j] += grow[j] * xh;
              pb.grad[j] += grow[j];
            }
          }
          if (px.requires_grad) {
            px.ensure_grad();
            T mean_dxh = T(0), mean_dxh_xh = T(0);
            for (long j = 0; j < d; ++j) {
              T xh = (xrow[j] - m) * is;
              T dxh = grow[j] * pg.value[j];
              mean_dxh += dxh;
              mean_dxh_xh += dxh * xh;
            }
            mean_dxh /= T(d);
            mean_dxh_xh /= T(d);
            for (long j = 0; j < d; ++j) {
              T xh = (xrow[j] - m) * is;
              T dxh = grow[j] * pg.value[j];
              px.grad[r * d + j] += is * (dxh - mean_dxh - xh * mean_dxh_xh);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// reductions / shape ops
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sum_all(const Tensor<T>& a) {
  T s = T(0);
  for (T v : a.data()) s += v;
  return make_op_node<T>({1}, {s}, {a}, [](Node<T>& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (auto& g : p.grad) g += n.grad[0];
  });
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& a) {
  T s = T(0);
  for (T v : a.data()) s += v;
  T inv = T(1) / T(a.numel());
  return make_op_node<T>({1}, {s * inv}, {a}, [inv](Node<T>& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (auto& g : p.grad) g += n.grad[0] * inv;
  });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, const Shape& shape) {
  require_dim(numel(shape) == a.numel(),
              "reshape " + shape_str(a.shape()) + " -> " + shape_str(shape) + " changes element count");
  std::vector<T> out = a.data();
  return make_op_node<T>(shape, std::move(out), {a}, [](Node<T>& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
  });
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  require(!parts.empty(), ErrorKind::Contract, "concat of empty list");
  const Shape& s0 = parts[0].shape();
  int nd = static_cast<int>(s0.size());
  if (axis < 0) axis += nd;
  require_dim(axis >= 0 && axis < nd, "concat axis out of range");
  Shape out_shape = s0;
  long total_axis = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    require_dim(static_cast<int>(s.size()) == nd, "concat rank mismatch");
    for (int i = 0; i < nd; ++i)
      if (i != axis)
        require_dim(s[i] == s0[i], "concat shape mismatch: " + shape_str(s) + " vs " + shape_str(s0));
    total_axis += s[axis];
  }
  out_shape[axis] = total_axis;
  long outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s0[i];
  for (int i = axis + 1; i < nd; ++i) inner *= s0[i];

  std::vector<T> out(static_cast<size_t>(numel(out_shape)));
  long offset = 0;
  for (const auto& p : parts) {
    long len = p.shape()[axis];
    const auto& v = p.data();
    for (long o = 0; o < outer; ++o)
      std::copy(v.begin() + o * len * inner, v.begin() + (o + 1) * len * inner,
                out.begin() + (o * total_axis + offset) * inner);
    offset += len;
  }
  std::vector<long> lens;
  for (const auto& p : parts) lens.push_back(p.shape()[axis]);
  return make_op_node<T>(
      out_shape, std::move(out), parts, [outer, inner, total_axis, lens](Node<T>& n) {
        long offset = 0;
        for (size_t pi = 0; pi < n.parents.size(); ++pi) {
          auto& p = *n.parents[pi];
          long len = lens[pi];
          if (p.requires_grad) {
            p.ensure_grad();
            for (long o = 0; o < outer; ++o)
              for (long j = 0; j < len * inner; ++j)
                p.grad[o * len * inner + j] += n.grad[(o * total_axis + offset) * inner + j];
          }
          offset += len;
        }
      });
}

template <class T>
Tensor<T> slice(const Tensor<T>& a, int axis, long start, long len) {
  const Shape& s = a.shape();
  int nd = static_cast<int>(s.size());
  if (axis < 0) axis += nd;
  require_dim(axis >= 0 && axis < nd, "slice axis out of range");
  require_dim(start >= 0 && len >= 0 && start + len <= s[axis],
              "slice [" + std::to_string(start) + "," + std::to_string(start + len) + ") out of bounds for " +
                  shape_str(s));
  Shape out_shape = s;
  out_shape[axis] = len;
  long outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (int i = axis + 1; i < nd; ++i) inner *= s[i];
  long full = s[axis];
  std::vector<T> out(static_cast<size_t>(numel(out_shape)));
  for (long o = 0; o < outer; ++o)
    std::copy(a.data().begin() + (o * full + start) * inner, a.data().begin() + (o * full + start + len) * inner,
              out.begin() + o * len * inner);
  return make_op_node<T>(out_shape, std::move(out), {a}, [outer, inner, full, start, len](Node<T>& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (long o = 0; o < outer; ++o)
      for (long j = 0; j < len * inner; ++j)
        p.grad[(o * full + start) * inner + j] += n.grad[o * len * inner + j];
  });
}

// ---------------------------------------------------------------------------
// unfold / fold (sliding-window tokenization and its count-normalized inverse)
// ---------------------------------------------------------------------------

struct WindowGrid {
  long gh = 0, gw = 0;
  long count() const { return gh * gw; }
};

inline long axis_windows(long extent, long k, long p, long s) {
  return (extent + 2 * p - k) / s + 1;  // floor division
}

inline WindowGrid window_grid(long h, long w, long k, long p, long s) {
  require_dim(k >= 1 && s >= 1 && p >= 0, "unfold requires k >= 1, s >= 1, p >= 0");
  require_dim(h + 2 * p >= k && w + 2 * p >= k,
              "window " + std::to_string(k) + "x" + std::to_string(k) + " larger than padded image " +
                  std::to_string(h + 2 * p) + "x" + std::to_string(w + 2 * p));
  return {axis_windows(h, k, p, s), axis_windows(w, k, p, s)};
}

// [C,H,W] -> [n, C*k*k] or [B,C,H,W] -> [B, n, C*k*k]; windows flattened
// channel-first, zero padding.
template <class T>
Tensor<T> unfold(const Tensor<T>& img, long k, long p, long s) {
  const Shape& sh = img.shape();
  require_dim(sh.size() == 3 || sh.size() == 4, "unfold expects [C,H,W] or [B,C,H,W], got " + shape_str(sh));
  bool batched = sh.size() == 4;
  long B = batched ? sh[0] : 1;
  long C = sh[batched ? 1 : 0], H = sh[batched ? 2 : 1], W = sh[batched ? 3 : 2];
  WindowGrid g = window_grid(H, W, k, p, s);
  long n = g.count(), d = C * k * k;
  Shape out_shape = batched ? Shape{B, n, d} : Shape{n, d};
  std::vector<T> out(static_cast<size_t>(B * n * d), T(0));
  const auto& x = img.data();
  for (long b = 0; b < B; ++b) {
    const T* xb = x.data() + b * C * H * W;
    T* ob = out.data() + b * n * d;
    for (long gy = 0; gy < g.gh; ++gy) {
      for (long gx = 0; gx < g.gw; ++gx) {
        long t = gy * g.gw + gx;
        for (long c = 0; c < C; ++c) {
          for (long ky = 0; ky < k; ++ky) {
            long y = gy * s - p + ky;
            if (y < 0 || y >= H) continue;
            for (long kx = 0; kx < k; ++kx) {
              long xcol = gx * s - p + kx;
              if (xcol < 0 || xcol >= W) continue;
              ob[t * d + (c * k + ky) * k + kx] = xb[(c * H + y) * W + xcol];
            }
          }
        }
      }
    }
  }
  return make_op_node<T>(out_shape, std::move(out), {img}, [B, C, H, W, k, p, s, g, n, d](Node<T>& node) {
    auto& pimg = *node.parents[0];
    if (!pimg.requires_grad) return;
    pimg.ensure_grad();
    for (long b = 0; b < B; ++b) {
      T* gb = pimg.grad.data() + b * C * H * W;
      const T* ng = node.grad.data() + b * n * d;
      for (long gy = 0; gy < g.gh; ++gy)
        for (long gx = 0; gx < g.gw; ++gx) {
          long t = gy * g.gw + gx;
          for (long c = 0; c < C; ++c)
            for (long ky = 0; ky < k; ++ky) {
              long y = gy * s - p + ky;
              if (y < 0 || y >= H) continue;
              for (long kx = 0; kx < k; ++kx) {
                long xcol = gx * s - p + kx;
                if (xcol < 0 || xcol >= W) continue;
                gb[(c * H + y) * W + xcol] += ng[t * d + (c * k + ky) * k + kx];
              }
            }
        }
    }
  });
}

inline std::vector<int> fold_counts(long H, long W, long k, long p, long s) {
  WindowGrid g = window_grid(H, W, k, p, s);
  std::vector<int> counts(static_cast<size_t>(H * W), 0);
  for (long gy = 0; gy < g.gh; ++gy)
    for (long gx = 0; gx < g.gw; ++gx)
      for (long ky = 0; ky < k; ++ky) {
        long y = gy * s - p + ky;
        if (y < 0 || y >= H) continue;
        for (long kx = 0; kx < k; ++kx) {
          long x = gx * s - p + kx;
          if (x < 0 || x >= W) continue;
          ++counts[y * W + x];
        }
      }
  return counts;
}

// Inverse of unfold: overlaps are summed then divided by the per-pixel window
// count, so fold(unfold(x)) == x wherever every pixel is covered.
template <class T>
Tensor<T> fold(const Tensor<T>& tokens, long k, long p, long s, long C, long H, long W) {
  const Shape& sh = tokens.shape();
  require_dim(sh.size() == 2 || sh.size() == 3, "fold expects [n,d] or [B,n,d], got " + shape_str(sh));
  bool batched = sh.size() == 3;
  long B = batched ? sh[0] : 1;
  long n = sh[batched ? 1 : 0], d = sh[batched ? 2 : 1];
  WindowGrid g = window_grid(H, W, k, p, s);
  require_dim(n == g.count(), "fold token count " + std::to_string(n) + " does not match grid " +
                                  std::to_string(g.gh) + "x" + std::to_string(g.gw) + " for " + std::to_string(H) +
                                  "x" + std::to_string(W));
  require_dim(d == C * k * k, "fold token dim " + std::to_string(d) + " does not match C*k*k = " +
                                  std::to_string(C * k * k));
  Shape out_shape = batched ? Shape{B, C, H, W} : Shape{C, H, W};
  std::vector<T> out(static_cast<size_t>(B * C * H * W), T(0));
  auto counts = fold_counts(H, W, k, p, s);
  const auto& x = tokens.data();
  for (long b = 0; b < B; ++b) {
    const T* xb = x.data() + b * n * d;
    T* ob = out.data() + b * C * H * W;
    for (long gy = 0; gy < g.gh; ++gy)
      for (long gx = 0; gx < g.gw; ++gx) {
        long t = gy * g.gw + gx;
        for (long c = 0; c < C; ++c)
          for (long ky = 0; ky < k; ++ky) {
            long y = gy * s - p + ky;
            if (y < 0 || y >= H) continue;
            for (long kx = 0; kx < k; ++kx) {
              long xc = gx * s - p + kx;
              if (xc < 0 || xc >= W) continue;
              ob[(c * H + y) * W + xc] += xb[t * d + (c * k + ky) * k + kx];
            }
          }
      }
    for (long c = 0; c < C; ++c)
      for (long i = 0; i < H * W; ++i)
        if (counts[i] > 0) ob[c * H * W + i] /= T(counts[i]);
  }
  return make_op_node<T>(
      out_shape, std::move(out), {tokens},
      [B, C, H, W, k, p, s, g, n, d, counts = std::move(counts)](Node<T>& node) {
        auto& pt = *node.parents[0];
        if (!pt.requires_grad) return;
        pt.ensure_grad();
        for (long b = 0; b < B; ++b) {
          T* gt = pt.grad.data() + b * n * d;
          const T* ng = node.grad.data() + b * C * H * W;
          for (long gy = 0; gy < g.gh; ++gy)
            for (long gx = 0; gx < g.gw; ++gx) {
              long t = gy * g.gw + gx;
              for (long c = 0; c < C; ++c)
                for (long ky = 0; ky < k; ++ky) {
                  long y = gy * s - p + ky;
                  if (y < 0 || y >= H) continue;
                  for (long kx = 0; kx < k; ++kx) {
                    long xc = gx * s - p + kx;
                    if (xc < 0 || xc >= W) continue;
                    gt[t * d + (c * k + ky) * k + kx] += ng[(c * H + y) * W + xc] / T(counts[y * W + xc]);
                  }
                }
            }
        }
      });
}

// ---------------------------------------------------------------------------
// linear / conv2d / batchnorm
// ---------------------------------------------------------------------------

// x: [..., in] times W: [in, out] plus optional bias [out].
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  require_dim(ws.size() == 2, "linear weight must be 2-D, got " + shape_str(ws));
  long in = ws[0], out_dim = ws[1];
  require_dim(xs.back() == in, "linear input dim " + shape_str(xs) + " does not match weight " + shape_str(ws));
  bool has_bias = bias.numel() > 0;
  if (has_bias)
    require_dim(bias.numel() == out_dim, "linear bias length must be " + std::to_string(out_dim));
  long rows = x.numel() / in;
  Shape out_shape = xs;
  out_shape.back() = out_dim;
  std::vector<T> out(static_cast<size_t>(rows * out_dim));
  detail::gemm(x.data().data(), w.data().data(), out.data(), rows, in, out_dim, false);
  if (has_bias) {
    const auto& bv = bias.data();
    for (long r = 0; r < rows; ++r)
      for (long j = 0; j < out_dim; ++j) out[r * out_dim + j] += bv[j];
  }
  std::vector<Tensor<T>> inputs = {x, w};
  if (has_bias) inputs.push_back(bias);
  return make_op_node<T>(out_shape, std::move(out), inputs, [rows, in, out_dim, has_bias](Node<T>& n) {
    auto& px = *n.parents[0];
    auto& pw = *n.parents[1];
    if (px.requires_grad) {
      px.ensure_grad();
      // dX = dY * W^T with W stored as [in,out]
      detail::gemm_nt(n.grad.data(), pw.value.data(), px.grad.data(), rows, out_dim, in, true);
    }
    if (pw.requires_grad) {
      pw.ensure_grad();
      detail::gemm_tn(px.value.data(), n.grad.data(), pw.grad.data(), in, rows, out_dim, true);
    }
    if (has_bias && n.parents.size() > 2 && n.parents[2]->requires_grad) {
      auto& pb = *n.parents[2];
      pb.ensure_grad();
      for (long r = 0; r < rows; ++r)
        for (long j = 0; j < out_dim; ++j) pb.grad[j] += n.grad[r * out_dim + j];
    }
  });
}

// x: [B,n,d] with one d-by-d weight per token position, w: [n, d, d].
template <class T>
Tensor<T> per_token_linear(const Tensor<T>& x, const Tensor<T>& w) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  require_dim(xs.size() == 3, "per_token_linear input must be [B,n,d], got " + shape_str(xs));
  require_dim(ws.size() == 3 && ws[0] == xs[1] && ws[1] == xs[2] && ws[2] == xs[2],
              "per_token_linear weight must be [n,d,d] matching " + shape_str(xs) + ", got " + shape_str(ws));
  long B = xs[0], n = xs[1], d = xs[2];
  std::vector<T> out(static_cast<size_t>(B * n * d));
  for (long i = 0; i < n; ++i) {
    for (long b = 0; b < B; ++b) {
      const T* xr = x.data().data() + (b * n + i) * d;
      const T* wi = w.data().data() + i * d * d;
      T* orow = out.data() + (b * n + i) * d;
      detail::gemm(xr, wi, orow, 1, d, d, false);
    }
  }
  return make_op_node<T>(xs, std::move(out), {x, w}, [B, n, d](Node<T>& node) {
    auto& px = *node.parents[0];
    auto& pw = *node.parents[1];
    for (long i = 0; i < n; ++i) {
      for (long b = 0; b < B; ++b) {
        const T* grow = node.grad.data() + (b * n + i) * d;
        if (px.requires_grad) {
          px.ensure_grad();
          detail::gemm_nt(grow, pw.value.data() + i * d * d, px.grad.data() + (b * n + i) * d, 1, d, d, true);
        }
        if (pw.requires_grad) {
          pw.ensure_grad();
          detail::gemm_tn(px.value.data() + (b * n + i) * d, grow, pw.grad.data() + i * d * d, d, 1, d, true);
        }
      }
    }
  });
}

namespace detail {

template <class T>
void im2col(const T* x, long C, long H, long W, long k, long p, long s, long ho, long wo, T* col) {
  long ckk = C * k * k;
  std::fill(col, col + ckk * ho * wo, T(0));
  for (long c = 0; c < C; ++c)
    for (long ky = 0; ky < k; ++ky)
      for (long kx = 0; kx < k; ++kx) {
        long row = (c * k + ky) * k + kx;
        for (long oy = 0; oy < ho; ++oy) {
          long y = oy * s - p + ky;
          if (y < 0 || y >= H) continue;
          for (long ox = 0; ox < wo; ++ox) {
            long xc = ox * s - p + kx;
            if (xc < 0 || xc >= W) continue;
            col[row * ho * wo + oy * wo + ox] = x[(c * H + y) * W + xc];
          }
        }
      }
}

template <class T>
void col2im_add(const T* col, long C, long H, long W, long k, long p, long s, long ho, long wo, T* x) {
  for (long c = 0; c < C; ++c)
    for (long ky = 0; ky < k; ++ky)
      for (long kx = 0; kx < k; ++kx) {
        long row = (c * k + ky) * k + kx;
        for (long oy = 0; oy < ho; ++oy) {
          long y = oy * s - p + ky;
          if (y < 0 || y >= H) continue;
          for (long ox = 0; ox < wo; ++ox) {
            long xc = ox * s - p + kx;
            if (xc < 0 || xc >= W) continue;
            x[(c * H + y) * W + xc] += col[row * ho * wo + oy * wo + ox];
          }
        }
      }
}

}  // namespace detail

// x: [B,Cin,H,W], w: [Cout,Cin,k,k], bias: [Cout] or empty.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, long stride, long pad) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  require_dim(xs.size() == 4, "conv2d input must be [B,C,H,W], got " + shape_str(xs));
  require_dim(ws.size() == 4 && ws[2] == ws[3], "conv2d weight must be [Cout,Cin,k,k], got " + shape_str(ws));
  require_dim(xs[1] == ws[1],
              "conv2d channel mismatch: input " + shape_str(xs) + " vs weight " + shape_str(ws));
  long B = xs[0], C = xs[1], H = xs[2], W = xs[3];
  long Cout = ws[0], k = ws[2];
  WindowGrid g = window_grid(H, W, k, pad, stride);
  long ho = g.gh, wo = g.gw;
  bool has_bias = bias.numel() > 0;
  if (has_bias) require_dim(bias.numel() == Cout, "conv2d bias length must equal Cout");

  long ckk = C * k * k;
  std::vector<T> col(static_cast<size_t>(ckk * ho * wo));
  std::vector<T> out(static_cast<size_t>(B * Cout * ho * wo));
  for (long b = 0; b < B; ++b) {
    detail::im2col(x.data().data() + b * C * H * W, C, H, W, k, pad, stride, ho, wo, col.data());
    detail::gemm(w.data().data(), col.data(), out.data() + b * Cout * ho * wo, Cout, ckk, ho * wo, false);
    if (has_bias) {
      T* ob = out.data() + b * Cout * ho * wo;
      for (long c = 0; c < Cout; ++c)
        for (long i = 0; i < ho * wo; ++i) ob[c * ho * wo + i] += bias.data()[c];
    }
  }
  std::vector<Tensor<T>> inputs = {x, w};
  if (has_bias) inputs.push_back(bias);
  return make_op_node<T>(
      Shape{B, Cout, ho, wo}, std::move(out), inputs,
      [B, C, H, W, Cout, k, stride, pad, ho, wo, ckk, has_bias](Node<T>& node) {
        auto& px = *node.parents[0];
        auto& pw = *node.parents[1];
        std::vector<T> col(static_cast<size_t>(ckk * ho * wo));
        std::vector<T> dcol(static_cast<size_t>(ckk * ho * wo));
        if (px.requires_grad) px.ensure_grad();
        if (pw.requires_grad) pw.ensure_grad();
        for (long b = 0; b < B; ++b) {
          const T* gout = node.grad.data() + b * Cout * ho * wo;
          if (pw.requires_grad) {
            detail::im2col(px.value.data() + b * C * H * W, C, H, W, k, pad, stride, ho, wo, col.data());
            // dW += dOut * col^T
            detail::gemm_nt(gout, col.data(), pw.grad.data(), Cout, ho * wo, ckk, true);
          }
          if (px.requires_grad) {
            // dcol = W^T * dOut
            detail::gemm_tn(pw.value.data(), gout, dcol.data(), ckk, Cout, ho * wo, false);
            detail::col2im_add(dcol.data(), C, H, W, k, pad, stride, ho, wo, px.grad.data() + b * C * H * W);
          }
        }
        if (has_bias && node.parents.size() > 2 && node.parents[2]->requires_grad) {
          auto& pb = *node.parents[2];
          pb.ensure_grad();
          for (long b = 0; b < B; ++b)
            for (long c = 0; c < Cout; ++c)
              for (long i = 0; i < ho * wo; ++i) pb.grad[c] += node.grad[(b * Cout + c) * ho * wo + i];
        }
      });
}

// Per-channel normalization over (B,H,W). Running statistics live in the
// caller's buffers; training mode normalizes by batch statistics and updates
// them, eval mode uses the stored values.
template <class T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      std::vector<T>* running_mean, std::vector<T>* running_var, bool training,
                      T momentum = T(0.1), T eps = T(1e-5)) {
  const Shape& xs = x.shape();
  require_dim(xs.size() == 4, "batchnorm2d input must be [B,C,H,W], got " + shape_str(xs));
  long B = xs[0], C = xs[1], H = xs[2], W = xs[3];
  require_dim(gamma.numel() == C && beta.numel() == C, "batchnorm2d gain/offset must have length C");
  require_dim(static_cast<long>(running_mean->size()) == C && static_cast<long>(running_var->size()) == C,
              "batchnorm2d running stats must have length C");
  long m = B * H * W;
  std::vector<T> mu(C), istd(C);
  const auto& xv = x.data();
  if (training) {
    for (long c = 0; c < C; ++c) {
      T s = T(0);
      for (long b = 0; b < B; ++b)
        for (long i = 0; i < H * W; ++i) s += xv[(b * C + c) * H * W + i];
      T mean = s / T(m);
      T var = T(0);
      for (long b = 0; b < B; ++b)
        for (long i = 0; i < H * W; ++i) {
          T d = xv[(b * C + c) * H * W + i] - mean;
          var += d * d;
        }
      var /= T(m);
      mu[c] = mean;
      istd[c] = T(1) / std::sqrt(var + eps);
      (*running_mean)[c] = (T(1) - momentum) * (*running_mean)[c] + momentum * mean;
      (*running_var)[c] = (T(1) - momentum) * (*running_var)[c] + momentum * var;
    }
  } else {
    for (long c = 0; c < C; ++c) {
      mu[c] = (*running_mean)[c];
      istd[c] = T(1) / std::sqrt((*running_var)[c] + eps);
    }
  }
  std::vector<T> out(xv.size());
  const auto& gv = gamma.data();
  const auto& bv = beta.data();
  for (long b = 0; b < B; ++b)
    for (long c = 0; c < C; ++c)
      for (long i = 0; i < H * W; ++i) {
        long idx = (b * C + c) * H * W + i;
        out[idx] = gv[c] * (xv[idx] - mu[c]) * istd[c] + bv[c];
      }
  return make_op_node<T>(
      xs, std::move(out), {x, gamma, beta},
      [B, C, H, W, m, training, mu = std::move(mu), istd = std::move(istd)](Node<T>& n) {
        auto& px = *n.parents[0];
        auto& pg = *n.parents[1];
        auto& pb = *n.parents[2];
        const auto& g = n.grad;
        for (long c = 0; c < C; ++c) {
          T sum_dy = T(0), sum_dy_xh = T(0);
          for (long b = 0; b < B; ++b)
            for (long i = 0; i < H * W; ++i) {
              long idx = (b * C + c) * H * W + i;
              T xh = (px.value[idx] - mu[c]) * istd[c];
              sum_dy += g[idx];
              sum_dy_xh += g[idx] * xh;
            }
          if (pg.requires_grad) {
            pg.ensure_grad();
            pg.grad[c] += sum_dy_xh;
          }
          if (pb.requires_grad) {
            pb.ensure_grad();
            pb.grad[c] += sum_dy;
          }
          if (px.requires_grad) {
            px.ensure_grad();
            T gamma_c = pg.value[c];
            if (training) {
              T mean_dy = sum_dy / T(m);
              T mean_dy_xh = sum_dy_xh / T(m);
              for (long b = 0; b < B; ++b)
                for (long i = 0; i < H * W; ++i) {
                  long idx = (b * C + c) * H * W + i;
                  T xh = (px.value[idx] - mu[c]) * istd[c];
                  px.grad[idx] += gamma_c * istd[c] * (g[idx] - mean_dy - xh * mean_dy_xh);
                }
            } else {
              for (long b = 0; b < B; ++b)
                for (long i = 0; i < H * W; ++i) {
                  long idx = (b * C + c) * H * W + i;
                  px.grad[idx] += gamma_c * istd[c] * g[idx];
                }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

// Binary cross entropy on a probability scalar; input clamped to
// [eps, 1-eps] before the logs.
template <class T>
Tensor<T> bce_loss(const Tensor<T>& q, int label, T eps = T(1e-7)) {
  require(q.numel() == 1, ErrorKind::Contract, "bce_loss expects a scalar probability");
  require(label == 0 || label == 1, ErrorKind::Contract, "bce_loss label must be 0 or 1");
  T qv = q.data()[0];
  T qc = std::min(std::max(qv, eps), T(1) - eps);
  T t = T(label);
  T loss = -(t * std::log(qc) + (T(1) - t) * std::log(T(1) - qc));
  return make_op_node<T>({1}, {loss}, {q}, [label, eps](Node<T>& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    T qv = p.value[0];
    if (qv <= eps || qv >= T(1) - eps) return;  // clamped region: flat
    T t = T(label);
    p.grad[0] += n.grad[0] * (-(t / qv) + (T(1) - t) / (T(1) - qv));
  });
}

}  // namespace discn
