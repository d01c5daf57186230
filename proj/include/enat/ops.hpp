#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "enat/tensor.hpp"

// Differentiable operations on enat::Tensor. Every operation records its
// adjoint on the active tape when any input requires grad.

namespace enat {

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using MatrixMap = Eigen::Map<RowMatrix>;

/// C (+)= op(A) * op(B) where A is stored rows_a x cols_a and B rows_b x cols_b.
inline void gemm(const double* a, std::size_t rows_a, std::size_t cols_a, bool trans_a,
                 const double* b, std::size_t rows_b, std::size_t cols_b, bool trans_b, double* c,
                 bool accumulate) {
  ConstMatrixMap ma(a, static_cast<Eigen::Index>(rows_a), static_cast<Eigen::Index>(cols_a));
  ConstMatrixMap mb(b, static_cast<Eigen::Index>(rows_b), static_cast<Eigen::Index>(cols_b));
  const auto m = static_cast<Eigen::Index>(trans_a ? cols_a : rows_a);
  const auto n = static_cast<Eigen::Index>(trans_b ? rows_b : cols_b);
  MatrixMap mc(c, m, n);
  auto run = [&](const auto& lhs, const auto& rhs) {
    if (accumulate)
      mc.noalias() += lhs * rhs;
    else
      mc.noalias() = lhs * rhs;
  };
  if (!trans_a && !trans_b) run(ma, mb);
  if (!trans_a && trans_b) run(ma, mb.transpose());
  if (trans_a && !trans_b) run(ma.transpose(), mb);
  if (trans_a && trans_b) run(ma.transpose(), mb.transpose());
}

inline void accumulate_into(TensorNode& node, std::span<const double> delta) {
  if (!node.requires_grad) return;
  auto& g = node.grad_buffer();
  for (std::size_t i = 0; i < delta.size(); ++i) g[i] += delta[i];
}

/// True when `suffix` equals the trailing dimensions of `shape`.
inline bool is_suffix(const Shape& shape, const Shape& suffix) {
  if (suffix.size() > shape.size()) return false;
  return std::equal(suffix.begin(), suffix.end(), shape.end() - static_cast<long>(suffix.size()));
}

template <typename Fn>
Tensor unary(const Tensor& x, Fn&& forward_and_derivative) {
  const auto in = x.values();
  std::vector<double> out(in.size());
  std::vector<double> deriv;
  const bool track = tracking({&x});
  if (track) deriv.resize(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    double d = 0.0;
    out[i] = forward_and_derivative(in[i], d);
    if (track) deriv[i] = d;
  }
  auto xn = x.node();
  return make_result(x.shape(), std::move(out), track,
                     [xn, deriv = std::move(deriv)](TensorNode& o) {
                       if (!xn->requires_grad) return;
                       auto& g = xn->grad_buffer();
                       for (std::size_t i = 0; i < deriv.size(); ++i) g[i] += o.grad[i] * deriv[i];
                     });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor matmul_impl(const Tensor& a, const Tensor& b, bool trans_b) {
  if (a.rank() < 2 || b.rank() < 2) throw ShapeError("matmul: operands need rank >= 2");
  const std::size_t m = a.dim(a.rank() - 2);
  const std::size_t k = a.dim(a.rank() - 1);
  const std::size_t b_rows = b.dim(b.rank() - 2);
  const std::size_t b_cols = b.dim(b.rank() - 1);
  const std::size_t inner = trans_b ? b_cols : b_rows;
  const std::size_t n = trans_b ? b_rows : b_cols;
  if (inner != k) {
    throw ShapeError("matmul: inner dimensions differ, " + to_string(a.shape()) +
                     (trans_b ? " x T" : " x ") + to_string(b.shape()));
  }
  Shape out_shape = a.shape();
  out_shape.back() = n;
  std::vector<double> out(element_count(out_shape));
  const bool track = tracking({&a, &b});
  auto an = a.node();
  auto bn = b.node();

  if (b.rank() == 2) {
    const std::size_t rows = a.size() / k;
    gemm(an->value.data(), rows, k, false, bn->value.data(), b_rows, b_cols, trans_b, out.data(),
         false);
    return make_result(std::move(out_shape), std::move(out), track,
                       [an, bn, rows, k, n, b_rows, b_cols, trans_b](TensorNode& o) {
                         if (an->requires_grad) {
                           // dA = dC * op(B)^T
                           gemm(o.grad.data(), rows, n, false, bn->value.data(), b_rows, b_cols,
                                !trans_b, an->grad_buffer().data(), true);
                         }
                         if (bn->requires_grad) {
                           if (trans_b)  // B is n x k: dB = dC^T * A
                             gemm(o.grad.data(), rows, n, true, an->value.data(), rows, k, false,
                                  bn->grad_buffer().data(), true);
                           else  // dB = A^T * dC
                             gemm(an->value.data(), rows, k, true, o.grad.data(), rows, n, false,
                                  bn->grad_buffer().data(), true);
                         }
                       });
  }

  if (a.rank() != b.rank() ||
      !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
    throw ShapeError("matmul: batch dimensions differ, " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
  const std::size_t batches = a.size() / (m * k);
  const std::size_t a_step = m * k;
  const std::size_t b_step = b_rows * b_cols;
  const std::size_t c_step = m * n;
  for (std::size_t i = 0; i < batches; ++i) {
    gemm(an->value.data() + i * a_step, m, k, false, bn->value.data() + i * b_step, b_rows, b_cols,
         trans_b, out.data() + i * c_step, false);
  }
  return make_result(
      std::move(out_shape), std::move(out), track,
      [an, bn, batches, m, k, n, b_rows, b_cols, trans_b, a_step, b_step, c_step](TensorNode& o) {
        for (std::size_t i = 0; i < batches; ++i) {
          const double* dc = o.grad.data() + i * c_step;
          if (an->requires_grad) {
            gemm(dc, m, n, false, bn->value.data() + i * b_step, b_rows, b_cols, !trans_b,
                 an->grad_buffer().data() + i * a_step, true);
          }
          if (bn->requires_grad) {
            if (trans_b)
              gemm(dc, m, n, true, an->value.data() + i * a_step, m, k, false,
                   bn->grad_buffer().data() + i * b_step, true);
            else
              gemm(an->value.data() + i * a_step, m, k, true, dc, m, n, false,
                   bn->grad_buffer().data() + i * b_step, true);
          }
        }
      });
}

}  // namespace detail

/// Matrix product over the last two axes. `b` is either a plain matrix
/// shared across every leading index of `a`, or has the same leading axes.
inline Tensor matmul(const Tensor& a, const Tensor& b) { return detail::matmul_impl(a, b, false); }

/// a * b^T over the last two axes, with the same broadcasting as `matmul`.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) { return detail::matmul_impl(a, b, true); }

// ---------------------------------------------------------------------------
// Elementwise family
// ---------------------------------------------------------------------------

namespace detail {

/// out = a + coeff_b * b, or a * b when `multiply`; b may match a trailing suffix of a.
inline Tensor binary(const Tensor& a, const Tensor& b, bool multiply, double coeff_b,
                     const char* name) {
  if (!is_suffix(a.shape(), b.shape())) {
    throw ShapeError(std::string(name) + ": cannot broadcast " + to_string(b.shape()) + " onto " +
                     to_string(a.shape()));
  }
  const std::size_t inner = b.size();
  const std::size_t outer = a.size() / inner;
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(a.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t idx = o * inner + i;
      out[idx] = multiply ? av[idx] * bv[i] : av[idx] + coeff_b * bv[i];
    }
  }
  auto an = a.node();
  auto bn = b.node();
  return make_result(a.shape(), std::move(out), tracking({&a, &b}),
                     [an, bn, outer, inner, multiply, coeff_b](TensorNode& o) {
                       const auto& g = o.grad;
                       if (an->requires_grad) {
                         auto& ga = an->grad_buffer();
                         for (std::size_t o2 = 0; o2 < outer; ++o2)
                           for (std::size_t i = 0; i < inner; ++i) {
                             const std::size_t idx = o2 * inner + i;
                             ga[idx] += multiply ? g[idx] * bn->value[i] : g[idx];
                           }
                       }
                       if (bn->requires_grad) {
                         auto& gb = bn->grad_buffer();
                         for (std::size_t o2 = 0; o2 < outer; ++o2)
                           for (std::size_t i = 0; i < inner; ++i) {
                             const std::size_t idx = o2 * inner + i;
                             gb[i] += multiply ? g[idx] * an->value[idx] : coeff_b * g[idx];
                           }
                       }
                     });
}

}  // namespace detail

/// a + b; b may be a trailing-suffix broadcast (bias, positional table).
inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary(a, b, false, 1.0, "add"); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary(a, b, false, -1.0, "sub"); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary(a, b, true, 0.0, "mul"); }

inline Tensor scale(const Tensor& x, double c) {
  return detail::unary(x, [c](double v, double& d) {
    d = c;
    return c * v;
  });
}

inline Tensor add_scalar(const Tensor& x, double c) {
  return detail::unary(x, [c](double v, double& d) {
    d = 1.0;
    return v + c;
  });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary(x, [](double v, double& d) {
    d = v > 0.0 ? 1.0 : 0.0;
    return v > 0.0 ? v : 0.0;
  });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(x, [](double v, double& d) {
    const double s = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    d = s * (1.0 - s);
    return s;
  });
}

/// log(sigmoid(x)) without overflow or log(0).
inline Tensor log_sigmoid(const Tensor& x) {
  return detail::unary(x, [](double v, double& d) {
    // log s(v) = min(v,0) - log1p(exp(-|v|)); derivative 1 - s(v) = s(-v)
    const double e = std::exp(-std::abs(v));
    d = v >= 0.0 ? e / (1.0 + e) : 1.0 / (1.0 + e);
    return std::min(v, 0.0) - std::log1p(e);
  });
}

inline Tensor log(const Tensor& x) {
  return detail::unary(x, [](double v, double& d) {
    d = 1.0 / v;
    return std::log(v);
  });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary(x, [](double v, double& d) {
    const double e = std::exp(v);
    d = e;
    return e;
  });
}

inline Tensor square(const Tensor& x) {
  return detail::unary(x, [](double v, double& d) {
    d = 2.0 * v;
    return v * v;
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.values()) total += v;
  auto xn = x.node();
  return detail::make_result(Shape{1}, {total}, detail::tracking({&x}), [xn](TensorNode& o) {
    if (!xn->requires_grad) return;
    auto& g = xn->grad_buffer();
    for (double& gi : g) gi += o.grad[0];
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

/// Sum of x weighted by a constant (non-differentiable) weight vector.
inline Tensor weighted_sum(const Tensor& x, std::span<const double> weights) {
  if (weights.size() != x.size()) throw ShapeError("weighted_sum: weight count mismatch");
  double total = 0.0;
  const auto xv = x.values();
  for (std::size_t i = 0; i < xv.size(); ++i) total += xv[i] * weights[i];
  auto xn = x.node();
  std::vector<double> w(weights.begin(), weights.end());
  return detail::make_result(Shape{1}, {total}, detail::tracking({&x}),
                             [xn, w = std::move(w)](TensorNode& o) {
                               if (!xn->requires_grad) return;
                               auto& g = xn->grad_buffer();
                               for (std::size_t i = 0; i < w.size(); ++i) g[i] += o.grad[0] * w[i];
                             });
}

/// Euclidean norm over the last axis: [..., d] -> [...] (or [1] for rank 1).
/// The subgradient at the origin is taken as zero.
inline Tensor l2_norm(const Tensor& x) {
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.size() / d;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  if (out_shape.empty()) out_shape = {1};
  std::vector<double> out(rows);
  const auto xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) s += xv[r * d + i] * xv[r * d + i];
    out[r] = std::sqrt(s);
  }
  auto xn = x.node();
  std::vector<double> norms = out;
  return detail::make_result(std::move(out_shape), std::move(out), detail::tracking({&x}),
                             [xn, norms = std::move(norms), d, rows](TensorNode& o) {
                               if (!xn->requires_grad) return;
                               auto& g = xn->grad_buffer();
                               for (std::size_t r = 0; r < rows; ++r) {
                                 if (norms[r] == 0.0) continue;
                                 const double f = o.grad[r] / norms[r];
                                 for (std::size_t i = 0; i < d; ++i)
                                   g[r * d + i] += f * xn->value[r * d + i];
                               }
                             });
}

// ---------------------------------------------------------------------------
// Shape manipulation and indexing
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (element_count(shape) != x.size())
    throw ShapeError("reshape: " + to_string(x.shape()) + " -> " + to_string(shape));
  auto xn = x.node();
  return detail::make_result(std::move(shape), std::vector<double>(x.values().begin(), x.values().end()),
                             detail::tracking({&x}),
                             [xn](TensorNode& o) { detail::accumulate_into(*xn, o.grad); });
}

/// Swaps axes 1 and 2 of a rank-4 tensor: [a, b, c, d] -> [a, c, b, d].
inline Tensor swap_axes_12(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("swap_axes_12: rank-4 tensor required");
  const std::size_t a = x.dim(0), b = x.dim(1), c = x.dim(2), d = x.dim(3);
  std::vector<double> out(x.size());
  const auto xv = x.values();
  for (std::size_t i = 0; i < a; ++i)
    for (std::size_t j = 0; j < b; ++j)
      for (std::size_t k = 0; k < c; ++k)
        std::copy_n(xv.begin() + static_cast<long>(((i * b + j) * c + k) * d), d,
                    out.begin() + static_cast<long>(((i * c + k) * b + j) * d));
  auto xn = x.node();
  return detail::make_result(Shape{a, c, b, d}, std::move(out), detail::tracking({&x}),
                             [xn, a, b, c, d](TensorNode& o) {
                               if (!xn->requires_grad) return;
                               auto& g = xn->grad_buffer();
                               for (std::size_t i = 0; i < a; ++i)
                                 for (std::size_t j = 0; j < b; ++j)
                                   for (std::size_t k = 0; k < c; ++k) {
                                     const std::size_t src = ((i * c + k) * b + j) * d;
                                     const std::size_t dst = ((i * b + j) * c + k) * d;
                                     for (std::size_t e = 0; e < d; ++e) g[dst + e] += o.grad[src + e];
                                   }
                             });
}

/// Concatenation along axis 0; trailing shapes must agree.
inline Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Shape shape = parts.front().shape();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.rank() != shape.size() || !std::equal(shape.begin() + 1, shape.end(), p.shape().begin() + 1))
      throw ShapeError("concat: trailing shapes differ");
    rows += p.dim(0);
  }
  shape[0] = rows;
  std::vector<double> out;
  out.reserve(element_count(shape));
  bool track = false;
  std::vector<std::shared_ptr<TensorNode>> nodes;
  for (const auto& p : parts) {
    out.insert(out.end(), p.values().begin(), p.values().end());
    track = track || detail::tracking({&p});
    nodes.push_back(p.node());
  }
  return detail::make_result(std::move(shape), std::move(out), track,
                             [nodes = std::move(nodes)](TensorNode& o) {
                               std::size_t offset = 0;
                               for (const auto& n : nodes) {
                                 detail::accumulate_into(
                                     *n, std::span<const double>(o.grad).subspan(offset, n->value.size()));
                                 offset += n->value.size();
                               }
                             });
}

/// Rows of a matrix selected by index: [N, d] x indices(M) -> [M, d].
/// Used for embedding lookup; the adjoint scatter-adds into the table.
inline Tensor gather_rows(const Tensor& table, std::span<const int> indices) {
  if (table.rank() != 2) throw ShapeError("gather_rows: matrix required");
  if (indices.empty()) throw ShapeError("gather_rows: no indices");
  const std::size_t n = table.dim(0), d = table.dim(1);
  std::vector<double> out(indices.size() * d);
  const auto tv = table.values();
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] < 0 || static_cast<std::size_t>(indices[r]) >= n)
      throw ContractError("gather_rows: index " + std::to_string(indices[r]) + " out of range " +
                          std::to_string(n));
    std::copy_n(tv.begin() + static_cast<long>(static_cast<std::size_t>(indices[r]) * d), d,
                out.begin() + static_cast<long>(r * d));
  }
  auto tn = table.node();
  std::vector<int> idx(indices.begin(), indices.end());
  return detail::make_result(Shape{indices.size(), d}, std::move(out), detail::tracking({&table}),
                             [tn, idx = std::move(idx), d](TensorNode& o) {
                               if (!tn->requires_grad) return;
                               auto& g = tn->grad_buffer();
                               for (std::size_t r = 0; r < idx.size(); ++r)
                                 for (std::size_t i = 0; i < d; ++i)
                                   g[static_cast<std::size_t>(idx[r]) * d + i] += o.grad[r * d + i];
                             });
}

/// Embedding lookup producing shape `prefix + [d]`.
inline Tensor embedding(const Tensor& table, std::span<const int> ids, Shape prefix) {
  if (element_count(prefix) != ids.size()) throw ShapeError("embedding: id count mismatch");
  Tensor rows = gather_rows(table, ids);
  prefix.push_back(table.dim(1));
  return reshape(rows, std::move(prefix));
}

/// x[r, ids[r]] for a [N, V] matrix: -> [N].
inline Tensor pick(const Tensor& x, std::span<const int> ids) {
  if (x.rank() != 2 || x.dim(0) != ids.size()) throw ShapeError("pick: [N, V] with N ids required");
  const std::size_t v = x.dim(1);
  std::vector<double> out(ids.size());
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= v)
      throw ContractError("pick: id out of range");
    out[r] = x.values()[r * v + static_cast<std::size_t>(ids[r])];
  }
  auto xn = x.node();
  std::vector<int> idx(ids.begin(), ids.end());
  return detail::make_result(Shape{ids.size()}, std::move(out), detail::tracking({&x}),
                             [xn, idx = std::move(idx), v](TensorNode& o) {
                               if (!xn->requires_grad) return;
                               auto& g = xn->grad_buffer();
                               for (std::size_t r = 0; r < idx.size(); ++r)
                                 g[r * v + static_cast<std::size_t>(idx[r])] += o.grad[r];
                             });
}

// ---------------------------------------------------------------------------
// Normalizations
// ---------------------------------------------------------------------------

/// Softmax along `axis`, computed with max subtraction.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw ShapeError("softmax: axis out of range");
  const std::size_t len = x.dim(axis);
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t outer = x.size() / (len * inner);
  const auto xv = x.values();
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, xv[base + i * inner]);
      double z = 0.0;
      for (std::size_t i = 0; i < len; ++i) {
        out[base + i * inner] = std::exp(xv[base + i * inner] - mx);
        z += out[base + i * inner];
      }
      for (std::size_t i = 0; i < len; ++i) out[base + i * inner] /= z;
    }
  auto xn = x.node();
  std::vector<double> probs = out;
  return detail::make_result(x.shape(), std::move(out), detail::tracking({&x}),
                             [xn, probs = std::move(probs), outer, len, inner](TensorNode& o) {
                               if (!xn->requires_grad) return;
                               auto& g = xn->grad_buffer();
                               for (std::size_t oo = 0; oo < outer; ++oo)
                                 for (std::size_t in = 0; in < inner; ++in) {
                                   const std::size_t base = oo * len * inner + in;
                                   double dot = 0.0;
                                   for (std::size_t i = 0; i < len; ++i)
                                     dot += o.grad[base + i * inner] * probs[base + i * inner];
                                   for (std::size_t i = 0; i < len; ++i) {
                                     const std::size_t k = base + i * inner;
                                     g[k] += probs[k] * (o.grad[k] - dot);
                                   }
                                 }
                             });
}

/// Softmax over the last axis of [B, H, Tq, Tk] scores where `keep` ([B, Tq, Tk],
/// nonzero = attend) selects admissible keys. Masked keys get exactly zero weight.
inline Tensor masked_softmax(const Tensor& scores, std::span<const std::uint8_t> keep) {
  if (scores.rank() != 4) throw ShapeError("masked_softmax: rank-4 scores required");
  const std::size_t b = scores.dim(0), h = scores.dim(1), tq = scores.dim(2), tk = scores.dim(3);
  if (keep.size() != b * tq * tk) throw ShapeError("masked_softmax: mask shape mismatch");
  const auto sv = scores.values();
  std::vector<double> out(scores.size(), 0.0);
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t hi = 0; hi < h; ++hi)
      for (std::size_t q = 0; q < tq; ++q) {
        const std::size_t row = ((bi * h + hi) * tq + q) * tk;
        const std::uint8_t* m = keep.data() + (bi * tq + q) * tk;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < tk; ++k)
          if (m[k]) mx = std::max(mx, sv[row + k]);
        if (mx == -std::numeric_limits<double>::infinity()) continue;  // fully masked row
        double z = 0.0;
        for (std::size_t k = 0; k < tk; ++k)
          if (m[k]) {
            out[row + k] = std::exp(sv[row + k] - mx);
            z += out[row + k];
          }
        for (std::size_t k = 0; k < tk; ++k) out[row + k] /= z;
      }
  auto sn = scores.node();
  std::vector<double> probs = out;
  const std::size_t rows = b * h * tq;
  return detail::make_result(scores.shape(), std::move(out), detail::tracking({&scores}),
                             [sn, probs = std::move(probs), rows, tk](TensorNode& o) {
                               if (!sn->requires_grad) return;
                               auto& g = sn->grad_buffer();
                               for (std::size_t r = 0; r < rows; ++r) {
                                 const std::size_t base = r * tk;
                                 double dot = 0.0;
                                 for (std::size_t k = 0; k < tk; ++k)
                                   dot += o.grad[base + k] * probs[base + k];
                                 for (std::size_t k = 0; k < tk; ++k)
                                   g[base + k] += probs[base + k] * (o.grad[base + k] - dot);
                               }
                             });
}

/// log(softmax(x)) over the last axis.
inline Tensor log_softmax(const Tensor& x) {
  const std::size_t len = x.shape().back();
  const std::size_t rows = x.size() / len;
  const auto xv = x.values();
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * len;
    const double mx = *std::max_element(row, row + len);
    double z = 0.0;
    for (std::size_t i = 0; i < len; ++i) z += std::exp(row[i] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t i = 0; i < len; ++i) out[r * len + i] = row[i] - lz;
  }
  auto xn = x.node();
  std::vector<double> logp = out;
  return detail::make_result(x.shape(), std::move(out), detail::tracking({&x}),
                             [xn, logp = std::move(logp), rows, len](TensorNode& o) {
                               if (!xn->requires_grad) return;
                               auto& g = xn->grad_buffer();
                               for (std::size_t r = 0; r < rows; ++r) {
                                 double gs = 0.0;
                                 for (std::size_t i = 0; i < len; ++i) gs += o.grad[r * len + i];
                                 for (std::size_t i = 0; i < len; ++i) {
                                   const std::size_t k = r * len + i;
                                   g[k] += o.grad[k] - std::exp(logp[k]) * gs;
                                 }
                               }
                             });
}

/// Normalizes each row over the trailing axis, then applies gain and bias ([d] each).
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
  if (eps <= 0.0) throw ContractError("layer_norm: eps must be positive");
  const std::size_t d = x.shape().back();
  if (gain.size() != d || bias.size() != d) throw ShapeError("layer_norm: gain/bias size mismatch");
  const std::size_t rows = x.size() / d;
  const auto xv = x.values();
  const auto gv = gain.values();
  const auto bv = bias.values();
  std::vector<double> normalized(x.size());
  std::vector<double> inv_std(rows);
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t i = 0; i < d; ++i) mu += row[i];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < d; ++i) {
      normalized[r * d + i] = (row[i] - mu) * inv_std[r];
      out[r * d + i] = normalized[r * d + i] * gv[i] + bv[i];
    }
  }
  auto xn = x.node();
  auto gn = gain.node();
  auto bn = bias.node();
  return detail::make_result(
      x.shape(), std::move(out), detail::tracking({&x, &gain, &bias}),
      [xn, gn, bn, normalized = std::move(normalized), inv_std = std::move(inv_std), rows,
       d](TensorNode& o) {
        const auto& g = o.grad;
        if (gn->requires_grad || bn->requires_grad) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < d; ++i) {
              if (gn->requires_grad) gn->grad_buffer()[i] += g[r * d + i] * normalized[r * d + i];
              if (bn->requires_grad) bn->grad_buffer()[i] += g[r * d + i];
            }
        }
        if (!xn->requires_grad) return;
        auto& gx = xn->grad_buffer();
        const double dd = static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (std::size_t i = 0; i < d; ++i) {
            const double dy = g[r * d + i] * gn->value[i];
            sum_dy += dy;
            sum_dy_xhat += dy * normalized[r * d + i];
          }
          for (std::size_t i = 0; i < d; ++i) {
            const double dy = g[r * d + i] * gn->value[i];
            gx[r * d + i] +=
                inv_std[r] * (dy - sum_dy / dd - normalized[r * d + i] * sum_dy_xhat / dd);
          }
        }
      });
}

/// Inverted dropout; identity when rate == 0 or grad recording is off.
inline Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng) {
  if (rate <= 0.0 || !grad_enabled()) return x;
  std::bernoulli_distribution keep(1.0 - rate);
  std::vector<double> mask(x.size());
  for (double& m : mask) m = keep(rng) ? 1.0 / (1.0 - rate) : 0.0;
  return mul(x, Tensor(x.shape(), std::move(mask)));
}

}  // namespace enat
