#pragma once

#include <Eigen/Core>

#include <atomic>
#include <cmath>
#include <string>
#include <vector>

#include "equitempo/numerics/tensor.hpp"

namespace equitempo {

namespace detail {

// Count of op outputs that came out non-finite (division mainly). Checked by
// training loops so a degenerate batch aborts loudly instead of training on
// NaNs.
inline std::atomic<std::uint64_t>& nonfinite_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

template <typename Scalar>
void flag_nonfinite(const char* op, const Tensor<Scalar>& t) {
  if (!t.values().isFinite().all()) {
    (void)op;
    nonfinite_counter().fetch_add(1, std::memory_order_relaxed);
  }
}

template <typename Scalar>
void check_same_shape(const char* op, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.shape() != b.shape()) {
    throw TensorError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                      " vs " + shape_str(b.shape()));
  }
}

template <typename Scalar>
using MatMap = Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename Scalar>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename Scalar>
MatMap<Scalar> as_matrix(ArrayX<Scalar>& buf, Index rows, Index cols) {
  return MatMap<Scalar>(buf.data(), rows, cols);
}
template <typename Scalar>
ConstMatMap<Scalar> as_matrix(const ArrayX<Scalar>& buf, Index rows, Index cols) {
  return ConstMatMap<Scalar>(buf.data(), rows, cols);
}

}  // namespace detail

inline std::uint64_t nonfinite_op_count() { return detail::nonfinite_counter().load(); }
inline void reset_nonfinite_op_count() { detail::nonfinite_counter().store(0); }

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::check_same_shape("add", a, b);
  auto out = Tensor<Scalar>::make(a.shape(), a.requires_grad() || b.requires_grad());
  out.values() = a.values() + b.values();
  out.attach({a, b}, [a, b](detail::Node<Scalar>& o) mutable {
    if (a.requires_grad()) a.node()->accumulate_grad(o.grad);
    if (b.requires_grad()) b.node()->accumulate_grad(o.grad);
  });
  return out;
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::check_same_shape("sub", a, b);
  auto out = Tensor<Scalar>::make(a.shape(), a.requires_grad() || b.requires_grad());
  out.values() = a.values() - b.values();
  out.attach({a, b}, [a, b](detail::Node<Scalar>& o) mutable {
    if (a.requires_grad()) a.node()->accumulate_grad(o.grad);
    if (b.requires_grad()) b.node()->accumulate_grad(ArrayX<Scalar>(-o.grad));
  });
  return out;
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::check_same_shape("mul", a, b);
  auto out = Tensor<Scalar>::make(a.shape(), a.requires_grad() || b.requires_grad());
  out.values() = a.values() * b.values();
  out.attach({a, b}, [a, b](detail::Node<Scalar>& o) mutable {
    if (a.requires_grad()) a.node()->accumulate_grad(ArrayX<Scalar>(o.grad * b.values()));
    if (b.requires_grad()) b.node()->accumulate_grad(ArrayX<Scalar>(o.grad * a.values()));
  });
  return out;
}

// Elementwise division. The denominator is captured for the gradient and the
// output is scanned for non-finite values (see nonfinite_op_count).
template <typename Scalar>
Tensor<Scalar> divide(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::check_same_shape("divide", a, b);
  auto out = Tensor<Scalar>::make(a.shape(), a.requires_grad() || b.requires_grad());
  out.values() = a.values() / b.values();
  detail::flag_nonfinite("divide", out);
  out.attach({a, b}, [a, b](detail::Node<Scalar>& o) mutable {
    if (a.requires_grad()) a.node()->accumulate_grad(ArrayX<Scalar>(o.grad / b.values()));
    if (b.requires_grad()) {
      b.node()->accumulate_grad(
          ArrayX<Scalar>(-o.grad * a.values() / (b.values() * b.values())));
    }
  });
  return out;
}

template <typename Scalar>
Tensor<Scalar> add_scalar(const Tensor<Scalar>& a, Scalar c) {
  auto out = Tensor<Scalar>::make(a.shape(), a.requires_grad());
  out.values() = a.values() + c;
  out.attach({a}, [a](detail::Node<Scalar>& o) mutable {
    if (a.requires_grad()) a.node()->accumulate_grad(o.grad);
  });
  return out;
}

template <typename Scalar>
Tensor<Scalar> mul_scalar(const Tensor<Scalar>& a, Scalar c) {
  auto out = Tensor<Scalar>::make(a.shape(), a.requires_grad());
  out.values() = a.values() * c;
  out.attach({a}, [a, c](detail::Node<Scalar>& o) mutable {
    if (a.requires_grad()) a.node()->accumulate_grad(ArrayX<Scalar>(o.grad * c));
  });
  return out;
}

template <typename Scalar>
Tensor<Scalar> neg(const Tensor<Scalar>& a) {
  return mul_scalar(a, Scalar(-1));
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

// |x| with subgradient 0 at exactly 0.
template <typename Scalar>
Tensor<Scalar> abs(const Tensor<Scalar>& a) {
  auto out = Tensor<Scalar>::make(a.shape(), a.requires_grad());
  out.values() = a.values().abs();
  out.attach({a}, [a](detail::Node<Scalar>& o) mutable {
    if (!a.requires_grad()) return;
    ArrayX<Scalar> sign = a.values().sign();
    a.node()->accumulate_grad(ArrayX<Scalar>(o.grad * sign));
  });
  return out;
}

template <typename Scalar>
Tensor<Scalar> log(const Tensor<Scalar>& a) {
  auto out = Tensor<Scalar>::make(a.shape(), a.requires_grad());
  out.values() = a.values().log();
  detail::flag_nonfinite("log", out);
  out.attach({a}, [a](detail::Node<Scalar>& o) mutable {
    if (a.requires_grad()) a.node()->accumulate_grad(ArrayX<Scalar>(o.grad / a.values()));
  });
  return out;
}

template <typename Scalar>
Tensor<Scalar> exp(const Tensor<Scalar>& a) {
  auto out = Tensor<Scalar>::make(a.shape(), a.requires_grad());
  out.values() = a.values().exp();
  out.attach({a}, [a](detail::Node<Scalar>& o) mutable {
    if (a.requires_grad()) a.node()->accumulate_grad(ArrayX<Scalar>(o.grad * o.values));
  });
  return out;
}

// ELU with alpha = 1, written branch-free so Eigen can vectorize it (its
// select() expression evaluates coefficient-wise): max(x,0) contributes the
// positive side, exp(min(x,0)) - 1 the negative side and exactly zero
// elsewhere. The gradient is recovered from the output: min(y + 1, 1) equals
// exp(x) on the negative side and 1 on the positive side.
template <typename Scalar>
Tensor<Scalar> elu(const Tensor<Scalar>& a) {
  auto out = Tensor<Scalar>::make(a.shape(), a.requires_grad());
  out.values() =
      a.values().max(Scalar(0)) + (a.values().min(Scalar(0)).exp() - Scalar(1));
  out.attach({a}, [a](detail::Node<Scalar>& o) mutable {
    if (!a.requires_grad()) return;
    a.node()->accumulate_grad(
        ArrayX<Scalar>(o.grad * (o.values + Scalar(1)).min(Scalar(1))));
  });
  return out;
}

// log(1 + exp(x)), computed stably; gradient is the logistic sigmoid.
template <typename Scalar>
Tensor<Scalar> softplus(const Tensor<Scalar>& a) {
  auto out = Tensor<Scalar>::make(a.shape(), a.requires_grad());
  out.values() = (a.values() > Scalar(20))
                     .select(a.values(), ((-a.values().abs()).exp() + Scalar(1)).log() +
                                             a.values().max(Scalar(0)));
  out.attach({a}, [a](detail::Node<Scalar>& o) mutable {
    if (!a.requires_grad()) return;
    ArrayX<Scalar> sig = Scalar(1) / (Scalar(1) + (-a.values()).min(Scalar(30)).exp());
    a.node()->accumulate_grad(ArrayX<Scalar>(o.grad * sig));
  });
  return out;
}

// Sign-preserving magnitude floor: sign(x) * max(|x|, floor), with sign(0)
// taken as +1. Subgradient is 1 outside the floor region and 0 inside.
template <typename Scalar>
Tensor<Scalar> clamp_abs_floor(const Tensor<Scalar>& a, Scalar floor) {
  auto out = Tensor<Scalar>::make(a.shape(), a.requires_grad());
  ArrayX<Scalar> sign_nz =
      (a.values() < Scalar(0)).select(ArrayX<Scalar>::Constant(a.numel(), Scalar(-1)),
                                      ArrayX<Scalar>::Constant(a.numel(), Scalar(1)));
  out.values() = sign_nz * a.values().abs().max(floor);
  out.attach({a}, [a, floor](detail::Node<Scalar>& o) mutable {
    if (!a.requires_grad()) return;
    ArrayX<Scalar> mask = (a.values().abs() >= floor)
                              .select(ArrayX<Scalar>::Ones(o.numel()),
                                      ArrayX<Scalar>::Zero(o.numel()));
    a.node()->accumulate_grad(ArrayX<Scalar>(o.grad * mask));
  });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> sum_all(const Tensor<Scalar>& a) {
  auto out = Tensor<Scalar>::make({1}, a.requires_grad());
  out.values()[0] = a.values().sum();
  out.attach({a}, [a](detail::Node<Scalar>& o) mutable {
    if (a.requires_grad()) {
      a.node()->accumulate_grad(ArrayX<Scalar>::Constant(a.numel(), o.grad[0]));
    }
  });
  return out;
}

template <typename Scalar>
Tensor<Scalar> mean_all(const Tensor<Scalar>& a) {
  const Scalar inv_n = Scalar(1) / static_cast<Scalar>(a.numel());
  auto out = Tensor<Scalar>::make({1}, a.requires_grad());
  out.values()[0] = a.values().sum() * inv_n;
  out.attach({a}, [a, inv_n](detail::Node<Scalar>& o) mutable {
    if (a.requires_grad()) {
      a.node()->accumulate_grad(ArrayX<Scalar>::Constant(a.numel(), o.grad[0] * inv_n));
    }
  });
  return out;
}

// Mean over the last axis: [..., L] -> [...]. A rank-1 input reduces to a
// scalar of shape [1].
template <typename Scalar>
Tensor<Scalar> mean_lastdim(const Tensor<Scalar>& a) {
  const Index cols = a.shape().back();
  const Index rows = a.numel() / cols;
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  if (out_shape.empty()) out_shape = {1};
  auto out = Tensor<Scalar>::make(out_shape, a.requires_grad());
  auto src = detail::as_matrix(a.values(), rows, cols);
  auto dst = detail::as_matrix(out.values(), rows, 1);
  dst = src.rowwise().mean();
  out.attach({a}, [a, rows, cols](detail::Node<Scalar>& o) mutable {
    if (!a.requires_grad()) return;
    ArrayX<Scalar> g(rows * cols);
    auto gm = detail::as_matrix(g, rows, cols);
    auto go = detail::as_matrix(o.grad, rows, 1);
    gm = (go * Eigen::Matrix<Scalar, 1, Eigen::Dynamic>::Ones(cols)) /
         static_cast<Scalar>(cols);
    a.node()->accumulate_grad(g);
  });
  return out;
}

// Sum over the last axis: [..., L] -> [...]. A rank-1 input reduces to a
// scalar of shape [1].
template <typename Scalar>
Tensor<Scalar> sum_lastdim(const Tensor<Scalar>& a) {
  const Index cols = a.shape().back();
  const Index rows = a.numel() / cols;
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  if (out_shape.empty()) out_shape = {1};
  auto out = Tensor<Scalar>::make(out_shape, a.requires_grad());
  auto src = detail::as_matrix(a.values(), rows, cols);
  auto dst = detail::as_matrix(out.values(), rows, 1);
  dst = src.rowwise().sum();
  out.attach({a}, [a, rows, cols](detail::Node<Scalar>& o) mutable {
    if (!a.requires_grad()) return;
    ArrayX<Scalar> g(rows * cols);
    auto gm = detail::as_matrix(g, rows, cols);
    auto go = detail::as_matrix(o.grad, rows, 1);
    gm = go * Eigen::Matrix<Scalar, 1, Eigen::Dynamic>::Ones(cols);
    a.node()->accumulate_grad(g);
  });
  return out;
}

// Row-wise softmax over the last axis.
template <typename Scalar>
Tensor<Scalar> softmax_lastdim(const Tensor<Scalar>& a) {
  const Index cols = a.shape().back();
  const Index rows = a.numel() / cols;
  auto out = Tensor<Scalar>::make(a.shape(), a.requires_grad());
  auto src = detail::as_matrix(a.values(), rows, cols);
  auto dst = detail::as_matrix(out.values(), rows, cols);
  for (Index r = 0; r < rows; ++r) {
    const Scalar m = src.row(r).maxCoeff();
    dst.row(r) = (src.row(r).array() - m).exp().matrix();
    dst.row(r) /= dst.row(r).sum();
  }
  out.attach({a}, [a, rows, cols](detail::Node<Scalar>& o) mutable {
    if (!a.requires_grad()) return;
    ArrayX<Scalar> g(rows * cols);
    auto y = detail::as_matrix(static_cast<const ArrayX<Scalar>&>(o.values), rows, cols);
    auto dy = detail::as_matrix(o.grad, rows, cols);
    auto gm = detail::as_matrix(g, rows, cols);
    for (Index r = 0; r < rows; ++r) {
      const Scalar dot = y.row(r).dot(dy.row(r));
      gm.row(r) = (y.row(r).array() * (dy.row(r).array() - dot)).matrix();
    }
    a.node()->accumulate_grad(g);
  });
  return out;
}

// Row-wise log-softmax over the last axis, computed as
// x - max - log(sum(exp(x - max))) so small probabilities keep full range.
template <typename Scalar>
Tensor<Scalar> log_softmax_lastdim(const Tensor<Scalar>& a) {
  const Index cols = a.shape().back();
  const Index rows = a.numel() / cols;
  auto out = Tensor<Scalar>::make(a.shape(), a.requires_grad());
  auto src = detail::as_matrix(a.values(), rows, cols);
  auto dst = detail::as_matrix(out.values(), rows, cols);
  for (Index r = 0; r < rows; ++r) {
    const Scalar m = src.row(r).maxCoeff();
    const Scalar lse = std::log((src.row(r).array() - m).exp().sum());
    dst.row(r) = (src.row(r).array() - m - lse).matrix();
  }
  out.attach({a}, [a, rows, cols](detail::Node<Scalar>& o) mutable {
    if (!a.requires_grad()) return;
    ArrayX<Scalar> g(rows * cols);
    auto y = detail::as_matrix(static_cast<const ArrayX<Scalar>&>(o.values), rows, cols);
    auto dy = detail::as_matrix(o.grad, rows, cols);
    auto gm = detail::as_matrix(g, rows, cols);
    for (Index r = 0; r < rows; ++r) {
      const Scalar total = dy.row(r).sum();
      gm.row(r) = (dy.row(r).array() - y.row(r).array().exp() * total).matrix();
    }
    a.node()->accumulate_grad(g);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra and shape ops
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw TensorError("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  }
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto out = Tensor<Scalar>::make({m, n}, a.requires_grad() || b.requires_grad());
  detail::as_matrix(out.values(), m, n).noalias() =
      detail::as_matrix(a.values(), m, k) * detail::as_matrix(b.values(), k, n);
  out.attach({a, b}, [a, b, m, k, n](detail::Node<Scalar>& o) mutable {
    auto go = detail::as_matrix(o.grad, m, n);
    if (a.requires_grad()) {
      ArrayX<Scalar> ga(m * k);
      detail::as_matrix(ga, m, k).noalias() =
          go * detail::as_matrix(b.values(), k, n).transpose();
      a.node()->accumulate_grad(ga);
    }
    if (b.requires_grad()) {
      ArrayX<Scalar> gb(k * n);
      detail::as_matrix(gb, k, n).noalias() =
          detail::as_matrix(a.values(), m, k).transpose() * go;
      b.node()->accumulate_grad(gb);
    }
  });
  return out;
}

// Adds a length-N row vector to every row of an [M, N] matrix (bias add).
template <typename Scalar>
Tensor<Scalar> add_rowvec(const Tensor<Scalar>& a, const Tensor<Scalar>& v) {
  if (a.rank() != 2 || v.numel() != a.dim(1)) {
    throw TensorError("add_rowvec: shapes " + shape_str(a.shape()) + " vs " +
                      shape_str(v.shape()));
  }
  const Index m = a.dim(0), n = a.dim(1);
  auto out = Tensor<Scalar>::make(a.shape(), a.requires_grad() || v.requires_grad());
  auto src = detail::as_matrix(a.values(), m, n);
  auto dst = detail::as_matrix(out.values(), m, n);
  dst = src.rowwise() + Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(
                            v.values().data(), n);
  out.attach({a, v}, [a, v, m, n](detail::Node<Scalar>& o) mutable {
    auto go = detail::as_matrix(o.grad, m, n);
    if (a.requires_grad()) a.node()->accumulate_grad(o.grad);
    if (v.requires_grad()) {
      ArrayX<Scalar> gv(n);
      Eigen::Map<Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(gv.data(), n) =
          go.colwise().sum();
      v.node()->accumulate_grad(gv);
    }
  });
  return out;
}

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& a, const Shape& new_shape) {
  if (shape_numel(new_shape) != a.numel()) {
    throw TensorError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                      shape_str(new_shape));
  }
  auto out = Tensor<Scalar>::make(new_shape, a.requires_grad());
  out.values() = a.values();
  out.attach({a}, [a](detail::Node<Scalar>& o) mutable {
    if (a.requires_grad()) a.node()->accumulate_grad(o.grad);
  });
  return out;
}

// Contiguous slice along axis 0.
template <typename Scalar>
Tensor<Scalar> slice0(const Tensor<Scalar>& a, Index start, Index len) {
  if (a.rank() == 0 || start < 0 || len < 0 || start + len > a.dim(0)) {
    throw TensorError("slice0: range [" + std::to_string(start) + "," +
                      std::to_string(start + len) + ") out of bounds for " +
                      shape_str(a.shape()));
  }
  const Index stride = a.numel() / a.dim(0);
  Shape out_shape = a.shape();
  out_shape[0] = len;
  auto out = Tensor<Scalar>::make(out_shape, a.requires_grad());
  out.values() = a.values().segment(start * stride, len * stride);
  out.attach({a}, [a, start, stride, len](detail::Node<Scalar>& o) mutable {
    if (!a.requires_grad()) return;
    ArrayX<Scalar> g = ArrayX<Scalar>::Zero(a.numel());
    g.segment(start * stride, len * stride) = o.grad;
    a.node()->accumulate_grad(g);
  });
  return out;
}

// Concatenation along axis 0. All inputs must agree on trailing dimensions.
template <typename Scalar>
Tensor<Scalar> concat0(const std::vector<Tensor<Scalar>>& parts) {
  if (parts.empty()) throw TensorError("concat0: no inputs");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  Index rows = 0;
  bool needs_grad = false;
  for (const auto& p : parts) {
    Shape ptail(p.shape().begin() + 1, p.shape().end());
    if (ptail != tail) {
      throw TensorError("concat0: shape mismatch " + shape_str(parts[0].shape()) +
                        " vs " + shape_str(p.shape()));
    }
    rows += p.dim(0);
    needs_grad = needs_grad || p.requires_grad();
  }
  Shape out_shape = parts[0].shape();
  out_shape[0] = rows;
  auto out = Tensor<Scalar>::make(out_shape, needs_grad);
  Index offset = 0;
  for (const auto& p : parts) {
    out.values().segment(offset, p.numel()) = p.values();
    offset += p.numel();
  }
  out.attach(parts, [parts](detail::Node<Scalar>& o) mutable {
    Index off = 0;
    for (auto& p : parts) {
      if (p.requires_grad()) {
        p.node()->accumulate_grad(ArrayX<Scalar>(o.grad.segment(off, p.numel())));
      }
      off += p.numel();
    }
  });
  return out;
}

}  // namespace equitempo
