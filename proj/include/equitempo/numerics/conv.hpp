#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <string>
#include <vector>

#include "equitempo/numerics/ops.hpp"
#include "equitempo/numerics/tensor.hpp"

namespace equitempo {

namespace detail {

// Gathers conv2d input patches of one sample into a [Cin*KH*KW, Hout*Wout]
// column matrix. Out-of-range (zero-padded) positions stay zero.
template <typename Scalar>
void im2col_2d(const Scalar* x, Index cin, Index h, Index w, Index kh, Index kw,
               Index pad_h, Index pad_w, Index h_out, Index w_out, Scalar* col) {
  const Index cols = h_out * w_out;
  for (Index ci = 0; ci < cin; ++ci) {
    const Scalar* xc = x + ci * h * w;
    for (Index r = 0; r < kh; ++r) {
      for (Index s = 0; s < kw; ++s) {
        Scalar* dst = col + ((ci * kh + r) * kw + s) * cols;
        for (Index oh = 0; oh < h_out; ++oh) {
          const Index ih = oh - pad_h + r;
          Scalar* drow = dst + oh * w_out;
          if (ih < 0 || ih >= h) {
            std::fill(drow, drow + w_out, Scalar(0));
            continue;
          }
          // iw = ow - pad_w + s ranges over [lo_src, lo_src + w_out)
          const Index lo_src = -pad_w + s;
          const Index ow_begin = std::max<Index>(0, -lo_src);
          const Index ow_end = std::min<Index>(w_out, w - lo_src);
          std::fill(drow, drow + std::min(ow_begin, w_out), Scalar(0));
          if (ow_end > ow_begin) {
            const Scalar* srow = xc + ih * w + lo_src + ow_begin;
            std::copy(srow, srow + (ow_end - ow_begin), drow + ow_begin);
          }
          std::fill(drow + std::max(ow_begin, ow_end), drow + w_out, Scalar(0));
        }
      }
    }
  }
}

// Scatter-add of a column-matrix gradient back onto one sample's input.
template <typename Scalar>
void col2im_2d(const Scalar* col, Index cin, Index h, Index w, Index kh, Index kw,
               Index pad_h, Index pad_w, Index h_out, Index w_out, Scalar* dx) {
  const Index cols = h_out * w_out;
  for (Index ci = 0; ci < cin; ++ci) {
    Scalar* xc = dx + ci * h * w;
    for (Index r = 0; r < kh; ++r) {
      for (Index s = 0; s < kw; ++s) {
        const Scalar* src = col + ((ci * kh + r) * kw + s) * cols;
        for (Index oh = 0; oh < h_out; ++oh) {
          const Index ih = oh - pad_h + r;
          if (ih < 0 || ih >= h) continue;
          const Index lo_src = -pad_w + s;
          const Index ow_begin = std::max<Index>(0, -lo_src);
          const Index ow_end = std::min<Index>(w_out, w - lo_src);
          if (ow_end <= ow_begin) continue;
          const Scalar* srow = src + oh * w_out + ow_begin;
          Scalar* drow = xc + ih * w + lo_src + ow_begin;
          for (Index i = 0; i < ow_end - ow_begin; ++i) drow[i] += srow[i];
        }
      }
    }
  }
}

}  // namespace detail

// 2-D convolution over (H, W) with zero padding pad_h/pad_w on both sides of
// each axis. x: [N, Cin, H, W], w: [Cout, Cin, KH, KW], b: [Cout].
// Output: [N, Cout, H + 2*pad_h - KH + 1, W + 2*pad_w - KW + 1].
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& w,
                      const Tensor<Scalar>& b, Index pad_h, Index pad_w) {
  if (x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(1)) {
    throw TensorError("conv2d: incompatible shapes " + shape_str(x.shape()) + " vs " +
                      shape_str(w.shape()));
  }
  const Index n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const Index cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (b.numel() != cout) {
    throw TensorError("conv2d: bias shape " + shape_str(b.shape()) + " vs " +
                      std::to_string(cout) + " filters");
  }
  const Index h_out = h + 2 * pad_h - kh + 1;
  const Index w_out = wd + 2 * pad_w - kw + 1;
  if (h_out <= 0 || w_out <= 0) {
    throw TensorError("conv2d: kernel " + shape_str(w.shape()) + " too large for input " +
                      shape_str(x.shape()));
  }
  const Index patch = cin * kh * kw;
  const Index cols = h_out * w_out;

  const bool needs_grad = x.requires_grad() || w.requires_grad() || b.requires_grad();
  auto out = Tensor<Scalar>::make({n, cout, h_out, w_out}, needs_grad);

  ArrayX<Scalar> col(patch * cols);
  auto w_mat = detail::as_matrix(w.values(), cout, patch);
  for (Index i = 0; i < n; ++i) {
    detail::im2col_2d(x.values().data() + i * cin * h * wd, cin, h, wd, kh, kw, pad_h,
                      pad_w, h_out, w_out, col.data());
    auto col_mat = detail::as_matrix(col, patch, cols);
    Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
        out_mat(out.values().data() + i * cout * cols, cout, cols);
    out_mat.noalias() = w_mat * col_mat;
    out_mat.colwise() += Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(
        b.values().data(), cout);
  }

  out.attach({x, w, b}, [x, w, b, n, cin, h, wd, cout, kh, kw, pad_h, pad_w, h_out,
                         w_out](detail::Node<Scalar>& o) mutable {
    const Index patch = cin * kh * kw;
    const Index cols = h_out * w_out;
    ArrayX<Scalar> col(patch * cols);
    ArrayX<Scalar> gw, gx, dcol;
    if (w.requires_grad()) gw = ArrayX<Scalar>::Zero(w.numel());
    if (x.requires_grad()) {
      gx = ArrayX<Scalar>::Zero(x.numel());
      dcol.resize(patch * cols);
    }
    for (Index i = 0; i < n; ++i) {
      Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic,
                                     Eigen::RowMajor>>
          go_mat(o.grad.data() + i * cout * cols, cout, cols);
      if (w.requires_grad() || x.requires_grad()) {
        detail::im2col_2d(x.values().data() + i * cin * h * wd, cin, h, wd, kh, kw,
                          pad_h, pad_w, h_out, w_out, col.data());
      }
      if (w.requires_grad()) {
        detail::as_matrix(gw, cout, patch).noalias() +=
            go_mat * detail::as_matrix(col, patch, cols).transpose();
      }
      if (x.requires_grad()) {
        detail::as_matrix(dcol, patch, cols).noalias() =
            detail::as_matrix(static_cast<const ArrayX<Scalar>&>(w.values()), cout, patch)
                .transpose() *
            go_mat;
        detail::col2im_2d(dcol.data(), cin, h, wd, kh, kw, pad_h, pad_w, h_out, w_out,
                          gx.data() + i * cin * h * wd);
      }
    }
    if (w.requires_grad()) w.node()->accumulate_grad(gw);
    if (x.requires_grad()) x.node()->accumulate_grad(gx);
    if (b.requires_grad()) {
      ArrayX<Scalar> gb = ArrayX<Scalar>::Zero(cout);
      for (Index i = 0; i < n; ++i) {
        Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic,
                                       Eigen::RowMajor>>
            go_mat(o.grad.data() + i * cout * cols, cout, cols);
        gb += go_mat.rowwise().sum().array();
      }
      b.node()->accumulate_grad(gb);
    }
  });
  return out;
}

// Dilated 1-D convolution over time with "same" zero padding of
// (K-1)*dilation/2 on each side (left-heavy when odd). x: [N, Cin, T],
// w: [Cout, Cin, K], b: [Cout]. Output: [N, Cout, T].
//
// Computed as K accumulated GEMMs on time-shifted slices instead of an
// explicit column matrix: out[:, lo:hi] += W_k * x[:, lo+off : hi+off].
template <typename Scalar>
Tensor<Scalar> conv1d_dilated(const Tensor<Scalar>& x, const Tensor<Scalar>& w,
                              const Tensor<Scalar>& b, Index dilation) {
  if (x.rank() != 3 || w.rank() != 3 || x.dim(1) != w.dim(1)) {
    throw TensorError("conv1d: incompatible shapes " + shape_str(x.shape()) + " vs " +
                      shape_str(w.shape()));
  }
  if (dilation < 1) throw TensorError("conv1d: dilation must be >= 1");
  const Index n = x.dim(0), cin = x.dim(1), t = x.dim(2);
  const Index cout = w.dim(0), k = w.dim(2);
  if (b.numel() != cout) {
    throw TensorError("conv1d: bias shape " + shape_str(b.shape()) + " vs " +
                      std::to_string(cout) + " filters");
  }
  const Index pad_left = (k - 1) * dilation - (k - 1) * dilation / 2;

  const bool needs_grad = x.requires_grad() || w.requires_grad() || b.requires_grad();
  auto out = Tensor<Scalar>::make({n, cout, t}, needs_grad);
  out.values().setZero();

  {
    auto x_mat =
        detail::as_matrix(static_cast<const ArrayX<Scalar>&>(x.values()), n * cin, t);
    auto out_mat = detail::as_matrix(out.values(), n * cout, t);
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> wk(cout, cin);
    for (Index tap = 0; tap < k; ++tap) {
      // out[:, ot] += W_tap * x[:, ot + tap*dilation - pad_left]
      const Index off = tap * dilation - pad_left;
      const Index lo = std::max<Index>(0, -off);
      const Index hi = std::min<Index>(t, t - off);
      if (hi <= lo) continue;
      // w[co][ci][tap] is strided across (co, ci); gather once per tap.
      for (Index co = 0; co < cout; ++co)
        for (Index ci = 0; ci < cin; ++ci)
          wk(co, ci) = w.values()[(co * cin + ci) * k + tap];
      for (Index i = 0; i < n; ++i) {
        out_mat.block(i * cout, lo, cout, hi - lo).noalias() +=
            wk * x_mat.block(i * cin, lo + off, cin, hi - lo);
      }
    }
    auto bias = Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(
        b.values().data(), cout);
    for (Index i = 0; i < n; ++i) {
      out_mat.middleRows(i * cout, cout).colwise() += bias;
    }
  }

  out.attach({x, w, b}, [x, w, b, n, cin, t, cout, k, dilation,
                         pad_left](detail::Node<Scalar>& o) mutable {
    auto x_mat =
        detail::as_matrix(static_cast<const ArrayX<Scalar>&>(x.values()), n * cin, t);
    auto go_mat = detail::as_matrix(static_cast<const ArrayX<Scalar>&>(o.grad),
                                    n * cout, t);
    ArrayX<Scalar> gw, gx;
    if (w.requires_grad()) gw = ArrayX<Scalar>::Zero(w.numel());
    if (x.requires_grad()) gx = ArrayX<Scalar>::Zero(x.numel());
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> wk(cout, cin);
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> gwk(cout, cin);
    for (Index tap = 0; tap < k; ++tap) {
      const Index off = tap * dilation - pad_left;
      const Index lo = std::max<Index>(0, -off);
      const Index hi = std::min<Index>(t, t - off);
      if (hi <= lo) continue;
      if (w.requires_grad()) gwk.setZero();
      if (x.requires_grad()) {
        for (Index co = 0; co < cout; ++co)
          for (Index ci = 0; ci < cin; ++ci)
            wk(co, ci) = w.values()[(co * cin + ci) * k + tap];
      }
      for (Index i = 0; i < n; ++i) {
        auto go_blk = go_mat.block(i * cout, lo, cout, hi - lo);
        if (w.requires_grad()) {
          gwk.noalias() += go_blk * x_mat.block(i * cin, lo + off, cin, hi - lo).transpose();
        }
        if (x.requires_grad()) {
          Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic,
                                   Eigen::RowMajor>>
              gx_mat(gx.data(), n * cin, t);
          gx_mat.block(i * cin, lo + off, cin, hi - lo).noalias() +=
              wk.transpose() * go_blk;
        }
      }
      if (w.requires_grad()) {
        for (Index co = 0; co < cout; ++co)
          for (Index ci = 0; ci < cin; ++ci)
            gw[(co * cin + ci) * k + tap] += gwk(co, ci);
      }
    }
    if (w.requires_grad()) w.node()->accumulate_grad(gw);
    if (x.requires_grad()) x.node()->accumulate_grad(gx);
    if (b.requires_grad()) {
      ArrayX<Scalar> gb = ArrayX<Scalar>::Zero(cout);
      for (Index i = 0; i < n; ++i) {
        gb += go_mat.middleRows(i * cout, cout).rowwise().sum().array();
      }
      b.node()->accumulate_grad(gb);
    }
  });
  return out;
}

// Non-overlapping max pooling over the last axis by an integer factor; a
// trailing remainder shorter than the window is dropped. [..., W] ->
// [..., W/factor]. Backward routes gradient to the argmax position.
template <typename Scalar>
Tensor<Scalar> maxpool_lastdim(const Tensor<Scalar>& x, Index factor) {
  if (factor < 1 || x.shape().back() < factor) {
    throw TensorError("maxpool_lastdim: factor " + std::to_string(factor) +
                      " invalid for " + shape_str(x.shape()));
  }
  const Index w = x.shape().back();
  const Index w_out = w / factor;
  const Index rows = x.numel() / w;
  Shape out_shape = x.shape();
  out_shape.back() = w_out;
  auto out = Tensor<Scalar>::make(out_shape, x.requires_grad());

  auto argmax = std::make_shared<std::vector<Index>>(rows * w_out);
  const Scalar* src = x.values().data();
  Scalar* dst = out.values().data();
  for (Index r = 0; r < rows; ++r) {
    for (Index ow = 0; ow < w_out; ++ow) {
      const Index base = r * w + ow * factor;
      Index best = base;
      Scalar best_v = src[base];
      for (Index j = 1; j < factor; ++j) {
        if (src[base + j] > best_v) {
          best_v = src[base + j];
          best = base + j;
        }
      }
      dst[r * w_out + ow] = best_v;
      (*argmax)[r * w_out + ow] = best;
    }
  }

  out.attach({x}, [x, argmax](detail::Node<Scalar>& o) mutable {
    if (!x.requires_grad()) return;
    ArrayX<Scalar> g = ArrayX<Scalar>::Zero(x.numel());
    for (Index i = 0; i < o.numel(); ++i) g[(*argmax)[i]] += o.grad[i];
    x.node()->accumulate_grad(g);
  });
  return out;
}

}  // namespace equitempo
