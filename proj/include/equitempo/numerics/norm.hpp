#pragma once

#include <Eigen/Core>

#include <string>

#include "equitempo/numerics/ops.hpp"
#include "equitempo/numerics/rng.hpp"
#include "equitempo/numerics/tensor.hpp"

namespace equitempo {

// Batch normalization over features: x is [R, F] and each of the F features
// is normalized across the R rows. Training mode uses batch statistics
// (biased variance) and folds them into the running buffers as
// running = momentum * running + (1 - momentum) * batch; eval mode uses the
// running buffers only, so the output of a row is independent of the other
// rows in the batch.
template <typename Scalar>
Tensor<Scalar> batchnorm_features(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                                  const Tensor<Scalar>& beta,
                                  Tensor<Scalar>& running_mean,
                                  Tensor<Scalar>& running_var, Scalar momentum,
                                  Scalar eps, bool training) {
  if (x.rank() != 2 || gamma.numel() != x.dim(1) || beta.numel() != x.dim(1) ||
      running_mean.numel() != x.dim(1) || running_var.numel() != x.dim(1)) {
    throw TensorError("batchnorm: feature mismatch, input " + shape_str(x.shape()) +
                      " vs gamma " + shape_str(gamma.shape()));
  }
  const Index rows = x.dim(0), f = x.dim(1);
  using RowVec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
  auto xm = detail::as_matrix(x.values(), rows, f);

  RowVec mu(f), inv_std(f);
  if (training) {
    mu = xm.colwise().mean();
    RowVec var =
        (xm.rowwise() - mu).array().square().colwise().mean().matrix();
    inv_std = (var.array() + eps).rsqrt().matrix();
    running_mean.values() =
        momentum * running_mean.values() + (Scalar(1) - momentum) * mu.transpose().array();
    running_var.values() =
        momentum * running_var.values() + (Scalar(1) - momentum) * var.transpose().array();
  } else {
    mu = running_mean.values().transpose().matrix();
    inv_std = (running_var.values().transpose().array() + eps).rsqrt().matrix();
  }

  const bool needs_grad =
      x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  auto out = Tensor<Scalar>::make(x.shape(), needs_grad);
  auto ym = detail::as_matrix(out.values(), rows, f);
  RowVec g_row = gamma.values().transpose().matrix();
  RowVec b_row = beta.values().transpose().matrix();
  ym = (((xm.rowwise() - mu).array().rowwise() * inv_std.array()).rowwise() *
        g_row.array())
           .rowwise() +
       b_row.array();

  out.attach({x, gamma, beta},
             [x, gamma, beta, mu, inv_std, rows, f, training](detail::Node<Scalar>& o) mutable {
    auto xm = detail::as_matrix(static_cast<const ArrayX<Scalar>&>(x.values()), rows, f);
    auto dy = detail::as_matrix(static_cast<const ArrayX<Scalar>&>(o.grad), rows, f);
    using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using RowVecL = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
    Mat xhat = (xm.rowwise() - mu).array().rowwise() * inv_std.array();
    if (beta.requires_grad()) {
      ArrayX<Scalar> gb = dy.colwise().sum().transpose().array();
      beta.node()->accumulate_grad(gb);
    }
    if (gamma.requires_grad()) {
      ArrayX<Scalar> gg = (dy.array() * xhat.array()).colwise().sum().transpose();
      gamma.node()->accumulate_grad(gg);
    }
    if (!x.requires_grad()) return;
    RowVecL g_row = gamma.values().transpose().matrix();
    Mat dxhat = dy.array().rowwise() * g_row.array();
    ArrayX<Scalar> gx(rows * f);
    auto gxm = detail::as_matrix(gx, rows, f);
    if (training) {
      // Batch statistics depend on x, so their gradient terms enter:
      // dx = inv_std/R * (R*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat))
      RowVecL sum_d = dxhat.colwise().sum();
      RowVecL sum_dx = (dxhat.array() * xhat.array()).colwise().sum();
      gxm = ((dxhat * Scalar(rows)).rowwise() - sum_d).array() -
            (xhat.array().rowwise() * sum_dx.array());
      gxm = gxm.array().rowwise() * (inv_std.array() / Scalar(rows));
    } else {
      gxm = dxhat.array().rowwise() * inv_std.array();
    }
    x.node()->accumulate_grad(gx);
  });
  return out;
}

namespace detail {
template <typename Scalar>
void masked_grad(const Tensor<Scalar>& x, Node<Scalar>& o, const ArrayX<Scalar>& mask) {
  x.node()->accumulate_grad(ArrayX<Scalar>(o.grad * mask));
}
}  // namespace detail

// Inverted dropout: in training mode each element is zeroed with probability
// p and survivors are scaled by 1/(1-p); outside training (or at p = 0) the
// input tensor is returned unchanged.
template <typename Scalar>
Tensor<Scalar> dropout(const Tensor<Scalar>& x, Scalar p, Rng& rng, bool training) {
  if (p < Scalar(0) || p >= Scalar(1)) {
    throw TensorError("dropout: rate must be in [0,1), got " + std::to_string(p));
  }
  if (!training || p == Scalar(0)) return x;
  const Scalar scale = Scalar(1) / (Scalar(1) - p);
  ArrayX<Scalar> mask = ArrayX<Scalar>::Constant(x.numel(), scale);
  // Visit only the dropped positions: the gap to the next zero is geometric
  // with success probability p, so this draws about p * numel variates instead
  // of numel. Each position is still zeroed independently with probability p.
  const double denom = std::log1p(-static_cast<double>(p));
  for (Index i = 0;;) {
    double u = rng.uniform();
    while (u <= 0.0) u = rng.uniform();
    i += static_cast<Index>(std::log(u) / denom);
    if (i >= x.numel()) break;
    mask[i++] = Scalar(0);
  }
  auto out = Tensor<Scalar>::make(x.shape(), x.requires_grad());
  out.values() = x.values() * mask;
  out.attach({x}, [x, mask = std::move(mask)](detail::Node<Scalar>& o) mutable {
    if (x.requires_grad()) detail::masked_grad(x, o, mask);
  });
  return out;
}

// Spatial (channel) dropout on [N, C, T]: whole channels are dropped per
// sample, matching the correlation structure of sequence activations.
template <typename Scalar>
Tensor<Scalar> spatial_dropout(const Tensor<Scalar>& x, Scalar p, Rng& rng,
                               bool training) {
  if (x.rank() != 3) {
    throw TensorError("spatial_dropout: expected [N,C,T], got " + shape_str(x.shape()));
  }
  if (p < Scalar(0) || p >= Scalar(1)) {
    throw TensorError("spatial_dropout: rate must be in [0,1), got " + std::to_string(p));
  }
  if (!training || p == Scalar(0)) return x;
  const Index n = x.dim(0), c = x.dim(1), t = x.dim(2);
  const Scalar scale = Scalar(1) / (Scalar(1) - p);
  ArrayX<Scalar> mask(x.numel());
  for (Index i = 0; i < n * c; ++i) {
    const Scalar m = rng.uniform() < static_cast<double>(p) ? Scalar(0) : scale;
    mask.segment(i * t, t).setConstant(m);
  }
  auto out = Tensor<Scalar>::make(x.shape(), x.requires_grad());
  out.values() = x.values() * mask;
  out.attach({x}, [x, mask = std::move(mask)](detail::Node<Scalar>& o) mutable {
    if (x.requires_grad()) detail::masked_grad(x, o, mask);
  });
  return out;
}

}  // namespace equitempo
