#pragma once

// Ratio-equivariance pre-training losses. Each sample in a batch contributes
// one ordered view pair: view i stretched by alpha_i and view j by alpha_j,
// with pseudo-tempo outputs z_i and z_j. The main loss drives z_i/z_j toward
// alpha_i/alpha_j; the prime and double-prime variants are the two algebraic
// rearrangements that admit the degenerate optimum z = 0, kept for collapse
// experiments.
//
// The main loss is invariant to global rescaling z -> lambda * z, so the
// learned pseudo-tempo is defined only up to scale; tests and downstream
// consumers must rely on ratios or correlations, never absolute values.

#include <cstdint>
#include <string>

#include "equitempo/numerics/ops.hpp"
#include "equitempo/numerics/tensor.hpp"

namespace equitempo {

enum class LossVariant { kMain, kPrime, kDoublePrime };

inline std::string to_string(LossVariant v) {
  switch (v) {
    case LossVariant::kMain: return "main";
    case LossVariant::kPrime: return "prime";
    case LossVariant::kDoublePrime: return "double_prime";
  }
  return "main";
}

inline LossVariant parse_loss_variant(const std::string& s) {
  if (s == "main") return LossVariant::kMain;
  if (s == "prime") return LossVariant::kPrime;
  if (s == "double_prime") return LossVariant::kDoublePrime;
  throw std::invalid_argument("loss variant must be main, prime, or double_prime; got '" +
                              s + "'");
}

// Denominators with |z_j| below this floor are clamped (sign preserved).
inline constexpr double kDenominatorFloor = 1e-3;

namespace detail {

template <typename Scalar>
void check_loss_batch(const Tensor<Scalar>& z_i, const Tensor<Scalar>& z_j,
                      const ArrayX<Scalar>& alpha_i, const ArrayX<Scalar>& alpha_j) {
  const Index n = z_i.numel();
  if (n == 0) throw TensorError("loss: empty batch");
  if (z_j.numel() != n || alpha_i.size() != n || alpha_j.size() != n) {
    throw TensorError("loss: batch sizes disagree (z_i " + std::to_string(n) + ", z_j " +
                      std::to_string(z_j.numel()) + ", alpha_i " +
                      std::to_string(alpha_i.size()) + ", alpha_j " +
                      std::to_string(alpha_j.size()) + ")");
  }
}

template <typename Scalar>
Tensor<Scalar> constant_like(const Tensor<Scalar>& ref, ArrayX<Scalar> values) {
  return Tensor<Scalar>::from_values(ref.shape(), std::move(values), false);
}

}  // namespace detail

// Mean over the batch of |z_i/z_j - alpha_i/alpha_j|. The denominator is
// guarded as sign(z_j) * max(|z_j|, floor) so a collapsing run stays finite;
// each guarded entry increments *guard_hits when given.
template <typename Scalar>
Tensor<Scalar> equivariance_loss(const Tensor<Scalar>& z_i, const Tensor<Scalar>& z_j,
                                 const ArrayX<Scalar>& alpha_i,
                                 const ArrayX<Scalar>& alpha_j,
                                 std::int64_t* guard_hits = nullptr) {
  detail::check_loss_batch(z_i, z_j, alpha_i, alpha_j);
  if (guard_hits) {
    *guard_hits += (z_j.values().abs() < Scalar(kDenominatorFloor)).count();
  }
  auto target = detail::constant_like(z_i, ArrayX<Scalar>(alpha_i / alpha_j));
  auto ratio = divide(z_i, clamp_abs_floor(z_j, Scalar(kDenominatorFloor)));
  return mean_all(abs(sub(ratio, target)));
}

// Mean over the batch of |alpha_i * z_j - alpha_j * z_i|. Minimized by any
// equivariant solution but also by z = 0: the collapse counterexample.
template <typename Scalar>
Tensor<Scalar> trivial_loss_prime(const Tensor<Scalar>& z_i, const Tensor<Scalar>& z_j,
                                  const ArrayX<Scalar>& alpha_i,
                                  const ArrayX<Scalar>& alpha_j) {
  detail::check_loss_batch(z_i, z_j, alpha_i, alpha_j);
  auto a_i = detail::constant_like(z_i, alpha_i);
  auto a_j = detail::constant_like(z_i, alpha_j);
  return mean_all(abs(sub(mul(a_i, z_j), mul(a_j, z_i))));
}

// Mean over the batch of |z_i - alpha_i * z_j / alpha_j|. Also admits z = 0.
template <typename Scalar>
Tensor<Scalar> trivial_loss_double_prime(const Tensor<Scalar>& z_i,
                                         const Tensor<Scalar>& z_j,
                                         const ArrayX<Scalar>& alpha_i,
                                         const ArrayX<Scalar>& alpha_j) {
  detail::check_loss_batch(z_i, z_j, alpha_i, alpha_j);
  auto target = detail::constant_like(z_i, ArrayX<Scalar>(alpha_i / alpha_j));
  return mean_all(abs(sub(z_i, mul(target, z_j))));
}

// Variant dispatch used by the training loop. Guard hits are only meaningful
// for the main loss; the counterexample variants have no division by z.
template <typename Scalar>
Tensor<Scalar> pretraining_loss(LossVariant variant, const Tensor<Scalar>& z_i,
                                const Tensor<Scalar>& z_j, const ArrayX<Scalar>& alpha_i,
                                const ArrayX<Scalar>& alpha_j,
                                std::int64_t* guard_hits = nullptr) {
  switch (variant) {
    case LossVariant::kPrime:
      return trivial_loss_prime(z_i, z_j, alpha_i, alpha_j);
    case LossVariant::kDoublePrime:
      return trivial_loss_double_prime(z_i, z_j, alpha_i, alpha_j);
    case LossVariant::kMain:
      break;
  }
  return equivariance_loss(z_i, z_j, alpha_i, alpha_j, guard_hits);
}

}  // namespace equitempo
