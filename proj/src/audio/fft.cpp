#include <cmath>
#include <stdexcept>
#include <utility>

#include "equitempo/audio/frontend.hpp"

namespace equitempo {

FftPlan::FftPlan(int n) : n_(n) {
  if (n < 2 || (n & (n - 1)) != 0) {
    throw AudioError("fft: size must be a power of two, got " + std::to_string(n));
  }
  int log2n = 0;
  while ((1 << log2n) < n) ++log2n;

  reversed_.resize(n);
  for (int i = 0; i < n; ++i) {
    unsigned r = 0;
    for (int b = 0; b < log2n; ++b) r |= ((i >> b) & 1u) << (log2n - 1 - b);
    reversed_[i] = r;
  }

  // Twiddles for all stages, packed consecutively: stage with half-size m
  // holds m factors exp(-i*pi*k/m).
  twiddle_.reserve(2 * (n - 1));
  for (int m = 1; m < n; m <<= 1) {
    for (int k = 0; k < m; ++k) {
      const double ang = -M_PI * k / m;
      twiddle_.push_back(static_cast<float>(std::cos(ang)));
      twiddle_.push_back(static_cast<float>(std::sin(ang)));
    }
  }
}

void FftPlan::forward(float* reim) const {
  const int n = n_;
  for (int i = 0; i < n; ++i) {
    const unsigned j = reversed_[i];
    if (j > static_cast<unsigned>(i)) {
      std::swap(reim[2 * i], reim[2 * j]);
      std::swap(reim[2 * i + 1], reim[2 * j + 1]);
    }
  }
  const float* tw = twiddle_.data();
  for (int m = 1; m < n; m <<= 1) {
    for (int base = 0; base < n; base += 2 * m) {
      for (int k = 0; k < m; ++k) {
        const float wr = tw[2 * k], wi = tw[2 * k + 1];
        float* lo = reim + 2 * (base + k);
        float* hi = reim + 2 * (base + k + m);
        const float xr = hi[0] * wr - hi[1] * wi;
        const float xi = hi[0] * wi + hi[1] * wr;
        hi[0] = lo[0] - xr;
        hi[1] = lo[1] - xi;
        lo[0] += xr;
        lo[1] += xi;
      }
    }
    tw += 2 * m;
  }
}

}  // namespace equitempo
