#include <algorithm>
#include <cmath>
#include <vector>

#include "equitempo/audio/audio.hpp"

namespace equitempo {

namespace {

constexpr int kHalfTaps = 16;               // kernel support: +/- 16 input samples
constexpr int kTapCount = 2 * kHalfTaps;    // taps touching each output sample
constexpr int kPhaseCount = 512;            // fractional-delay table resolution

double sinc(double x) {
  if (std::abs(x) < 1e-12) return 1.0;
  const double px = M_PI * x;
  return std::sin(px) / px;
}

double blackman(double u) {  // |u| <= 1, zero at the edges
  if (std::abs(u) >= 1.0) return 0.0;
  return 0.42 + 0.5 * std::cos(M_PI * u) + 0.08 * std::cos(2.0 * M_PI * u);
}

// Anti-aliased fractional-delay kernels for one cutoff, tabulated over
// kPhaseCount+1 fractional offsets so lookups can interpolate linearly.
struct KernelTable {
  std::vector<float> taps;   // [kPhaseCount+1][kTapCount]
  std::vector<float> wsum;   // kernel sum per phase, for DC normalization

  explicit KernelTable(double cutoff) {
    taps.resize((kPhaseCount + 1) * kTapCount);
    wsum.resize(kPhaseCount + 1);
    for (int p = 0; p <= kPhaseCount; ++p) {
      const double frac = static_cast<double>(p) / kPhaseCount;
      double sum = 0.0;
      for (int k = 0; k < kTapCount; ++k) {
        const int j = k - kHalfTaps + 1;  // input offset relative to floor(s)
        const double t = j - frac;
        const double v = cutoff * sinc(cutoff * t) * blackman(t / kHalfTaps);
        taps[p * kTapCount + k] = static_cast<float>(v);
        sum += v;
      }
      wsum[p] = static_cast<float>(sum);
    }
  }
};

}  // namespace

ArrayX<float> resample_sinc(const ArrayX<float>& input, double ratio) {
  if (!(ratio > 0.0)) throw AudioError("resample: ratio must be positive");
  if (ratio == 1.0) return input;
  const Index n = input.size();
  const Index out_len = static_cast<Index>(std::llround(n * ratio));
  ArrayX<float> out(out_len);
  if (out_len == 0) return out;

  const KernelTable table(std::min(1.0, ratio));
  const double step = 1.0 / ratio;

  for (Index m = 0; m < out_len; ++m) {
    const double s = m * step;
    const Index i0 = static_cast<Index>(s);  // s >= 0
    const double frac = s - i0;
    const double fp = frac * kPhaseCount;
    const int p = std::min(static_cast<int>(fp), kPhaseCount - 1);
    const float a = static_cast<float>(fp - p);
    const float* row0 = table.taps.data() + p * kTapCount;
    const float* row1 = row0 + kTapCount;

    // Input span [i0 - kHalfTaps + 1, i0 + kHalfTaps]; outside is zero.
    const Index base = i0 - kHalfTaps + 1;
    const Index k_lo = std::max<Index>(0, -base);
    const Index k_hi = std::min<Index>(kTapCount, n - base);
    float acc = 0.0f;
    for (Index k = k_lo; k < k_hi; ++k) {
      const float w = row0[k] + a * (row1[k] - row0[k]);
      acc += w * input[base + k];
    }
    const float wsum = table.wsum[p] + a * (table.wsum[p + 1] - table.wsum[p]);
    out[m] = acc / wsum;
  }
  return out;
}

}  // namespace equitempo
