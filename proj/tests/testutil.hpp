#pragma once

// Shared test oracles: waveform-domain onset picking, independent of the
// spectral-flux pipeline under test.

#include <cmath>
#include <vector>

#include "equitempo/audio/audio.hpp"

namespace equitempo::testutil {

// Local-energy peak picking: an onset is a short-window energy maximum that
// clears a relative threshold, with a refractory gap to suppress ringing.
inline std::vector<Index> pick_onsets(const ArrayX<float>& x, Index refractory = 4410,
                                      float rel_threshold = 0.25f) {
  const Index win = 221;  // 5 ms energy window
  const Index n = x.size();
  if (n < 2 * win) return {};
  ArrayX<float> energy = ArrayX<float>::Zero(n - win);
  double acc = 0.0;
  for (Index i = 0; i < win; ++i) acc += static_cast<double>(x[i]) * x[i];
  for (Index i = 0; i + win < n; ++i) {
    energy[i] = static_cast<float>(acc);
    acc += static_cast<double>(x[i + win]) * x[i + win];
    acc -= static_cast<double>(x[i]) * x[i];
  }
  const float threshold = rel_threshold * energy.maxCoeff();
  std::vector<Index> onsets;
  Index i = 0;
  while (i < energy.size()) {
    if (energy[i] >= threshold) {
      // refine to the strongest sample inside the refractory span
      Index best = i;
      const Index stop = std::min<Index>(energy.size(), i + refractory);
      for (Index j = i; j < stop; ++j) {
        if (energy[j] > energy[best]) best = j;
      }
      onsets.push_back(best);
      i = best + refractory;
    } else {
      ++i;
    }
  }
  return onsets;
}

inline double median_interval(const std::vector<Index>& onsets) {
  if (onsets.size() < 2) return 0.0;
  std::vector<double> gaps;
  for (std::size_t k = 1; k < onsets.size(); ++k) {
    gaps.push_back(static_cast<double>(onsets[k] - onsets[k - 1]));
  }
  std::sort(gaps.begin(), gaps.end());
  return gaps[gaps.size() / 2];
}

}  // namespace equitempo::testutil
