#include <cmath>
#include <vector>

#include "equitempo/audio/frontend.hpp"

namespace equitempo {

float hz_to_mel(float hz) {
  // Slaney variant: linear below 1 kHz (200/3 Hz per mel), log above.
  if (hz < 1000.0f) return hz * 3.0f / 200.0f;
  return 15.0f + 27.0f * std::log(hz / 1000.0f) / std::log(6.4f);
}

float mel_to_hz(float mel) {
  if (mel < 15.0f) return mel * 200.0f / 3.0f;
  return 1000.0f * std::exp(std::log(6.4f) * (mel - 15.0f) / 27.0f);
}

namespace {

Index reflect_index(Index i, Index n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
  }
  return i;
}

const std::vector<float>& hann_window() {
  static const std::vector<float> w = [] {
    std::vector<float> v(kFftSize);
    for (int i = 0; i < kFftSize; ++i) {
      v[i] = 0.5f * (1.0f - std::cos(2.0f * static_cast<float>(M_PI) * i / kFftSize));
    }
    return v;
  }();
  return w;
}

// Windowed frame centered at sample t*hop, reflect-padded at the edges.
void gather_frame(const ArrayX<float>& x, Index center, float* dst) {
  const Index n = x.size();
  const Index begin = center - kFftSize / 2;
  const auto& win = hann_window();
  if (begin >= 0 && begin + kFftSize <= n) {
    for (int i = 0; i < kFftSize; ++i) dst[i] = x[begin + i] * win[i];
  } else {
    for (int i = 0; i < kFftSize; ++i) {
      dst[i] = x[reflect_index(begin + i, n)] * win[i];
    }
  }
}

}  // namespace

ArrayXXf stft_magnitude(const AudioClip& clip) {
  const Index n = clip.samples.size();
  if (n < 1) throw AudioError("stft: empty input");
  const Index n_frames = 1 + n / kHopSize;

  static const FftPlan plan(kFftSize);
  ArrayXXf mag(n_frames, kFftBins);

  std::vector<float> frame_a(kFftSize), frame_b(kFftSize);
  std::vector<float> packed(2 * kFftSize);

  // Two real frames per complex transform: pack as re=frame_a, im=frame_b,
  // then split with the conjugate-symmetry identities
  //   A[k] = (Z[k] + conj(Z[N-k])) / 2,  B[k] = (Z[k] - conj(Z[N-k])) / (2i).
  for (Index t = 0; t < n_frames; t += 2) {
    gather_frame(clip.samples, t * kHopSize, frame_a.data());
    const bool pair = t + 1 < n_frames;
    if (pair) {
      gather_frame(clip.samples, (t + 1) * kHopSize, frame_b.data());
    } else {
      std::fill(frame_b.begin(), frame_b.end(), 0.0f);
    }
    for (int i = 0; i < kFftSize; ++i) {
      packed[2 * i] = frame_a[i];
      packed[2 * i + 1] = frame_b[i];
    }
    plan.forward(packed.data());

    float* row_a = mag.data() + t * kFftBins;
    float* row_b = pair ? mag.data() + (t + 1) * kFftBins : nullptr;
    for (int k = 0; k < kFftBins; ++k) {
      const int kc = (kFftSize - k) & (kFftSize - 1);
      const float zr = packed[2 * k], zi = packed[2 * k + 1];
      const float cr = packed[2 * kc], ci = packed[2 * kc + 1];
      const float ar = 0.5f * (zr + cr), ai = 0.5f * (zi - ci);
      row_a[k] = std::sqrt(ar * ar + ai * ai);
      if (row_b) {
        const float br = 0.5f * (zi + ci), bi = 0.5f * (cr - zr);
        row_b[k] = std::sqrt(br * br + bi * bi);
      }
    }
  }
  return mag;
}

MelFilterbank::MelFilterbank() {
  const float mel_lo = hz_to_mel(kMelFmin);
  const float mel_hi = hz_to_mel(kMelFmax);
  std::vector<float> edges(kMelBins + 2);
  for (int i = 0; i < kMelBins + 2; ++i) {
    edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (kMelBins + 1));
  }

  rows_.resize(kMelBins);
  center_hz_.resize(kMelBins);
  const float bin_hz = static_cast<float>(kSampleRate) / kFftSize;
  for (int m = 0; m < kMelBins; ++m) {
    const float left = edges[m], center = edges[m + 1], right = edges[m + 2];
    center_hz_[m] = center;
    FilterRow row;
    row.start = -1;
    for (int k = 0; k < kFftBins; ++k) {
      const float f = k * bin_hz;
      const float w =
          std::max(0.0f, std::min((f - left) / (center - left),
                                  (right - f) / (right - center)));
      if (w > 0.0f) {
        if (row.start < 0) row.start = k;
        row.weights.push_back(w);
      } else if (row.start >= 0) {
        break;  // triangular support is one contiguous run
      }
    }
    if (row.start < 0) {  // filter narrower than one FFT bin: keep the nearest bin
      row.start = static_cast<int>(std::lround(center / bin_hz));
      row.weights.push_back(1.0f);
    }
    rows_[m] = std::move(row);
  }
}

ArrayXXf MelFilterbank::apply(const ArrayXXf& magnitudes) const {
  if (magnitudes.cols() != kFftBins) {
    throw AudioError("mel: expected " + std::to_string(kFftBins) + " bins, got " +
                     std::to_string(magnitudes.cols()));
  }
  const Index n_frames = magnitudes.rows();
  ArrayXXf out(n_frames, kMelBins);
  for (Index t = 0; t < n_frames; ++t) {
    const float* src = magnitudes.data() + t * kFftBins;
    float* dst = out.data() + t * kMelBins;
    for (int m = 0; m < kMelBins; ++m) {
      const auto& row = rows_[m];
      float acc = 0.0f;
      for (std::size_t j = 0; j < row.weights.size(); ++j) {
        acc += row.weights[j] * src[row.start + j];
      }
      dst[m] = acc;
    }
  }
  return out;
}

ArrayXXf MelFilterbank::dense() const {
  ArrayXXf w = ArrayXXf::Zero(kMelBins, kFftBins);
  for (int m = 0; m < kMelBins; ++m) {
    for (std::size_t j = 0; j < rows_[m].weights.size(); ++j) {
      w(m, rows_[m].start + j) = rows_[m].weights[j];
    }
  }
  return w;
}

ArrayXXf log_compress(const ArrayXXf& mel) {
  if ((mel < 0.0f).any()) {
    throw AudioError("log_compress: negative input");
  }
  return (1.0f + mel).log();
}

LogMelSpectrogram log_mel_spectrogram(const AudioClip& clip) {
  static const MelFilterbank bank;
  LogMelSpectrogram spec;
  spec.values = log_compress(bank.apply(stft_magnitude(clip)));
  return spec;
}

}  // namespace equitempo
