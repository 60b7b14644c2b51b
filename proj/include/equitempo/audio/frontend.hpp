#pragma once

#include <Eigen/Core>

#include <vector>

#include "equitempo/audio/audio.hpp"

namespace equitempo {

using ArrayXXf = Eigen::Array<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// STFT parameters (44.1 kHz): 2048-sample Hann window and FFT, hop 441
// (100 frames/s), keeping the 1025 non-redundant magnitude bins.
inline constexpr int kFftSize = 2048;
inline constexpr int kHopSize = 441;
inline constexpr int kFftBins = kFftSize / 2 + 1;
inline constexpr int kMelBins = 81;
inline constexpr float kMelFmin = 30.0f;
inline constexpr float kMelFmax = 17000.0f;

struct LogMelSpectrogram {
  ArrayXXf values;  // [n_frames x 81]
  int frame_rate = kSampleRate / kHopSize;

  Index frames() const { return values.rows(); }
  Index bins() const { return values.cols(); }
};

// Radix-2 decimation-in-time FFT plan with precomputed twiddles and
// bit-reversal permutation. Buffers are interleaved re/im pairs.
class FftPlan {
 public:
  explicit FftPlan(int n);
  int size() const { return n_; }
  // In-place forward transform of n complex values (2n floats).
  void forward(float* reim) const;

 private:
  int n_;
  std::vector<unsigned> reversed_;
  std::vector<float> twiddle_;  // per stage, interleaved re/im
};

// Magnitude spectrogram of a centered, reflect-padded, Hann-windowed STFT:
// [1 + floor(len/441)] frames by 1025 bins.
ArrayXXf stft_magnitude(const AudioClip& clip);

// Triangular mel filterbank, 81 filters equally spaced on the Slaney mel
// scale between 30 and 17000 Hz, each normalized to unit peak. Rows are kept
// sparse (each filter touches one contiguous FFT-bin range).
class MelFilterbank {
 public:
  MelFilterbank();  // the fixed 81 x 1025 bank used by the pipeline

  // [n_frames x 1025] magnitudes -> [n_frames x 81].
  ArrayXXf apply(const ArrayXXf& magnitudes) const;

  // Dense [81 x 1025] matrix of the same weights, for inspection and tests.
  ArrayXXf dense() const;

  // Center frequency of each filter in Hz.
  const std::vector<float>& center_hz() const { return center_hz_; }

 private:
  struct FilterRow {
    int start = 0;
    std::vector<float> weights;
  };
  std::vector<FilterRow> rows_;
  std::vector<float> center_hz_;
};

// Elementwise log(1 + x); rejects negative input.
ArrayXXf log_compress(const ArrayXXf& mel);

// Full front-end: STFT magnitude -> mel projection -> log compression.
// The filterbank is built once and shared.
LogMelSpectrogram log_mel_spectrogram(const AudioClip& clip);

// Slaney mel scale helpers (linear below 1 kHz, logarithmic above).
float hz_to_mel(float hz);
float mel_to_hz(float mel);

}  // namespace equitempo
