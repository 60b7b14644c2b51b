#pragma once

// View generation for equivariant pre-training: random excerpting, time
// stretching (two engines), waveform-level augmentations, and spectrogram
// frequency masking.

#include <optional>
#include <string>

#include "equitempo/audio/audio.hpp"
#include "equitempo/audio/frontend.hpp"
#include "equitempo/numerics/rng.hpp"

namespace equitempo {

// How a clip is stretched in time by factor alpha (output duration =
// input / alpha):
//  - kResample: linear-phase windowed-sinc resample reinterpreted at the
//    original rate. Exact, deterministic; scales pitch along with tempo.
//  - kWsola: waveform-similarity overlap-add. Pitch-preserving, matching the
//    external tool commonly used for this augmentation.
enum class StretchEngine { kResample, kWsola };

// Contiguous random segment of `length` samples (uniform offset). A clip
// shorter than `length` comes back whole, right-padded with zeros.
AudioClip random_excerpt(const AudioClip& clip, Index length, Rng& rng);

// Deterministic version of the same length contract: keep the head of the
// signal, right-pad with zeros.
ArrayX<float> fit_length(const ArrayX<float>& samples, Index length);

// Tempo scaling: event spacing multiplied by 1/alpha, so perceived tempo
// multiplies by alpha. Output length = round(input length / alpha).
AudioClip time_stretch(const AudioClip& clip, double alpha,
                       StretchEngine engine = StretchEngine::kResample);

struct AudioAugConfig {
  double gain_prob = 0.5;
  double gain_db_min = -12.0, gain_db_max = 12.0;
  double polarity_prob = 0.5;
  double noise_prob = 0.3;
  double snr_db_min = 5.0, snr_db_max = 40.0;

  static AudioAugConfig disabled() {
    AudioAugConfig c;
    c.gain_prob = c.polarity_prob = c.noise_prob = 0.0;
    return c;
  }
};

// Independently applies random gain, polarity inversion, and additive
// Gaussian noise at a random SNR. None of these move onsets, so oracle
// tempo is unchanged.
AudioClip audio_augmentations(const AudioClip& clip, const AudioAugConfig& cfg, Rng& rng);

struct ViewPair {
  AudioClip view_i, view_j;
  double alpha_i = 1.0, alpha_j = 1.0;
  std::string source_id;
};

// Two independently stretched views of one excerpt. Each view is stretched
// by its own alpha ~ U[1-r, 1+r], then leading-cropped or right-zero-padded
// back to the excerpt length; optional waveform augmentations are applied
// per view after stretching.
ViewPair make_view_pair(const AudioClip& excerpt, double r, Rng& rng,
                        const AudioAugConfig* audio_augs = nullptr,
                        StretchEngine engine = StretchEngine::kResample);

struct SpecAugmentConfig {
  double prob = 0.5;
  int max_masks = 2;      // 1..max_masks masks when applied
  int max_width = 15;     // mel bins per mask
};

// SpecAugment-style frequency masking, in place on a [frames x mel] array:
// with probability `prob`, zeroes 1-2 random bands of up to 15 mel bins.
void spec_augment_freq_masks(ArrayXXf& spec, const SpecAugmentConfig& cfg, Rng& rng);

}  // namespace equitempo
