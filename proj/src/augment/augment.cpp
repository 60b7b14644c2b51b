#include "equitempo/augment/augment.hpp"

#include <algorithm>
#include <cmath>

namespace equitempo {

namespace {

// Pitch-preserving stretch by waveform-similarity overlap-add: Hann-windowed
// grains are laid down at a fixed synthesis hop while the analysis position
// advances at alpha times that rate; each grain is nudged within a small
// tolerance to best continue the previous one, which avoids phase jumps at
// grain boundaries.
ArrayX<float> wsola_stretch(const ArrayX<float>& x, double alpha) {
  constexpr Index kGrain = 2048;
  constexpr Index kHop = kGrain / 2;  // 50% overlap: Hann grains sum to 1
  constexpr Index kTolerance = 300;   // ~7 ms search radius

  const Index n = x.size();
  const Index out_len = static_cast<Index>(std::llround(static_cast<double>(n) / alpha));
  if (out_len <= 0) return ArrayX<float>();
  if (n < 2 * kGrain) {
    // too short for grain analysis; fall back to the resampling engine
    return resample_sinc(x, 1.0 / alpha);
  }

  ArrayX<float> window(kGrain);
  for (Index i = 0; i < kGrain; ++i) {
    window[i] = 0.5f - 0.5f * std::cos(2.0 * M_PI * i / kGrain);
  }

  auto grab = [&](Index start) {
    ArrayX<float> g = ArrayX<float>::Zero(kGrain);
    const Index lo = std::max<Index>(0, start);
    const Index hi = std::min<Index>(n, start + kGrain);
    if (hi > lo) g.segment(lo - start, hi - lo) = x.segment(lo, hi - lo);
    return g;
  };

  ArrayX<float> out = ArrayX<float>::Zero(out_len + kGrain);
  Index prev_src = 0;
  const Index n_frames = (out_len + kHop - 1) / kHop;
  for (Index k = 0; k < n_frames; ++k) {
    Index src;
    if (k == 0) {
      src = 0;
    } else {
      const Index nominal =
          static_cast<Index>(std::llround(static_cast<double>(k) * kHop * alpha));
      // the natural continuation of the previous grain
      const Index target = prev_src + kHop;
      ArrayX<float> want = grab(target).segment(0, kHop);
      const float want_norm = std::sqrt(want.square().sum());
      Index best = nominal;
      float best_score = -2.0f;
      for (Index d = -kTolerance; d <= kTolerance; ++d) {
        const Index cand = nominal + d;
        if (cand < -kGrain || cand >= n) continue;
        ArrayX<float> got = grab(cand).segment(0, kHop);
        const float denom = want_norm * std::sqrt(got.square().sum()) + 1e-12f;
        const float score = (want * got).sum() / denom;
        if (score > best_score) {
          best_score = score;
          best = cand;
        }
      }
      src = best;
    }
    out.segment(k * kHop, kGrain) += grab(src) * window;
    prev_src = src;
  }

  // the very first grain only gets the rising half of one window;
  // compensate so the opening isn't faded in twice as hard
  for (Index i = 0; i < kHop && i < out_len; ++i) {
    const float wsum = window[i];  // only grain 0 covers out[0..kHop)
    if (wsum > 1e-3f) out[i] /= wsum;
  }
  return out.segment(0, out_len);
}

}  // namespace

AudioClip random_excerpt(const AudioClip& clip, Index length, Rng& rng) {
  if (length <= 0) throw AudioError("random_excerpt: length must be positive");
  AudioClip out;
  out.sample_rate = clip.sample_rate;
  const Index n = clip.samples.size();
  if (n <= length) {
    out.samples = ArrayX<float>::Zero(length);
    if (n > 0) out.samples.segment(0, n) = clip.samples;
    return out;
  }
  const Index offset = static_cast<Index>(rng.uniform_int(static_cast<int>(n - length + 1)));
  out.samples = clip.samples.segment(offset, length);
  return out;
}

ArrayX<float> fit_length(const ArrayX<float>& samples, Index length) {
  if (length <= 0) throw AudioError("fit_length: length must be positive");
  if (samples.size() >= length) return ArrayX<float>(samples.segment(0, length));
  ArrayX<float> padded = ArrayX<float>::Zero(length);
  padded.segment(0, samples.size()) = samples;
  return padded;
}

AudioClip time_stretch(const AudioClip& clip, double alpha, StretchEngine engine) {
  if (!(alpha > 0.0)) throw AudioError("time_stretch: alpha must be positive");
  AudioClip out;
  out.sample_rate = clip.sample_rate;
  if (engine == StretchEngine::kWsola && alpha != 1.0) {
    out.samples = wsola_stretch(clip.samples, alpha);
  } else {
    out.samples = resample_sinc(clip.samples, 1.0 / alpha);
  }
  return out;
}

AudioClip audio_augmentations(const AudioClip& clip, const AudioAugConfig& cfg, Rng& rng) {
  // all decisions and parameters are drawn up front so the rng stream
  // consumption (and thus reproducibility) is branch-independent
  const bool apply_gain = rng.bernoulli(cfg.gain_prob);
  const double gain_db = rng.uniform(cfg.gain_db_min, cfg.gain_db_max);
  const bool apply_polarity = rng.bernoulli(cfg.polarity_prob);
  const bool apply_noise = rng.bernoulli(cfg.noise_prob);
  const double snr_db = rng.uniform(cfg.snr_db_min, cfg.snr_db_max);

  AudioClip out;
  out.sample_rate = clip.sample_rate;
  out.samples = clip.samples;

  if (apply_gain) {
    out.samples *= static_cast<float>(std::pow(10.0, gain_db / 20.0));
  }
  if (apply_polarity) {
    out.samples = -out.samples;
  }
  if (apply_noise && out.samples.size() > 0) {
    const double rms = std::sqrt(static_cast<double>(out.samples.square().mean()));
    if (rms > 0.0) {
      const double sigma = rms * std::pow(10.0, -snr_db / 20.0);
      for (Index i = 0; i < out.samples.size(); ++i) {
        out.samples[i] += static_cast<float>(sigma * rng.normal());
      }
    }
  }
  return out;
}

ViewPair make_view_pair(const AudioClip& excerpt, double r, Rng& rng,
                        const AudioAugConfig* audio_augs, StretchEngine engine) {
  if (r < 0.0 || r >= 1.0) throw AudioError("make_view_pair: r must be in [0, 1)");
  const Index l_x = excerpt.samples.size();

  ViewPair pair;
  pair.alpha_i = rng.uniform(1.0 - r, 1.0 + r);
  pair.alpha_j = rng.uniform(1.0 - r, 1.0 + r);

  auto build_view = [&](double alpha) {
    AudioClip v = time_stretch(excerpt, alpha, engine);
    if (v.samples.size() > l_x) {
      v.samples = ArrayX<float>(v.samples.segment(0, l_x));  // leading crop
    } else if (v.samples.size() < l_x) {
      ArrayX<float> padded = ArrayX<float>::Zero(l_x);
      padded.segment(0, v.samples.size()) = v.samples;
      v.samples = std::move(padded);
    }
    if (audio_augs) v = audio_augmentations(v, *audio_augs, rng);
    return v;
  };
  pair.view_i = build_view(pair.alpha_i);
  pair.view_j = build_view(pair.alpha_j);
  return pair;
}

void spec_augment_freq_masks(ArrayXXf& spec, const SpecAugmentConfig& cfg, Rng& rng) {
  if (!rng.bernoulli(cfg.prob)) return;
  const int n_bins = static_cast<int>(spec.cols());
  const int n_masks = 1 + rng.uniform_int(cfg.max_masks);
  for (int m = 0; m < n_masks; ++m) {
    const int width = 1 + rng.uniform_int(std::min(cfg.max_width, n_bins));
    const int start = rng.uniform_int(n_bins - width + 1);
    spec.middleCols(start, width).setZero();
  }
}

}  // namespace equitempo
