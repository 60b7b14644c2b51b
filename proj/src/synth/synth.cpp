#include "equitempo/synth/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "equitempo/audio/frontend.hpp"
#include "equitempo/numerics/rng.hpp"

namespace equitempo {

namespace fs = std::filesystem;

namespace {

// One-pole lowpassed white noise burst with an exponential envelope: the
// broad-band onset sound that survives mel projection.
void add_burst(ArrayX<float>& out, Index at, double amp, double decay_ms,
               double bandwidth_hz, Rng& rng) {
  const double tau = decay_ms * 1e-3 * kSampleRate;
  const Index len = std::min<Index>(static_cast<Index>(std::lround(6.0 * tau)) + 1,
                                    out.size() - at);
  const double a = 1.0 - std::exp(-2.0 * M_PI * bandwidth_hz / kSampleRate);
  double lp = 0.0;
  for (Index i = 0; i < len; ++i) {
    lp += a * (rng.uniform(-1.0, 1.0) - lp);
    out[at + i] += static_cast<float>(amp * lp * std::exp(-static_cast<double>(i) / tau));
  }
}

// Decaying sine with a downward pitch glide, plus a short broadband beater
// attack. The attack matters: without it the kick is nearly invisible to
// spectral flux next to the snare, and beat trackers (ours included) lock
// onto the two-beat snare period instead of the beat.
void add_kick(ArrayX<float>& out, Index at, double amp, Rng& rng) {
  const double tau = 0.055 * kSampleRate;
  const Index len = std::min<Index>(static_cast<Index>(0.09 * kSampleRate), out.size() - at);
  double phase = 0.0;
  for (Index i = 0; i < len; ++i) {
    const double t = static_cast<double>(i) / kSampleRate;
    const double f = 45.0 + 85.0 * std::exp(-t / 0.03);
    phase += 2.0 * M_PI * f / kSampleRate;
    out[at + i] += static_cast<float>(amp * std::sin(phase) *
                                      std::exp(-static_cast<double>(i) / tau));
  }
  add_burst(out, at, 0.55 * amp, 2.5, 9000.0, rng);
}

void add_snare(ArrayX<float>& out, Index at, double amp, Rng& rng) {
  const double tau = 0.018 * kSampleRate;
  const Index len = std::min<Index>(static_cast<Index>(0.03 * kSampleRate), out.size() - at);
  for (Index i = 0; i < len; ++i) {
    const double t = static_cast<double>(i) / kSampleRate;
    const double body = 0.45 * std::sin(2.0 * M_PI * 185.0 * t);
    const double rattle = 1.0 * rng.uniform(-1.0, 1.0);
    out[at + i] += static_cast<float>(amp * (body + rattle) *
                                      std::exp(-static_cast<double>(i) / tau));
  }
  // sharp head crack so the snare's flux spike is commensurate with the
  // kick's beater attack
  add_burst(out, at, 0.5 * amp, 2.0, 12000.0, rng);
}

}  // namespace

LabeledClip generate(const SynthSpec& spec) {
  if (spec.bpm < 30.0 || spec.bpm > 300.0) {
    throw AudioError("generate: bpm out of range");
  }
  if (spec.swing < 0.0 || spec.swing > 0.5) {
    throw AudioError("generate: swing out of range");
  }
  Rng rng = Rng::stream(spec.seed, RngDomain::kSynth);

  const Index n = static_cast<Index>(std::lround(spec.duration_s * kSampleRate));
  ArrayX<float> x = ArrayX<float>::Zero(n);
  const double period = 60.0 / spec.bpm * kSampleRate;

  const bool has_ticks = spec.pattern != RhythmPattern::kClick;
  for (Index k = 0;; ++k) {
    const Index at = static_cast<Index>(std::llround(k * period));
    if (at >= n) break;

    const int beat_in_bar = static_cast<int>(k % 4);
    switch (spec.pattern) {
      case RhythmPattern::kClick:
        add_burst(x, at, 0.8, spec.click_decay_ms, spec.burst_bandwidth_hz, rng);
        break;
      case RhythmPattern::kDrumKickSnare:
        if (beat_in_bar % 2 == 0) {
          add_kick(x, at, 0.9, rng);
        } else {
          add_snare(x, at, 0.8, rng);
        }
        break;
      case RhythmPattern::kAccented44:
        add_burst(x, at, beat_in_bar == 0 ? 1.0 : 0.5, spec.click_decay_ms,
                  spec.burst_bandwidth_hz, rng);
        break;
    }

    if (has_ticks) {
      // swung eighth-note subdivision: only these move with swing; the
      // beat grid itself never does
      const double tick_beat = static_cast<double>(k) + 0.5 + 0.5 * spec.swing;
      const Index tick_at = static_cast<Index>(std::llround(tick_beat * period));
      if (tick_at < n) {
        add_burst(x, tick_at, 0.12, spec.click_decay_ms * 0.6, spec.burst_bandwidth_hz, rng);
      }
    }
  }

  // background noise floor at the requested snr
  const double rms = std::sqrt(static_cast<double>(x.square().mean()));
  if (rms > 0.0 && spec.noise_snr_db < 120.0) {
    const double sigma = rms * std::pow(10.0, -spec.noise_snr_db / 20.0);
    for (Index i = 0; i < n; ++i) x[i] += static_cast<float>(sigma * rng.normal());
  }

  const float peak = x.abs().maxCoeff();
  if (peak > 0.9f) x *= 0.9f / peak;

  LabeledClip out;
  out.audio.samples = std::move(x);
  out.bpm = spec.bpm;
  return out;
}

TempoEstimate oracle_tempo(const AudioClip& clip) {
  if (clip.duration_s() < 5.0) {
    throw AudioError("oracle_tempo: needs at least 5 s of audio");
  }

  // Linear-magnitude mel flux: quiet subdivision ticks stay quiet, so the
  // beat-rate periodicity dominates the half-beat one.
  static const MelFilterbank bank;
  const ArrayXXf mel = bank.apply(stft_magnitude(clip));
  const Index t_count = mel.rows() - 1;
  ArrayX<float> flux(t_count);
  for (Index t = 0; t < t_count; ++t) {
    flux[t] = (mel.row(t + 1) - mel.row(t)).max(0.0f).sum();
  }

  TempoEstimate est;
  if (!(flux.maxCoeff() > 1e-6f)) {
    est.degenerate = true;
    return est;
  }
  ArrayX<double> f = flux.cast<double>() - static_cast<double>(flux.mean());

  // lag range for 50-220 BPM at 100 frames/s, plus one for refinement
  constexpr Index kMinLag = 27, kMaxLag = 120;
  ArrayX<double> r = ArrayX<double>::Zero(kMaxLag + 2);
  for (Index l = 0; l < kMaxLag + 2; ++l) {
    const Index m = f.size() - l;
    if (m <= 1) break;
    r[l] = (f.segment(0, m) * f.segment(l, m)).sum() / static_cast<double>(m);
  }
  if (!(r[0] > 0.0)) {
    est.degenerate = true;
    return est;
  }

  // local maxima only; shoulders of a larger peak don't count
  std::vector<Index> peaks;
  double r_max = 0.0;
  for (Index l = kMinLag; l <= kMaxLag; ++l) {
    if (r[l] >= r[l - 1] && r[l] > r[l + 1]) {
      peaks.push_back(l);
      r_max = std::max(r_max, r[l]);
    }
  }
  est.confidence = r_max / r[0];
  if (peaks.empty() || est.confidence < 0.15) {
    est.degenerate = true;
    return est;
  }

  // smallest lag that is still clearly strong: picks the beat over its own
  // multiples (half tempo). The margin tolerates uneven beat salience, e.g.
  // kick/snare alternation where the one-beat correlation pairs unlike
  // sounds, yet stays far above any quiet-subdivision lag.
  Index l_star = peaks.front();
  for (Index l : peaks) {
    if (r[l] >= 0.6 * r_max) {
      l_star = l;
      break;
    }
  }

  // octave demotion: a non-integer beat period smears its correlation over
  // two integer lags, which can leave the two-beat lag as the only "strong"
  // peak. Step down to the half lag while it still carries substantial
  // correlation; quiet subdivisions don't, so this never overshoots.
  while (true) {
    const double half = 0.5 * l_star;
    const Index lo = static_cast<Index>(std::floor(half));
    const Index hi = static_cast<Index>(std::ceil(half));
    if (lo < kMinLag - 1) break;
    const Index j = r[lo] >= r[hi] ? lo : hi;
    if (r[j] < 0.35 * r[l_star]) break;
    l_star = j;
  }

  const double num = r[l_star - 1] - r[l_star + 1];
  const double den = r[l_star - 1] - 2.0 * r[l_star] + r[l_star + 1];
  double lag = static_cast<double>(l_star);
  if (std::abs(den) > 1e-12) {
    const double delta = 0.5 * num / den;
    if (std::abs(delta) <= 0.5) lag += delta;
  }
  est.bpm = 6000.0 / lag;
  return est;
}

CorpusCounts split_counts(int n, double f_pretrain, double f_finetune, double f_eval) {
  const double sum = f_pretrain + f_finetune + f_eval;
  if (std::abs(sum - 1.0) > 1e-9 || f_pretrain < 0 || f_finetune < 0 || f_eval < 0) {
    throw std::invalid_argument("split_counts: fractions must be non-negative and sum to 1");
  }
  const double want[3] = {n * f_pretrain, n * f_finetune, n * f_eval};
  int base[3];
  double frac[3];
  int assigned = 0;
  for (int i = 0; i < 3; ++i) {
    base[i] = static_cast<int>(std::floor(want[i]));
    frac[i] = want[i] - base[i];
    assigned += base[i];
  }
  int order[3] = {0, 1, 2};
  // near-ties (e.g. two exact .5 remainders that differ only in floating
  // point noise) resolve toward the earlier split for determinism
  std::stable_sort(order, order + 3,
                   [&](int a, int b) { return frac[a] > frac[b] + 1e-9; });
  for (int k = 0; k < n - assigned; ++k) base[order[k]] += 1;
  return {base[0], base[1], base[2]};
}

CorpusManifests make_corpus(const fs::path& root, CorpusCounts counts, double bpm_lo,
                            double bpm_hi, std::uint64_t seed) {
  if (counts.pretrain < 0 || counts.finetune < 0 || counts.eval < 0) {
    throw std::invalid_argument("make_corpus: negative count");
  }
  if (!(bpm_lo > 0.0) || !(bpm_hi >= bpm_lo)) {
    throw std::invalid_argument("make_corpus: bad bpm range");
  }

  const char* split_names[3] = {"pretrain", "finetune", "eval"};
  const int split_counts_[3] = {counts.pretrain, counts.finetune, counts.eval};
  std::vector<ManifestEntry> entries[3];

  for (int s = 0; s < 3; ++s) {
    const fs::path dir = root / split_names[s];
    fs::create_directories(dir);
    for (int i = 0; i < split_counts_[s]; ++i) {
      Rng rng = Rng::stream(seed, RngDomain::kCorpus, s, i);
      SynthSpec spec;
      spec.bpm = rng.uniform(bpm_lo, bpm_hi);
      spec.pattern = static_cast<RhythmPattern>(rng.uniform_int(3));
      spec.click_decay_ms = rng.uniform(3.0, 8.0);
      spec.burst_bandwidth_hz = rng.uniform(3000.0, 16000.0);
      spec.swing = rng.uniform(0.0, 0.2);
      spec.noise_snr_db = rng.uniform(35.0, 55.0);
      spec.seed = rng.next_u64();

      LabeledClip clip = generate(spec);
      char name[32];
      std::snprintf(name, sizeof(name), "clip_%06d.wav", i);
      const fs::path wav = dir / name;
      save_wav_16bit(wav, clip.audio);
      entries[s].push_back({wav, clip.bpm});
    }
  }

  CorpusManifests out;
  out.pretrain = root / "pretrain.csv";
  out.finetune = root / "finetune.csv";
  out.eval = root / "eval.csv";
  write_manifest(out.pretrain, entries[0], false);
  write_manifest(out.finetune, entries[1], true);
  write_manifest(out.eval, entries[2], true);
  return out;
}

}  // namespace equitempo
