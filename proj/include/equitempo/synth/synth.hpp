#pragma once

// Synthetic rhythm corpus with exact ground-truth BPM, plus an independent
// signal-domain tempo oracle. The generator and the oracle are different
// algorithm families on purpose: generator bugs and estimator bugs stay
// uncorrelated, so their agreement is evidence both are right.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "equitempo/audio/audio.hpp"
#include "equitempo/data/manifest.hpp"

namespace equitempo {

enum class RhythmPattern { kClick, kDrumKickSnare, kAccented44 };

struct SynthSpec {
  double bpm = 120.0;  // [60, 180]
  double duration_s = 14.0;
  RhythmPattern pattern = RhythmPattern::kClick;
  double click_decay_ms = 5.0;        // burst envelope time constant
  double burst_bandwidth_hz = 8000.0;  // one-pole lowpass on the burst noise
  double swing = 0.0;                  // [0, 0.2]: delays subdivision ticks only
  double noise_snr_db = 45.0;          // background floor relative to signal rms
  std::uint64_t seed = 0;
};

struct LabeledClip {
  AudioClip audio;
  double bpm = 0.0;
};

// 44.1 kHz mono rhythm with beat onsets exactly at k * 60/bpm seconds,
// first onset at t = 0. Bit-identical for identical specs.
LabeledClip generate(const SynthSpec& spec);

struct TempoEstimate {
  double bpm = 0.0;
  double confidence = 0.0;  // normalized autocorrelation peak
  bool degenerate = false;  // no usable periodicity in 50-220 BPM
};

// Classical estimate: spectral-flux onset curve, autocorrelation over the
// 50-220 BPM lag range, smallest strong peak, parabolic lag refinement.
TempoEstimate oracle_tempo(const AudioClip& clip);

struct CorpusCounts {
  int pretrain = 0;
  int finetune = 0;
  int eval = 0;
};

// Largest-remainder split of n by fractions (which must sum to 1).
CorpusCounts split_counts(int n, double f_pretrain, double f_finetune, double f_eval);

struct CorpusManifests {
  std::filesystem::path pretrain;  // unlabeled
  std::filesystem::path finetune;  // labeled
  std::filesystem::path eval;      // labeled
};

// Writes `root/{pretrain,finetune,eval}/clip_%06d.wav` plus three CSV
// manifests at `root`. Clip sets are disjoint; BPM is uniform over the range.
CorpusManifests make_corpus(const std::filesystem::path& root, CorpusCounts counts,
                            double bpm_lo, double bpm_hi, std::uint64_t seed);

}  // namespace equitempo
