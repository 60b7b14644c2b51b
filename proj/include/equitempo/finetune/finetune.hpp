#pragma once

// Linear-probe fine-tuning: the pre-trained encoder is frozen and a 300-way
// softmax head is trained with cross-entropy against smoothed integer-BPM
// targets. Optionally each clip is time-stretched by alpha ~ U[1-r_f, 1+r_f]
// with its label scaled to alpha * bpm, widening the tempo range seen by the
// head. View preparation follows the same producer-pool contract as
// pre-training: all randomness is keyed by (seed, epoch, file index).

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "equitempo/augment/augment.hpp"
#include "equitempo/data/manifest.hpp"
#include "equitempo/model/tcn.hpp"
#include "equitempo/persist/checkpoint.hpp"
#include "equitempo/synth/synth.hpp"

namespace equitempo {

// Smoothed 300-way classification target for a tempo label: the center bin
// k = round(bpm), clipped to [1, 298], carries weight 0.5 and its neighbors
// 0.25 each. `clip_id` names the offending clip in range errors.
ArrayX<float> bpm_to_target(double bpm, const std::string& clip_id = "");

// Label-consistent time stretch: draws alpha ~ U[1-r_f, 1+r_f], stretches the
// clip, scales the label to alpha * bpm, and crops or right-zero-pads the
// result to the training length. Draws where the scaled label leaves (0, 300)
// are redrawn up to 100 times; exhaustion returns nullopt (caller skips).
std::optional<LabeledClip> stretch_labeled(const LabeledClip& sample, double r_f,
                                           Rng& rng,
                                           StretchEngine engine = StretchEngine::kResample);

struct FinetuneConfig {
  double r_f = 0.2;  // 0 disables the stretch augmentation
  Index batch_size = 16;
  Index epochs = 100;
  float learning_rate = 1e-3f;
  std::uint64_t seed = 0;
  int workers = 0;  // producer threads; 0 = one per spare hardware thread
  StretchEngine stretch_engine = StretchEngine::kResample;
  bool redraw_alpha_each_epoch = true;  // fresh alpha per epoch vs once per clip

  void validate() const;
  nlohmann::json to_json() const;
};

struct FinetuneEpochStats {
  Index epoch = 0;  // 1-based
  double loss_mean = 0.0;
  double wallclock_s = 0.0;

  nlohmann::json to_json() const;
};

struct FinetuneResult {
  Checkpoint checkpoint;  // frozen encoder tensors plus the trained head
  std::vector<FinetuneEpochStats> log;
  std::int64_t skipped_files = 0;      // unreadable corpus entries
  std::int64_t skipped_stretches = 0;  // alpha retry budget exhausted
  std::optional<nlohmann::json> nonfinite_diagnostic;
};

using FinetuneEpochCallback = std::function<void(const FinetuneEpochStats&)>;

// Trains the classifier head on the labeled corpus against the frozen encoder
// carried in `pretrained`. Every manifest entry must carry a bpm label. The
// encoder tensors in the returned checkpoint are bit-identical to the input.
FinetuneResult finetune(const Checkpoint& pretrained,
                        const std::vector<ManifestEntry>& corpus,
                        const FinetuneConfig& cfg, std::ostream* log_jsonl = nullptr,
                        const FinetuneEpochCallback& on_epoch = {});

// The fingerprint stored in fine-tuned checkpoints (encoder + classifier).
std::uint64_t finetune_fingerprint(int tcn_layers);

// The TCN depth recorded in a training checkpoint's config echo (either
// phase; fine-tuned checkpoints inherit it from the pre-training config).
int checkpoint_tcn_layers(const Checkpoint& ckpt);

}  // namespace equitempo
