#pragma once

// Equivariant pre-training: every epoch takes one random excerpt per corpus
// file, builds two time-stretched views of it, and trains the encoder and
// projection head so that pseudo-tempo ratios track stretch-rate ratios.
//
// View preparation (decode, stretch, augment, spectrogram) runs on a pool of
// producer threads feeding a bounded in-order buffer; the optimizer consumes
// batches on the calling thread. Batch composition and every RNG stream are
// functions of (seed, epoch, file index) alone, so results are independent
// of worker count and scheduling.

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
#include "equitempo/ssl/loss.hpp"

namespace equitempo {

struct SslConfig {
  double r_p = 0.2;           // stretch strength: alpha ~ U[1 - r_p, 1 + r_p]
  Index batch_size = 16;      // view pairs per optimizer step
  Index epochs = 20;
  float learning_rate = 1e-3f;
  bool audio_augs_enabled = true;  // waveform gain/polarity/noise + freq masking
  LossVariant loss_variant = LossVariant::kMain;
  bool symmetrize_pairs = false;  // average the (i,j) and (j,i) losses
  std::uint64_t seed = 0;
  int workers = 0;  // producer threads; 0 = one per spare hardware thread
  StretchEngine stretch_engine = StretchEngine::kResample;
  int tcn_layers = 8;

  void validate() const;
  nlohmann::json to_json() const;  // echoed into logs and checkpoints
};

// One row of the collapse monitor, emitted per epoch.
struct EpochStats {
  Index epoch = 0;          // 1-based
  double loss_mean = 0.0;   // pair-weighted mean over the epoch
  double z_abs_mean = 0.0;  // mean |z| over every view in the epoch
  double z_std = 0.0;       // std of z over every view in the epoch
  std::int64_t guard_hits = 0;
  double wallclock_s = 0.0;

  nlohmann::json to_json() const;
};

// Per-epoch pseudo-tempo statistics; z collapsing to 0 shows up here as
// z_abs_mean falling to the denominator-guard floor and guard_hits spiking.
struct CollapseMonitor {
  std::vector<EpochStats> epochs;
};

struct PretrainResult {
  Checkpoint checkpoint;
  CollapseMonitor monitor;
  std::int64_t skipped_files = 0;     // unreadable corpus entries (warned once each)
  std::int64_t guard_hits_total = 0;
  // Set when a non-finite loss aborted the run; holds everything known about
  // the failing step so the CLI can dump it and exit with the failure code.
  std::optional<nlohmann::json> nonfinite_diagnostic;
};

using EpochCallback = std::function<void(const EpochStats&)>;

// Runs the pre-training loop over the manifest's clips. Writes one JSON
// record per epoch to `log_jsonl` when given, and invokes `on_epoch` after
// each epoch. With epochs = 0 the returned checkpoint holds the untouched
// seeded initialization.
PretrainResult pretrain(const std::vector<ManifestEntry>& corpus, const SslConfig& cfg,
                        std::ostream* log_jsonl = nullptr,
                        const EpochCallback& on_epoch = {});

// The fingerprint stored in (and demanded of) pre-training checkpoints:
// a hash over the encoder and projection-head structure descriptions.
std::uint64_t pretrain_fingerprint(int tcn_layers);

}  // namespace equitempo
