#pragma once

// Tempo-accuracy metrics and embedding diagnostics. Accuracy 1 scores a
// prediction against the exact ground truth within a relative tolerance;
// Accuracy 2 additionally forgives octave errors by factors {2, 3, 1/2, 1/3},
// with the tolerance applied to the scaled truth. evaluate() decodes a
// fine-tuned classifier over a labeled corpus that must be disjoint from
// everything the checkpoint was trained on; pseudo_tempo_diagnostics() probes
// a pre-trained (not fine-tuned) embedding for rank correlation with true BPM
// and for ratio equivariance under known time stretches.

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "equitempo/data/manifest.hpp"
#include "equitempo/persist/checkpoint.hpp"

namespace equitempo {

// True iff |pred - truth| <= tol * truth (boundary inclusive).
// Both tempi must be positive.
bool accuracy1(double predicted_bpm, double true_bpm, double tolerance = 0.04);

// True iff accuracy1 holds against f * truth for some f in {1, 2, 3, 1/2, 1/3}.
bool accuracy2(double predicted_bpm, double true_bpm, double tolerance = 0.04);

struct EvalConfig {
  double tolerance = 0.04;
  bool allow_overlap = false;  // overrides the train/eval disjointness guard
  Index batch_size = 16;
  int workers = 0;  // producer threads; 0 = one per spare hardware thread

  void validate() const;
};

struct TempoPrediction {
  std::string clip_id;
  double true_bpm = 0.0;
  double predicted_bpm = 0.0;
  bool hit1 = false;
  bool hit2 = false;
};

struct MetricsReport {
  double acc1 = 0.0;  // fraction of scored items passing Accuracy 1
  double acc2 = 0.0;  // ditto for Accuracy 2; acc1 <= acc2 always
  Index n_items = 0;  // scored items (unreadable clips excluded)
  std::int64_t skipped_files = 0;
  double tolerance = 0.04;
  std::vector<TempoPrediction> items;

  nlohmann::json to_json() const;               // summary, no per-item rows
  void write_items_csv(std::ostream& out) const;  // one row per scored clip
};

// Decodes each clip to a predicted BPM (argmax over the 300 classifier bins)
// and scores Accuracy 1/2 against the manifest labels. The corpus must be
// disjoint from the clip sets recorded in the checkpoint (pre-training and
// fine-tuning); any overlap is a hard error unless cfg.allow_overlap is set.
MetricsReport evaluate(const Checkpoint& finetuned,
                       const std::vector<ManifestEntry>& corpus,
                       const EvalConfig& cfg = {});

// Spearman rank correlation with average ranks on ties. A constant input on
// either side has no defined ranking; that is reported as 0 with *degenerate
// set (when provided) rather than as an error.
double spearman_rho(const std::vector<double>& a, const std::vector<double>& b,
                    bool* degenerate = nullptr);

struct DiagnosticItem {
  std::string clip_id;
  double true_bpm = 0.0;
  double z = 0.0;  // pseudo-tempo of the unstretched excerpt
  std::vector<double> equivariance_errors;  // one per probe alpha, in order
};

struct DiagnosticsReport {
  double rho = 0.0;             // Spearman(z, true BPM) over scored clips
  bool degenerate = false;      // constant embeddings (or labels): rho forced to 0
  double equivariance_median = 0.0;            // pooled over clips and alphas
  std::vector<double> alphas;                  // probe stretch factors
  std::vector<double> alpha_medians;           // per-alpha medians, same order
  Index n_items = 0;
  std::int64_t skipped_files = 0;
  std::vector<DiagnosticItem> items;

  nlohmann::json to_json() const;
  void write_items_csv(std::ostream& out) const;
};

// Probes a pre-trained checkpoint's scalar embedding z = g(f(x)) before any
// fine-tuning: Spearman rank correlation between z and the true BPM, plus the
// within-clip equivariance error e = |z(stretch(x, alpha)) / z(x) - alpha|
// for alpha in {0.8, 1.25}, reported per alpha and pooled as medians.
DiagnosticsReport pseudo_tempo_diagnostics(const Checkpoint& pretrained,
                                           const std::vector<ManifestEntry>& corpus,
                                           const EvalConfig& cfg = {});

}  // namespace equitempo
