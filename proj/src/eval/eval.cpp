#include "equitempo/eval/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "equitempo/audio/frontend.hpp"
#include "equitempo/augment/augment.hpp"
#include "equitempo/data/producer_pool.hpp"
#include "equitempo/finetune/finetune.hpp"
#include "equitempo/model/tcn.hpp"
#include "equitempo/ssl/loss.hpp"
#include "equitempo/ssl/pretrain.hpp"

namespace equitempo {

namespace {

constexpr double kOctaveFactors[] = {1.0, 2.0, 3.0, 0.5, 1.0 / 3.0};

void check_tempo_pair(double predicted, double truth) {
  if (!(predicted > 0.0) || !(truth > 0.0)) {
    throw std::invalid_argument("tempo accuracy needs positive tempi, got predicted " +
                                std::to_string(predicted) + " against truth " +
                                std::to_string(truth));
  }
}

// Same length convention as training: keep the head of the clip, pad with
// trailing silence.
ArrayX<float> fit_excerpt(const ArrayX<float>& samples) {
  return fit_length(samples, kExcerptSamples);
}

void check_labeled(const std::vector<ManifestEntry>& corpus, const char* who) {
  if (corpus.empty()) {
    throw std::invalid_argument(std::string(who) + ": corpus is empty");
  }
  for (const auto& entry : corpus) {
    if (!entry.bpm || !(*entry.bpm > 0.0)) {
      throw std::invalid_argument(std::string(who) + ": manifest entry " +
                                  entry.path.string() +
                                  " needs a positive bpm label");
    }
  }
}

void check_disjoint(const Checkpoint& ckpt, const std::vector<ManifestEntry>& corpus,
                    bool allow_overlap) {
  if (allow_overlap || !ckpt.metadata.contains("clip_hashes")) return;
  std::set<std::string> seen;
  for (const auto& h : ckpt.metadata.at("clip_hashes")) {
    seen.insert(h.get<std::string>());
  }
  Index overlap = 0;
  for (std::uint64_t h : manifest_clip_hashes(corpus)) {
    overlap += seen.count(std::to_string(h)) ? 1 : 0;
  }
  if (overlap > 0) {
    throw std::runtime_error(
        "evaluation corpus overlaps the training data: " + std::to_string(overlap) +
        " of " + std::to_string(corpus.size()) +
        " clips were seen during pre-training or fine-tuning; evaluate on a "
        "disjoint split, or force with allow_overlap");
  }
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + mid, v.end());
  const double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + mid);
  return 0.5 * (lo + hi);
}

std::vector<double> average_ranks(const std::vector<double>& v) {
  const std::size_t n = v.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(),
            [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n);
  for (std::size_t lo = 0; lo < n;) {
    std::size_t hi = lo + 1;
    while (hi < n && v[idx[hi]] == v[idx[lo]]) ++hi;
    const double shared = 0.5 * static_cast<double>(lo + hi - 1);  // average rank
    for (std::size_t k = lo; k < hi; ++k) ranks[idx[k]] = shared;
    lo = hi;
  }
  return ranks;
}

std::string trimmed(double x) {
  std::ostringstream out;
  out << x;
  return out.str();
}

}  // namespace

bool accuracy1(double predicted_bpm, double true_bpm, double tolerance) {
  check_tempo_pair(predicted_bpm, true_bpm);
  return std::abs(predicted_bpm - true_bpm) <= tolerance * true_bpm;
}

bool accuracy2(double predicted_bpm, double true_bpm, double tolerance) {
  check_tempo_pair(predicted_bpm, true_bpm);
  for (double f : kOctaveFactors) {
    if (accuracy1(predicted_bpm, f * true_bpm, tolerance)) return true;
  }
  return false;
}

void EvalConfig::validate() const {
  if (!(tolerance > 0.0) || tolerance >= 1.0) {
    throw std::invalid_argument("eval: tolerance must lie in (0,1), got " +
                                std::to_string(tolerance));
  }
  if (batch_size < 1) throw std::invalid_argument("eval: batch_size must be positive");
  if (workers < 0) throw std::invalid_argument("eval: workers must be non-negative");
}

nlohmann::json MetricsReport::to_json() const {
  return {{"acc1", acc1},
          {"acc2", acc2},
          {"n_items", n_items},
          {"skipped_files", skipped_files},
          {"tolerance", tolerance}};
}

void MetricsReport::write_items_csv(std::ostream& out) const {
  out << "clip,true_bpm,predicted_bpm,hit1,hit2\n";
  for (const auto& item : items) {
    out << item.clip_id << "," << item.true_bpm << "," << item.predicted_bpm << ","
        << (item.hit1 ? 1 : 0) << "," << (item.hit2 ? 1 : 0) << "\n";
  }
}

MetricsReport evaluate(const Checkpoint& finetuned,
                       const std::vector<ManifestEntry>& corpus,
                       const EvalConfig& cfg) {
  cfg.validate();
  check_labeled(corpus, "evaluate");

  const std::string phase = finetuned.metadata.value("phase", "");
  if (phase != "finetune") {
    throw CheckpointError("evaluate: expected a fine-tuned checkpoint, got phase '" +
                          phase + "'");
  }
  const int layers = checkpoint_tcn_layers(finetuned);
  if (finetuned.fingerprint != finetune_fingerprint(layers)) {
    throw CheckpointError(
        "evaluate: checkpoint was written for a different architecture (fingerprint " +
        std::to_string(finetuned.fingerprint) + ")");
  }
  check_disjoint(finetuned, corpus, cfg.allow_overlap);

  TcnEncoder<float> encoder(0, layers);
  TempoClassifierHead<float> head(0);
  auto named = encoder.state_tensors();
  for (auto& nt : head.parameters()) named.push_back(nt);
  unpack_tensors(finetuned, named);
  encoder.freeze();
  for (auto& nt : head.parameters()) nt.tensor.node()->requires_grad = false;

  constexpr Index kMelBins = TcnEncoder<float>::kMelBins;
  constexpr Index kClasses = TempoClassifierHead<float>::kClasses;

  struct Prepared {
    bool ok = false;
    ArrayXXf mel;
  };
  const Index n = static_cast<Index>(corpus.size());
  const int workers = resolve_worker_count(cfg.workers);
  OrderedProducerPool<Prepared> pool(
      n, std::max<Index>(2 * cfg.batch_size, 2 * workers), workers, [&](Index fi) {
        Prepared out;
        try {
          AudioClip clip = load_audio(corpus[fi].path);
          clip.samples = fit_excerpt(clip.samples);
          out.mel = log_mel_spectrogram(clip).values;
          out.ok = true;
        } catch (const std::exception&) {
          out.ok = false;
        }
        return out;
      });

  MetricsReport report;
  report.tolerance = cfg.tolerance;

  for (Index pos = 0; pos < n;) {
    const Index want = std::min<Index>(cfg.batch_size, n - pos);
    std::vector<Index> kept;  // corpus indices present in this batch
    std::vector<ArrayXXf> mels;
    for (Index k = 0; k < want; ++k) {
      Prepared p = pool.take(pos + k);
      if (p.ok) {
        kept.push_back(pos + k);
        mels.push_back(std::move(p.mel));
      } else {
        ++report.skipped_files;
        std::cerr << "evaluate: skipping unreadable file "
                  << corpus[pos + k].path.string() << "\n";
      }
    }
    pos += want;
    if (kept.empty()) continue;

    const Index b = static_cast<Index>(kept.size());
    const Index frames = mels[0].rows();
    auto x = Tensor<float>::make({b, frames, kMelBins}, false);
    for (Index s = 0; s < b; ++s) {
      std::memcpy(x.values().data() + s * frames * kMelBins, mels[s].data(),
                  sizeof(float) * static_cast<std::size_t>(frames * kMelBins));
    }

    ArrayX<float> probs = head.classify(encoder.encode(x)).values();
    for (Index s = 0; s < b; ++s) {
      Index bin = 0;
      probs.segment(s * kClasses, kClasses).maxCoeff(&bin);
      TempoPrediction item;
      item.clip_id = corpus[kept[s]].path.string();
      item.true_bpm = *corpus[kept[s]].bpm;
      item.predicted_bpm = static_cast<double>(bin);
      // Bin 0 decodes to 0 BPM, which no positive truth can match; score it
      // as a miss rather than tripping the metric's positivity guard.
      item.hit1 = bin > 0 && accuracy1(item.predicted_bpm, item.true_bpm, cfg.tolerance);
      item.hit2 = bin > 0 && accuracy2(item.predicted_bpm, item.true_bpm, cfg.tolerance);
      report.items.push_back(std::move(item));
    }
  }

  if (report.items.empty()) {
    throw std::runtime_error("evaluate: every corpus clip was unreadable");
  }
  report.n_items = static_cast<Index>(report.items.size());
  Index hits1 = 0, hits2 = 0;
  for (const auto& item : report.items) {
    hits1 += item.hit1 ? 1 : 0;
    hits2 += item.hit2 ? 1 : 0;
  }
  report.acc1 = static_cast<double>(hits1) / static_cast<double>(report.n_items);
  report.acc2 = static_cast<double>(hits2) / static_cast<double>(report.n_items);
  return report;
}

double spearman_rho(const std::vector<double>& a, const std::vector<double>& b,
                    bool* degenerate) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("spearman_rho: size mismatch");
  }
  if (degenerate) *degenerate = false;
  const std::size_t n = a.size();
  if (n < 2) {
    if (degenerate) *degenerate = true;
    return 0.0;
  }
  const std::vector<double> ra = average_ranks(a);
  const std::vector<double> rb = average_ranks(b);
  const double mean = 0.5 * static_cast<double>(n - 1);  // ranks are 0-based
  double va = 0.0, vb = 0.0, cov = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double da = ra[i] - mean;
    const double db = rb[i] - mean;
    va += da * da;
    vb += db * db;
    cov += da * db;
  }
  if (va == 0.0 || vb == 0.0) {
    if (degenerate) *degenerate = true;
    return 0.0;
  }
  return cov / std::sqrt(va * vb);
}

nlohmann::json DiagnosticsReport::to_json() const {
  return {{"spearman_rho", rho},
          {"degenerate", degenerate},
          {"equivariance_median", equivariance_median},
          {"alphas", alphas},
          {"alpha_medians", alpha_medians},
          {"n_items", n_items},
          {"skipped_files", skipped_files}};
}

void DiagnosticsReport::write_items_csv(std::ostream& out) const {
  out << "clip,true_bpm,z";
  for (double a : alphas) out << ",e_alpha_" << trimmed(a);
  out << "\n";
  for (const auto& item : items) {
    out << item.clip_id << "," << item.true_bpm << "," << item.z;
    for (double e : item.equivariance_errors) out << "," << e;
    out << "\n";
  }
}

DiagnosticsReport pseudo_tempo_diagnostics(const Checkpoint& pretrained,
                                           const std::vector<ManifestEntry>& corpus,
                                           const EvalConfig& cfg) {
  cfg.validate();
  check_labeled(corpus, "pseudo_tempo_diagnostics");

  const std::string phase = pretrained.metadata.value("phase", "");
  if (phase != "pretrain") {
    throw CheckpointError(
        "pseudo_tempo_diagnostics: expected a pre-training checkpoint, got phase '" +
        phase + "'");
  }
  const int layers = checkpoint_tcn_layers(pretrained);
  if (pretrained.fingerprint != pretrain_fingerprint(layers)) {
    throw CheckpointError(
        "pseudo_tempo_diagnostics: checkpoint was written for a different "
        "architecture (fingerprint " +
        std::to_string(pretrained.fingerprint) + ")");
  }

  TcnEncoder<float> encoder(0, layers);
  ProjectionHead<float> proj(0);
  auto named = encoder.state_tensors();
  for (auto& nt : proj.parameters()) named.push_back(nt);
  unpack_tensors(pretrained, named);
  encoder.freeze();
  for (auto& nt : proj.parameters()) nt.tensor.node()->requires_grad = false;

  constexpr Index kMelBins = TcnEncoder<float>::kMelBins;

  DiagnosticsReport report;
  report.alphas = {0.8, 1.25};
  const Index n_alphas = static_cast<Index>(report.alphas.size());

  struct Prepared {
    bool ok = false;
    std::vector<ArrayXXf> mels;  // unstretched first, then one per alpha
  };
  const Index n = static_cast<Index>(corpus.size());
  const int workers = resolve_worker_count(cfg.workers);
  OrderedProducerPool<Prepared> pool(
      n, std::max<Index>(2 * cfg.batch_size, 2 * workers), workers, [&](Index fi) {
        Prepared out;
        try {
          AudioClip clip = load_audio(corpus[fi].path);
          clip.samples = fit_excerpt(clip.samples);
          out.mels.push_back(log_mel_spectrogram(clip).values);
          for (double alpha : report.alphas) {
            AudioClip stretched = time_stretch(clip, alpha);
            stretched.samples = fit_excerpt(stretched.samples);
            out.mels.push_back(log_mel_spectrogram(stretched).values);
          }
          out.ok = true;
        } catch (const std::exception&) {
          out.ok = false;
        }
        return out;
      });

  std::vector<double> truths;
  std::vector<double> zs;
  std::vector<std::vector<double>> per_alpha(n_alphas);

  for (Index pos = 0; pos < n;) {
    const Index want = std::min<Index>(cfg.batch_size, n - pos);
    std::vector<Index> kept;
    std::vector<Prepared> batch;
    for (Index k = 0; k < want; ++k) {
      Prepared p = pool.take(pos + k);
      if (p.ok) {
        kept.push_back(pos + k);
        batch.push_back(std::move(p));
      } else {
        ++report.skipped_files;
        std::cerr << "pseudo_tempo_diagnostics: skipping unreadable file "
                  << corpus[pos + k].path.string() << "\n";
      }
    }
    pos += want;
    if (kept.empty()) continue;

    const Index b = static_cast<Index>(batch.size());
    const Index frames = batch[0].mels[0].rows();
    const Index view_numel = frames * kMelBins;
    // Rows 0..b-1 hold the unstretched views; the alpha-a views follow as the
    // (a+1)-th block, mirroring the pre-training batch layout.
    auto x = Tensor<float>::make({(1 + n_alphas) * b, frames, kMelBins}, false);
    for (Index s = 0; s < b; ++s) {
      for (Index v = 0; v <= n_alphas; ++v) {
        std::memcpy(x.values().data() + (v * b + s) * view_numel,
                    batch[s].mels[v].data(),
                    sizeof(float) * static_cast<std::size_t>(view_numel));
      }
    }
    batch.clear();

    ArrayX<float> z = proj.project(encoder.encode(x)).values();
    for (Index s = 0; s < b; ++s) {
      DiagnosticItem item;
      item.clip_id = corpus[kept[s]].path.string();
      item.true_bpm = *corpus[kept[s]].bpm;
      item.z = static_cast<double>(z[s]);
      double denom = item.z;
      if (std::abs(denom) < kDenominatorFloor) {
        denom = denom < 0.0 ? -kDenominatorFloor : kDenominatorFloor;
      }
      for (Index a = 0; a < n_alphas; ++a) {
        const double z_alpha = static_cast<double>(z[(a + 1) * b + s]);
        const double e = std::abs(z_alpha / denom - report.alphas[a]);
        item.equivariance_errors.push_back(e);
        per_alpha[a].push_back(e);
      }
      truths.push_back(item.true_bpm);
      zs.push_back(item.z);
      report.items.push_back(std::move(item));
    }
  }

  if (report.items.empty()) {
    throw std::runtime_error(
        "pseudo_tempo_diagnostics: every corpus clip was unreadable");
  }
  report.n_items = static_cast<Index>(report.items.size());
  report.rho = spearman_rho(zs, truths, &report.degenerate);

  std::vector<double> pooled;
  for (Index a = 0; a < n_alphas; ++a) {
    report.alpha_medians.push_back(median(per_alpha[a]));
    pooled.insert(pooled.end(), per_alpha[a].begin(), per_alpha[a].end());
  }
  report.equivariance_median = median(std::move(pooled));
  return report;
}

}  // namespace equitempo
