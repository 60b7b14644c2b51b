#include "equitempo/finetune/finetune.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <iostream>
#include <numeric>
#include <set>

#include "equitempo/audio/frontend.hpp"
#include "equitempo/data/producer_pool.hpp"
#include "equitempo/numerics/adam.hpp"
#include "equitempo/numerics/hash.hpp"
#include "equitempo/ssl/pretrain.hpp"

namespace equitempo {

namespace {

constexpr Index kClasses = TempoClassifierHead<float>::kClasses;

struct PreparedSample {
  bool ok = false;
  bool stretch_skipped = false;
  ArrayXXf mel;           // [frames x 81]
  ArrayX<float> target;   // [300]
};

}  // namespace

ArrayX<float> bpm_to_target(double bpm, const std::string& clip_id) {
  if (!(bpm > 0.0 && bpm < 300.0)) {
    std::string msg = "tempo label " + std::to_string(bpm) + " lies outside (0, 300)";
    if (!clip_id.empty()) msg += " for clip " + clip_id;
    throw std::invalid_argument(msg);
  }
  const Index k = std::clamp<Index>(std::llround(bpm), 1, kClasses - 2);
  ArrayX<float> w = ArrayX<float>::Zero(kClasses);
  w[k - 1] = 0.25f;
  w[k] = 0.5f;
  w[k + 1] = 0.25f;
  return w;
}

std::optional<LabeledClip> stretch_labeled(const LabeledClip& sample, double r_f,
                                           Rng& rng, StretchEngine engine) {
  if (r_f < 0.0 || r_f >= 1.0) {
    throw std::invalid_argument("stretch_labeled: r_f must lie in [0,1), got " +
                                std::to_string(r_f));
  }
  double alpha = 1.0;
  if (r_f > 0.0) {
    bool found = false;
    for (int attempt = 0; attempt < 100; ++attempt) {
      const double a = rng.uniform(1.0 - r_f, 1.0 + r_f);
      const double scaled = a * sample.bpm;
      if (scaled > 0.0 && scaled < 300.0) {
        alpha = a;
        found = true;
        break;
      }
    }
    if (!found) return std::nullopt;
  }

  LabeledClip out;
  out.bpm = alpha * sample.bpm;
  out.audio = alpha == 1.0 ? sample.audio : time_stretch(sample.audio, alpha, engine);
  out.audio.samples = fit_length(out.audio.samples, kExcerptSamples);
  return out;
}

void FinetuneConfig::validate() const {
  if (r_f < 0.0 || r_f >= 1.0) {
    throw std::invalid_argument("finetune: r_f must lie in [0,1), got " +
                                std::to_string(r_f));
  }
  if (batch_size < 1) throw std::invalid_argument("finetune: batch_size must be positive");
  if (epochs < 0) throw std::invalid_argument("finetune: epochs must be non-negative");
  if (!(learning_rate > 0.0f)) {
    throw std::invalid_argument("finetune: learning_rate must be positive");
  }
  if (workers < 0) throw std::invalid_argument("finetune: workers must be non-negative");
}

nlohmann::json FinetuneConfig::to_json() const {
  // Worker count is an execution detail and stays out (see SslConfig).
  return {{"r_f", r_f},
          {"batch_size", batch_size},
          {"epochs", epochs},
          {"learning_rate", learning_rate},
          {"seed", seed},
          {"stretch_engine",
           stretch_engine == StretchEngine::kWsola ? "wsola" : "resample"},
          {"redraw_alpha_each_epoch", redraw_alpha_each_epoch}};
}

nlohmann::json FinetuneEpochStats::to_json() const {
  return {{"epoch", epoch}, {"loss_mean", loss_mean}, {"wallclock_s", wallclock_s}};
}

std::uint64_t finetune_fingerprint(int tcn_layers) {
  TcnEncoder<float> enc(0, tcn_layers);
  TempoClassifierHead<float> head(0);
  return fnv1a64(enc.describe() + "|" + head.describe());
}

int checkpoint_tcn_layers(const Checkpoint& ckpt) {
  // Pre-training checkpoints carry the depth in their own config echo;
  // fine-tuned ones inherit it through the copied pre-training config.
  for (const char* key : {"config", "pretrain_config"}) {
    if (ckpt.metadata.contains(key) && ckpt.metadata.at(key).contains("tcn_layers")) {
      return ckpt.metadata.at(key).at("tcn_layers").get<int>();
    }
  }
  throw CheckpointError(
      "checkpoint metadata lacks config.tcn_layers; not a training checkpoint");
}

FinetuneResult finetune(const Checkpoint& pretrained,
                        const std::vector<ManifestEntry>& corpus,
                        const FinetuneConfig& cfg, std::ostream* log_jsonl,
                        const FinetuneEpochCallback& on_epoch) {
  cfg.validate();
  if (corpus.empty()) throw std::invalid_argument("finetune: corpus is empty");
  for (const auto& entry : corpus) {
    if (!entry.bpm) {
      throw std::invalid_argument("finetune: manifest entry " + entry.path.string() +
                                  " has no bpm label");
    }
    // Surfaces bad labels before any training happens.
    bpm_to_target(*entry.bpm, entry.path.string());
  }

  const std::string phase = pretrained.metadata.value("phase", "");
  if (phase != "pretrain") {
    throw CheckpointError("finetune: expected a pre-training checkpoint, got phase '" +
                          phase + "'");
  }
  const int layers = checkpoint_tcn_layers(pretrained);
  if (pretrained.fingerprint != pretrain_fingerprint(layers)) {
    throw CheckpointError(
        "finetune: checkpoint was written for a different architecture (fingerprint " +
        std::to_string(pretrained.fingerprint) + ")");
  }

  TcnEncoder<float> encoder(0, layers);
  unpack_tensors(pretrained, encoder.state_tensors());
  encoder.freeze();

  TempoClassifierHead<float> head(cfg.seed);
  std::vector<Tensor<float>> params;
  for (auto& nt : head.parameters()) params.push_back(nt.tensor);
  AdamState<float> adam;
  adam.learning_rate = cfg.learning_rate;

  const Index n = static_cast<Index>(corpus.size());
  const int workers = resolve_worker_count(cfg.workers);

  FinetuneResult result;
  std::vector<char> warned(corpus.size(), 0);
  bool aborted = false;

  for (Index epoch = 0; epoch < cfg.epochs && !aborted; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();

    std::vector<Index> order(n);
    std::iota(order.begin(), order.end(), Index{0});
    // Stream tag 1 keeps fine-tune shuffles clear of pre-training shuffles
    // under a shared seed.
    Rng shuffle_rng = Rng::stream(cfg.seed, RngDomain::kShuffle, epoch, 1);
    for (Index k = n - 1; k > 0; --k) {
      std::swap(order[k], order[shuffle_rng.uniform_int(k + 1)]);
    }

    OrderedProducerPool<PreparedSample> pool(
        n, std::max<Index>(2 * cfg.batch_size, 2 * workers), workers, [&](Index p) {
          const Index fi = order[p];
          PreparedSample out;
          try {
            LabeledClip labeled;
            labeled.audio = load_audio(corpus[fi].path);
            labeled.bpm = *corpus[fi].bpm;
            const Index alpha_epoch = cfg.redraw_alpha_each_epoch ? epoch : 0;
            Rng rng = Rng::stream(cfg.seed, RngDomain::kLabelStretch, alpha_epoch, fi);
            auto stretched = stretch_labeled(labeled, cfg.r_f, rng, cfg.stretch_engine);
            if (!stretched) {
              out.stretch_skipped = true;
              return out;
            }
            out.mel = log_mel_spectrogram(stretched->audio).values;
            out.target = bpm_to_target(stretched->bpm, corpus[fi].path.string());
            out.ok = true;
          } catch (const std::exception&) {
            out.ok = false;
          }
          return out;
        });

    double loss_sum = 0.0;
    Index sample_count = 0;

    for (Index pos = 0; pos < n && !aborted;) {
      const Index want = std::min<Index>(cfg.batch_size, n - pos);
      std::vector<PreparedSample> batch;
      std::vector<std::string> batch_clips;  // identifies the batch in diagnostics
      batch.reserve(want);
      for (Index k = 0; k < want; ++k) {
        PreparedSample ps = pool.take(pos + k);
        if (ps.ok) {
          batch_clips.push_back(corpus[order[pos + k]].path.string());
          batch.push_back(std::move(ps));
        } else if (ps.stretch_skipped) {
          ++result.skipped_stretches;
        } else {
          const Index fi = order[pos + k];
          if (!warned[fi]) {
            warned[fi] = 1;
            ++result.skipped_files;
            std::cerr << "finetune: skipping unreadable file "
                      << corpus[fi].path.string() << "\n";
          }
        }
      }
      pos += want;
      if (batch.empty()) continue;

      const Index b = static_cast<Index>(batch.size());
      const Index frames = batch[0].mel.rows();
      const Index view_numel = frames * TcnEncoder<float>::kMelBins;
      auto x = Tensor<float>::make({b, frames, TcnEncoder<float>::kMelBins}, false);
      auto targets = Tensor<float>::make({b, kClasses}, false);
      for (Index s = 0; s < b; ++s) {
        std::memcpy(x.values().data() + s * view_numel, batch[s].mel.data(),
                    sizeof(float) * static_cast<std::size_t>(view_numel));
        targets.values().segment(s * kClasses, kClasses) = batch[s].target;
      }
      batch.clear();

      zero_grads(params);
      auto log_probs = head.log_probabilities(encoder.encode(x));  // [b, 300]
      auto loss = mul_scalar(mean_all(sum_lastdim(mul(targets, log_probs))), -1.0f);

      const float loss_value = loss.values()[0];
      if (!std::isfinite(loss_value)) {
        nlohmann::json head_stats = nlohmann::json::object();
        for (auto& nt : head.parameters()) {
          head_stats[nt.name] = nt.tensor.values().abs().maxCoeff();
        }
        result.nonfinite_diagnostic = {{"epoch", epoch + 1},
                                       {"batch_clips", batch_clips},
                                       {"loss", "non-finite"},
                                       {"param_abs_max", head_stats}};
        aborted = true;
        pool.cancel();
        break;
      }

      backward(loss);
      adam_step(params, adam);
      loss_sum += static_cast<double>(loss_value) * static_cast<double>(b);
      sample_count += b;
    }

    if (aborted) break;
    if (sample_count == 0) {
      throw std::runtime_error("finetune: every corpus sample was skipped");
    }

    FinetuneEpochStats stats;
    stats.epoch = epoch + 1;
    stats.loss_mean = loss_sum / static_cast<double>(sample_count);
    stats.wallclock_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back(stats);
    if (log_jsonl) *log_jsonl << stats.to_json().dump() << "\n" << std::flush;
    if (on_epoch) on_epoch(stats);
  }

  // Union of everything either training phase has seen, for the eval-side
  // disjointness guard.
  std::set<std::string> hash_union;
  if (pretrained.metadata.contains("clip_hashes")) {
    for (const auto& h : pretrained.metadata.at("clip_hashes")) {
      hash_union.insert(h.get<std::string>());
    }
  }
  for (std::uint64_t h : manifest_clip_hashes(corpus)) {
    hash_union.insert(std::to_string(h));
  }

  auto named = encoder.state_tensors();
  for (auto& nt : head.parameters()) named.push_back(nt);

  Checkpoint& ck = result.checkpoint;
  ck.fingerprint = fnv1a64(encoder.describe() + "|" + head.describe());
  ck.metadata = {{"phase", "finetune"},
                 {"seed", cfg.seed},
                 {"epochs_completed", result.log.size()},
                 {"config", cfg.to_json()},
                 {"pretrain_config", pretrained.metadata.value("config", nlohmann::json())},
                 {"clip_hashes", std::vector<std::string>(hash_union.begin(), hash_union.end())},
                 {"aborted_nonfinite", aborted}};
  ck.tensors = pack_tensors(named);
  return result;
}

}  // namespace equitempo
