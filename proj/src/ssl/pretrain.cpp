#include "equitempo/ssl/pretrain.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <iostream>
#include <numeric>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "equitempo/audio/frontend.hpp"
#include "equitempo/data/producer_pool.hpp"
#include "equitempo/numerics/adam.hpp"
#include "equitempo/numerics/hash.hpp"

namespace equitempo {

namespace {

// Large activation buffers churn every step; keeping them on the heap instead
// of handing them back to the kernel avoids refaulting gigabytes per batch.
void tune_allocator() {
#if defined(__GLIBC__)
  static const bool once = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
  }();
  (void)once;
#endif
}

struct PreparedPair {
  bool ok = false;
  ArrayXXf mel_i, mel_j;  // [frames x 81] each
  float alpha_i = 1.0f, alpha_j = 1.0f;
};

PreparedPair prepare_pair(const std::filesystem::path& path, const SslConfig& cfg,
                          Index epoch, Index file_index) {
  PreparedPair out;
  AudioClip clip = load_audio(path);  // throws for unreadable files

  Rng rng_excerpt = Rng::stream(cfg.seed, RngDomain::kExcerpt, epoch, file_index);
  AudioClip excerpt = random_excerpt(clip, kExcerptSamples, rng_excerpt);

  Rng rng_stretch = Rng::stream(cfg.seed, RngDomain::kStretch, epoch, file_index);
  AudioAugConfig augs;
  ViewPair pair = make_view_pair(excerpt, cfg.r_p, rng_stretch,
                                 cfg.audio_augs_enabled ? &augs : nullptr,
                                 cfg.stretch_engine);

  out.mel_i = log_mel_spectrogram(pair.view_i).values;
  out.mel_j = log_mel_spectrogram(pair.view_j).values;
  if (cfg.audio_augs_enabled) {
    SpecAugmentConfig masks;
    Rng ri = Rng::stream(cfg.seed, RngDomain::kSpecAugment, epoch, file_index, 0);
    Rng rj = Rng::stream(cfg.seed, RngDomain::kSpecAugment, epoch, file_index, 1);
    spec_augment_freq_masks(out.mel_i, masks, ri);
    spec_augment_freq_masks(out.mel_j, masks, rj);
  }
  out.alpha_i = static_cast<float>(pair.alpha_i);
  out.alpha_j = static_cast<float>(pair.alpha_j);
  out.ok = true;
  return out;
}

double population_std(const std::vector<float>& v, double mean) {
  if (v.empty()) return 0.0;
  double acc = 0.0;
  for (float x : v) acc += (x - mean) * (x - mean);
  return std::sqrt(acc / static_cast<double>(v.size()));
}

}  // namespace

void SslConfig::validate() const {
  if (!(r_p > 0.0 && r_p < 1.0)) {
    throw std::invalid_argument("pretrain: r_p must lie in (0,1), got " +
                                std::to_string(r_p));
  }
  if (batch_size < 2) {
    throw std::invalid_argument("pretrain: batch_size must be at least 2, got " +
                                std::to_string(batch_size));
  }
  if (epochs < 0) throw std::invalid_argument("pretrain: epochs must be non-negative");
  if (!(learning_rate > 0.0f)) {
    throw std::invalid_argument("pretrain: learning_rate must be positive");
  }
  if (workers < 0) throw std::invalid_argument("pretrain: workers must be non-negative");
}

nlohmann::json SslConfig::to_json() const {
  // Everything that shapes the training outcome — and nothing that doesn't.
  // Worker count is an execution detail: results are identical across worker
  // counts, and the checkpoint bytes must be too.
  return {{"r_p", r_p},
          {"batch_size", batch_size},
          {"epochs", epochs},
          {"learning_rate", learning_rate},
          {"audio_augs_enabled", audio_augs_enabled},
          {"loss_variant", to_string(loss_variant)},
          {"symmetrize_pairs", symmetrize_pairs},
          {"seed", seed},
          {"stretch_engine",
           stretch_engine == StretchEngine::kWsola ? "wsola" : "resample"},
          {"tcn_layers", tcn_layers}};
}

nlohmann::json EpochStats::to_json() const {
  return {{"epoch", epoch},         {"loss_mean", loss_mean},
          {"z_abs_mean", z_abs_mean}, {"z_std", z_std},
          {"guard_hits", guard_hits}, {"wallclock_s", wallclock_s}};
}

std::uint64_t pretrain_fingerprint(int tcn_layers) {
  TcnEncoder<float> enc(0, tcn_layers);
  ProjectionHead<float> proj(0);
  return fnv1a64(enc.describe() + "|" + proj.describe());
}

PretrainResult pretrain(const std::vector<ManifestEntry>& corpus, const SslConfig& cfg,
                        std::ostream* log_jsonl, const EpochCallback& on_epoch) {
  cfg.validate();
  if (corpus.empty()) throw std::invalid_argument("pretrain: corpus is empty");
  tune_allocator();

  TcnEncoder<float> encoder(cfg.seed, cfg.tcn_layers);
  ProjectionHead<float> proj(cfg.seed);
  encoder.set_training(true);

  std::vector<Tensor<float>> params;
  for (auto& nt : encoder.parameters()) params.push_back(nt.tensor);
  for (auto& nt : proj.parameters()) params.push_back(nt.tensor);
  AdamState<float> adam;
  adam.learning_rate = cfg.learning_rate;

  const Index n = static_cast<Index>(corpus.size());
  const int workers = resolve_worker_count(cfg.workers);

  PretrainResult result;
  std::vector<char> warned(corpus.size(), 0);
  bool aborted = false;

  for (Index epoch = 0; epoch < cfg.epochs && !aborted; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();

    // Epoch order: Fisher-Yates under its own stream, so batch composition
    // depends only on (seed, epoch).
    std::vector<Index> order(n);
    std::iota(order.begin(), order.end(), Index{0});
    Rng shuffle_rng = Rng::stream(cfg.seed, RngDomain::kShuffle, epoch);
    for (Index k = n - 1; k > 0; --k) {
      std::swap(order[k], order[shuffle_rng.uniform_int(k + 1)]);
    }

    OrderedProducerPool<PreparedPair> pool(
        n, std::max<Index>(2 * cfg.batch_size, 2 * workers), workers, [&](Index p) {
          PreparedPair pp;
          try {
            pp = prepare_pair(corpus[order[p]].path, cfg, epoch, order[p]);
          } catch (const std::exception&) {
            pp.ok = false;
          }
          return pp;
        });

    double loss_sum = 0.0;
    Index pair_count = 0;
    std::int64_t guard_epoch = 0;
    std::vector<float> epoch_z;
    epoch_z.reserve(static_cast<std::size_t>(2 * n));
    Index batch_index = 0;

    for (Index pos = 0; pos < n && !aborted;) {
      const Index want = std::min<Index>(cfg.batch_size, n - pos);
      std::vector<PreparedPair> batch;
      std::vector<std::string> batch_clips;  // identifies the batch in diagnostics
      batch.reserve(want);
      for (Index k = 0; k < want; ++k) {
        PreparedPair pp = pool.take(pos + k);
        if (pp.ok) {
          batch_clips.push_back(corpus[order[pos + k]].path.string());
          batch.push_back(std::move(pp));
        } else {
          const Index fi = order[pos + k];
          if (!warned[fi]) {
            warned[fi] = 1;
            ++result.skipped_files;
            std::cerr << "pretrain: skipping unreadable file "
                      << corpus[fi].path.string() << "\n";
          }
        }
      }
      pos += want;
      if (batch.empty()) continue;

      const Index b = static_cast<Index>(batch.size());
      const Index frames = batch[0].mel_i.rows();
      auto x = Tensor<float>::make({2 * b, frames, TcnEncoder<float>::kMelBins}, false);
      ArrayX<float> alpha_i(b), alpha_j(b);
      const Index view_numel = frames * TcnEncoder<float>::kMelBins;
      for (Index s = 0; s < b; ++s) {
        std::memcpy(x.values().data() + s * view_numel, batch[s].mel_i.data(),
                    sizeof(float) * static_cast<std::size_t>(view_numel));
        std::memcpy(x.values().data() + (b + s) * view_numel, batch[s].mel_j.data(),
                    sizeof(float) * static_cast<std::size_t>(view_numel));
        alpha_i[s] = batch[s].alpha_i;
        alpha_j[s] = batch[s].alpha_j;
      }
      batch.clear();  // free the mel buffers before the forward pass

      Rng dropout_rng = Rng::stream(cfg.seed, RngDomain::kDropout, epoch, batch_index);
      zero_grads(params);
      auto z = proj.project(encoder.encode(x, &dropout_rng));  // [2b, 1]
      auto z_i = slice0(z, 0, b);
      auto z_j = slice0(z, b, b);
      auto loss = pretraining_loss(cfg.loss_variant, z_i, z_j, alpha_i, alpha_j,
                                   &guard_epoch);
      if (cfg.symmetrize_pairs) {
        auto reversed = pretraining_loss(cfg.loss_variant, z_j, z_i, alpha_j, alpha_i,
                                         &guard_epoch);
        loss = mul_scalar(add(loss, reversed), 0.5f);
      }

      const float loss_value = loss.values()[0];
      if (!std::isfinite(loss_value) || !all_finite(z)) {
        nlohmann::json params_stats = nlohmann::json::object();
        for (auto& nt : encoder.parameters()) {
          params_stats[nt.name] = nt.tensor.values().abs().maxCoeff();
        }
        for (auto& nt : proj.parameters()) {
          params_stats[nt.name] = nt.tensor.values().abs().maxCoeff();
        }
        result.nonfinite_diagnostic = {
            {"epoch", epoch + 1},
            {"batch_index", batch_index},
            {"batch_clips", batch_clips},
            {"loss", std::isfinite(loss_value) ? nlohmann::json(loss_value)
                                               : nlohmann::json("non-finite")},
            {"z_all_finite", all_finite(z)},
            {"z_abs_max", z.values().abs().maxCoeff()},
            {"alpha_i", std::vector<float>(alpha_i.data(), alpha_i.data() + b)},
            {"alpha_j", std::vector<float>(alpha_j.data(), alpha_j.data() + b)},
            {"guard_hits_epoch", guard_epoch},
            {"param_abs_max", params_stats}};
        aborted = true;
        pool.cancel();
        break;
      }

      backward(loss);
      adam_step(params, adam);

      loss_sum += static_cast<double>(loss_value) * static_cast<double>(b);
      pair_count += b;
      for (Index r = 0; r < 2 * b; ++r) epoch_z.push_back(z.values()[r]);
      ++batch_index;
    }

    if (aborted) break;

    if (pair_count == 0) {
      throw std::runtime_error("pretrain: every corpus file was unreadable");
    }

    EpochStats stats;
    stats.epoch = epoch + 1;
    stats.loss_mean = loss_sum / static_cast<double>(pair_count);
    double mean = 0.0, abs_mean = 0.0;
    for (float zv : epoch_z) {
      mean += zv;
      abs_mean += std::abs(zv);
    }
    mean /= static_cast<double>(epoch_z.size());
    stats.z_abs_mean = abs_mean / static_cast<double>(epoch_z.size());
    stats.z_std = population_std(epoch_z, mean);
    stats.guard_hits = guard_epoch;
    stats.wallclock_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.guard_hits_total += guard_epoch;
    result.monitor.epochs.push_back(stats);
    if (log_jsonl) *log_jsonl << stats.to_json().dump() << "\n" << std::flush;
    if (on_epoch) on_epoch(stats);
  }

  encoder.set_training(false);

  auto named = encoder.state_tensors();
  for (auto& nt : proj.parameters()) named.push_back(nt);

  std::vector<std::string> hashes;
  for (std::uint64_t h : manifest_clip_hashes(corpus)) {
    hashes.push_back(std::to_string(h));
  }

  Checkpoint& ck = result.checkpoint;
  ck.fingerprint = fnv1a64(encoder.describe() + "|" + proj.describe());
  ck.metadata = {{"phase", "pretrain"},
                 {"seed", cfg.seed},
                 {"epochs_completed", result.monitor.epochs.size()},
                 {"config", cfg.to_json()},
                 {"clip_hashes", hashes},
                 {"parameter_count",
                  encoder.parameter_count() + ProjectionHead<float>::kEmbedDim + 1},
                 {"aborted_nonfinite", aborted}};
  ck.tensors = pack_tensors(named);
  return result;
}

}  // namespace equitempo
