#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "equitempo/finetune/finetune.hpp"
#include "equitempo/numerics/adam.hpp"
#include "equitempo/persist/checkpoint.hpp"
#include "equitempo/ssl/pretrain.hpp"
#include "equitempo/synth/synth.hpp"

using namespace equitempo;
namespace fs = std::filesystem;

TEST_CASE("smoothed targets put half the mass on the rounded bin, a quarter on each neighbor") {
  auto expect_peak = [](const ArrayX<float>& t, Index k) {
    CHECK(t.size() == TempoClassifierHead<float>::kClasses);
    CHECK(t[k - 1] == 0.25f);
    CHECK(t[k] == 0.5f);
    CHECK(t[k + 1] == 0.25f);
    CHECK(t.sum() == 1.0f);
    CHECK((t != 0.0f).count() == 3);
  };

  expect_peak(bpm_to_target(100.0), 100);
  expect_peak(bpm_to_target(100.4), 100);  // rounds down
  expect_peak(bpm_to_target(100.6), 101);  // rounds up
  expect_peak(bpm_to_target(0.7), 1);      // clipped so the left neighbor exists
  expect_peak(bpm_to_target(299.2), 298);  // clipped so the right neighbor exists

  Rng rng = Rng::stream(31, RngDomain::kTest);
  for (int i = 0; i < 1000; ++i) {
    const ArrayX<float> t = bpm_to_target(rng.uniform(0.5, 299.5));
    CHECK(t.sum() == 1.0f);
    CHECK(t.minCoeff() == 0.0f);
  }
}

TEST_CASE("out-of-range tempo labels are rejected and name the clip") {
  CHECK_THROWS_AS(bpm_to_target(0.0), std::invalid_argument);
  CHECK_THROWS_AS(bpm_to_target(300.0), std::invalid_argument);
  CHECK_THROWS_AS(bpm_to_target(-5.0), std::invalid_argument);
  try {
    bpm_to_target(350.0, "clips/clip_000007.wav");
    FAIL("expected a range error");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("outside") != std::string::npos);
    CHECK(msg.find("clips/clip_000007.wav") != std::string::npos);
  }
}

TEST_CASE("r_f = 0 stretching is an exact crop or zero-pad with the label untouched") {
  LabeledClip clip = generate({.bpm = 120.0, .duration_s = 14.0, .seed = 3});
  REQUIRE(clip.audio.samples.size() > kExcerptSamples);

  Rng rng = Rng::stream(32, RngDomain::kTest);
  auto cropped = stretch_labeled(clip, 0.0, rng);
  REQUIRE(cropped.has_value());
  CHECK(cropped->bpm == 120.0);
  REQUIRE(cropped->audio.samples.size() == kExcerptSamples);
  CHECK((cropped->audio.samples == clip.audio.samples.segment(0, kExcerptSamples)).all());

  LabeledClip brief{clip.audio, clip.bpm};
  brief.audio.samples = ArrayX<float>(clip.audio.samples.segment(0, 400000));
  auto padded = stretch_labeled(brief, 0.0, rng);
  REQUIRE(padded.has_value());
  REQUIRE(padded->audio.samples.size() == kExcerptSamples);
  CHECK((padded->audio.samples.segment(0, 400000) == brief.audio.samples).all());
  CHECK((padded->audio.samples.segment(400000, kExcerptSamples - 400000) == 0.0f).all());
}

TEST_CASE("stretched labels track the signal tempo measured by the oracle") {
  LabeledClip clip = generate({.bpm = 120.0, .duration_s = 14.0, .seed = 4});
  Rng rng = Rng::stream(33, RngDomain::kTest);
  for (int draw = 0; draw < 8; ++draw) {
    auto out = stretch_labeled(clip, 0.3, rng);
    REQUIRE(out.has_value());
    CHECK(out->audio.samples.size() == kExcerptSamples);
    CHECK(out->bpm / clip.bpm >= 0.7);
    CHECK(out->bpm / clip.bpm <= 1.3);
    TempoEstimate est = oracle_tempo(out->audio);
    REQUIRE_FALSE(est.degenerate);
    CHECK(est.bpm == doctest::Approx(out->bpm).epsilon(0.02));
  }
}

TEST_CASE("alpha draws that would leave the label range are redrawn or given up on") {
  LabeledClip fast;
  fast.audio.samples = ArrayX<float>::Zero(1000);
  fast.audio.sample_rate = kSampleRate;
  fast.bpm = 290.0;

  Rng rng = Rng::stream(34, RngDomain::kTest);
  for (int draw = 0; draw < 50; ++draw) {
    auto out = stretch_labeled(fast, 0.2, rng);
    REQUIRE(out.has_value());
    CHECK(out->bpm > 0.0);
    CHECK(out->bpm < 300.0);
    CHECK(out->bpm >= 290.0 * 0.8);
  }

  // No alpha in [0.8, 1.2] can bring 600 BPM under 300: the retry budget
  // runs out and the caller is told to skip.
  LabeledClip impossible = fast;
  impossible.bpm = 600.0;
  CHECK_FALSE(stretch_labeled(impossible, 0.2, rng).has_value());

  CHECK_THROWS_AS(stretch_labeled(fast, -0.1, rng), std::invalid_argument);
  CHECK_THROWS_AS(stretch_labeled(fast, 1.0, rng), std::invalid_argument);
}

TEST_CASE("cross-entropy against a smoothed target is minimized at the target distribution") {
  constexpr Index kClasses = TempoClassifierHead<float>::kClasses;
  auto logits = Tensor<float>::zeros({1, kClasses}, true);
  const ArrayX<float> target = bpm_to_target(137.0);
  auto target_t =
      Tensor<float>::from_values({1, kClasses}, ArrayX<float>(target), false);

  std::vector<Tensor<float>> params{logits};
  AdamState<float> adam;
  adam.learning_rate = 0.05f;
  float loss_value = 0.0f;
  for (int step = 0; step < 600; ++step) {
    zero_grads(params);
    auto loss =
        mul_scalar(mean_all(sum_lastdim(mul(target_t, log_softmax_lastdim(logits)))),
                   -1.0f);
    loss_value = loss.values()[0];
    backward(loss);
    adam_step(params, adam);
  }

  // The optimum reproduces the target distribution, and the loss reaches the
  // target's own entropy: -(0.25 ln 0.25 + 0.5 ln 0.5 + 0.25 ln 0.25).
  const double entropy = std::log(2.0) * 1.5;
  CHECK(loss_value == doctest::Approx(entropy).epsilon(0.02));
  ArrayX<float> probs = softmax_lastdim(logits).values();
  CHECK((probs - target).abs().maxCoeff() < 0.01f);
}

TEST_CASE("the linear head separates distinct one-hot embeddings perfectly") {
  constexpr Index kDim = TempoClassifierHead<float>::kEmbedDim;
  constexpr Index kClasses = TempoClassifierHead<float>::kClasses;

  auto h = Tensor<float>::zeros({kDim, kDim}, false);
  auto targets = Tensor<float>::zeros({kDim, kClasses}, false);
  std::vector<Index> bins(kDim);
  for (Index i = 0; i < kDim; ++i) {
    h.values()[i * kDim + i] = 1.0f;
    const double bpm = 60.0 + 15.0 * static_cast<double>(i);
    bins[i] = static_cast<Index>(std::llround(bpm));
    targets.values().segment(i * kClasses, kClasses) = bpm_to_target(bpm);
  }

  TempoClassifierHead<float> head(4);
  std::vector<Tensor<float>> params;
  for (auto& nt : head.parameters()) params.push_back(nt.tensor);
  AdamState<float> adam;
  adam.learning_rate = 0.05f;
  float loss_value = 0.0f;
  for (int step = 0; step < 300; ++step) {
    zero_grads(params);
    auto loss = mul_scalar(
        mean_all(sum_lastdim(mul(targets, head.log_probabilities(h)))), -1.0f);
    loss_value = loss.values()[0];
    backward(loss);
    adam_step(params, adam);
  }
  CHECK(loss_value < 1.5f);

  ArrayX<float> probs = head.classify(h).values();
  for (Index i = 0; i < kDim; ++i) {
    Index best = 0;
    probs.segment(i * kClasses, kClasses).maxCoeff(&best);
    CHECK(best == bins[i]);
  }
}

namespace {

// Small labeled corpus on disk plus a matching initialization checkpoint,
// shared across the loop tests.
const fs::path& tiny_corpus_root() {
  static const fs::path root = [] {
    fs::path dir = fs::temp_directory_path() / "equitempo_finetune_test";
    fs::remove_all(dir);
    make_corpus(dir, CorpusCounts{2, 8, 0}, 60.0, 180.0, 78);
    return dir;
  }();
  return root;
}

const Checkpoint& tiny_pretrained() {
  static const Checkpoint ckpt = [] {
    SslConfig cfg;
    cfg.epochs = 0;  // architecture + initial weights only
    cfg.tcn_layers = 2;
    cfg.seed = 5;
    auto manifest = load_manifest(tiny_corpus_root() / "pretrain.csv");
    return pretrain(manifest, cfg).checkpoint;
  }();
  return ckpt;
}

FinetuneConfig tiny_ft_config() {
  FinetuneConfig cfg;
  cfg.r_f = 0.1;
  cfg.batch_size = 3;
  cfg.epochs = 3;
  cfg.learning_rate = 0.05f;  // large, so three epochs show a clear descent
  cfg.seed = 9;
  cfg.workers = 2;
  cfg.redraw_alpha_each_epoch = false;  // fixed inputs make the descent monotone
  return cfg;
}

}  // namespace

TEST_CASE("finetune config validation rejects out-of-range values") {
  FinetuneConfig cfg = tiny_ft_config();
  CHECK_NOTHROW(cfg.validate());
  cfg.r_f = 0.0;  // stretching disabled is a valid setting here
  CHECK_NOTHROW(cfg.validate());
  cfg.r_f = 1.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.r_f = -0.1;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = tiny_ft_config();
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = tiny_ft_config();
  cfg.learning_rate = 0.0f;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = tiny_ft_config();
  cfg.workers = -1;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("three epochs on a tiny corpus: loss falls, the encoder stays frozen, metadata is complete") {
  auto manifest = load_manifest(tiny_corpus_root() / "finetune.csv");
  REQUIRE(manifest.size() == 8);
  for (const auto& e : manifest) REQUIRE(e.bpm.has_value());

  std::ostringstream log;
  int callbacks = 0;
  FinetuneResult res = finetune(tiny_pretrained(), manifest, tiny_ft_config(), &log,
                                [&](const FinetuneEpochStats&) { ++callbacks; });

  CHECK(callbacks == 3);
  CHECK(res.skipped_files == 0);
  CHECK(res.skipped_stretches == 0);
  CHECK_FALSE(res.nonfinite_diagnostic.has_value());
  REQUIRE(res.log.size() == 3);
  for (const auto& stats : res.log) {
    CHECK(std::isfinite(stats.loss_mean));
    CHECK(stats.wallclock_s > 0.0);
  }
  CHECK(res.log.front().loss_mean > 3.0);  // untrained head starts near ln(300)
  CHECK(res.log.back().loss_mean < res.log.front().loss_mean);

  std::istringstream lines(log.str());
  std::string line;
  int records = 0;
  while (std::getline(lines, line)) {
    nlohmann::json rec = nlohmann::json::parse(line);
    for (const char* key : {"epoch", "loss_mean", "wallclock_s"}) {
      CHECK(rec.contains(key));
    }
    ++records;
  }
  CHECK(records == 3);

  const Checkpoint& ck = res.checkpoint;
  CHECK(ck.fingerprint == finetune_fingerprint(2));
  CHECK(ck.metadata.at("phase") == "finetune");
  CHECK(ck.metadata.at("epochs_completed") == 3);
  CHECK(ck.metadata.at("config").at("r_f") == 0.1);
  CHECK(ck.metadata.at("pretrain_config").at("tcn_layers") == 2);
  CHECK(checkpoint_tcn_layers(ck) == 2);
  // Union of the 2 pre-training clips and the 8 fine-tuning clips.
  CHECK(ck.metadata.at("clip_hashes").size() == 10);
  CHECK(ck.metadata.at("aborted_nonfinite") == false);

  // Frozen means frozen: every encoder tensor comes back bit-identical.
  TcnEncoder<float> probe(0, 2);
  for (auto& nt : probe.state_tensors()) {
    REQUIRE(ck.tensors.count(nt.name) == 1);
    const auto& before = tiny_pretrained().tensors.at(nt.name).data;
    const auto& after = ck.tensors.at(nt.name).data;
    REQUIRE(before.size() == after.size());
    CHECK((before == after).all());
  }
  CHECK(ck.tensors.count("classifier.weight") == 1);
  CHECK(ck.tensors.count("classifier.bias") == 1);
  // ...and the head must have moved off its initialization.
  TempoClassifierHead<float> fresh(tiny_ft_config().seed);
  const auto& trained = ck.tensors.at("classifier.weight").data;
  CHECK_FALSE((trained == fresh.parameters()[0].tensor.values()).all());
}

TEST_CASE("seed-matched finetune reruns are bitwise identical; workers are irrelevant, seeds are not") {
  auto manifest = load_manifest(tiny_corpus_root() / "finetune.csv");
  auto run = [&](FinetuneConfig cfg) {
    auto path = tiny_corpus_root() / ("ft_" + std::to_string(cfg.seed) + "_" +
                                      std::to_string(cfg.workers) + ".ckpt");
    save_checkpoint(path, finetune(tiny_pretrained(), manifest, cfg).checkpoint);
    std::ifstream in(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };

  FinetuneConfig cfg = tiny_ft_config();
  cfg.epochs = 2;
  const std::string a = run(cfg);
  const std::string b = run(cfg);
  CHECK(a == b);

  FinetuneConfig more_workers = cfg;
  more_workers.workers = 1;
  CHECK(run(more_workers) == a);

  FinetuneConfig other_seed = cfg;
  other_seed.seed = 10;
  CHECK(run(other_seed) != a);
}

TEST_CASE("finetune rejects wrong-phase and wrong-architecture checkpoints and bad labels") {
  auto manifest = load_manifest(tiny_corpus_root() / "finetune.csv");

  CHECK_THROWS_AS(finetune(tiny_pretrained(), {}, tiny_ft_config()),
                  std::invalid_argument);

  Checkpoint wrong_fp = tiny_pretrained();
  wrong_fp.fingerprint ^= 1;
  CHECK_THROWS_WITH_AS(finetune(wrong_fp, manifest, tiny_ft_config()),
                       doctest::Contains("different architecture"), CheckpointError);

  // A fine-tuned checkpoint cannot seed another fine-tuning run.
  FinetuneConfig zero = tiny_ft_config();
  zero.epochs = 0;
  FinetuneResult head_only = finetune(tiny_pretrained(), manifest, zero);
  CHECK(head_only.log.empty());
  CHECK(head_only.checkpoint.metadata.at("epochs_completed") == 0);
  CHECK_THROWS_WITH_AS(finetune(head_only.checkpoint, manifest, tiny_ft_config()),
                       doctest::Contains("pre-training"), CheckpointError);

  // Labels are vetted before any training work starts.
  auto unlabeled = manifest;
  unlabeled[3].bpm.reset();
  CHECK_THROWS_WITH_AS(finetune(tiny_pretrained(), unlabeled, tiny_ft_config()),
                       doctest::Contains("no bpm"), std::invalid_argument);

  std::vector<ManifestEntry> mislabeled{{fs::path("/nope.wav"), 350.0}};
  CHECK_THROWS_WITH_AS(finetune(tiny_pretrained(), mislabeled, tiny_ft_config()),
                       doctest::Contains("/nope.wav"), std::invalid_argument);
}

TEST_CASE("unreadable files are skipped, counted once, and training continues") {
  auto manifest = load_manifest(tiny_corpus_root() / "finetune.csv");
  manifest.push_back({tiny_corpus_root() / "missing.wav", 140.0});

  FinetuneConfig cfg = tiny_ft_config();
  cfg.epochs = 2;
  FinetuneResult res = finetune(tiny_pretrained(), manifest, cfg);

  CHECK(res.skipped_files == 1);  // once, not once per epoch
  REQUIRE(res.log.size() == 2);
  CHECK(std::isfinite(res.log.back().loss_mean));
  CHECK(res.checkpoint.metadata.at("epochs_completed") == 2);
}
