#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "equitempo/augment/augment.hpp"
#include "equitempo/synth/synth.hpp"
#include "testutil.hpp"

using namespace equitempo;
using testutil::median_interval;
using testutil::pick_onsets;

namespace fs = std::filesystem;

TEST_CASE("120 BPM for 10 seconds puts 20 onsets half a second apart") {
  SynthSpec spec;
  spec.bpm = 120.0;
  spec.duration_s = 10.0;
  spec.pattern = RhythmPattern::kClick;
  spec.noise_snr_db = 200.0;
  spec.seed = 4;
  LabeledClip clip = generate(spec);
  CHECK(clip.bpm == 120.0);
  CHECK(clip.audio.samples.size() == 441000);

  auto onsets = pick_onsets(clip.audio.samples);
  CHECK(onsets.size() == 20);
  // first onset at t = 0 (energy-window alignment gives a few ms of slack)
  CHECK(onsets.front() < 300);
  for (std::size_t k = 0; k < onsets.size(); ++k) {
    CHECK(std::abs(static_cast<double>(onsets[k]) - 22050.0 * k) < 300.0);
  }
}

TEST_CASE("generation is seed-deterministic") {
  SynthSpec spec;
  spec.bpm = 97.3;
  spec.pattern = RhythmPattern::kAccented44;
  spec.seed = 31;
  LabeledClip a = generate(spec);
  LabeledClip b = generate(spec);
  CHECK((a.audio.samples == b.audio.samples).all());
  spec.seed = 32;
  LabeledClip c = generate(spec);
  CHECK((a.audio.samples != c.audio.samples).any());
}

TEST_CASE("oracle nails the generated tempo across patterns") {
  for (RhythmPattern pattern :
       {RhythmPattern::kClick, RhythmPattern::kDrumKickSnare, RhythmPattern::kAccented44}) {
    for (double bpm : {60.0, 100.0, 137.5, 180.0}) {
      SynthSpec spec;
      spec.bpm = bpm;
      spec.pattern = pattern;
      spec.seed = static_cast<std::uint64_t>(bpm * 10);
      TempoEstimate est = oracle_tempo(generate(spec).audio);
      INFO("pattern " << static_cast<int>(pattern) << " bpm " << bpm);
      CHECK(!est.degenerate);
      CHECK(std::abs(est.bpm - bpm) / bpm < 0.02);
    }
  }
}

TEST_CASE("swing moves subdivisions, not the measured beat") {
  SynthSpec spec;
  spec.bpm = 112.0;
  spec.pattern = RhythmPattern::kDrumKickSnare;
  spec.swing = 0.2;
  spec.seed = 8;
  TempoEstimate est = oracle_tempo(generate(spec).audio);
  CHECK(!est.degenerate);
  CHECK(std::abs(est.bpm - 112.0) / 112.0 < 0.02);
}

TEST_CASE("oracle composes with time stretching") {
  SynthSpec spec;
  spec.bpm = 100.0;
  spec.seed = 12;
  LabeledClip clip = generate(spec);
  CHECK(std::abs(oracle_tempo(clip.audio).bpm - 100.0) <= 2.0);

  AudioClip stretched = time_stretch(clip.audio, 1.2);
  CHECK(std::abs(oracle_tempo(stretched).bpm - 120.0) <= 2.4);

  AudioClip slowed = time_stretch(clip.audio, 0.8);
  CHECK(std::abs(oracle_tempo(slowed).bpm - 80.0) <= 1.6);
}

TEST_CASE("oracle flags degenerate inputs and rejects short ones") {
  Rng rng = Rng::stream(3, RngDomain::kTest);
  AudioClip white;
  white.samples.resize(8 * kSampleRate);
  for (Index i = 0; i < white.samples.size(); ++i) {
    white.samples[i] = static_cast<float>(rng.uniform(-0.5, 0.5));
  }
  CHECK(oracle_tempo(white).degenerate);

  AudioClip flat;
  flat.samples = ArrayX<float>::Zero(8 * kSampleRate);
  CHECK(oracle_tempo(flat).degenerate);

  AudioClip brief;
  brief.samples = ArrayX<float>::Zero(2 * kSampleRate);
  CHECK_THROWS_AS((void)oracle_tempo(brief), AudioError);
}

TEST_CASE("oracle agreement over random specs") {
  Rng rng = Rng::stream(77, RngDomain::kTest);
  int hits = 0, total = 0;
  for (int i = 0; i < 60; ++i) {
    SynthSpec spec;
    spec.bpm = rng.uniform(60.0, 180.0);
    spec.duration_s = 12.0;
    spec.pattern = static_cast<RhythmPattern>(rng.uniform_int(3));
    spec.click_decay_ms = rng.uniform(3.0, 8.0);
    spec.burst_bandwidth_hz = rng.uniform(3000.0, 16000.0);
    spec.swing = rng.uniform(0.0, 0.2);
    spec.noise_snr_db = rng.uniform(35.0, 55.0);
    spec.seed = rng.next_u64();
    TempoEstimate est = oracle_tempo(generate(spec).audio);
    ++total;
    if (!est.degenerate && std::abs(est.bpm - spec.bpm) / spec.bpm <= 0.02) ++hits;
  }
  CHECK(total == 60);
  CHECK(hits >= 59);
}

TEST_CASE("split_counts uses largest remainders and always sums to n") {
  CorpusCounts c = split_counts(2700, 0.74, 0.185, 0.075);
  CHECK(c.pretrain + c.finetune + c.eval == 2700);
  CHECK(c.pretrain == 1998);  // 2700 * 0.74 exactly
  CHECK(c.finetune == 500);
  CHECK(c.eval == 202);

  CorpusCounts d = split_counts(10, 0.5, 0.3, 0.2);
  CHECK(d.pretrain == 5);
  CHECK(d.finetune == 3);
  CHECK(d.eval == 2);

  Rng rng = Rng::stream(9, RngDomain::kTest);
  for (int trial = 0; trial < 200; ++trial) {
    double a = rng.uniform(0.1, 0.8);
    double b = rng.uniform(0.0, 1.0 - a);
    const int n = 1 + rng.uniform_int(5000);
    CorpusCounts s = split_counts(n, a, b, 1.0 - a - b);
    CHECK(s.pretrain + s.finetune + s.eval == n);
  }
  CHECK_THROWS_AS((void)split_counts(10, 0.5, 0.2, 0.2), std::invalid_argument);
}

TEST_CASE("make_corpus writes disjoint splits with loadable manifests") {
  const fs::path root = fs::temp_directory_path() / "equitempo_corpus_test";
  fs::remove_all(root);
  CorpusManifests m = make_corpus(root, {6, 4, 3}, 70.0, 160.0, 2024);

  auto pre = load_manifest(m.pretrain);
  auto fin = load_manifest(m.finetune);
  auto ev = load_manifest(m.eval);
  REQUIRE(pre.size() == 6);
  REQUIRE(fin.size() == 4);
  REQUIRE(ev.size() == 3);

  CHECK(!pre[0].bpm.has_value());
  for (const auto& e : fin) {
    REQUIRE(e.bpm.has_value());
    CHECK(*e.bpm >= 70.0);
    CHECK(*e.bpm <= 160.0);
    CHECK(fs::exists(e.path));
  }
  for (const auto& e : pre) CHECK(fs::exists(e.path));

  auto to_set = [](const std::vector<std::uint64_t>& v) {
    return std::set<std::uint64_t>(v.begin(), v.end());
  };
  auto h_pre = to_set(manifest_clip_hashes(pre));
  auto h_fin = to_set(manifest_clip_hashes(fin));
  auto h_ev = to_set(manifest_clip_hashes(ev));
  CHECK(h_pre.size() == 6);
  for (auto h : h_fin) CHECK(h_pre.count(h) == 0);
  for (auto h : h_ev) {
    CHECK(h_pre.count(h) == 0);
    CHECK(h_fin.count(h) == 0);
  }

  // a generated clip read back from disk still carries its tempo
  TempoEstimate est = oracle_tempo(load_audio(fin[0].path));
  CHECK(!est.degenerate);
  CHECK(std::abs(est.bpm - *fin[0].bpm) / *fin[0].bpm < 0.02);

  // same seed regenerates byte-identical clips
  const fs::path root2 = fs::temp_directory_path() / "equitempo_corpus_test2";
  fs::remove_all(root2);
  make_corpus(root2, {1, 0, 0}, 70.0, 160.0, 2024);
  auto a = load_wav(root / "pretrain" / "clip_000000.wav");
  auto b = load_wav(root2 / "pretrain" / "clip_000000.wav");
  CHECK((a.interleaved == b.interleaved).all());

  fs::remove_all(root);
  fs::remove_all(root2);
}
