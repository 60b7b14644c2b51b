#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "equitempo/audio/frontend.hpp"
#include "equitempo/augment/augment.hpp"
#include "equitempo/cli/cli.hpp"
#include "equitempo/data/manifest.hpp"
#include "equitempo/finetune/finetune.hpp"
#include "equitempo/model/tcn.hpp"
#include "equitempo/persist/checkpoint.hpp"
#include "equitempo/synth/synth.hpp"

using namespace equitempo;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CliRun {
  int code = 0;
  std::string err;
};

CliRun cli(std::vector<std::string> args) {
  std::ostringstream err;
  const int code = run_cli(args, err);
  return {code, err.str()};
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> lines;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

// First record of a run's JSONL log: the resolved configuration echo.
json resolved_config_of(const fs::path& log_path) {
  const auto lines = lines_of(slurp(log_path));
  REQUIRE(!lines.empty());
  const json first = json::parse(lines.front());
  REQUIRE(first.contains("resolved_config"));
  return first.at("resolved_config");
}

const fs::path& work_dir() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / "equitempo_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

// Small labeled corpus shared by the command tests.
const fs::path& corpus_root() {
  static const fs::path root = [] {
    const fs::path dir = work_dir() / "corpus";
    make_corpus(dir, CorpusCounts{4, 3, 3}, 70.0, 170.0, 81);
    return dir;
  }();
  return root;
}

std::string str(const fs::path& p) { return p.string(); }

// A one-epoch pre-training checkpoint produced through the command layer.
const fs::path& cli_pretrained() {
  static const fs::path path = [] {
    const fs::path out = work_dir() / "pre.ckpt";
    const auto run = cli({"pretrain", "--manifest", str(corpus_root() / "pretrain.csv"),
                          "--epochs", "1", "--batch-size", "2", "--tcn-layers", "2",
                          "--seed", "5", "--out", str(out)});
    REQUIRE(run.code == kExitOk);
    return out;
  }();
  return path;
}

// A one-epoch fine-tuned checkpoint built on top of cli_pretrained().
const fs::path& cli_finetuned() {
  static const fs::path path = [] {
    const fs::path out = work_dir() / "fine.ckpt";
    const auto run = cli({"finetune", "--checkpoint", str(cli_pretrained()),
                          "--manifest", str(corpus_root() / "finetune.csv"),
                          "--epochs", "1", "--batch-size", "2", "--seed", "5",
                          "--out", str(out)});
    REQUIRE(run.code == kExitOk);
    return out;
  }();
  return path;
}

}  // namespace

TEST_CASE("synth-data generates a reproducible corpus and rejects bad splits") {
  const fs::path a = work_dir() / "synth_a";
  const fs::path b = work_dir() / "synth_b";
  const fs::path c = work_dir() / "synth_c";

  auto run = cli({"synth-data", "--n", "6", "--splits", "2,2,2", "--bpm-min", "80",
                  "--bpm-max", "160", "--seed", "11", "--out-dir", str(a)});
  CHECK(run.code == kExitOk);
  CHECK(load_manifest(a / "pretrain.csv").size() == 2);
  CHECK(load_manifest(a / "finetune.csv").size() == 2);
  const auto eval_entries = load_manifest(a / "eval.csv");
  CHECK(eval_entries.size() == 2);
  for (const auto& entry : eval_entries) {
    REQUIRE(entry.bpm.has_value());
    CHECK(*entry.bpm >= 80.0);
    CHECK(*entry.bpm <= 160.0);
  }
  const json echo = json::parse(slurp(a / "synth_config.json"));
  CHECK(echo.at("seed") == 11);
  CHECK(echo.at("splits").at("eval") == 2);

  // Same seed, same bytes; new seed, new audio.
  run = cli({"synth-data", "--n", "6", "--splits", "2,2,2", "--bpm-min", "80",
             "--bpm-max", "160", "--seed", "11", "--out-dir", str(b)});
  CHECK(run.code == kExitOk);
  CHECK(slurp(a / "pretrain" / "clip_000000.wav") ==
        slurp(b / "pretrain" / "clip_000000.wav"));
  run = cli({"synth-data", "--n", "6", "--splits", "2,2,2", "--bpm-min", "80",
             "--bpm-max", "160", "--seed", "12", "--out-dir", str(c)});
  CHECK(run.code == kExitOk);
  CHECK(slurp(a / "pretrain" / "clip_000000.wav") !=
        slurp(c / "pretrain" / "clip_000000.wav"));

  // Fractional splits settle by largest remainder.
  const fs::path d = work_dir() / "synth_d";
  run = cli({"synth-data", "--n", "10", "--splits", "0.5,0.3,0.2", "--seed", "1",
             "--out-dir", str(d)});
  CHECK(run.code == kExitOk);
  CHECK(load_manifest(d / "pretrain.csv").size() == 5);
  CHECK(load_manifest(d / "finetune.csv").size() == 3);
  CHECK(load_manifest(d / "eval.csv").size() == 2);

  for (const auto& splits : {"3,3,3", "1,1", "a,b,c", "2,2,-4", "0.5,0.4,0.2"}) {
    const auto bad = cli({"synth-data", "--n", "10", "--splits", splits,
                          "--out-dir", str(work_dir() / "synth_bad")});
    CAPTURE(splits);
    CHECK(bad.code == kExitUsage);
  }
  CHECK(cli({"synth-data", "--n", "0"}).code == kExitUsage);
  CHECK(cli({"synth-data", "--n", "6", "--splits", "2,2,2", "--bpm-min", "0"}).code ==
        kExitUsage);
  CHECK(cli({"synth-data", "--n", "6", "--splits", "2,2,2", "--bpm-min", "120",
             "--bpm-max", "80"}).code == kExitUsage);
}

TEST_CASE("pretrain with zero epochs writes the seeded initialization and a config echo") {
  const fs::path out = work_dir() / "init.ckpt";
  const auto run = cli({"pretrain", "--manifest", str(corpus_root() / "pretrain.csv"),
                        "--epochs", "0", "--tcn-layers", "2", "--seed", "5",
                        "--out", str(out)});
  CHECK(run.code == kExitOk);
  CHECK(run.err.find("trainable parameters") != std::string::npos);

  const Checkpoint ckpt = load_checkpoint(out);
  CHECK(ckpt.metadata.at("phase") == "pretrain");
  CHECK(ckpt.metadata.at("epochs_completed") == 0);
  CHECK(ckpt.metadata.at("config").at("tcn_layers") == 2);

  const json resolved = resolved_config_of(out.string() + ".log.jsonl");
  CHECK(resolved.at("command") == "pretrain");
  CHECK(resolved.at("epochs") == 0);
  CHECK(resolved.at("seed") == 5);
  CHECK(resolved.contains("workers"));  // the resolved value, not the 0 placeholder
  CHECK(resolved.at("workers").get<int>() >= 1);
}

TEST_CASE("command-layer reruns with one seed agree bitwise and diverge across seeds") {
  const fs::path p1 = work_dir() / "rerun1.ckpt";
  const fs::path p2 = work_dir() / "rerun2.ckpt";
  const fs::path p3 = work_dir() / "rerun3.ckpt";
  const std::vector<std::string> base = {
      "pretrain", "--manifest", str(corpus_root() / "pretrain.csv"), "--epochs", "1",
      "--batch-size", "2", "--tcn-layers", "2", "--seed", "5"};

  auto with = [&](const std::vector<std::string>& extra) {
    std::vector<std::string> args = base;
    args.insert(args.end(), extra.begin(), extra.end());
    return cli(args);
  };
  CHECK(with({"--out", str(p1), "--deterministic"}).code == kExitOk);
  CHECK(with({"--out", str(p2), "--workers", "2"}).code == kExitOk);
  CHECK(slurp(p1) == slurp(p2));  // worker count never reaches the math

  std::vector<std::string> reseeded = {
      "pretrain", "--manifest", str(corpus_root() / "pretrain.csv"), "--epochs", "1",
      "--batch-size", "2", "--tcn-layers", "2", "--seed", "6", "--out", str(p3)};
  CHECK(cli(reseeded).code == kExitOk);
  CHECK(slurp(p1) != slurp(p3));
}

TEST_CASE("pipeline runs end to end through the command layer") {
  const Checkpoint fine = load_checkpoint(cli_finetuned());
  CHECK(fine.metadata.at("phase") == "finetune");
  CHECK(fine.metadata.at("pretrain_config").at("tcn_layers") == 2);

  const fs::path report_path = work_dir() / "metrics.json";
  auto run = cli({"evaluate", "--checkpoint", str(cli_finetuned()), "--manifest",
                  str(corpus_root() / "eval.csv"), "--out", str(report_path)});
  CHECK(run.code == kExitOk);
  const json report = json::parse(slurp(report_path));
  CHECK(report.at("n_items") == 3);
  CHECK(report.at("tolerance") == 0.04);
  CHECK(report.at("acc1").get<double>() >= 0.0);
  CHECK(report.at("acc1").get<double>() <= 1.0);
  CHECK(report.at("acc2").get<double>() >= report.at("acc1").get<double>());
  CHECK(report.at("resolved_config").at("command") == "evaluate");

  // CSV format: resolved-config comment, header, one row per clip.
  const fs::path csv_path = work_dir() / "metrics.csv";
  run = cli({"evaluate", "--checkpoint", str(cli_finetuned()), "--manifest",
             str(corpus_root() / "eval.csv"), "--format", "csv", "--out",
             str(csv_path)});
  CHECK(run.code == kExitOk);
  const auto csv = lines_of(slurp(csv_path));
  REQUIRE(csv.size() == 5);
  CHECK(csv[0].rfind("# resolved_config ", 0) == 0);
  CHECK(csv[1] == "clip,true_bpm,predicted_bpm,hit1,hit2");
  CHECK(json::parse(csv[0].substr(std::strlen("# resolved_config "))).at("format") ==
        "csv");

  // A looser tolerance can only help.
  const fs::path loose_path = work_dir() / "metrics_loose.json";
  run = cli({"evaluate", "--checkpoint", str(cli_finetuned()), "--manifest",
             str(corpus_root() / "eval.csv"), "--tolerance", "0.5", "--out",
             str(loose_path)});
  CHECK(run.code == kExitOk);
  const json loose = json::parse(slurp(loose_path));
  CHECK(loose.at("acc1").get<double>() >= report.at("acc1").get<double>());
  CHECK(loose.at("acc2").get<double>() >= report.at("acc2").get<double>());
}

TEST_CASE("evaluate refuses clips seen in training unless explicitly overridden") {
  const fs::path out = work_dir() / "overlap.json";
  auto run = cli({"evaluate", "--checkpoint", str(cli_finetuned()), "--manifest",
                  str(corpus_root() / "finetune.csv"), "--out", str(out)});
  CHECK(run.code == kExitData);
  CHECK(run.err.find("allow_overlap") != std::string::npos);
  CHECK_FALSE(fs::exists(out));

  run = cli({"evaluate", "--checkpoint", str(cli_finetuned()), "--manifest",
             str(corpus_root() / "finetune.csv"), "--allow-overlap", "--out",
             str(out)});
  CHECK(run.code == kExitOk);
  CHECK(json::parse(slurp(out)).at("n_items") == 3);
}

TEST_CASE("diagnose writes the rank-correlation and equivariance report") {
  const fs::path out = work_dir() / "diag.json";
  const auto run = cli({"diagnose", "--checkpoint", str(cli_pretrained()),
                        "--manifest", str(corpus_root() / "eval.csv"), "--out",
                        str(out)});
  CHECK(run.code == kExitOk);
  const json report = json::parse(slurp(out));
  CHECK(report.at("n_items") == 3);
  CHECK(report.contains("spearman_rho"));
  CHECK(report.contains("equivariance_median"));
  CHECK(report.at("alphas") == json::array({0.8, 1.25}));
  CHECK(report.at("resolved_config").at("command") == "diagnose");

  // The probe reads pre-training checkpoints only.
  const auto wrong = cli({"diagnose", "--checkpoint", str(cli_finetuned()),
                          "--manifest", str(corpus_root() / "eval.csv"), "--out",
                          str(work_dir() / "diag_bad.json")});
  CHECK(wrong.code == kExitData);
}

TEST_CASE("embed exports one deterministic row per clip matching a recomputation") {
  const fs::path out1 = work_dir() / "embed1.csv";
  const fs::path out2 = work_dir() / "embed2.csv";
  const auto manifest_path = corpus_root() / "eval.csv";
  auto run = cli({"embed", "--checkpoint", str(cli_pretrained()), "--manifest",
                  str(manifest_path), "--out", str(out1)});
  CHECK(run.code == kExitOk);
  run = cli({"embed", "--checkpoint", str(cli_pretrained()), "--manifest",
             str(manifest_path), "--out", str(out2)});
  CHECK(run.code == kExitOk);
  CHECK(slurp(out1) == slurp(out2));

  const auto lines = lines_of(slurp(out1));
  REQUIRE(lines.size() == 5);  // config comment + header + 3 clips
  CHECK(lines[0].rfind("# resolved_config ", 0) == 0);
  CHECK(lines[1].rfind("clip,z,h_0,", 0) == 0);

  // Recompute the first clip's pseudo-tempo straight from the checkpoint.
  const Checkpoint ckpt = load_checkpoint(cli_pretrained());
  TcnEncoder<float> encoder(0, checkpoint_tcn_layers(ckpt));
  ProjectionHead<float> proj(0);
  auto named = encoder.state_tensors();
  for (auto& nt : proj.parameters()) named.push_back(nt);
  unpack_tensors(ckpt, named);
  encoder.freeze();

  const auto manifest = load_manifest(manifest_path);
  AudioClip clip = load_audio(manifest[0].path);
  clip.samples = fit_length(clip.samples, kExcerptSamples);
  const auto mel = log_mel_spectrogram(clip).values;
  auto x = Tensor<float>::make({1, mel.rows(), mel.cols()}, false);
  std::memcpy(x.values().data(), mel.data(),
              sizeof(float) * static_cast<std::size_t>(mel.size()));
  const float z = proj.project(encoder.encode(x)).values()[0];

  std::istringstream row(lines[2]);
  std::string field;
  std::getline(row, field, ',');
  CHECK(field == manifest[0].path.string());
  std::getline(row, field, ',');
  CHECK(std::stod(field) == doctest::Approx(z).epsilon(1e-5));
}

TEST_CASE("config files fill in unset flags, never override them, and reject typos") {
  const fs::path cfg = work_dir() / "run.cfg";
  {
    std::ofstream out(cfg);
    out << "# comment line\n";
    out << "epochs = 0\n";
    out << "tcn_layers = 2\n";        // underscore form of --tcn-layers
    out << "batch-size = 2   # trailing comment\n";
  }

  // Defaults lose to the file: epochs comes out 0.
  const fs::path from_file = work_dir() / "cfg_file.ckpt";
  auto run = cli({"pretrain", "--manifest", str(corpus_root() / "pretrain.csv"),
                  "--config", str(cfg), "--seed", "5", "--out", str(from_file)});
  CHECK(run.code == kExitOk);
  CHECK(load_checkpoint(from_file).metadata.at("epochs_completed") == 0);
  const json resolved = resolved_config_of(from_file.string() + ".log.jsonl");
  CHECK(resolved.at("tcn_layers") == 2);
  CHECK(resolved.at("batch_size") == 2);

  // The file loses to an explicit flag: epochs comes out 1.
  const fs::path from_flag = work_dir() / "cfg_flag.ckpt";
  run = cli({"pretrain", "--manifest", str(corpus_root() / "pretrain.csv"),
             "--config", str(cfg), "--epochs", "1", "--seed", "5", "--out",
             str(from_flag)});
  CHECK(run.code == kExitOk);
  CHECK(load_checkpoint(from_flag).metadata.at("epochs_completed") == 1);

  auto rejected = [&](const std::string& body) {
    const fs::path bad = work_dir() / "bad.cfg";
    std::ofstream(bad) << body;
    return cli({"pretrain", "--manifest", str(corpus_root() / "pretrain.csv"),
                "--config", str(bad), "--out", str(work_dir() / "never.ckpt")});
  };
  auto run_unknown = rejected("epochs=0\nbogus_key=1\n");
  CHECK(run_unknown.code == kExitUsage);
  CHECK(run_unknown.err.find("bogus-key") != std::string::npos);
  CHECK(rejected("epochs=0\nepochs=1\n").code == kExitUsage);   // duplicate
  CHECK(rejected("epochs\n").code == kExitUsage);               // not key=value
  CHECK(rejected("epochs=ten\n").code == kExitUsage);           // not parseable
  CHECK(cli({"pretrain", "--manifest", str(corpus_root() / "pretrain.csv"),
             "--config", str(work_dir() / "missing.cfg"),
             "--out", str(work_dir() / "never.ckpt")}).code == kExitUsage);
}

TEST_CASE("usage and data errors map to their exit codes") {
  CHECK(cli({"--help"}).code == kExitOk);
  CHECK(cli({"pretrain", "--help"}).code == kExitOk);
  CHECK(cli({}).code == kExitUsage);
  CHECK(cli({"no-such-command"}).code == kExitUsage);
  CHECK(cli({"pretrain"}).code == kExitUsage);  // missing required flags
  CHECK(cli({"pretrain", "--manifest", "m.csv", "--out", "o", "--loss", "fancy"})
            .code == kExitUsage);
  CHECK(cli({"pretrain", "--manifest", "m.csv", "--out", "o", "--rp", "1.5"}).code ==
        kExitUsage);
  CHECK(cli({"pretrain", "--manifest", "m.csv", "--out", "o", "--stretch-engine",
             "phase-vocoder"}).code == kExitUsage);
  CHECK(cli({"evaluate", "--checkpoint", "c", "--manifest", "m", "--out", "o",
             "--format", "xml"}).code == kExitUsage);
  CHECK(cli({"evaluate", "--checkpoint", "c", "--manifest", "m", "--out", "o",
             "--tolerance", "-0.1"}).code == kExitUsage);

  // Data errors: unreadable inputs and mismatched checkpoints.
  CHECK(cli({"pretrain", "--manifest", str(work_dir() / "nope.csv"), "--epochs", "0",
             "--out", str(work_dir() / "never.ckpt")}).code == kExitData);
  CHECK(cli({"evaluate", "--checkpoint", str(work_dir() / "nope.ckpt"), "--manifest",
             str(corpus_root() / "eval.csv"), "--out",
             str(work_dir() / "never.json")}).code == kExitData);
  // A pre-training checkpoint is not a tempo estimator.
  CHECK(cli({"evaluate", "--checkpoint", str(cli_pretrained()), "--manifest",
             str(corpus_root() / "eval.csv"), "--out",
             str(work_dir() / "never.json")}).code == kExitData);
  // embed needs the pre-training phase.
  CHECK(cli({"embed", "--checkpoint", str(cli_finetuned()), "--manifest",
             str(corpus_root() / "eval.csv"), "--out",
             str(work_dir() / "never.csv")}).code == kExitData);
}

TEST_CASE("a non-finite loss aborts with the numerical exit code and a diagnostic") {
  const fs::path out = work_dir() / "blowup.ckpt";
  const auto run = cli({"pretrain", "--manifest", str(corpus_root() / "pretrain.csv"),
                        "--epochs", "2", "--batch-size", "2", "--tcn-layers", "2",
                        "--seed", "5", "--lr", "1e20", "--out", str(out)});
  CHECK(run.code == kExitNumerical);
  CHECK_FALSE(fs::exists(out));  // no checkpoint from a poisoned run
  const json diag = json::parse(slurp(out.string() + ".diagnostic.json"));
  CHECK(diag.contains("epoch"));
  CHECK(diag.contains("batch_clips"));
}
