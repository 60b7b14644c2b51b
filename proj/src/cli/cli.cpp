#include "equitempo/cli/cli.hpp"

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>

#include <CLI11.hpp>
#include <json.hpp>

#include "equitempo/audio/frontend.hpp"
#include "equitempo/augment/augment.hpp"
#include "equitempo/data/manifest.hpp"
#include "equitempo/data/producer_pool.hpp"
#include "equitempo/eval/eval.hpp"
#include "equitempo/finetune/finetune.hpp"
#include "equitempo/model/tcn.hpp"
#include "equitempo/persist/checkpoint.hpp"
#include "equitempo/ssl/pretrain.hpp"
#include "equitempo/synth/synth.hpp"

namespace equitempo {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string underscored(std::string s) {
  std::replace(s.begin(), s.end(), '-', '_');
  return s;
}

// Reads a flat key=value config file and returns one --key=value token for
// every option the command line left unset; keys take underscores or hyphens.
// Unknown or duplicate keys are errors so typos cannot silently change a run.
std::vector<std::string> config_tokens(CLI::App& sub, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot read config file " + path);
  std::vector<std::string> tokens;
  std::set<std::string> seen;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = path + ":" + std::to_string(lineno);
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = CLI::detail::trim_copy(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument(where + ": expected key=value");
    }
    std::string key = CLI::detail::trim_copy(line.substr(0, eq));
    const std::string value = CLI::detail::trim_copy(line.substr(eq + 1));
    std::replace(key.begin(), key.end(), '_', '-');
    if (key.empty() || key == "config") {
      throw std::invalid_argument(where + ": invalid key");
    }
    if (!seen.insert(key).second) {
      throw std::invalid_argument(where + ": duplicate key '" + key + "'");
    }
    const CLI::Option* opt = sub.get_option_no_throw("--" + key);
    if (opt == nullptr) {
      throw std::invalid_argument(where + ": unknown key '" + key +
                                  "' for command " + sub.get_name());
    }
    if (opt->count() > 0) continue;  // flags take precedence over the file
    tokens.push_back("--" + key + "=" + value);
  }
  return tokens;
}

StretchEngine parse_engine(const std::string& name) {
  if (name == "resample") return StretchEngine::kResample;
  if (name == "wsola") return StretchEngine::kWsola;
  throw std::invalid_argument("stretch engine must be resample or wsola; got '" +
                              name + "'");
}

// Three comma-separated values: either clip counts summing to n, or
// fractions summing to 1 (settled by largest remainder).
CorpusCounts parse_splits(const std::string& text, int n) {
  std::vector<double> parts;
  std::istringstream in(text);
  std::string token;
  while (std::getline(in, token, ',')) {
    std::size_t used = 0;
    double value = 0.0;
    try {
      value = std::stod(token, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != token.size() || token.empty()) {
      throw std::invalid_argument("cannot parse split value '" + token + "'");
    }
    if (value < 0.0) throw std::invalid_argument("split values must be non-negative");
    parts.push_back(value);
  }
  if (parts.size() != 3) {
    throw std::invalid_argument("--splits needs exactly three comma-separated values");
  }
  const double sum = parts[0] + parts[1] + parts[2];
  const bool integral = std::all_of(parts.begin(), parts.end(), [](double v) {
    return std::abs(v - std::round(v)) < 1e-9;
  });
  if (integral && std::llround(sum) == n) {
    return CorpusCounts{static_cast<int>(std::llround(parts[0])),
                        static_cast<int>(std::llround(parts[1])),
                        static_cast<int>(std::llround(parts[2]))};
  }
  if (std::abs(sum - 1.0) <= 1e-6) {
    return split_counts(n, parts[0], parts[1], parts[2]);
  }
  throw std::invalid_argument(
      "--splits must be three clip counts summing to --n or three fractions "
      "summing to 1; got '" + text + "'");
}

void write_text_file(const fs::path& path, const std::string& text) {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
  out.flush();
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

// JSON report or per-item CSV; either way the artifact embeds the resolved
// configuration that produced it.
void emit_report(const std::string& format, const fs::path& out_path,
                 const json& resolved, const json& summary,
                 const std::function<void(std::ostream&)>& write_csv) {
  if (format == "json") {
    json doc = summary;
    doc["resolved_config"] = resolved;
    write_text_file(out_path, doc.dump(2) + "\n");
    return;
  }
  std::ostringstream body;
  body << "# resolved_config " << resolved.dump() << "\n";
  body << std::setprecision(9);
  write_csv(body);
  write_text_file(out_path, body.str());
}

std::ofstream open_log(const fs::path& path) {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  std::ofstream log(path);
  if (!log) throw std::runtime_error("cannot write " + path.string());
  return log;
}

template <typename Head>
Index head_parameter_count(Head& head) {
  Index n = 0;
  for (auto& nt : head.parameters()) n += nt.tensor.numel();
  return n;
}

// ---------------------------------------------------------------------------
// synth-data

struct SynthArgs {
  int n = 2700;
  double bpm_min = 60.0;
  double bpm_max = 180.0;
  std::string splits = "2000,500,200";
  std::uint64_t seed = 0;
  std::string out_dir = "corpus";
};

int run_synth(const SynthArgs& a, std::ostream& err) {
  CorpusCounts counts;
  try {
    if (a.n <= 0) throw std::invalid_argument("--n must be positive");
    if (!(a.bpm_min > 0.0) || a.bpm_max < a.bpm_min) {
      throw std::invalid_argument("bpm range needs 0 < --bpm-min <= --bpm-max");
    }
    counts = parse_splits(a.splits, a.n);
  } catch (const std::exception& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  }
  try {
    make_corpus(a.out_dir, counts, a.bpm_min, a.bpm_max, a.seed);
    const json resolved = {{"command", "synth-data"},
                           {"n", a.n},
                           {"bpm_min", a.bpm_min},
                           {"bpm_max", a.bpm_max},
                           {"splits",
                            {{"pretrain", counts.pretrain},
                             {"finetune", counts.finetune},
                             {"eval", counts.eval}}},
                           {"seed", a.seed},
                           {"out_dir", a.out_dir}};
    write_text_file(fs::path(a.out_dir) / "synth_config.json", resolved.dump(2) + "\n");
    err << "wrote " << counts.pretrain << "/" << counts.finetune << "/" << counts.eval
        << " pretrain/finetune/eval clips under " << a.out_dir << "\n";
    return kExitOk;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
}

// ---------------------------------------------------------------------------
// pretrain

struct PretrainArgs {
  std::string manifest;
  std::string out;
  std::string log;
  std::string loss = "main";
  std::string engine = "resample";
  bool deterministic = false;
  SslConfig cfg;
};

int run_pretrain(PretrainArgs a, std::ostream& err) {
  try {
    a.cfg.loss_variant = parse_loss_variant(underscored(a.loss));
    a.cfg.stretch_engine = parse_engine(a.engine);
    if (a.deterministic) a.cfg.workers = 1;
    a.cfg.validate();
  } catch (const std::exception& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    const auto manifest = load_manifest(a.manifest);
    const fs::path out_path(a.out);
    const fs::path log_path = a.log.empty() ? fs::path(a.out + ".log.jsonl")
                                            : fs::path(a.log);
    std::ofstream log = open_log(log_path);

    json resolved = a.cfg.to_json();
    resolved["command"] = "pretrain";
    resolved["workers"] = resolve_worker_count(a.cfg.workers);
    resolved["manifest"] = a.manifest;
    resolved["out"] = a.out;
    log << json{{"resolved_config", resolved}}.dump() << "\n" << std::flush;

    TcnEncoder<float> probe(0, a.cfg.tcn_layers);
    ProjectionHead<float> proj_probe(0);
    err << "pretrain: " << manifest.size() << " clips, loss "
        << to_string(a.cfg.loss_variant) << ", "
        << probe.parameter_count() + head_parameter_count(proj_probe)
        << " trainable parameters\n";

    PretrainResult res = pretrain(manifest, a.cfg, &log, [&](const EpochStats& s) {
      err << "epoch " << s.epoch << "/" << a.cfg.epochs << ": loss " << s.loss_mean
          << ", |z| " << s.z_abs_mean << ", guard hits " << s.guard_hits << " ("
          << s.wallclock_s << "s)\n";
    });
    if (res.skipped_files > 0) {
      err << "skipped " << res.skipped_files << " unreadable files\n";
    }
    if (res.nonfinite_diagnostic) {
      const fs::path diag(a.out + ".diagnostic.json");
      write_text_file(diag, res.nonfinite_diagnostic->dump(2) + "\n");
      err << "numerical failure: non-finite loss; diagnostic written to "
          << diag.string() << "\n";
      return kExitNumerical;
    }
    save_checkpoint(out_path, res.checkpoint);
    err << "checkpoint written to " << out_path.string() << "\n";
    return kExitOk;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
}

// ---------------------------------------------------------------------------
// finetune

struct FinetuneArgs {
  std::string checkpoint;
  std::string manifest;
  std::string out;
  std::string log;
  std::string engine = "resample";
  bool deterministic = false;
  FinetuneConfig cfg;
};

int run_finetune(FinetuneArgs a, std::ostream& err) {
  try {
    a.cfg.stretch_engine = parse_engine(a.engine);
    if (a.deterministic) a.cfg.workers = 1;
    a.cfg.validate();
  } catch (const std::exception& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    const Checkpoint pretrained = load_checkpoint(a.checkpoint);
    const auto manifest = load_manifest(a.manifest);
    const fs::path log_path = a.log.empty() ? fs::path(a.out + ".log.jsonl")
                                            : fs::path(a.log);
    std::ofstream log = open_log(log_path);

    json resolved = a.cfg.to_json();
    resolved["command"] = "finetune";
    resolved["workers"] = resolve_worker_count(a.cfg.workers);
    resolved["checkpoint"] = a.checkpoint;
    resolved["manifest"] = a.manifest;
    resolved["out"] = a.out;
    log << json{{"resolved_config", resolved}}.dump() << "\n" << std::flush;

    TempoClassifierHead<float> head_probe(0);
    err << "finetune: " << manifest.size() << " labeled clips, frozen encoder, "
        << head_parameter_count(head_probe) << " trainable parameters\n";

    FinetuneResult res =
        finetune(pretrained, manifest, a.cfg, &log, [&](const FinetuneEpochStats& s) {
          err << "epoch " << s.epoch << "/" << a.cfg.epochs << ": loss " << s.loss_mean
              << " (" << s.wallclock_s << "s)\n";
        });
    if (res.skipped_files > 0) {
      err << "skipped " << res.skipped_files << " unreadable files\n";
    }
    if (res.skipped_stretches > 0) {
      err << "skipped " << res.skipped_stretches << " label-stretch draws\n";
    }
    if (res.nonfinite_diagnostic) {
      const fs::path diag(a.out + ".diagnostic.json");
      write_text_file(diag, res.nonfinite_diagnostic->dump(2) + "\n");
      err << "numerical failure: non-finite loss; diagnostic written to "
          << diag.string() << "\n";
      return kExitNumerical;
    }
    save_checkpoint(a.out, res.checkpoint);
    err << "checkpoint written to " << a.out << "\n";
    return kExitOk;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
}

// ---------------------------------------------------------------------------
// evaluate / diagnose

struct EvaluateArgs {
  std::string checkpoint;
  std::string manifest;
  std::string out;
  std::string format = "json";
  EvalConfig cfg;
};

json eval_resolved_config(const char* command, const EvaluateArgs& a) {
  return {{"command", command},
          {"checkpoint", a.checkpoint},
          {"manifest", a.manifest},
          {"tolerance", a.cfg.tolerance},
          {"allow_overlap", a.cfg.allow_overlap},
          {"batch_size", a.cfg.batch_size},
          {"workers", resolve_worker_count(a.cfg.workers)},
          {"format", a.format},
          {"out", a.out}};
}

int run_evaluate(const EvaluateArgs& a, std::ostream& err) {
  try {
    a.cfg.validate();
    if (a.format != "json" && a.format != "csv") {
      throw std::invalid_argument("--format must be json or csv");
    }
  } catch (const std::exception& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  }
  try {
    const Checkpoint ckpt = load_checkpoint(a.checkpoint);
    const auto manifest = load_manifest(a.manifest);
    const MetricsReport report = evaluate(ckpt, manifest, a.cfg);
    emit_report(a.format, a.out, eval_resolved_config("evaluate", a),
                report.to_json(),
                [&](std::ostream& o) { report.write_items_csv(o); });
    err << "acc1 " << report.acc1 << ", acc2 " << report.acc2 << " over "
        << report.n_items << " clips (tolerance " << a.cfg.tolerance
        << "); report written to " << a.out << "\n";
    return kExitOk;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
}

int run_diagnose(const EvaluateArgs& a, std::ostream& err) {
  try {
    a.cfg.validate();
    if (a.format != "json" && a.format != "csv") {
      throw std::invalid_argument("--format must be json or csv");
    }
  } catch (const std::exception& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  }
  try {
    const Checkpoint ckpt = load_checkpoint(a.checkpoint);
    const auto manifest = load_manifest(a.manifest);
    const DiagnosticsReport report = pseudo_tempo_diagnostics(ckpt, manifest, a.cfg);
    emit_report(a.format, a.out, eval_resolved_config("diagnose", a),
                report.to_json(),
                [&](std::ostream& o) { report.write_items_csv(o); });
    err << "spearman rho " << report.rho << (report.degenerate ? " (degenerate)" : "")
        << ", median equivariance error " << report.equivariance_median << " over "
        << report.n_items << " clips; report written to " << a.out << "\n";
    return kExitOk;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
}

// ---------------------------------------------------------------------------
// embed

struct EmbedArgs {
  std::string checkpoint;
  std::string manifest;
  std::string out;
  Index batch_size = 16;
  int workers = 0;
};

int run_embed(const EmbedArgs& a, std::ostream& err) {
  try {
    if (a.batch_size < 1) throw std::invalid_argument("--batch-size must be positive");
    if (a.workers < 0) throw std::invalid_argument("--workers must be non-negative");
  } catch (const std::exception& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  }
  try {
    const Checkpoint ckpt = load_checkpoint(a.checkpoint);
    const std::string phase = ckpt.metadata.value("phase", "");
    if (phase != "pretrain") {
      throw CheckpointError("embed: expected a pre-training checkpoint, got phase '" +
                            phase + "'");
    }
    const int layers = checkpoint_tcn_layers(ckpt);
    if (ckpt.fingerprint != pretrain_fingerprint(layers)) {
      throw CheckpointError(
          "embed: checkpoint was written for a different architecture (fingerprint " +
          std::to_string(ckpt.fingerprint) + ")");
    }
    const auto manifest = load_manifest(a.manifest);
    if (manifest.empty()) throw std::invalid_argument("embed: corpus is empty");

    TcnEncoder<float> encoder(0, layers);
    ProjectionHead<float> proj(0);
    auto named = encoder.state_tensors();
    for (auto& nt : proj.parameters()) named.push_back(nt);
    unpack_tensors(ckpt, named);
    encoder.freeze();
    for (auto& nt : proj.parameters()) nt.tensor.node()->requires_grad = false;

    constexpr Index kMelBins = TcnEncoder<float>::kMelBins;
    constexpr Index kDim = TcnEncoder<float>::kChannels;

    struct Prepared {
      bool ok = false;
      ArrayXXf mel;
    };
    const Index n = static_cast<Index>(manifest.size());
    const int workers = resolve_worker_count(a.workers);
    OrderedProducerPool<Prepared> pool(
        n, std::max<Index>(2 * a.batch_size, 2 * workers), workers, [&](Index fi) {
          Prepared out;
          try {
            AudioClip clip = load_audio(manifest[fi].path);
            clip.samples = fit_length(clip.samples, kExcerptSamples);
            out.mel = log_mel_spectrogram(clip).values;
            out.ok = true;
          } catch (const std::exception&) {
            out.ok = false;
          }
          return out;
        });

    std::ostringstream body;
    const json resolved = {{"command", "embed"},     {"checkpoint", a.checkpoint},
                           {"manifest", a.manifest}, {"batch_size", a.batch_size},
                           {"workers", workers},     {"out", a.out}};
    body << "# resolved_config " << resolved.dump() << "\n";
    body << std::setprecision(9) << "clip,z";
    for (Index d = 0; d < kDim; ++d) body << ",h_" << d;
    body << "\n";

    Index rows = 0;
    std::int64_t skipped = 0;
    for (Index pos = 0; pos < n;) {
      const Index want = std::min<Index>(a.batch_size, n - pos);
      std::vector<Index> kept;
      std::vector<ArrayXXf> mels;
      for (Index k = 0; k < want; ++k) {
        Prepared p = pool.take(pos + k);
        if (p.ok) {
          kept.push_back(pos + k);
          mels.push_back(std::move(p.mel));
        } else {
          ++skipped;
          err << "embed: skipping unreadable file " << manifest[pos + k].path.string()
              << "\n";
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
      auto h = encoder.encode(x);          // [b, 16]
      auto z = proj.project(h);            // [b, 1]
      for (Index s = 0; s < b; ++s) {
        body << manifest[kept[s]].path.string() << "," << z.values()[s];
        for (Index d = 0; d < kDim; ++d) body << "," << h.values()[s * kDim + d];
        body << "\n";
        ++rows;
      }
    }
    if (rows == 0) throw std::runtime_error("embed: every corpus clip was unreadable");

    write_text_file(a.out, body.str());
    err << "wrote " << rows << " embeddings to " << a.out;
    if (skipped > 0) err << " (skipped " << skipped << " unreadable files)";
    err << "\n";
    return kExitOk;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
}

// ---------------------------------------------------------------------------
// collapse-demo

struct CollapseArgs {
  std::string manifest;
  std::string out_dir;
  Index epochs = 20;          // main objective
  Index variant_epochs = 5;   // the trivial variants collapse within this window
  double rp = 0.2;
  Index batch_size = 16;
  float lr = 1e-3f;
  std::uint64_t seed = 0;
  int tcn_layers = 8;
  int workers = 0;
  bool aug = false;
  bool deterministic = false;
};

// Thresholds shared with the acceptance harness.
constexpr double kCollapseZ = 0.01;   // mean |z| below this = collapsed
constexpr double kStableZ = 0.1;      // mean |z| above this every epoch = alive
constexpr double kLossRatio = 0.25;   // final loss must undercut this x first loss
constexpr Index kCollapseWindow = 5;  // epochs allowed for the trivial losses to die

int run_collapse_demo(const CollapseArgs& a, std::ostream& err) {
  SslConfig base;
  try {
    base.r_p = a.rp;
    base.batch_size = a.batch_size;
    base.learning_rate = a.lr;
    base.seed = a.seed;
    base.tcn_layers = a.tcn_layers;
    base.workers = a.deterministic ? 1 : a.workers;
    base.audio_augs_enabled = a.aug;
    if (a.epochs < 1 || a.variant_epochs < 1) {
      throw std::invalid_argument("--epochs and --variant-epochs must be positive");
    }
    base.epochs = a.epochs;
    base.validate();
  } catch (const std::exception& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    const auto manifest = load_manifest(a.manifest);
    fs::create_directories(a.out_dir);

    struct Outcome {
      std::string name;
      std::string verdict;
      Index collapse_epoch = 0;  // first epoch with mean |z| < kCollapseZ, or 0
      CollapseMonitor monitor;
      std::int64_t guard_hits = 0;
    };
    std::vector<Outcome> outcomes;

    const std::pair<LossVariant, Index> runs[] = {
        {LossVariant::kMain, a.epochs},
        {LossVariant::kPrime, a.variant_epochs},
        {LossVariant::kDoublePrime, a.variant_epochs}};

    for (const auto& [variant, epochs] : runs) {
      SslConfig cfg = base;
      cfg.loss_variant = variant;
      cfg.epochs = epochs;

      const std::string name = to_string(variant);
      std::ofstream log = open_log(fs::path(a.out_dir) / (name + ".jsonl"));
      json resolved = cfg.to_json();
      resolved["command"] = "collapse-demo";
      resolved["workers"] = resolve_worker_count(cfg.workers);
      resolved["manifest"] = a.manifest;
      log << json{{"resolved_config", resolved}}.dump() << "\n" << std::flush;

      err << "=== loss " << name << " (" << epochs << " epochs, seed " << cfg.seed
          << ") ===\n";
      PretrainResult res = pretrain(manifest, cfg, &log, [&](const EpochStats& s) {
        err << "epoch " << s.epoch << "/" << epochs << ": loss " << s.loss_mean
            << ", |z| " << s.z_abs_mean << ", guard hits " << s.guard_hits << "\n";
      });
      if (res.nonfinite_diagnostic) {
        const fs::path diag = fs::path(a.out_dir) / (name + ".diagnostic.json");
        write_text_file(diag, res.nonfinite_diagnostic->dump(2) + "\n");
        err << "numerical failure in loss " << name << "; diagnostic written to "
            << diag.string() << "\n";
        return kExitNumerical;
      }

      Outcome out;
      out.name = name;
      out.monitor = res.monitor;
      out.guard_hits = res.guard_hits_total;
      for (const EpochStats& s : res.monitor.epochs) {
        if (s.epoch <= kCollapseWindow && s.z_abs_mean < kCollapseZ) {
          out.collapse_epoch = s.epoch;
          break;
        }
      }
      if (variant == LossVariant::kMain) {
        const bool alive = std::all_of(
            res.monitor.epochs.begin(), res.monitor.epochs.end(),
            [](const EpochStats& s) { return s.z_abs_mean > kStableZ; });
        const double first = res.monitor.epochs.front().loss_mean;
        const double last = res.monitor.epochs.back().loss_mean;
        out.verdict = (alive && last < kLossRatio * first) ? "STABLE" : "COLLAPSED";
      } else {
        out.verdict = out.collapse_epoch > 0 ? "COLLAPSED" : "STABLE";
      }
      outcomes.push_back(std::move(out));
    }

    json report;
    report["resolved_config"] = {{"command", "collapse-demo"},
                                 {"manifest", a.manifest},
                                 {"epochs", a.epochs},
                                 {"variant_epochs", a.variant_epochs},
                                 {"r_p", a.rp},
                                 {"batch_size", a.batch_size},
                                 {"learning_rate", a.lr},
                                 {"seed", a.seed},
                                 {"tcn_layers", a.tcn_layers},
                                 {"audio_augs_enabled", a.aug},
                                 {"workers", resolve_worker_count(base.workers)},
                                 {"out_dir", a.out_dir}};
    report["thresholds"] = {{"collapse_z", kCollapseZ},
                            {"stable_z", kStableZ},
                            {"loss_ratio", kLossRatio},
                            {"collapse_window", kCollapseWindow}};
    report["variants"] = json::array();
    err << "\nloss          verdict    final |z|    loss first -> last    guard hits\n";
    for (const Outcome& out : outcomes) {
      const EpochStats& first = out.monitor.epochs.front();
      const EpochStats& last = out.monitor.epochs.back();
      json curves = json::array();
      for (const EpochStats& s : out.monitor.epochs) curves.push_back(s.to_json());
      report["variants"].push_back(
          {{"loss", out.name},
           {"verdict", out.verdict},
           {"collapse_epoch",
            out.collapse_epoch > 0 ? json(out.collapse_epoch) : json(nullptr)},
           {"z_abs_mean_final", last.z_abs_mean},
           {"loss_first", first.loss_mean},
           {"loss_final", last.loss_mean},
           {"guard_hits", out.guard_hits},
           {"epochs", curves}});
      err << std::left << std::setw(14) << out.name << std::setw(11) << out.verdict
          << std::setw(13) << last.z_abs_mean << first.loss_mean << " -> "
          << last.loss_mean << "    " << out.guard_hits << "\n";
    }
    const fs::path report_path = fs::path(a.out_dir) / "collapse_report.json";
    write_text_file(report_path, report.dump(2) + "\n");
    err << "report written to " << report_path.string() << "\n";
    return kExitOk;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& err) {
  CLI::App app{"Equivariant self-supervised tempo representations", "equitempo"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand(
      "synth-data", "Generate the synthetic rhythm corpus with known BPM");
  synth_cmd->add_option("--n", synth.n, "Total clip count")->capture_default_str();
  synth_cmd->add_option("--bpm-min", synth.bpm_min, "Lower BPM bound")
      ->capture_default_str();
  synth_cmd->add_option("--bpm-max", synth.bpm_max, "Upper BPM bound")
      ->capture_default_str();
  synth_cmd
      ->add_option("--splits", synth.splits,
                   "pretrain,finetune,eval as counts summing to --n or fractions "
                   "summing to 1")
      ->capture_default_str();
  synth_cmd->add_option("--seed", synth.seed, "Corpus RNG seed")->capture_default_str();
  synth_cmd->add_option("--out-dir", synth.out_dir, "Corpus root directory")
      ->capture_default_str();

  PretrainArgs pre;
  auto* pre_cmd = app.add_subcommand(
      "pretrain", "Self-supervised pre-training on time-stretched view pairs");
  pre_cmd->add_option("--manifest", pre.manifest, "Unlabeled corpus manifest CSV")
      ->required();
  pre_cmd->add_option("--out", pre.out, "Checkpoint output path")->required();
  pre_cmd->add_option("--rp", pre.cfg.r_p, "Stretch strength: alpha ~ U[1-rp, 1+rp]")
      ->capture_default_str();
  pre_cmd->add_flag("--aug,!--no-aug", pre.cfg.audio_augs_enabled,
                    "Waveform + spectrogram augmentations");
  pre_cmd->add_option("--loss", pre.loss, "main | prime | double-prime")
      ->capture_default_str();
  pre_cmd->add_option("--epochs", pre.cfg.epochs, "Training epochs (0 = init only)")
      ->capture_default_str();
  pre_cmd->add_option("--batch-size", pre.cfg.batch_size, "Clips per batch")
      ->capture_default_str();
  pre_cmd->add_option("--lr", pre.cfg.learning_rate, "Adam learning rate")
      ->capture_default_str();
  pre_cmd->add_option("--seed", pre.cfg.seed, "Run seed")->capture_default_str();
  pre_cmd->add_option("--tcn-layers", pre.cfg.tcn_layers, "Dilated block count")
      ->capture_default_str();
  pre_cmd->add_option("--stretch-engine", pre.engine, "resample | wsola")
      ->capture_default_str();
  pre_cmd
      ->add_option("--workers", pre.cfg.workers,
                   "Producer threads, 0 = auto; never affects results")
      ->capture_default_str();
  pre_cmd->add_flag("--deterministic", pre.deterministic,
                    "Pin workers to 1 (results are seed-deterministic regardless; "
                    "this also fixes log ordering)");
  pre_cmd->add_option("--log", pre.log, "Epoch log JSONL (default: <out>.log.jsonl)");

  FinetuneArgs fine;
  auto* fine_cmd = app.add_subcommand(
      "finetune", "Train the linear tempo classifier on a frozen encoder");
  fine_cmd->add_option("--checkpoint", fine.checkpoint, "Pre-training checkpoint")
      ->required();
  fine_cmd->add_option("--manifest", fine.manifest, "Labeled corpus manifest CSV")
      ->required();
  fine_cmd->add_option("--out", fine.out, "Checkpoint output path")->required();
  fine_cmd
      ->add_option("--rf", fine.cfg.r_f,
                   "Label-stretch strength: alpha ~ U[1-rf, 1+rf]; 0 disables")
      ->capture_default_str();
  fine_cmd->add_option("--epochs", fine.cfg.epochs, "Training epochs")
      ->capture_default_str();
  fine_cmd->add_option("--batch-size", fine.cfg.batch_size, "Clips per batch")
      ->capture_default_str();
  fine_cmd->add_option("--lr", fine.cfg.learning_rate, "Adam learning rate")
      ->capture_default_str();
  fine_cmd->add_option("--seed", fine.cfg.seed, "Run seed")->capture_default_str();
  fine_cmd->add_option("--stretch-engine", fine.engine, "resample | wsola")
      ->capture_default_str();
  fine_cmd->add_flag("--redraw-alpha,!--no-redraw-alpha",
                     fine.cfg.redraw_alpha_each_epoch,
                     "Draw a fresh stretch per clip every epoch");
  fine_cmd
      ->add_option("--workers", fine.cfg.workers,
                   "Producer threads, 0 = auto; never affects results")
      ->capture_default_str();
  fine_cmd->add_flag("--deterministic", fine.deterministic,
                     "Pin workers to 1 (results are seed-deterministic regardless)");
  fine_cmd->add_option("--log", fine.log, "Epoch log JSONL (default: <out>.log.jsonl)");

  EvaluateArgs eval_args;
  auto* eval_cmd = app.add_subcommand(
      "evaluate", "Score Accuracy 1/2 on a corpus disjoint from training");
  eval_cmd->add_option("--checkpoint", eval_args.checkpoint, "Fine-tuned checkpoint")
      ->required();
  eval_cmd->add_option("--manifest", eval_args.manifest, "Labeled corpus manifest CSV")
      ->required();
  eval_cmd->add_option("--out", eval_args.out, "Report output path")->required();
  eval_cmd->add_option("--tolerance", eval_args.cfg.tolerance, "Relative tolerance")
      ->capture_default_str();
  eval_cmd->add_option("--format", eval_args.format, "json | csv (per-item rows)")
      ->capture_default_str();
  eval_cmd->add_flag("--allow-overlap", eval_args.cfg.allow_overlap,
                     "Override the train/eval disjointness guard");
  eval_cmd->add_option("--batch-size", eval_args.cfg.batch_size, "Clips per batch")
      ->capture_default_str();
  eval_cmd->add_option("--workers", eval_args.cfg.workers, "Producer threads, 0 = auto")
      ->capture_default_str();

  EvaluateArgs diag_args;
  auto* diag_cmd = app.add_subcommand(
      "diagnose",
      "Probe a pre-trained embedding: Spearman rho vs BPM and stretch equivariance");
  diag_cmd->add_option("--checkpoint", diag_args.checkpoint, "Pre-training checkpoint")
      ->required();
  diag_cmd->add_option("--manifest", diag_args.manifest, "Labeled corpus manifest CSV")
      ->required();
  diag_cmd->add_option("--out", diag_args.out, "Report output path")->required();
  diag_cmd->add_option("--format", diag_args.format, "json | csv (per-item rows)")
      ->capture_default_str();
  diag_cmd->add_option("--batch-size", diag_args.cfg.batch_size, "Clips per batch")
      ->capture_default_str();
  diag_cmd->add_option("--workers", diag_args.cfg.workers, "Producer threads, 0 = auto")
      ->capture_default_str();

  EmbedArgs embed;
  auto* embed_cmd = app.add_subcommand(
      "embed", "Export per-clip embeddings h and pseudo-tempo z as CSV");
  embed_cmd->add_option("--checkpoint", embed.checkpoint, "Pre-training checkpoint")
      ->required();
  embed_cmd->add_option("--manifest", embed.manifest, "Corpus manifest CSV")
      ->required();
  embed_cmd->add_option("--out", embed.out, "CSV output path")->required();
  embed_cmd->add_option("--batch-size", embed.batch_size, "Clips per batch")
      ->capture_default_str();
  embed_cmd->add_option("--workers", embed.workers, "Producer threads, 0 = auto")
      ->capture_default_str();

  CollapseArgs collapse;
  auto* collapse_cmd = app.add_subcommand(
      "collapse-demo",
      "Pre-train under the main and both trivial losses with a shared seed and "
      "report which ones collapse");
  collapse_cmd->add_option("--manifest", collapse.manifest, "Unlabeled manifest CSV")
      ->required();
  collapse_cmd->add_option("--out-dir", collapse.out_dir, "Report + log directory")
      ->required();
  collapse_cmd->add_option("--epochs", collapse.epochs, "Epochs for the main loss")
      ->capture_default_str();
  collapse_cmd
      ->add_option("--variant-epochs", collapse.variant_epochs,
                   "Epochs for the trivial losses")
      ->capture_default_str();
  collapse_cmd->add_option("--rp", collapse.rp, "Stretch strength")
      ->capture_default_str();
  collapse_cmd->add_option("--batch-size", collapse.batch_size, "Clips per batch")
      ->capture_default_str();
  collapse_cmd->add_option("--lr", collapse.lr, "Adam learning rate")
      ->capture_default_str();
  collapse_cmd->add_option("--seed", collapse.seed, "Shared run seed")
      ->capture_default_str();
  collapse_cmd->add_option("--tcn-layers", collapse.tcn_layers, "Dilated block count")
      ->capture_default_str();
  collapse_cmd->add_flag("--aug,!--no-aug", collapse.aug,
                         "Waveform + spectrogram augmentations (default off)");
  collapse_cmd->add_option("--workers", collapse.workers, "Producer threads, 0 = auto")
      ->capture_default_str();
  collapse_cmd->add_flag("--deterministic", collapse.deterministic,
                         "Pin workers to 1");

  const std::vector<CLI::App*> commands = {synth_cmd, pre_cmd,  fine_cmd,    eval_cmd,
                                           diag_cmd,  embed_cmd, collapse_cmd};
  std::string config_path;
  for (auto* sub : commands) {
    sub->add_option("--config", config_path,
                    "Flat key=value configuration file; flags take precedence");
  }

  const auto parse_or_exit = [&](const std::vector<std::string>& argv)
      -> std::optional<int> {
    try {
      std::vector<std::string> reversed(argv.rbegin(), argv.rend());
      app.parse(reversed);
      return std::nullopt;
    } catch (const CLI::ParseError& e) {
      const int code = app.exit(e, err, err);
      return code == 0 ? std::optional<int>(kExitOk)
                       : std::optional<int>(kExitUsage);
    }
  };

  if (auto code = parse_or_exit(args)) return *code;

  if (!config_path.empty()) {
    CLI::App* sub = nullptr;
    for (auto* s : commands) {
      if (s->parsed()) sub = s;
    }
    std::vector<std::string> extended = args;
    try {
      for (std::string& token : config_tokens(*sub, config_path)) {
        extended.push_back(std::move(token));
      }
    } catch (const std::exception& e) {
      err << "usage error: " << e.what() << "\n";
      return kExitUsage;
    }
    if (extended.size() != args.size()) {
      if (auto code = parse_or_exit(extended)) return *code;
    }
  }

  if (synth_cmd->parsed()) return run_synth(synth, err);
  if (pre_cmd->parsed()) return run_pretrain(pre, err);
  if (fine_cmd->parsed()) return run_finetune(fine, err);
  if (eval_cmd->parsed()) return run_evaluate(eval_args, err);
  if (diag_cmd->parsed()) return run_diagnose(diag_args, err);
  if (embed_cmd->parsed()) return run_embed(embed, err);
  if (collapse_cmd->parsed()) return run_collapse_demo(collapse, err);
  err << "error: no command selected\n";
  return kExitUsage;
}

}  // namespace equitempo
