// SPDX-License-Identifier: Apache-2.0
//
// Command-line workflow. Every subcommand reads the run configuration, works
// inside one output directory, and reloads its inputs from the checkpoints of
// earlier stages.

#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "bertese/checkpoint.hpp"
#include "bertese/config.hpp"
#include "bertese/dataset_io.hpp"
#include "bertese/evaluation.hpp"
#include "bertese/pipeline.hpp"

namespace bertese::cli {

namespace fs = std::filesystem;
using Real = float;

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitStageFailure = 2;

/// Input required by a subcommand is absent; names the stage that produces it.
class MissingArtifact : public std::runtime_error {
 public:
  MissingArtifact(const fs::path& path, const std::string& stage)
      : std::runtime_error("missing " + path.filename().string() + "; run `" + stage + "` first"), stage_(stage) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

class LockError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Exclusive per-directory lock held for the lifetime of the object.
class DirectoryLock {
 public:
  explicit DirectoryLock(const fs::path& dir) : path_(dir / ".lock") {
    fs::create_directories(dir);
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
      throw LockError("output directory " + dir.string() + " is locked by another invocation (" + path_.string() +
                      ")");
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
    ::close(fd);
  }
  ~DirectoryLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  fs::path path_;
};

struct Artifacts {
  fs::path dir;

  fs::path world() const { return dir / "world"; }
  fs::path config() const { return dir / "config.cfg"; }
  fs::path predictor() const { return dir / "predictor.ckpt"; }
  fs::path identity() const { return dir / "rewriter_identity.ckpt"; }
  fs::path rewriter() const { return dir / "rewriter.ckpt"; }
  fs::path ft() const { return dir / "ft_predictor.ckpt"; }
  fs::path logs() const { return dir / "logs"; }
  fs::path stage_log(const std::string& stage) const { return logs() / (stage + ".jsonl"); }
  fs::path run_log() const { return dir / "run_log.jsonl"; }
  fs::path metrics(const std::string& stage) const { return dir / "metrics" / (stage + ".json"); }
  fs::path eval_json(const std::string& system) const { return dir / ("eval_" + system + ".json"); }
  fs::path eval_csv(const std::string& system) const { return dir / ("eval_" + system + ".csv"); }
  fs::path results() const { return dir / "results.txt"; }
  fs::path ablation_json() const { return dir / "ablation.json"; }
  fs::path ablation_txt() const { return dir / "ablation.txt"; }
  fs::path analysis_json() const { return dir / "analysis.json"; }
  fs::path analysis_txt() const { return dir / "analysis.txt"; }
};

inline const std::vector<std::string>& stage_order() {
  static const std::vector<std::string> order = {"train-predictor", "pretrain-rewriter", "train-bertese",
                                                 "train-ft-baseline", "ablate"};
  return order;
}

inline const std::vector<std::string>& systems() {
  static const std::vector<std::string> s = {"zero-shot", "ft", "bertese"};
  return s;
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Session {
 public:
  Session(TrainingConfig cfg, fs::path dir, bool force, std::ostream& out, bool verbose)
      : cfg_(std::move(cfg)), art_{std::move(dir)}, force_(force), out_(out), verbose_(verbose) {}

  const Artifacts& artifacts() const { return art_; }

  void gen_world() {
    if (!force_ && fs::exists(art_.world() / "world.json") && fs::exists(art_.config())) {
      world();
      out_ << "gen-world: up to date (" << art_.world().string() << ")\n";
      return;
    }
    const auto w = generate_world(world_spec(cfg_));
    save_world(art_.world(), w);
    write_text(art_.config(), config_file_text(cfg_));
    world_ = w;
    out_ << "gen-world: " << w.relations.size() << " relations, " << w.facts.size() << " facts, vocabulary "
         << w.vocab.size() << ", " << w.perturbed_eval().size() << " eval queries\n";
  }

  void train_predictor() {
    if (skip(art_.predictor(), "train-predictor")) return;
    auto log = stage_log("train-predictor");
    const auto r = train_predictor_stage<Real>(world(), cfg_, log);
    save_checkpoint(art_.predictor(), r.model, "predictor");
    write_metrics("train-predictor", {{"canonical_p_at_1", r.canonical_p_at_1},
                                      {"epochs", r.epochs_run},
                                      {"checkpoint_sha256", model_digest(r.model, "predictor")}});
    out_ << "train-predictor: canonical P@1 " << percent(r.canonical_p_at_1) << "% after " << r.epochs_run
         << " epochs\n";
  }

  void pretrain_rewriter() {
    if (skip(art_.identity(), "pretrain-rewriter")) return;
    const auto predictor = load_predictor();
    auto log = stage_log("pretrain-rewriter");
    const auto r = pretrain_rewriter_stage<Real>(predictor, world(), cfg_, log);
    save_checkpoint(art_.identity(), r.model, "rewriter");
    write_metrics("pretrain-rewriter", {{"decode_accuracy", r.decode_accuracy},
                                        {"zero_shot_agreement", r.agreement},
                                        {"epochs", r.epochs_run}});
    out_ << "pretrain-rewriter: held-out decode accuracy " << percent(r.decode_accuracy) << "% after "
         << r.epochs_run << " epochs\n";
  }

  void train_bertese() {
    if (skip(art_.rewriter(), "train-bertese")) return;
    const auto predictor = load_predictor();
    const auto identity = load_rewriter(art_.identity(), "pretrain-rewriter");
    auto log = stage_log("train-bertese");
    const auto r = train_bertese_stage<Real>(identity, predictor, world(), cfg_, log);
    save_checkpoint(art_.rewriter(), r.model, "rewriter");
    write_metrics("train-bertese", {{"initial_p_at_1", r.initial_p_at_1},
                                    {"p_at_1", r.p_at_1},
                                    {"predictor_sha256_before", r.predictor_digest_before},
                                    {"predictor_sha256_after", r.predictor_digest_after}});
    out_ << "train-bertese: eval P@1 " << percent(r.initial_p_at_1) << "% -> " << percent(r.p_at_1) << "%\n";
  }

  void train_ft() {
    if (skip(art_.ft(), "train-ft-baseline")) return;
    const auto predictor = load_predictor();
    auto log = stage_log("train-ft-baseline");
    const auto r = train_ft_baseline<Real>(predictor, world(), cfg_, log);
    save_checkpoint(art_.ft(), r.model, "predictor");
    write_metrics("train-ft-baseline", {{"zero_shot_p_at_1", r.zero_shot_p_at_1}, {"p_at_1", r.p_at_1}});
    out_ << "train-ft-baseline: eval P@1 " << percent(r.zero_shot_p_at_1) << "% -> " << percent(r.p_at_1)
         << "%\n";
  }

  EvalReport evaluate(const std::string& system) {
    const auto& w = world();
    const auto queries = w.perturbed_eval();
    EvalReport report;
    if (system == "zero-shot") {
      report = evaluate_predictor(load_predictor(), queries, "zero-shot");
    } else if (system == "ft") {
      report = evaluate_predictor(load_predictor_from(art_.ft(), "train-ft-baseline"), queries, "ft");
    } else if (system == "bertese") {
      const auto rewriter = load_rewriter(art_.rewriter(), "train-bertese");
      report = evaluate_bertese(rewriter, load_predictor(), queries);
    } else {
      throw ConfigError("system", "unknown system '" + system + "' (expected zero-shot, ft or bertese)");
    }
    report.config_digest = config_digest(cfg_);
    write_text(art_.eval_json(system), report_to_json(report, &w.vocab).dump(1) + "\n");
    write_text(art_.eval_csv(system), report_csv(report, w.vocab));
    write_results_table();
    out_ << "evaluate " << system << ": macro P@1 " << percent(report.macro_p_at_1) << "% (" << report.correct
         << "/" << report.total << ")\n";
    return report;
  }

  std::vector<AblationRow> ablate() {
    if (!force_ && fs::exists(art_.ablation_json())) {
      out_ << "ablate: up to date (use --force to rerun)\n";
      return {};
    }
    const auto predictor = load_predictor();
    const auto identity = load_rewriter(art_.identity(), "pretrain-rewriter");
    auto log = stage_log("ablate");
    const auto rows = run_ablations<Real>(identity, predictor, world(), cfg_, log);
    write_text(art_.ablation_json(), ablation_to_json(rows).dump(1) + "\n");
    write_text(art_.ablation_txt(), ablation_table(rows));
    rebuild_run_log();
    out_ << "ablate:";
    for (const auto& r : rows) out_ << " " << r.name << " " << percent(r.macro_p_at_1) << "%;";
    out_ << "\n";
    return rows;
  }

  void analyze(std::size_t top_k) {
    if (!fs::exists(art_.eval_json("bertese"))) evaluate("bertese");
    const auto report = report_from_json(nlohmann::json::parse(read_text(art_.eval_json("bertese"))));
    const auto a = analyze_rewrites(report, world(), top_k);
    write_text(art_.analysis_json(), analysis_to_json(a, world().vocab).dump(1) + "\n");
    write_text(art_.analysis_txt(), analysis_text(a, world().vocab));
    out_ << "analyze: replacement rate " << percent(a.replacement_rate) << "% over " << a.positions
         << " positions\n";
  }

  void run_all(bool with_ablations) {
    gen_world();
    train_predictor();
    pretrain_rewriter();
    train_bertese();
    train_ft();
    for (const auto& s : systems()) evaluate(s);
    analyze(10);
    if (with_ablations) ablate();
  }

 private:
  const World& world() {
    if (!world_) {
      if (!fs::exists(art_.world() / "world.json")) throw MissingArtifact(art_.world() / "world.json", "gen-world");
      auto w = load_world(art_.world());
      if (world_spec_to_json(w.spec) != world_spec_to_json(world_spec(cfg_))) {
        throw ConfigError("world", "the world in " + art_.world().string() +
                                       " was generated from a different configuration; rerun `gen-world --force`");
      }
      world_ = std::move(w);
    }
    return *world_;
  }

  ModelConfig model_config() { return cfg_.model_config(static_cast<int>(world().vocab.size())); }

  Predictor<Real> load_predictor() { return load_predictor_from(art_.predictor(), "train-predictor"); }

  Predictor<Real> load_predictor_from(const fs::path& path, const std::string& stage) {
    if (!fs::exists(path)) throw MissingArtifact(path, stage);
    return load_checkpoint<Predictor<Real>>(path, "predictor", model_config());
  }

  Rewriter<Real> load_rewriter(const fs::path& path, const std::string& stage) {
    if (!fs::exists(path)) throw MissingArtifact(path, stage);
    return load_checkpoint<Rewriter<Real>>(path, "rewriter", model_config());
  }

  bool skip(const fs::path& checkpoint, const std::string& stage) {
    if (!force_ && fs::exists(checkpoint)) {
      out_ << stage << ": up to date (use --force to rerun)\n";
      return true;
    }
    return false;
  }

  RunLog stage_log(const std::string& stage) {
    fs::create_directories(art_.logs());
    const auto path = art_.stage_log(stage);
    fs::remove(path);
    RunLog log(path);
    if (verbose_) log.set_echo(&out_);
    return log;
  }

  void write_metrics(const std::string& stage, nlohmann::json m) {
    m["stage"] = stage;
    m["config_digest"] = config_digest(cfg_);
    write_text(art_.metrics(stage), m.dump(1) + "\n");
    rebuild_run_log();
  }

  /// run_log.jsonl is the concatenation of the per-stage logs in pipeline order.
  void rebuild_run_log() {
    std::string all;
    for (const auto& s : stage_order())
      if (fs::exists(art_.stage_log(s))) all += read_text(art_.stage_log(s));
    write_text(art_.run_log(), all);
  }

  void write_results_table() {
    std::vector<std::pair<std::string, double>> rows;
    for (const auto& s : systems()) {
      if (!fs::exists(art_.eval_json(s))) continue;
      const auto j = nlohmann::json::parse(read_text(art_.eval_json(s)));
      rows.emplace_back(s, j.at("macro_p_at_1").get<double>());
    }
    write_text(art_.results(), results_table("synthetic (perturbed eval split)", rows));
  }

  TrainingConfig cfg_;
  Artifacts art_;
  bool force_;
  std::ostream& out_;
  bool verbose_;
  std::optional<World> world_;
};

/// Parses argv and runs one subcommand. Returns the process exit status.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Query rewriting for a frozen masked language model"};
  app.require_subcommand(1);
  std::string config_path;
  std::string out_dir = "runs/default";
  std::vector<std::string> overrides;
  bool force = false, verbose = false;
  app.add_option("--config", config_path, "Run configuration file")->check(CLI::ExistingFile);
  app.add_option("--out", out_dir, "Output directory");
  app.add_option("--set", overrides, "Override a config key (dotted key=value)")->allow_extra_args(false);
  app.add_flag("--force", force, "Rerun stages whose artifacts already exist");
  app.add_flag("-v,--verbose", verbose, "Echo the metrics stream");

  std::string system;
  std::size_t top_k = 10;
  bool no_ablate = false;
  auto* gen = app.add_subcommand("gen-world", "Generate the synthetic world and query splits");
  auto* tp = app.add_subcommand("train-predictor", "Pretrain the masked language model");
  auto* pr = app.add_subcommand("pretrain-rewriter", "Identity-pretrain the rewriter");
  auto* tb = app.add_subcommand("train-bertese", "Train the rewriter against the frozen predictor");
  auto* ft = app.add_subcommand("train-ft-baseline", "Fine-tune a copy of the predictor on the rewriter split");
  auto* ev = app.add_subcommand("evaluate", "Evaluate one system on the eval split");
  ev->add_option("--system", system, "zero-shot | ft | bertese")
      ->required()
      ->check(CLI::IsMember({"zero-shot", "ft", "bertese"}));
  auto* ab = app.add_subcommand("ablate", "Train the four loss variants");
  auto* an = app.add_subcommand("analyze", "Analyze the rewrites of the trained rewriter");
  an->add_option("--top-k", top_k, "Number of replacement pairs to list");
  auto* all = app.add_subcommand("run-all", "Run the full pipeline in order");
  all->add_flag("--no-ablate", no_ablate, "Skip the ablation runs");
  for (auto* sub : app.get_subcommands([](const CLI::App*) { return true; })) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    TrainingConfig cfg = config_path.empty() ? TrainingConfig{} : load_config(config_path);
    for (const auto& o : overrides) apply_override(cfg, o);
    validate_config(cfg);
    DirectoryLock lock(out_dir);
    Session session(cfg, out_dir, force, out, verbose);
    if (*gen) session.gen_world();
    if (*tp) session.train_predictor();
    if (*pr) session.pretrain_rewriter();
    if (*tb) session.train_bertese();
    if (*ft) session.train_ft();
    if (*ev) session.evaluate(system);
    if (*ab) session.ablate();
    if (*an) session.analyze(top_k);
    if (*all) session.run_all(!no_ablate);
    return kExitOk;
  } catch (const StageFailure& e) {
    err << "error: stage failed: " << e.what() << "\n";
    return kExitStageFailure;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const MissingArtifact& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
}

}  // namespace bertese::cli
