#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "entmask/checkpoint.hpp"
#include "entmask/config.hpp"
#include "entmask/divergence.hpp"
#include "entmask/experiment.hpp"
#include "entmask/probe.hpp"
#include "entmask/train.hpp"

namespace entmask {

inline std::filesystem::path out_root_for(const RunConfig& cfg) {
  if (!cfg.out_root.empty()) return cfg.out_root;
  if (const char* env = std::getenv("ENTMASK_OUT_ROOT"); env != nullptr && *env != '\0') {
    return env;
  }
  return "runs";
}

// Run directories are never reused: an existing one is an error unless the
// caller forces a replacement, in which case the stale tree is dropped so
// reruns cannot mix old and new outputs.
inline std::filesystem::path claim_run_dir(const RunConfig& cfg, bool force) {
  const std::filesystem::path dir = out_root_for(cfg) / cfg.run_id;
  if (std::filesystem::exists(dir)) {
    if (!force) {
      throw ConfigError("run directory already exists: " + dir.string() +
                        " (pass --force to replace it)");
    }
    std::filesystem::remove_all(dir);
  }
  std::filesystem::create_directories(dir);
  return dir;
}

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write output file: " + path.string());
  out << text;
  if (!out) throw DataError("write failure for output file: " + path.string());
}

inline void write_config_echo(const std::filesystem::path& dir, const RunConfig& cfg) {
  write_text(dir / "config.json", cfg.raw.dump(2) + "\n");
}

inline EncoderModel load_teacher(const RunConfig& cfg, const std::string& why) {
  if (cfg.teacher.empty()) {
    throw ConfigError(why + " needs a teacher checkpoint; set 'teacher' in the config or pass "
                            "--teacher");
  }
  return load_checkpoint(cfg.teacher);
}

}  // namespace detail

// Pretrains a reference model with the random baseline and saves it as a
// loadable checkpoint for later entropy scoring and distillation.
inline std::filesystem::path cmd_train_teacher(const RunConfig& cfg, bool force,
                                               std::ostream& out) {
  if (cfg.plan.masking.strategy != "random") {
    throw ConfigError("train-teacher: teachers are pretrained with strategy 'random', got '" +
                      cfg.plan.masking.strategy + "'");
  }
  if (cfg.plan.kd_mode != "off") {
    throw ConfigError("train-teacher: distillation has no place in teacher training");
  }
  if (cfg.plan.holdout_fraction <= 0.0) {
    throw ConfigError("train-teacher: plan.holdout_fraction must be positive to report the "
                      "final held-out loss");
  }

  const Vocabulary vocab = config_vocabulary(cfg);
  const std::vector<TokenSequence> corpus = config_corpus(cfg, vocab);
  EncoderModel model(config_model(cfg, vocab.size()), cfg.model.seed);

  const std::filesystem::path dir = claim_run_dir(cfg, force);
  detail::write_config_echo(dir, cfg);
  std::ofstream metrics(dir / "metrics.jsonl");
  PretrainOptions opts;
  opts.metrics = &metrics;
  const TrainResult result = pretrain(cfg.plan, corpus, model, nullptr, opts);

  const std::filesystem::path ckpt = dir / "teacher.ckpt";
  save_checkpoint(model, ckpt.string());
  out << "teacher checkpoint: " << ckpt.string() << "\n";
  out << "final holdout mlm loss: " << result.epochs.back().holdout_loss << "\n";
  return ckpt;
}

// Runs one pretraining plan, logging step metrics, optional mask traces,
// per-epoch checkpoints, and the final model.
inline std::filesystem::path cmd_pretrain(const RunConfig& cfg, bool force, bool mask_trace,
                                          std::ostream& out) {
  const Vocabulary vocab = config_vocabulary(cfg);
  const std::vector<TokenSequence> corpus = config_corpus(cfg, vocab);
  EncoderModel student(config_model(cfg, vocab.size()), cfg.model.seed);

  std::optional<EncoderModel> teacher;
  if (cfg.plan.needs_teacher()) {
    teacher = detail::load_teacher(cfg, "plan (strategy " + cfg.plan.masking.strategy +
                                            ", kd_mode " + cfg.plan.kd_mode + ")");
  } else if (!cfg.teacher.empty()) {
    teacher = load_checkpoint(cfg.teacher);
  }

  const std::filesystem::path dir = claim_run_dir(cfg, force);
  detail::write_config_echo(dir, cfg);
  std::filesystem::create_directories(dir / "checkpoints");
  std::ofstream metrics(dir / "metrics.jsonl");
  std::ofstream trace;
  PretrainOptions opts;
  opts.metrics = &metrics;
  opts.checkpoint_dir = (dir / "checkpoints").string();
  if (mask_trace) {
    trace.open(dir / "mask-trace.jsonl");
    opts.mask_trace = &trace;
  }

  const TrainResult result =
      pretrain(cfg.plan, corpus, student, teacher ? &*teacher : nullptr, opts);
  save_checkpoint(student, (dir / "final.ckpt").string());

  const EpochSummary& last = result.epochs.back();
  out << "run directory: " << dir.string() << "\n";
  out << "final train mlm loss: " << last.mean_mlm << "\n";
  if (last.has_holdout) out << "final holdout mlm loss: " << last.holdout_loss << "\n";
  return dir;
}

// Fine-tunes the run's final checkpoint on every configured probe task and
// writes per-task reports plus the aggregate mean.
inline std::filesystem::path cmd_evaluate(const RunConfig& cfg,
                                          const std::filesystem::path& run_dir,
                                          std::optional<bool> freeze_override, bool force,
                                          std::ostream& out) {
  const std::filesystem::path ckpt = run_dir / "final.ckpt";
  if (!std::filesystem::exists(ckpt)) {
    throw DataError("no final checkpoint in run directory: " + ckpt.string());
  }
  EncoderModel model = load_checkpoint(ckpt.string());
  const Vocabulary vocab = config_vocabulary(cfg);
  if (vocab.size() != model.config().vocab_size) {
    throw ConfigError("configured vocabulary has " + std::to_string(vocab.size()) +
                      " entries but the checkpoint expects " +
                      std::to_string(model.config().vocab_size));
  }
  const std::vector<ProbeTask> tasks = config_probe_tasks(cfg, vocab);
  const bool freeze = freeze_override.value_or(cfg.probes.freeze);

  const std::filesystem::path eval_dir = run_dir / "eval";
  if (std::filesystem::exists(eval_dir)) {
    if (!force) {
      throw ConfigError("evaluation directory already exists: " + eval_dir.string() +
                        " (pass --force to replace it)");
    }
    std::filesystem::remove_all(eval_dir);
  }
  std::filesystem::create_directories(eval_dir);

  std::vector<ProbeReport> reports;
  for (const ProbeTask& task : tasks) {
    ProbeReport report = evaluate_probe(model, task, freeze, cfg.probes.settings);
    detail::write_text(eval_dir / (task.name + ".json"), nlohmann::json(report).dump(2) + "\n");
    out << "probe " << task.name << ": " << report.mean_accuracy << "\n";
    reports.push_back(std::move(report));
  }
  nlohmann::json summary{{"frozen", freeze},
                         {"tasks", reports},
                         {"mean_accuracy", mean_probe_accuracy(reports)}};
  detail::write_text(eval_dir / "summary.json", summary.dump(2) + "\n");
  out << "mean probe accuracy: " << mean_probe_accuracy(reports) << "\n";
  return eval_dir;
}

// Drives the full strategy grid (or the configured subset) and writes the
// comparison table in both machine and human form.
inline std::filesystem::path cmd_compare(const RunConfig& cfg, bool force, std::ostream& out) {
  std::vector<PlanVariant> variants;
  {
    const std::vector<PlanVariant> grid = standard_variants(cfg.plan);
    if (cfg.compare.variants.empty()) {
      variants = grid;
    } else {
      for (const std::string& name : cfg.compare.variants) {
        for (const PlanVariant& v : grid) {
          if (v.name == name) variants.push_back(v);
        }
      }
    }
  }

  std::optional<EncoderModel> teacher;
  for (const PlanVariant& v : variants) {
    if (v.plan.needs_teacher()) {
      teacher = detail::load_teacher(cfg, "compare variant '" + v.name + "'");
      break;
    }
  }

  const Vocabulary vocab = config_vocabulary(cfg);
  const std::vector<TokenSequence> corpus = config_corpus(cfg, vocab);
  ExperimentSettings settings;
  settings.model = config_model(cfg, vocab.size());
  settings.model_seed = cfg.compare.model_seed;
  settings.run_seeds = cfg.compare.run_seeds;
  settings.probe = cfg.probes.settings;
  settings.freeze_probes = cfg.probes.freeze;
  const std::vector<ProbeTask> tasks = config_probe_tasks(cfg, vocab);

  const std::filesystem::path dir = claim_run_dir(cfg, force);
  detail::write_config_echo(dir, cfg);
  const ComparisonTable table =
      strategy_experiment(variants, corpus, tasks, teacher ? &*teacher : nullptr, settings);
  const std::string text = render_comparison(table);
  detail::write_text(dir / "comparison.json", nlohmann::json(table).dump(2) + "\n");
  detail::write_text(dir / "comparison.txt", text);
  out << text;
  return dir;
}

// Compares two checkpoints parameter by parameter and writes the report.
inline std::filesystem::path cmd_divergence(const std::string& pretrained_path,
                                            const std::string& finetuned_path,
                                            const std::filesystem::path& report_path,
                                            std::ostream& out) {
  for (const std::string& p : {pretrained_path, finetuned_path}) {
    if (!std::filesystem::exists(p)) throw DataError("no such checkpoint: " + p);
  }
  const EncoderModel pretrained = load_checkpoint(pretrained_path);
  const EncoderModel finetuned = load_checkpoint(finetuned_path);
  const DivergenceReport report = weight_divergence(pretrained, finetuned,
                                                    std::filesystem::path(finetuned_path)
                                                        .stem()
                                                        .string());
  detail::write_text(report_path, nlohmann::json(report).dump(2) + "\n");
  for (const auto& [name, pct] : report.components) {
    out << "component " << name << ": " << pct << "%\n";
  }
  out << "divergence report: " << report_path.string() << "\n";
  return report_path;
}

}  // namespace entmask
