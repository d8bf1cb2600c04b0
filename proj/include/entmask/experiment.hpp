#pragma once

#include <algorithm>
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "entmask/probe.hpp"
#include "entmask/train.hpp"

namespace entmask {

struct PlanVariant {
  std::string name;
  TrainPlan plan;
};

// The full experiment grid from one base plan: the random baseline, the five
// entropy strategies under a teacher, self-masking with and without warmup,
// and the two distillation schedules on top of warmced self-masking.
inline std::vector<PlanVariant> standard_variants(const TrainPlan& base) {
  auto with = [&base](const std::string& name, const std::string& strategy,
                      const std::string& source, int self_start, const std::string& kd) {
    TrainPlan plan = base;
    plan.masking.strategy = strategy;
    plan.masking.entropy_source = source;
    plan.masking.self_start_epoch = self_start;
    plan.kd_mode = kd;
    return PlanVariant{name, plan};
  };
  const int warm = std::max(1, base.masking.self_start_epoch);
  return {
      with("baseline", "random", "teacher", warm, "off"),
      with("high", "high", "teacher", warm, "off"),
      with("low", "low", "teacher", warm, "off"),
      with("mid", "mid", "teacher", warm, "off"),
      with("marginal", "marginal", "teacher", warm, "off"),
      with("alternating", "alternating", "teacher", warm, "off"),
      with("self-cold", "high", "self", 0, "off"),
      with("self-init", "high", "self", warm, "off"),
      with("kd-complete", "high", "self", warm, "complete_transfer"),
      with("kd-init", "high", "self", warm, "transfer_after_init"),
  };
}

struct ExperimentSettings {
  EncoderConfig model;
  uint64_t model_seed = 1;
  std::vector<uint64_t> run_seeds = {1, 2};
  ProbeSettings probe;
  bool freeze_probes = true;

  void validate() const {
    model.validate();
    probe.validate();
    if (run_seeds.empty()) throw ConfigError("experiment: need at least one run seed");
  }
};

struct CellScore {
  double mean = 0.0;
  std::vector<double> per_seed;
};

struct ComparisonRow {
  std::string variant;
  std::string strategy;
  std::vector<CellScore> tasks;
  CellScore total;
  CellScore holdout_loss;
};

struct ComparisonTable {
  std::vector<std::string> task_names;
  std::vector<uint64_t> seeds;
  std::vector<ComparisonRow> rows;
};

inline void to_json(nlohmann::json& j, const CellScore& c) {
  j = nlohmann::json{{"mean", c.mean}, {"per_seed", c.per_seed}};
}

inline void to_json(nlohmann::json& j, const ComparisonRow& r) {
  j = nlohmann::json{{"variant", r.variant},
                     {"strategy", r.strategy},
                     {"tasks", r.tasks},
                     {"total", r.total},
                     {"holdout_loss", r.holdout_loss}};
}

inline void to_json(nlohmann::json& j, const ComparisonTable& t) {
  j = nlohmann::json{{"task_names", t.task_names}, {"seeds", t.seeds}, {"rows", t.rows}};
}

namespace detail {

inline void require_comparable(const std::vector<PlanVariant>& variants) {
  if (variants.size() < 2) throw ConfigError("experiment: need at least two plan variants");
  const TrainPlan& a = variants.front().plan;
  for (const PlanVariant& v : variants) {
    v.plan.validate();
    const TrainPlan& b = v.plan;
    const bool same = a.epochs == b.epochs && a.learning_rate == b.learning_rate &&
                      a.batch_size == b.batch_size &&
                      a.early_stopping_patience == b.early_stopping_patience &&
                      a.run_seed == b.run_seed && a.sum_loss == b.sum_loss &&
                      a.lr_linear_decay == b.lr_linear_decay &&
                      a.holdout_fraction == b.holdout_fraction &&
                      a.masking.mask_ratio == b.masking.mask_ratio &&
                      a.masking.single_token == b.masking.single_token;
    if (!same) {
      throw ConfigError("experiment: variant '" + v.name +
                        "' differs from the first variant beyond strategy and distillation");
    }
  }
  if (a.holdout_fraction <= 0.0) {
    throw ConfigError("experiment: plans need a holdout fraction for the loss column");
  }
}

inline double mean_of(const std::vector<double>& xs) {
  double sum = 0.0;
  for (double x : xs) sum += x;
  return sum / static_cast<double>(xs.size());
}

}  // namespace detail

// Pretrains one student per variant and run seed, fine-tunes every probe on
// the result, and assembles the score grid. Each run owns a fresh model, so
// rows are independent and the table is a pure function of its inputs.
inline ComparisonTable strategy_experiment(const std::vector<PlanVariant>& variants,
                                           const std::vector<TokenSequence>& corpus,
                                           const std::vector<ProbeTask>& tasks,
                                           const EncoderModel* teacher,
                                           const ExperimentSettings& settings) {
  settings.validate();
  detail::require_comparable(variants);
  if (tasks.empty()) throw ConfigError("experiment: need at least one probe task");
  for (const ProbeTask& task : tasks) task.validate();
  for (const PlanVariant& v : variants) {
    if (v.plan.needs_teacher() && teacher == nullptr) {
      throw ConfigError("experiment: variant '" + v.name + "' needs a teacher model");
    }
  }

  ComparisonTable table;
  for (const ProbeTask& task : tasks) table.task_names.push_back(task.name);
  table.seeds = settings.run_seeds;

  for (const PlanVariant& variant : variants) {
    ComparisonRow row;
    row.variant = variant.name;
    row.strategy = variant.plan.masking.strategy;
    row.tasks.resize(tasks.size());

    for (uint64_t seed : settings.run_seeds) {
      TrainPlan plan = variant.plan;
      plan.run_seed = seed;
      EncoderModel student(settings.model, derive_seed(settings.model_seed, "experiment-init", seed));
      TrainResult trained = pretrain(plan, corpus, student, teacher);
      const EpochSummary& last = trained.epochs.back();
      if (!last.has_holdout) {
        throw DataError("experiment: corpus too small for a holdout split");
      }
      row.holdout_loss.per_seed.push_back(last.holdout_loss);

      double seed_total = 0.0;
      for (size_t t = 0; t < tasks.size(); ++t) {
        ProbeReport report =
            evaluate_probe(student, tasks[t], settings.freeze_probes, settings.probe);
        row.tasks[t].per_seed.push_back(report.mean_accuracy);
        seed_total += report.mean_accuracy;
      }
      row.total.per_seed.push_back(seed_total / static_cast<double>(tasks.size()));
    }

    for (CellScore& cell : row.tasks) cell.mean = detail::mean_of(cell.per_seed);
    row.total.mean = detail::mean_of(row.total.per_seed);
    row.holdout_loss.mean = detail::mean_of(row.holdout_loss.per_seed);
    table.rows.push_back(std::move(row));
  }
  return table;
}

// Fixed-width text rendering of the score grid, means only.
inline std::string render_comparison(const ComparisonTable& table) {
  std::vector<std::vector<std::string>> grid;
  std::vector<std::string> header = {"variant"};
  for (const std::string& t : table.task_names) header.push_back(t);
  header.push_back("Total");
  header.push_back("holdout_mlm");
  grid.push_back(header);
  char buf[32];
  for (const ComparisonRow& row : table.rows) {
    std::vector<std::string> line = {row.variant};
    for (const CellScore& cell : row.tasks) {
      std::snprintf(buf, sizeof(buf), "%.4f", cell.mean);
      line.push_back(buf);
    }
    std::snprintf(buf, sizeof(buf), "%.4f", row.total.mean);
    line.push_back(buf);
    std::snprintf(buf, sizeof(buf), "%.4f", row.holdout_loss.mean);
    line.push_back(buf);
    grid.push_back(line);
  }

  std::vector<size_t> width(grid[0].size(), 0);
  for (const auto& line : grid) {
    for (size_t c = 0; c < line.size(); ++c) width[c] = std::max(width[c], line[c].size());
  }
  std::string out;
  for (const auto& line : grid) {
    for (size_t c = 0; c < line.size(); ++c) {
      out += line[c];
      if (c + 1 < line.size()) out.append(width[c] - line[c].size() + 2, ' ');
    }
    out += '\n';
  }
  return out;
}

}  // namespace entmask
