#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "entmask/checkpoint.hpp"
#include "entmask/data.hpp"
#include "entmask/errors.hpp"
#include "entmask/losses.hpp"
#include "entmask/masking.hpp"
#include "entmask/model.hpp"
#include "entmask/optim.hpp"
#include "entmask/rng.hpp"

namespace entmask {

struct TrainPlan {
  MaskingConfig masking;
  int epochs = 10;
  double learning_rate = 1e-4;
  int batch_size = 32;
  std::string kd_mode = "off";  // off | complete_transfer | transfer_after_init
  double kd_weight = 0.5;
  int early_stopping_patience = 5;
  uint64_t run_seed = 1;
  bool sum_loss = false;  // per-batch sum over masked tokens instead of mean
  bool lr_linear_decay = false;
  double holdout_fraction = 0.05;

  void validate() const {
    masking.validate();
    if (epochs < 1) throw ConfigError("plan: epochs must be >= 1");
    if (learning_rate <= 0.0) throw ConfigError("plan: learning_rate must be positive");
    if (batch_size < 1) throw ConfigError("plan: batch_size must be >= 1");
    if (kd_mode != "off" && kd_mode != "complete_transfer" && kd_mode != "transfer_after_init") {
      throw ConfigError("plan: unknown kd_mode '" + kd_mode + "'");
    }
    if (kd_weight < 0.0 || kd_weight > 1.0) throw ConfigError("plan: kd_weight must lie in [0, 1]");
    if (early_stopping_patience < 1) throw ConfigError("plan: patience must be >= 1");
    if (holdout_fraction < 0.0 || holdout_fraction >= 1.0) {
      throw ConfigError("plan: holdout_fraction must lie in [0, 1)");
    }
  }

  bool needs_teacher() const { return masking.needs_teacher() || kd_mode != "off"; }
};

inline bool kd_active(const std::string& kd_mode, int epoch, int self_start_epoch) {
  if (kd_mode == "off") return false;
  if (kd_mode == "complete_transfer") return true;
  if (kd_mode == "transfer_after_init") return epoch >= self_start_epoch;
  throw ConfigError("unknown kd_mode '" + kd_mode + "'");
}

struct StepRecord {
  int epoch = 0;
  int step = 0;
  double mlm_loss = 0.0;
  bool has_kd = false;
  double kd_loss = 0.0;
  double total_loss = 0.0;
  int masked_tokens = 0;
  std::string entropy_source;  // teacher | self | none
};

inline void to_json(nlohmann::json& j, const StepRecord& r) {
  j = nlohmann::json{{"kind", "step"},   {"epoch", r.epoch},
                     {"step", r.step},   {"mlm_loss", r.mlm_loss},
                     {"total_loss", r.total_loss}, {"masked_tokens", r.masked_tokens},
                     {"entropy_source", r.entropy_source}};
  if (r.has_kd) j["kd_loss"] = r.kd_loss;
}

struct EpochSummary {
  int epoch = 0;
  int steps = 0;
  double mean_total = 0.0;
  double mean_mlm = 0.0;
  bool has_holdout = false;
  double holdout_loss = 0.0;
  std::string entropy_source;
};

inline void to_json(nlohmann::json& j, const EpochSummary& s) {
  j = nlohmann::json{{"kind", "epoch"},           {"epoch", s.epoch},
                     {"steps", s.steps},          {"mean_total", s.mean_total},
                     {"mean_mlm", s.mean_mlm},    {"entropy_source", s.entropy_source}};
  if (s.has_holdout) j["holdout_loss"] = s.holdout_loss;
}

struct TrainResult {
  std::vector<StepRecord> records;
  std::vector<EpochSummary> epochs;
};

class EarlyStopper {
 public:
  explicit EarlyStopper(int patience) : patience_(patience) {
    if (patience < 1) throw ConfigError("early stopping patience must be >= 1");
  }

  // Feed the per-epoch validation metric (higher is better); returns true
  // once the run is exactly `patience` epochs past the best one.
  bool update(double metric, int epoch) {
    if (metric > best_) {
      best_ = metric;
      best_epoch_ = epoch;
    }
    return epoch - best_epoch_ >= patience_;
  }

  double best() const { return best_; }
  int best_epoch() const { return best_epoch_; }

 private:
  int patience_;
  double best_ = -std::numeric_limits<double>::infinity();
  int best_epoch_ = 0;
};

namespace detail {

inline TokenSequence unpadded(const Batch& batch, int s) {
  const TokenSequence& seq = batch.seqs[static_cast<size_t>(s)];
  return TokenSequence(seq.begin(), seq.begin() + batch.lengths[static_cast<size_t>(s)]);
}

inline EntropyVector maskability_map(const TokenSequence& ids) {
  EntropyVector e(ids.size(), kEntropySentinel);
  for (size_t j = 0; j < ids.size(); ++j) {
    if (Vocabulary::is_maskable(ids[j])) e[j] = 0.0;
  }
  return e;
}

inline void require_maskable(const std::vector<TokenSequence>& corpus, const char* what) {
  for (size_t i = 0; i < corpus.size(); ++i) {
    int m = 0;
    for (int id : corpus[i]) m += Vocabulary::is_maskable(id) ? 1 : 0;
    if (m == 0) {
      throw DataError(std::string(what) + " sequence " + std::to_string(i) +
                      " has no maskable tokens");
    }
  }
}

}  // namespace detail

// Mean masked-token loss on a fixed holdout set, eval mode. The mask for
// each holdout sequence is random at ratio 0.15, drawn once from the run
// seed, so the metric stays comparable across epochs and across strategies.
inline double holdout_mlm_loss(const EncoderModel& model,
                               const std::vector<TokenSequence>& holdout, uint64_t run_seed) {
  if (holdout.empty()) throw DataError("holdout evaluation needs at least one sequence");
  double total = 0.0;
  long count = 0;
  for (size_t i = 0; i < holdout.size(); ++i) {
    const TokenSequence& seq = holdout[i];
    EntropyVector map = detail::maskability_map(seq);
    const int m = maskable_count(map);
    Rng rng(derive_seed(run_seed, "holdout-mask", static_cast<uint64_t>(i)));
    std::vector<int> positions = select_mask(map, mask_budget(m, 0.15), Strategy::random, &rng);
    MaskedSequence masked = apply_mask(seq, positions);
    Tensor logits =
        model.forward_mlm(nullptr, masked.ids, static_cast<int>(masked.ids.size()), false, 0);
    Tensor part = mlm_loss(nullptr, logits, seq, positions, true);
    total += part.values()[0];
    count += static_cast<long>(positions.size());
  }
  return total / static_cast<double>(count);
}

struct PretrainOptions {
  std::ostream* metrics = nullptr;     // JSON-lines step records and epoch summaries
  std::ostream* mask_trace = nullptr;  // JSON-lines mask audit records
  std::string checkpoint_dir;          // per-epoch checkpoints when non-empty
  int start_epoch = 0;                 // resume point; epochs below it are skipped
};

inline TrainResult pretrain(const TrainPlan& plan, const std::vector<TokenSequence>& corpus,
                            EncoderModel& student, const EncoderModel* teacher,
                            const PretrainOptions& opts = {}) {
  plan.validate();
  const MaskingConfig& mc = plan.masking;
  if (plan.needs_teacher() && !teacher) {
    throw ConfigError("plan requires a teacher model (strategy " + mc.strategy + ", kd_mode " +
                      plan.kd_mode + ")");
  }
  if (teacher && teacher->config().vocab_size != student.config().vocab_size) {
    throw ConfigError("teacher and student vocabulary sizes disagree");
  }
  if (corpus.empty()) throw DataError("pretrain: empty corpus");
  if (opts.start_epoch < 0 || opts.start_epoch >= plan.epochs) {
    throw ConfigError("pretrain: start_epoch outside [0, epochs)");
  }

  auto [train_set, holdout] = split_corpus(corpus, plan.holdout_fraction, plan.run_seed);
  detail::require_maskable(train_set, "train");
  detail::require_maskable(holdout, "holdout");

  student.set_body_trainable(true);
  for (auto& [name, tensor] : student.params()) {
    if (EncoderModel::is_head_param(name)) tensor.set_requires_grad(false);
  }

  AdamSettings adam;
  adam.learning_rate = plan.learning_rate;
  if (plan.lr_linear_decay) {
    const long steps_per_epoch =
        static_cast<long>((train_set.size() + plan.batch_size - 1) / plan.batch_size);
    adam.total_decay_steps = steps_per_epoch * plan.epochs;
  }
  AdamOptimizer opt(student.trainable_params(), adam);

  const Strategy strategy = strategy_from_string(mc.strategy);
  std::map<TokenSequence, EntropyVector> teacher_cache;
  TrainResult result;

  for (int epoch = opts.start_epoch; epoch < plan.epochs; ++epoch) {
    const EncoderModel* scorer = nullptr;
    std::string source_tag = "none";
    if (mc.needs_entropy()) {
      scorer = entropy_source_for_epoch(mc, epoch, &student, teacher);
      source_tag = scorer == teacher ? "teacher" : "self";
    }
    const bool kd_now = kd_active(plan.kd_mode, epoch, mc.self_start_epoch);

    std::vector<Batch> batches =
        make_batches(train_set, plan.batch_size, derive_seed(plan.run_seed, "shuffle", epoch));
    double epoch_total = 0.0, epoch_mlm = 0.0;
    int steps = 0;

    for (size_t b = 0; b < batches.size(); ++b) {
      const Batch& batch = batches[b];
      Rng strategy_rng(derive_seed(mc.strategy_seed, "strategy", static_cast<uint64_t>(epoch),
                                   static_cast<uint64_t>(b)));

      std::vector<EntropyVector> entropies(static_cast<size_t>(batch.size()));
      std::vector<int> budgets(static_cast<size_t>(batch.size()));
      for (int s = 0; s < batch.size(); ++s) {
        TokenSequence raw = detail::unpadded(batch, s);
        EntropyVector e;
        if (!scorer) {
          e = detail::maskability_map(raw);
        } else if (scorer == teacher) {
          auto hit = teacher_cache.find(raw);
          if (hit == teacher_cache.end()) {
            hit = teacher_cache
                      .emplace(raw, token_entropies(*scorer, raw, static_cast<int>(raw.size())))
                      .first;
          }
          e = hit->second;
        } else {
          e = token_entropies(*scorer, raw, static_cast<int>(raw.size()));
        }
        budgets[static_cast<size_t>(s)] =
            mc.single_token ? 1 : mask_budget(maskable_count(e), mc.mask_ratio);
        e.resize(static_cast<size_t>(batch.padded_len), kEntropySentinel);
        entropies[static_cast<size_t>(s)] = std::move(e);
      }

      BatchMasks masks = select_masks_for_batch(entropies, budgets, strategy, strategy_rng);

      Batch masked_batch = batch;
      long total_masked = 0;
      for (int s = 0; s < batch.size(); ++s) {
        MaskedSequence ms =
            apply_mask(batch.seqs[static_cast<size_t>(s)], masks.positions[static_cast<size_t>(s)]);
        masked_batch.seqs[static_cast<size_t>(s)] = std::move(ms.ids);
        total_masked += static_cast<long>(masks.positions[static_cast<size_t>(s)].size());
      }

      if (opts.mask_trace) {
        for (int s = 0; s < batch.size(); ++s) {
          MaskTraceRecord rec;
          rec.epoch = epoch;
          rec.batch = static_cast<int>(b);
          rec.sequence = s;
          rec.strategy = strategy_name(masks.resolved);
          rec.positions = masks.positions[static_cast<size_t>(s)];
          if (scorer) {
            for (int p : rec.positions) {
              rec.entropies.push_back(entropies[static_cast<size_t>(s)][static_cast<size_t>(p)]);
            }
          }
          *opts.mask_trace << nlohmann::json(rec).dump() << "\n";
        }
      }

      Tape tape;
      std::vector<Tensor> logits =
          forward_mlm_batch(&tape, student, masked_batch, true,
                            derive_seed(plan.run_seed, "dropout", static_cast<uint64_t>(epoch),
                                        static_cast<uint64_t>(b)));

      Tensor mlm_sum;
      for (int s = 0; s < batch.size(); ++s) {
        Tensor part = mlm_loss(&tape, logits[static_cast<size_t>(s)],
                               batch.seqs[static_cast<size_t>(s)],
                               masks.positions[static_cast<size_t>(s)], true);
        mlm_sum = s == 0 ? part : add(&tape, mlm_sum, part);
      }
      Tensor mlm = plan.sum_loss ? mlm_sum
                                 : scale(&tape, mlm_sum, 1.0 / static_cast<double>(total_masked));

      Tensor total = mlm;
      double kd_value = 0.0;
      if (kd_now) {
        if (teacher == nullptr) throw ContractError("distillation step without a teacher");
        std::vector<Tensor> teacher_logits =
            forward_mlm_batch(nullptr, *teacher, masked_batch, false, 0);
        Tensor kd_sum;
        for (int s = 0; s < batch.size(); ++s) {
          Tensor part = kd_loss(&tape, logits[static_cast<size_t>(s)],
                                teacher_logits[static_cast<size_t>(s)],
                                masks.positions[static_cast<size_t>(s)], true);
          kd_sum = s == 0 ? part : add(&tape, kd_sum, part);
        }
        Tensor kd = plan.sum_loss
                        ? kd_sum
                        : scale(&tape, kd_sum, 1.0 / static_cast<double>(total_masked));
        total = combined_loss(&tape, mlm, kd, plan.kd_weight);
        kd_value = kd.values()[0];
      }

      StepRecord rec;
      rec.epoch = epoch;
      rec.step = steps;
      rec.mlm_loss = mlm.values()[0];
      rec.has_kd = kd_now;
      rec.kd_loss = kd_value;
      rec.total_loss = kd_now ? combined_total(rec.mlm_loss, kd_value, plan.kd_weight)
                              : rec.mlm_loss;
      rec.masked_tokens = static_cast<int>(total_masked);
      rec.entropy_source = source_tag;

      if (!std::isfinite(rec.total_loss)) {
        if (opts.metrics) {
          nlohmann::json diag{{"kind", "divergence"},
                              {"epoch", epoch},
                              {"step", steps},
                              {"mlm_loss", rec.mlm_loss},
                              {"kd_loss", rec.kd_loss}};
          *opts.metrics << diag.dump() << "\n";
        }
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + " step " +
                           std::to_string(steps) + ": loss is not finite");
      }

      tape.backward(total);
      opt.step();

      if (opts.metrics) *opts.metrics << nlohmann::json(rec).dump() << "\n";
      result.records.push_back(rec);
      epoch_total += rec.total_loss;
      epoch_mlm += rec.mlm_loss;
      ++steps;
    }

    EpochSummary summary;
    summary.epoch = epoch;
    summary.steps = steps;
    summary.mean_total = epoch_total / steps;
    summary.mean_mlm = epoch_mlm / steps;
    summary.entropy_source = source_tag;
    if (!holdout.empty()) {
      summary.has_holdout = true;
      summary.holdout_loss = holdout_mlm_loss(student, holdout, plan.run_seed);
    }
    if (opts.metrics) *opts.metrics << nlohmann::json(summary).dump() << "\n";
    result.epochs.push_back(summary);

    if (!opts.checkpoint_dir.empty()) {
      save_checkpoint(student,
                      opts.checkpoint_dir + "/epoch-" + std::to_string(epoch) + ".ckpt");
    }
  }
  return result;
}

struct LabeledExample {
  TokenSequence ids;
  int label = -1;
};

struct FinetuneResult {
  std::vector<double> epoch_train_loss;
  std::vector<double> epoch_val_accuracy;
  double final_accuracy = 0.0;
  double best_accuracy = 0.0;
  int best_epoch = 0;
  int epochs_ran = 0;
};

inline double classification_accuracy(const EncoderModel& model,
                                      const std::vector<LabeledExample>& data) {
  if (data.empty()) throw DataError("accuracy needs at least one example");
  int correct = 0;
  for (const LabeledExample& ex : data) {
    Tensor logits =
        model.forward_classify(nullptr, ex.ids, static_cast<int>(ex.ids.size()), false, 0);
    int arg = 0;
    for (int c = 1; c < logits.cols(); ++c) {
      if (logits.at(0, c) > logits.at(0, arg)) arg = c;
    }
    correct += arg == ex.label ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

// Classifier training over the CLS representation. With freeze_body the
// encoder is left untouched and only the head learns; otherwise the whole
// model updates and validation-accuracy early stopping applies.
inline FinetuneResult finetune_classifier(const TrainPlan& plan,
                                          const std::vector<LabeledExample>& data,
                                          EncoderModel& model, bool freeze_body, int epochs) {
  plan.validate();
  if (!model.has_classifier()) throw ConfigError("finetune: model has no classification head");
  if (data.empty()) throw DataError("finetune: empty dataset");
  if (epochs < 1) throw ConfigError("finetune: epochs must be >= 1");
  for (size_t i = 0; i < data.size(); ++i) {
    if (data[i].label < 0 || data[i].label >= model.num_classes()) {
      throw DataError("finetune: example " + std::to_string(i) + " has no valid label");
    }
  }

  std::vector<int> order(data.size());
  for (size_t i = 0; i < data.size(); ++i) order[i] = static_cast<int>(i);
  Rng split_rng(derive_seed(plan.run_seed, "finetune-split"));
  split_rng.shuffle(order);
  size_t val_count = static_cast<size_t>(
      std::floor(plan.holdout_fraction * static_cast<double>(data.size()) + 0.5));
  if (plan.holdout_fraction > 0.0 && val_count == 0 && data.size() > 1) val_count = 1;
  std::vector<LabeledExample> train_set, val_set;
  for (size_t i = 0; i < order.size(); ++i) {
    (i + val_count < order.size() ? train_set : val_set)
        .push_back(data[static_cast<size_t>(order[i])]);
  }

  model.set_body_trainable(!freeze_body);
  for (auto& [name, tensor] : model.params()) {
    if (name.rfind("mlm_head.", 0) == 0) tensor.set_requires_grad(false);
  }
  AdamSettings adam;
  adam.learning_rate = plan.learning_rate;
  if (plan.lr_linear_decay) {
    const long steps_per_epoch =
        static_cast<long>((train_set.size() + plan.batch_size - 1) / plan.batch_size);
    adam.total_decay_steps = steps_per_epoch * epochs;
  }
  AdamOptimizer opt(model.trainable_params(), adam);
  EarlyStopper stopper(plan.early_stopping_patience);

  FinetuneResult result;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(plan.run_seed, "finetune-shuffle", static_cast<uint64_t>(epoch)));
    std::vector<int> idx(train_set.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    shuffle_rng.shuffle(idx);

    double epoch_loss = 0.0;
    int steps = 0;
    for (size_t start = 0; start < idx.size(); start += static_cast<size_t>(plan.batch_size)) {
      const size_t stop = std::min(idx.size(), start + static_cast<size_t>(plan.batch_size));
      Tape tape;
      Tensor loss_sum;
      const uint64_t seed = derive_seed(plan.run_seed, "finetune-dropout",
                                        static_cast<uint64_t>(epoch), static_cast<uint64_t>(start));
      for (size_t i = start; i < stop; ++i) {
        const LabeledExample& ex = train_set[static_cast<size_t>(idx[i])];
        Tensor logits = model.forward_classify(&tape, ex.ids, static_cast<int>(ex.ids.size()),
                                               true, mix_seed(seed ^ static_cast<uint64_t>(i)));
        Tensor part = cross_entropy(&tape, logits, {ex.label});
        loss_sum = i == start ? part : add(&tape, loss_sum, part);
      }
      Tensor loss = scale(&tape, loss_sum, 1.0 / static_cast<double>(stop - start));
      const double value = loss.values()[0];
      if (!std::isfinite(value)) {
        throw NumericError("fine-tuning diverged at epoch " + std::to_string(epoch));
      }
      tape.backward(loss);
      opt.step();
      epoch_loss += value;
      ++steps;
    }
    result.epoch_train_loss.push_back(steps ? epoch_loss / steps : 0.0);

    const double metric = classification_accuracy(model, val_set.empty() ? train_set : val_set);
    result.epoch_val_accuracy.push_back(metric);
    result.final_accuracy = metric;
    result.epochs_ran = epoch + 1;
    if (stopper.update(metric, epoch)) break;
  }
  result.best_accuracy = stopper.best();
  result.best_epoch = stopper.best_epoch();
  return result;
}

}  // namespace entmask
