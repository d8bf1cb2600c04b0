#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "entmask/data.hpp"
#include "entmask/errors.hpp"
#include "entmask/model.hpp"
#include "entmask/rng.hpp"
#include "entmask/vocab.hpp"

namespace entmask {

class SelectionError : public Error {
 public:
  using Error::Error;
};

// Per-position entropies in nats; non-maskable positions (framing, padding)
// carry a negative sentinel that excludes them from every selection rule.
using EntropyVector = std::vector<double>;
constexpr double kEntropySentinel = -1.0;

enum class Strategy { random, high, low, mid, marginal, alternating };

inline Strategy strategy_from_string(const std::string& s) {
  if (s == "random") return Strategy::random;
  if (s == "high") return Strategy::high;
  if (s == "low") return Strategy::low;
  if (s == "mid") return Strategy::mid;
  if (s == "marginal") return Strategy::marginal;
  if (s == "alternating") return Strategy::alternating;
  throw ConfigError("unknown masking strategy '" + s + "'");
}

inline const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::random: return "random";
    case Strategy::high: return "high";
    case Strategy::low: return "low";
    case Strategy::mid: return "mid";
    case Strategy::marginal: return "marginal";
    case Strategy::alternating: return "alternating";
  }
  return "?";
}

struct MaskingConfig {
  std::string strategy = "random";
  double mask_ratio = 0.15;
  bool single_token = false;  // force k = 1 regardless of ratio
  std::string entropy_source = "teacher";  // teacher | self
  int self_start_epoch = 1;   // 0 permits the cold-start variant
  uint64_t strategy_seed = 0;

  void validate() const {
    strategy_from_string(strategy);
    if (mask_ratio <= 0.0 || mask_ratio > 1.0) {
      throw ConfigError("masking: mask_ratio must lie in (0, 1]");
    }
    if (entropy_source != "teacher" && entropy_source != "self") {
      throw ConfigError("masking: entropy_source must be 'teacher' or 'self'");
    }
    if (self_start_epoch < 0) {
      throw ConfigError("masking: self_start_epoch must be >= 0");
    }
  }

  bool needs_entropy() const {
    return strategy_from_string(strategy) != Strategy::random;
  }

  bool needs_teacher() const {
    if (!needs_entropy()) return false;
    return entropy_source == "teacher" || self_start_epoch > 0;
  }
};

inline double entropy_from_logits(const float* logits, int v) {
  double mx = logits[0];
  for (int j = 1; j < v; ++j) mx = std::max<double>(mx, logits[j]);
  double z = 0.0, weighted = 0.0;
  for (int j = 0; j < v; ++j) {
    const double e = std::exp(static_cast<double>(logits[j]) - mx);
    z += e;
    weighted += e * (static_cast<double>(logits[j]) - mx);
  }
  return std::log(z) - weighted / z;
}

// Entropy of the scoring model's prediction at every position of the
// UNMASKED sequence, eval mode.
inline EntropyVector token_entropies(const EncoderModel& scorer, const TokenSequence& ids,
                                     int real_len) {
  const int v = scorer.config().vocab_size;
  for (int id : ids) {
    if (id < 0 || id >= v) {
      throw ConfigError("token id " + std::to_string(id) +
                        " is out of range for the scoring model's vocabulary of " +
                        std::to_string(v));
    }
    if (id == Vocabulary::mask_id) {
      throw ContractError("token_entropies expects the unmasked sequence");
    }
  }
  Tensor logits = scorer.forward_mlm(nullptr, ids, real_len, false, 0);
  EntropyVector out(ids.size(), kEntropySentinel);
  for (int j = 0; j < static_cast<int>(ids.size()); ++j) {
    if (j >= real_len) continue;
    if (!Vocabulary::is_maskable(ids[static_cast<size_t>(j)])) continue;
    out[static_cast<size_t>(j)] =
        entropy_from_logits(logits.data() + static_cast<size_t>(j) * v, v);
  }
  return out;
}

inline std::vector<EntropyVector> token_entropies_batch(const EncoderModel& scorer,
                                                        const Batch& batch) {
  std::vector<EntropyVector> out;
  out.reserve(batch.seqs.size());
  for (int s = 0; s < batch.size(); ++s) {
    out.push_back(token_entropies(scorer, batch.seqs[static_cast<size_t>(s)],
                                  batch.lengths[static_cast<size_t>(s)]));
  }
  return out;
}

inline int maskable_count(const EntropyVector& e) {
  int m = 0;
  for (double v : e) m += v >= 0.0 ? 1 : 0;
  return m;
}

// k = max(1, round-half-up(ratio * maskable)).
inline int mask_budget(int maskable, double mask_ratio) {
  if (maskable < 1) throw ContractError("mask_budget: need at least one maskable position");
  int k = static_cast<int>(std::floor(mask_ratio * maskable + 0.5));
  if (k < 1) k = 1;
  if (k > maskable) k = maskable;
  return k;
}

namespace detail {

// Maskable position indices ordered ascending by entropy, ties by lower
// position. The descending order is NOT the reverse: ties stay
// lowest-position-first in both directions.
inline std::vector<int> entropy_order(const EntropyVector& e, bool descending) {
  std::vector<int> idx;
  for (int i = 0; i < static_cast<int>(e.size()); ++i) {
    if (e[static_cast<size_t>(i)] >= 0.0) idx.push_back(i);
  }
  std::sort(idx.begin(), idx.end(), [&](int a, int b) {
    const double ea = e[static_cast<size_t>(a)], eb = e[static_cast<size_t>(b)];
    if (ea != eb) return descending ? ea > eb : ea < eb;
    return a < b;
  });
  return idx;
}

}  // namespace detail

// Mask positions for one sequence. The rng is consulted only by the random
// baseline and to resolve a directly-passed alternating strategy; entropy
// strategies are pure functions of (entropies, k).
inline std::vector<int> select_mask(const EntropyVector& entropies, int k, Strategy strategy,
                                    Rng* rng = nullptr) {
  const int m = maskable_count(entropies);
  if (k < 1) throw SelectionError("select_mask: k must be >= 1");
  if (k > m) {
    throw SelectionError("select_mask: k = " + std::to_string(k) + " exceeds " +
                         std::to_string(m) + " maskable positions");
  }
  if (strategy == Strategy::alternating) {
    if (!rng) throw SelectionError("select_mask: alternating needs a coin source");
    strategy = rng->coin() ? Strategy::high : Strategy::low;
  }

  std::vector<int> out;
  switch (strategy) {
    case Strategy::random: {
      if (!rng) throw SelectionError("select_mask: random strategy needs an rng");
      std::vector<int> maskable;
      for (int i = 0; i < static_cast<int>(entropies.size()); ++i) {
        if (entropies[static_cast<size_t>(i)] >= 0.0) maskable.push_back(i);
      }
      for (int pick : rng->sample_without_replacement(m, k)) {
        out.push_back(maskable[static_cast<size_t>(pick)]);
      }
      break;
    }
    case Strategy::high: {
      std::vector<int> order = detail::entropy_order(entropies, true);
      out.assign(order.begin(), order.begin() + k);
      break;
    }
    case Strategy::low: {
      std::vector<int> order = detail::entropy_order(entropies, false);
      out.assign(order.begin(), order.begin() + k);
      break;
    }
    case Strategy::mid: {
      std::vector<int> order = detail::entropy_order(entropies, false);
      const int offset = (m - k) / 2;
      out.assign(order.begin() + offset, order.begin() + offset + k);
      break;
    }
    case Strategy::marginal: {
      const int kh = (k + 1) / 2;
      const int kl = k / 2;
      std::vector<int> high_order = detail::entropy_order(entropies, true);
      out.assign(high_order.begin(), high_order.begin() + kh);
      std::vector<char> taken(entropies.size(), 0);
      for (int p : out) taken[static_cast<size_t>(p)] = 1;
      std::vector<int> low_order = detail::entropy_order(entropies, false);
      int added = 0;
      for (int p : low_order) {
        if (added == kl) break;
        if (taken[static_cast<size_t>(p)]) continue;
        out.push_back(p);
        ++added;
      }
      break;
    }
    case Strategy::alternating:
      break;  // resolved above
  }
  std::sort(out.begin(), out.end());
  return out;
}

// Batch-level selection: the alternating coin is flipped once per batch and
// applies to every sequence in it. Returns the mask sets along with the
// strategy the batch actually used.
struct BatchMasks {
  std::vector<std::vector<int>> positions;
  Strategy resolved = Strategy::random;
};

inline BatchMasks select_masks_for_batch(const std::vector<EntropyVector>& entropies,
                                         const std::vector<int>& budgets, Strategy strategy,
                                         Rng& rng) {
  if (entropies.size() != budgets.size()) {
    throw ContractError("select_masks_for_batch: per-sequence budgets required");
  }
  BatchMasks out;
  out.resolved = strategy;
  if (strategy == Strategy::alternating) {
    out.resolved = rng.coin() ? Strategy::high : Strategy::low;
  }
  for (size_t s = 0; s < entropies.size(); ++s) {
    out.positions.push_back(select_mask(entropies[s], budgets[s], out.resolved, &rng));
  }
  return out;
}

struct MaskedSequence {
  TokenSequence ids;          // mask token substituted at the chosen positions
  std::vector<int> positions;  // sorted
  TokenSequence original;
};

inline MaskedSequence apply_mask(const TokenSequence& sequence, const std::vector<int>& positions) {
  MaskedSequence out;
  out.original = sequence;
  out.ids = sequence;
  out.positions = positions;
  std::sort(out.positions.begin(), out.positions.end());
  int prev = -1;
  for (int p : out.positions) {
    if (p < 0 || p >= static_cast<int>(sequence.size())) {
      throw ContractError("apply_mask: position " + std::to_string(p) + " out of range");
    }
    if (p == prev) throw ContractError("apply_mask: duplicate position " + std::to_string(p));
    if (!Vocabulary::is_maskable(sequence[static_cast<size_t>(p)])) {
      throw ContractError("apply_mask: position " + std::to_string(p) + " is not maskable");
    }
    out.ids[static_cast<size_t>(p)] = Vocabulary::mask_id;
    prev = p;
  }
  return out;
}

// Scoring model for the epoch: the teacher until self_start_epoch, the
// student itself afterwards (self mode only).
inline const EncoderModel* entropy_source_for_epoch(const MaskingConfig& config, int epoch,
                                                    const EncoderModel* student,
                                                    const EncoderModel* teacher) {
  config.validate();
  if (config.entropy_source == "teacher" || epoch < config.self_start_epoch) {
    if (!teacher) {
      throw ConfigError("masking needs a teacher model (entropy_source=" +
                        config.entropy_source + ", epoch " + std::to_string(epoch) + ")");
    }
    return teacher;
  }
  if (!student) throw ConfigError("self-masking needs the student model");
  return student;
}

struct MaskTraceRecord {
  int epoch = 0;
  int batch = 0;
  int sequence = 0;
  std::string strategy;
  std::vector<int> positions;
  std::vector<double> entropies;
};

inline void to_json(nlohmann::json& j, const MaskTraceRecord& r) {
  j = nlohmann::json{{"epoch", r.epoch},         {"batch", r.batch},
                     {"sequence", r.sequence},   {"strategy", r.strategy},
                     {"positions", r.positions}, {"entropies", r.entropies}};
}

}  // namespace entmask
