#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "entmask/errors.hpp"
#include "entmask/rng.hpp"
#include "entmask/vocab.hpp"

namespace entmask {

struct Batch {
  std::vector<TokenSequence> seqs;  // padded to a common length
  std::vector<int> lengths;         // real length of each sequence, framing included
  int padded_len = 0;

  int size() const { return static_cast<int>(seqs.size()); }
  bool real(int s, int j) const { return j < lengths[static_cast<size_t>(s)]; }
};

// Token streams with controlled predictability. Every position belongs to
// one of three source kinds:
//   adjacent: token is a fixed permutation of the previous token
//   lagged:   token is a different fixed permutation of the token lag steps back
//   noise:    token is drawn uniformly from a (possibly restricted) alphabet
// The constant profile draws the kind per position at random with
// P(adjacent) = predictability and no lagged positions; the banded profile
// assigns kinds by position index so a scoring model's entropy separates
// into stable per-position bands.
struct SyntheticCorpusSpec {
  int content_vocab = 64;
  int num_sequences = 2000;
  int min_len = 12;  // content tokens per sequence, framing excluded
  int max_len = 16;
  double predictability = 0.5;
  std::string profile = "constant";  // constant | banded
  double long_range_fraction = 0.0;  // banded only
  int long_range_lag = 3;
  double noise_alphabet_fraction = 1.0;
  uint64_t seed = 1;

  void validate() const {
    if (content_vocab < 2) throw ConfigError("synthetic corpus: content_vocab must be >= 2");
    if (num_sequences < 1) throw ConfigError("synthetic corpus: num_sequences must be >= 1");
    if (min_len < 1 || max_len < min_len) {
      throw ConfigError("synthetic corpus: need 1 <= min_len <= max_len");
    }
    if (predictability < 0.0 || predictability > 1.0) {
      throw ConfigError("synthetic corpus: predictability must lie in [0, 1]");
    }
    if (profile != "constant" && profile != "banded") {
      throw ConfigError("synthetic corpus: unknown profile '" + profile + "'");
    }
    if (long_range_fraction < 0.0 || predictability + long_range_fraction > 1.0) {
      throw ConfigError("synthetic corpus: predictability + long_range_fraction must lie in [0, 1]");
    }
    if (long_range_lag < 1) throw ConfigError("synthetic corpus: long_range_lag must be >= 1");
    if (noise_alphabet_fraction <= 0.0 || noise_alphabet_fraction > 1.0) {
      throw ConfigError("synthetic corpus: noise_alphabet_fraction must lie in (0, 1]");
    }
  }

  int noise_alphabet() const {
    const int s = static_cast<int>(std::floor(noise_alphabet_fraction * content_vocab + 0.5));
    return s < 1 ? 1 : s;
  }
};

enum class SourceKind { adjacent, lagged, noise };

// Banded kind for 0-based content position j: a golden-ratio lattice spreads
// the kinds evenly over positions while staying a pure function of j.
inline SourceKind source_kind_at(const SyntheticCorpusSpec& spec, int j) {
  if (spec.profile != "banded") {
    throw ContractError("source_kind_at is only defined for the banded profile");
  }
  const double x = std::fmod(static_cast<double>(j) * 0.6180339887498949, 1.0);
  if (x < spec.predictability) return SourceKind::adjacent;
  if (x < spec.predictability + spec.long_range_fraction) return SourceKind::lagged;
  return SourceKind::noise;
}

inline std::vector<int> seeded_permutation(int n, uint64_t seed) {
  std::vector<int> p(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) p[static_cast<size_t>(i)] = i;
  Rng rng(seed);
  rng.shuffle(p);
  return p;
}

inline std::vector<TokenSequence> generate_synthetic_corpus(const SyntheticCorpusSpec& spec) {
  spec.validate();
  const int c0 = Vocabulary::reserved_count;
  const int C = spec.content_vocab;
  const int S = spec.noise_alphabet();
  const std::vector<int> perm_adj = seeded_permutation(C, derive_seed(spec.seed, "perm-adjacent"));
  const std::vector<int> perm_lag = seeded_permutation(C, derive_seed(spec.seed, "perm-lagged"));
  Rng rng(derive_seed(spec.seed, "corpus"));

  std::vector<TokenSequence> corpus;
  corpus.reserve(static_cast<size_t>(spec.num_sequences));
  for (int s = 0; s < spec.num_sequences; ++s) {
    const int len = rng.uniform_int(spec.min_len, spec.max_len);
    TokenSequence seq;
    seq.reserve(static_cast<size_t>(len) + 2);
    seq.push_back(Vocabulary::cls_id);
    std::vector<int> content(static_cast<size_t>(len));
    for (int j = 0; j < len; ++j) {
      SourceKind kind;
      if (spec.profile == "banded") {
        kind = source_kind_at(spec, j);
      } else {
        kind = rng.uniform() < spec.predictability ? SourceKind::adjacent : SourceKind::noise;
      }
      int tok;
      if (kind == SourceKind::adjacent && j >= 1) {
        tok = perm_adj[static_cast<size_t>(content[static_cast<size_t>(j - 1)])];
      } else if (kind == SourceKind::lagged && j >= spec.long_range_lag) {
        tok = perm_lag[static_cast<size_t>(content[static_cast<size_t>(j - spec.long_range_lag)])];
      } else if (kind == SourceKind::adjacent || kind == SourceKind::lagged) {
        // Too close to the sequence start for the rule to apply.
        tok = static_cast<int>(rng.uniform_below(static_cast<uint64_t>(C)));
      } else {
        tok = static_cast<int>(rng.uniform_below(static_cast<uint64_t>(S)));
      }
      content[static_cast<size_t>(j)] = tok;
      seq.push_back(c0 + tok);
    }
    seq.push_back(Vocabulary::sep_id);
    corpus.push_back(std::move(seq));
  }
  return corpus;
}

inline std::vector<TokenSequence> load_text_corpus(const std::string& path,
                                                   const Vocabulary& v,
                                                   int max_len = 128) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open corpus file: " + path);
  std::vector<TokenSequence> corpus;
  std::string line;
  while (std::getline(in, line)) {
    bool blank = true;
    for (char ch : line) {
      if (!std::isspace(static_cast<unsigned char>(ch))) {
        blank = false;
        break;
      }
    }
    if (blank) continue;
    corpus.push_back(tokenize(line, v, max_len));
  }
  if (corpus.empty()) throw DataError("corpus file has no usable lines: " + path);
  return corpus;
}

inline std::vector<Batch> make_batches(const std::vector<TokenSequence>& corpus,
                                       int batch_size, uint64_t shuffle_seed) {
  if (corpus.empty()) throw DataError("make_batches: empty corpus");
  if (batch_size < 1) throw ContractError("make_batches: batch_size must be >= 1");
  std::vector<int> order(corpus.size());
  for (size_t i = 0; i < corpus.size(); ++i) order[i] = static_cast<int>(i);
  Rng rng(shuffle_seed);
  rng.shuffle(order);

  std::vector<Batch> batches;
  for (size_t start = 0; start < order.size(); start += static_cast<size_t>(batch_size)) {
    const size_t end = std::min(order.size(), start + static_cast<size_t>(batch_size));
    Batch b;
    int padded = 0;
    for (size_t i = start; i < end; ++i) {
      const TokenSequence& s = corpus[static_cast<size_t>(order[i])];
      padded = std::max(padded, static_cast<int>(s.size()));
    }
    b.padded_len = padded;
    for (size_t i = start; i < end; ++i) {
      TokenSequence s = corpus[static_cast<size_t>(order[i])];
      b.lengths.push_back(static_cast<int>(s.size()));
      s.resize(static_cast<size_t>(padded), Vocabulary::pad_id);
      b.seqs.push_back(std::move(s));
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

// Deterministic holdout split; the fraction lands in the second half.
inline std::pair<std::vector<TokenSequence>, std::vector<TokenSequence>> split_corpus(
    const std::vector<TokenSequence>& corpus, double holdout_fraction, uint64_t seed) {
  if (holdout_fraction < 0.0 || holdout_fraction >= 1.0) {
    throw ConfigError("split_corpus: holdout fraction must lie in [0, 1)");
  }
  std::vector<int> order(corpus.size());
  for (size_t i = 0; i < corpus.size(); ++i) order[i] = static_cast<int>(i);
  Rng rng(derive_seed(seed, "split"));
  rng.shuffle(order);
  size_t holdout = static_cast<size_t>(std::floor(holdout_fraction * static_cast<double>(corpus.size()) + 0.5));
  if (holdout_fraction > 0.0 && holdout == 0 && corpus.size() > 1) holdout = 1;
  std::vector<TokenSequence> train, val;
  for (size_t i = 0; i < order.size(); ++i) {
    const TokenSequence& s = corpus[static_cast<size_t>(order[i])];
    if (i + holdout < order.size()) {
      train.push_back(s);
    } else {
      val.push_back(s);
    }
  }
  return {std::move(train), std::move(val)};
}

}  // namespace entmask
