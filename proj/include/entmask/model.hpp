#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "entmask/autograd.hpp"
#include "entmask/data.hpp"
#include "entmask/errors.hpp"
#include "entmask/rng.hpp"
#include "entmask/tensor.hpp"

namespace entmask {

struct EncoderConfig {
  int num_layers = 2;
  int hidden_dim = 64;
  int num_heads = 2;
  int ffn_dim = 256;
  int vocab_size = 0;
  int max_position = 128;
  double dropout_rate = 0.1;
  bool tie_embeddings = false;
  std::string activation = "gelu";  // gelu | relu

  void validate() const {
    if (num_layers < 1 || hidden_dim < 1 || num_heads < 1 || ffn_dim < 1 ||
        vocab_size < 1 || max_position < 1) {
      throw ConfigError("encoder config: all counts must be >= 1");
    }
    if (hidden_dim % num_heads != 0) {
      throw ConfigError("encoder config: hidden_dim " + std::to_string(hidden_dim) +
                        " not divisible by num_heads " + std::to_string(num_heads));
    }
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
      throw ConfigError("encoder config: dropout_rate must lie in [0, 1)");
    }
    if (activation != "gelu" && activation != "relu") {
      throw ConfigError("encoder config: unknown activation '" + activation + "'");
    }
  }

  int head_dim() const { return hidden_dim / num_heads; }

  bool operator==(const EncoderConfig& o) const {
    return num_layers == o.num_layers && hidden_dim == o.hidden_dim &&
           num_heads == o.num_heads && ffn_dim == o.ffn_dim &&
           vocab_size == o.vocab_size && max_position == o.max_position &&
           dropout_rate == o.dropout_rate && tie_embeddings == o.tie_embeddings &&
           activation == o.activation;
  }
};

// The named presets from the source model family plus desk-scale ones that
// actually train in minutes on a CPU core. ffn defaults to 4x hidden.
inline EncoderConfig encoder_preset(const std::string& name, int vocab_size) {
  EncoderConfig c;
  c.vocab_size = vocab_size;
  if (name == "desk") {
    c.num_layers = 2;
    c.hidden_dim = 64;
    c.num_heads = 2;
    c.ffn_dim = 256;
  } else if (name == "desk-4x128") {
    c.num_layers = 4;
    c.hidden_dim = 128;
    c.num_heads = 4;
    c.ffn_dim = 512;
  } else if (name == "bertlet") {
    c.num_layers = 4;
    c.hidden_dim = 512;
    c.num_heads = 8;
    c.ffn_dim = 2048;
  } else if (name == "bert-base") {
    c.num_layers = 12;
    c.hidden_dim = 768;
    c.num_heads = 12;
    c.ffn_dim = 3072;
  } else {
    throw ConfigError("unknown encoder preset '" + name + "'");
  }
  return c;
}

// Post-norm transformer encoder with learned absolute positions, an MLM head
// (transform + norm + vocabulary projection) and an optional classifier over
// the cls hidden state.
class EncoderModel {
 public:
  EncoderModel(EncoderConfig cfg, uint64_t init_seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(derive_seed(init_seed, "init"));
    const int H = cfg_.hidden_dim, F = cfg_.ffn_dim, V = cfg_.vocab_size;
    add_weight(rng, "embeddings.token", {V, H});
    add_weight(rng, "embeddings.position", {cfg_.max_position, H});
    add_norm("embeddings.norm");
    for (int l = 0; l < cfg_.num_layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      add_weight(rng, p + "attn.wq", {H, H});
      add_bias_param(p + "attn.bq", H);
      add_weight(rng, p + "attn.wk", {H, H});
      add_bias_param(p + "attn.bk", H);
      add_weight(rng, p + "attn.wv", {H, H});
      add_bias_param(p + "attn.bv", H);
      add_weight(rng, p + "attn.wo", {H, H});
      add_bias_param(p + "attn.bo", H);
      add_norm(p + "attn.norm");
      add_weight(rng, p + "ffn.w1", {H, F});
      add_bias_param(p + "ffn.b1", F);
      add_weight(rng, p + "ffn.w2", {F, H});
      add_bias_param(p + "ffn.b2", H);
      add_norm(p + "ffn.norm");
    }
    add_weight(rng, "mlm_head.transform.w", {H, H});
    add_bias_param("mlm_head.transform.b", H);
    add_norm("mlm_head.norm");
    if (!cfg_.tie_embeddings) {
      add_weight(rng, "mlm_head.decoder.w", {H, V});
    }
    add_bias_param("mlm_head.decoder.b", V);
  }

  const EncoderConfig& config() const { return cfg_; }

  const std::vector<std::pair<std::string, Tensor>>& params() const { return params_; }

  bool has_param(const std::string& name) const { return index_.count(name) > 0; }

  const Tensor& param(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("no parameter named '" + name + "'");
    return params_[it->second].second;
  }

  int64_t parameter_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : params_) {
      (void)name;
      n += t.numel();
    }
    return n;
  }

  void attach_classifier(int num_classes, uint64_t seed) {
    if (num_classes < 2) throw ConfigError("classifier needs at least 2 classes");
    if (has_classifier()) throw ContractError("classifier already attached");
    Rng rng(derive_seed(seed, "classifier-init"));
    add_weight(rng, "classifier.w", {cfg_.hidden_dim, num_classes});
    add_bias_param("classifier.b", num_classes);
  }

  bool has_classifier() const { return has_param("classifier.w"); }

  int num_classes() const {
    if (!has_classifier()) throw ConfigError("no classification head attached");
    return param("classifier.w").cols();
  }

  static bool is_head_param(const std::string& name) {
    return name.rfind("classifier.", 0) == 0;
  }

  void set_trainable(bool trainable) {
    for (auto& [name, t] : params_) {
      (void)name;
      t.set_requires_grad(trainable);
    }
  }

  void set_body_trainable(bool trainable) {
    for (auto& [name, t] : params_) {
      if (!is_head_param(name)) t.set_requires_grad(trainable);
    }
  }

  std::vector<Tensor> trainable_params() const {
    std::vector<Tensor> out;
    for (const auto& [name, t] : params_) {
      (void)name;
      if (t.requires_grad()) out.push_back(t);
    }
    return out;
  }

  EncoderModel clone() const {
    EncoderModel copy(*this);
    copy.params_.clear();
    copy.index_.clear();
    for (const auto& [name, t] : params_) {
      Tensor fresh = Tensor::from_values(t.dims(), t.values(), t.requires_grad());
      copy.index_[name] = copy.params_.size();
      copy.params_.emplace_back(name, fresh);
    }
    return copy;
  }

  // Hidden states [padded_len, H] for one sequence. Pad keys are hidden from
  // attention via a large negative score bias; pad rows still flow through
  // the stack but nothing downstream reads them.
  Tensor encode(Tape* tape, const TokenSequence& ids, int real_len,
                bool train_mode, uint64_t dropout_seed) const {
    const int L = static_cast<int>(ids.size());
    if (L > cfg_.max_position) {
      throw DataError("sequence length " + std::to_string(L) +
                      " exceeds max_position " + std::to_string(cfg_.max_position) +
                      "; truncate before the forward pass");
    }
    if (real_len < 1 || real_len > L) {
      throw ContractError("encode: real_len out of range");
    }
    const int H = cfg_.hidden_dim;
    uint64_t drop_counter = 0;
    auto next_drop = [&]() { return mix_seed(dropout_seed ^ ++drop_counter); };
    auto maybe_dropout = [&](const Tensor& t) {
      if (!train_mode || cfg_.dropout_rate == 0.0) return t;
      return dropout(tape, t, cfg_.dropout_rate, next_drop());
    };

    std::vector<int> positions(static_cast<size_t>(L));
    for (int j = 0; j < L; ++j) positions[static_cast<size_t>(j)] = j;
    Tensor x = add(tape, gather_rows(tape, param("embeddings.token"), ids),
                   gather_rows(tape, param("embeddings.position"), positions));
    x = layer_norm(tape, x, param("embeddings.norm.gamma"), param("embeddings.norm.beta"));
    x = maybe_dropout(x);

    Tensor attn_bias = Tensor::zeros({L, L});
    for (int i = 0; i < L; ++i) {
      for (int j = real_len; j < L; ++j) attn_bias.at(i, j) = -1e9f;
    }

    const int dh = cfg_.head_dim();
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int l = 0; l < cfg_.num_layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      Tensor q = linear(tape, x, param(p + "attn.wq"), param(p + "attn.bq"));
      Tensor k = linear(tape, x, param(p + "attn.wk"), param(p + "attn.bk"));
      Tensor v = linear(tape, x, param(p + "attn.wv"), param(p + "attn.bv"));
      std::vector<Tensor> heads;
      for (int h = 0; h < cfg_.num_heads; ++h) {
        Tensor qh = slice_cols(tape, q, h * dh, (h + 1) * dh);
        Tensor kh = slice_cols(tape, k, h * dh, (h + 1) * dh);
        Tensor vh = slice_cols(tape, v, h * dh, (h + 1) * dh);
        Tensor scores = scale(tape, matmul(tape, qh, transpose(tape, kh)), inv_sqrt_dh);
        scores = add(tape, scores, attn_bias);
        Tensor weights = maybe_dropout(softmax_rows(tape, scores));
        heads.push_back(matmul(tape, weights, vh));
      }
      Tensor attn_out = concat_cols(tape, heads);
      attn_out = linear(tape, attn_out, param(p + "attn.wo"), param(p + "attn.bo"));
      attn_out = maybe_dropout(attn_out);
      x = layer_norm(tape, add(tape, x, attn_out), param(p + "attn.norm.gamma"),
                     param(p + "attn.norm.beta"));
      Tensor hmid = linear(tape, x, param(p + "ffn.w1"), param(p + "ffn.b1"));
      hmid = cfg_.activation == "gelu" ? gelu(tape, hmid) : relu(tape, hmid);
      Tensor ffn_out = linear(tape, hmid, param(p + "ffn.w2"), param(p + "ffn.b2"));
      ffn_out = maybe_dropout(ffn_out);
      x = layer_norm(tape, add(tape, x, ffn_out), param(p + "ffn.norm.gamma"),
                     param(p + "ffn.norm.beta"));
    }
    return x;
  }

  // Per-position vocabulary logits [padded_len, V].
  Tensor mlm_logits(Tape* tape, const Tensor& hidden) const {
    Tensor t = linear(tape, hidden, param("mlm_head.transform.w"), param("mlm_head.transform.b"));
    t = cfg_.activation == "gelu" ? gelu(tape, t) : relu(tape, t);
    t = layer_norm(tape, t, param("mlm_head.norm.gamma"), param("mlm_head.norm.beta"));
    Tensor decoder = cfg_.tie_embeddings ? transpose(tape, param("embeddings.token"))
                                         : param("mlm_head.decoder.w");
    return add_bias(tape, matmul(tape, t, decoder), param("mlm_head.decoder.b"));
  }

  Tensor forward_mlm(Tape* tape, const TokenSequence& ids, int real_len,
                     bool train_mode, uint64_t dropout_seed) const {
    return mlm_logits(tape, encode(tape, ids, real_len, train_mode, dropout_seed));
  }

  // Class logits [1, num_classes] from the cls position.
  Tensor classify_logits(Tape* tape, const Tensor& hidden) const {
    if (!has_classifier()) throw ConfigError("no classification head attached");
    Tensor pooled = gather_rows(tape, hidden, {0});
    return linear(tape, pooled, param("classifier.w"), param("classifier.b"));
  }

  Tensor forward_classify(Tape* tape, const TokenSequence& ids, int real_len,
                          bool train_mode, uint64_t dropout_seed) const {
    return classify_logits(tape, encode(tape, ids, real_len, train_mode, dropout_seed));
  }

 private:
  void add_param(const std::string& name, Tensor t) {
    index_[name] = params_.size();
    params_.emplace_back(name, std::move(t));
  }

  void add_weight(Rng& rng, const std::string& name, std::vector<int> dims) {
    std::vector<float> v(static_cast<size_t>(numel_of(dims)));
    for (float& x : v) x = static_cast<float>(rng.truncated_normal(0.02));
    add_param(name, Tensor::from_values(std::move(dims), std::move(v), true));
  }

  void add_bias_param(const std::string& name, int n) {
    add_param(name, Tensor::zeros({n}, true));
  }

  void add_norm(const std::string& prefix) {
    std::vector<float> ones(static_cast<size_t>(cfg_.hidden_dim), 1.0f);
    add_param(prefix + ".gamma",
              Tensor::from_values({cfg_.hidden_dim}, std::move(ones), true));
    add_bias_param(prefix + ".beta", cfg_.hidden_dim);
  }

  EncoderConfig cfg_;
  std::vector<std::pair<std::string, Tensor>> params_;
  std::unordered_map<std::string, size_t> index_;
};

// Convenience batch drivers; one tape covers them all when training.
inline std::vector<Tensor> forward_mlm_batch(Tape* tape, const EncoderModel& model,
                                             const Batch& batch, bool train_mode,
                                             uint64_t dropout_seed) {
  std::vector<Tensor> out;
  out.reserve(batch.seqs.size());
  for (int s = 0; s < batch.size(); ++s) {
    out.push_back(model.forward_mlm(tape, batch.seqs[static_cast<size_t>(s)],
                                    batch.lengths[static_cast<size_t>(s)], train_mode,
                                    mix_seed(dropout_seed ^ static_cast<uint64_t>(s))));
  }
  return out;
}

inline std::vector<Tensor> forward_classify_batch(Tape* tape, const EncoderModel& model,
                                                  const Batch& batch, bool train_mode,
                                                  uint64_t dropout_seed) {
  std::vector<Tensor> out;
  out.reserve(batch.seqs.size());
  for (int s = 0; s < batch.size(); ++s) {
    out.push_back(model.forward_classify(tape, batch.seqs[static_cast<size_t>(s)],
                                         batch.lengths[static_cast<size_t>(s)], train_mode,
                                         mix_seed(dropout_seed ^ static_cast<uint64_t>(s))));
  }
  return out;
}

}  // namespace entmask
