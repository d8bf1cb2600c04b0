#pragma once

#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <string>
#include <vector>

#include "json.hpp"

#include "entmask/data.hpp"
#include "entmask/experiment.hpp"
#include "entmask/probe.hpp"
#include "entmask/train.hpp"

namespace entmask {

namespace cfgdetail {

inline ConfigError bad(const std::string& where, const std::string& what) {
  return ConfigError("config " + (where.empty() ? "/" : where) + ": " + what);
}

inline const nlohmann::json& object_at(const nlohmann::json& parent, const std::string& where) {
  if (!parent.is_object()) throw bad(where, "expected an object");
  return parent;
}

inline void check_keys(const nlohmann::json& obj, const std::string& where,
                       std::initializer_list<const char*> allowed) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool known = false;
    for (const char* key : allowed) {
      if (it.key() == key) {
        known = true;
        break;
      }
    }
    if (!known) throw bad(where + "/" + it.key(), "unknown key");
  }
}

inline std::string get_string(const nlohmann::json& obj, const std::string& where,
                              const char* key, const std::string& fallback) {
  if (!obj.contains(key)) return fallback;
  if (!obj.at(key).is_string()) throw bad(where + "/" + key, "expected a string");
  return obj.at(key).get<std::string>();
}

inline bool get_bool(const nlohmann::json& obj, const std::string& where, const char* key,
                     bool fallback) {
  if (!obj.contains(key)) return fallback;
  if (!obj.at(key).is_boolean()) throw bad(where + "/" + key, "expected a boolean");
  return obj.at(key).get<bool>();
}

inline int get_int(const nlohmann::json& obj, const std::string& where, const char* key,
                   int fallback) {
  if (!obj.contains(key)) return fallback;
  if (!obj.at(key).is_number_integer()) throw bad(where + "/" + key, "expected an integer");
  return obj.at(key).get<int>();
}

inline uint64_t get_u64(const nlohmann::json& obj, const std::string& where, const char* key,
                        uint64_t fallback) {
  if (!obj.contains(key)) return fallback;
  const nlohmann::json& v = obj.at(key);
  if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<int64_t>() < 0)) {
    throw bad(where + "/" + key, "expected a non-negative integer");
  }
  return v.get<uint64_t>();
}

inline double get_double(const nlohmann::json& obj, const std::string& where, const char* key,
                         double fallback) {
  if (!obj.contains(key)) return fallback;
  if (!obj.at(key).is_number()) throw bad(where + "/" + key, "expected a number");
  return obj.at(key).get<double>();
}

inline std::vector<uint64_t> get_u64_list(const nlohmann::json& obj, const std::string& where,
                                          const char* key, std::vector<uint64_t> fallback) {
  if (!obj.contains(key)) return fallback;
  const nlohmann::json& v = obj.at(key);
  if (!v.is_array()) throw bad(where + "/" + key, "expected an array of integers");
  std::vector<uint64_t> out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (!v[i].is_number_integer() || (!v[i].is_number_unsigned() && v[i].get<int64_t>() < 0)) {
      throw bad(where + "/" + key + "/" + std::to_string(i), "expected a non-negative integer");
    }
    out.push_back(v[i].get<uint64_t>());
  }
  return out;
}

inline std::vector<std::string> get_string_list(const nlohmann::json& obj,
                                                const std::string& where, const char* key) {
  if (!obj.contains(key)) return {};
  const nlohmann::json& v = obj.at(key);
  if (!v.is_array()) throw bad(where + "/" + key, "expected an array of strings");
  std::vector<std::string> out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (!v[i].is_string()) {
      throw bad(where + "/" + key + "/" + std::to_string(i), "expected a string");
    }
    out.push_back(v[i].get<std::string>());
  }
  return out;
}

}  // namespace cfgdetail

struct ModelSection {
  std::string preset = "desk";
  int max_position = 128;
  double dropout_rate = 0.1;
  uint64_t seed = 1;
};

struct CorpusSection {
  std::string kind = "synthetic";  // synthetic | file
  std::string path;
  SyntheticCorpusSpec synthetic;
};

struct ProbeSection {
  int synthetic_examples = 64;
  uint64_t seed = 7;
  std::vector<std::string> files;
  std::vector<uint64_t> split_seeds = {1, 2};
  bool freeze = true;
  ProbeSettings settings;
};

struct CompareSection {
  std::vector<std::string> variants;  // empty selects the whole standard grid
  std::vector<uint64_t> run_seeds = {1, 2};
  uint64_t model_seed = 1;
};

// One declarative file describes a whole run; every command reads the same
// shape and uses the sections it needs. Unknown keys anywhere are rejected
// so a typo cannot silently fall back to a default.
struct RunConfig {
  std::string run_id;
  std::string out_root;
  ModelSection model;
  int vocab_max_size = 4096;
  CorpusSection corpus;
  TrainPlan plan;
  std::string teacher;
  ProbeSection probes;
  CompareSection compare;
  nlohmann::json raw;
};

inline RunConfig parse_run_config(const nlohmann::json& root, const std::string& base_dir) {
  using namespace cfgdetail;
  object_at(root, "");
  check_keys(root, "", {"run_id", "out_root", "model", "vocab", "corpus", "plan", "teacher",
                        "probes", "compare"});

  RunConfig cfg;
  cfg.raw = root;
  cfg.run_id = get_string(root, "", "run_id", "");
  if (cfg.run_id.empty()) throw bad("/run_id", "missing required key");
  if (cfg.run_id == "." || cfg.run_id == ".." ||
      cfg.run_id.find('/') != std::string::npos) {
    throw bad("/run_id", "'" + cfg.run_id + "' is not a usable directory name");
  }
  cfg.out_root = get_string(root, "", "out_root", "");

  auto resolve = [&base_dir](const std::string& p) {
    std::filesystem::path path(p);
    if (path.is_absolute() || base_dir.empty()) return path.string();
    return (std::filesystem::path(base_dir) / path).string();
  };

  if (root.contains("model")) {
    const nlohmann::json& m = object_at(root.at("model"), "/model");
    check_keys(m, "/model", {"preset", "max_position", "dropout_rate", "seed"});
    cfg.model.preset = get_string(m, "/model", "preset", cfg.model.preset);
    cfg.model.max_position = get_int(m, "/model", "max_position", cfg.model.max_position);
    cfg.model.dropout_rate = get_double(m, "/model", "dropout_rate", cfg.model.dropout_rate);
    cfg.model.seed = get_u64(m, "/model", "seed", cfg.model.seed);
  }
  try {
    encoder_preset(cfg.model.preset, 8);
  } catch (const ConfigError&) {
    throw bad("/model/preset", "unknown preset '" + cfg.model.preset + "'");
  }
  if (cfg.model.max_position < 4) throw bad("/model/max_position", "too small to frame a sequence");
  if (cfg.model.dropout_rate < 0.0 || cfg.model.dropout_rate >= 1.0) {
    throw bad("/model/dropout_rate", "must lie in [0, 1)");
  }

  if (root.contains("vocab")) {
    const nlohmann::json& v = object_at(root.at("vocab"), "/vocab");
    check_keys(v, "/vocab", {"max_size"});
    cfg.vocab_max_size = get_int(v, "/vocab", "max_size", cfg.vocab_max_size);
    if (cfg.vocab_max_size <= Vocabulary::reserved_count) {
      throw bad("/vocab/max_size", "leaves no room for content tokens");
    }
  }

  if (!root.contains("corpus")) throw bad("/corpus", "missing required key");
  {
    const nlohmann::json& c = object_at(root.at("corpus"), "/corpus");
    cfg.corpus.kind = get_string(c, "/corpus", "kind", "synthetic");
    if (cfg.corpus.kind == "synthetic") {
      check_keys(c, "/corpus",
                 {"kind", "content_vocab", "num_sequences", "min_len", "max_len",
                  "predictability", "profile", "long_range_fraction", "long_range_lag",
                  "noise_alphabet_fraction", "seed"});
      SyntheticCorpusSpec& s = cfg.corpus.synthetic;
      s.content_vocab = get_int(c, "/corpus", "content_vocab", s.content_vocab);
      s.num_sequences = get_int(c, "/corpus", "num_sequences", s.num_sequences);
      s.min_len = get_int(c, "/corpus", "min_len", s.min_len);
      s.max_len = get_int(c, "/corpus", "max_len", s.max_len);
      s.predictability = get_double(c, "/corpus", "predictability", s.predictability);
      s.profile = get_string(c, "/corpus", "profile", s.profile);
      s.long_range_fraction = get_double(c, "/corpus", "long_range_fraction", s.long_range_fraction);
      s.long_range_lag = get_int(c, "/corpus", "long_range_lag", s.long_range_lag);
      s.noise_alphabet_fraction =
          get_double(c, "/corpus", "noise_alphabet_fraction", s.noise_alphabet_fraction);
      s.seed = get_u64(c, "/corpus", "seed", s.seed);
      try {
        s.validate();
      } catch (const ConfigError& e) {
        throw bad("/corpus", e.what());
      }
      if (s.max_len + 2 > cfg.model.max_position) {
        throw bad("/corpus/max_len", "framed sequences exceed model max_position");
      }
      if (root.contains("vocab")) {
        throw bad("/vocab", "only applies to file corpora; synthetic corpora size their own");
      }
    } else if (cfg.corpus.kind == "file") {
      check_keys(c, "/corpus", {"kind", "path"});
      cfg.corpus.path = get_string(c, "/corpus", "path", "");
      if (cfg.corpus.path.empty()) throw bad("/corpus/path", "missing required key");
      cfg.corpus.path = resolve(cfg.corpus.path);
      if (!std::filesystem::exists(cfg.corpus.path)) {
        throw bad("/corpus/path", "no such file: " + cfg.corpus.path);
      }
    } else {
      throw bad("/corpus/kind", "expected 'synthetic' or 'file'");
    }
  }

  if (root.contains("plan")) {
    const nlohmann::json& p = object_at(root.at("plan"), "/plan");
    check_keys(p, "/plan",
               {"masking", "epochs", "learning_rate", "batch_size", "kd_mode", "kd_weight",
                "early_stopping_patience", "run_seed", "sum_loss", "lr_linear_decay",
                "holdout_fraction"});
    TrainPlan& plan = cfg.plan;
    if (p.contains("masking")) {
      const nlohmann::json& m = object_at(p.at("masking"), "/plan/masking");
      check_keys(m, "/plan/masking",
                 {"strategy", "mask_ratio", "single_token", "entropy_source",
                  "self_start_epoch", "strategy_seed"});
      MaskingConfig& mc = plan.masking;
      mc.strategy = get_string(m, "/plan/masking", "strategy", mc.strategy);
      mc.mask_ratio = get_double(m, "/plan/masking", "mask_ratio", mc.mask_ratio);
      mc.single_token = get_bool(m, "/plan/masking", "single_token", mc.single_token);
      mc.entropy_source = get_string(m, "/plan/masking", "entropy_source", mc.entropy_source);
      mc.self_start_epoch = get_int(m, "/plan/masking", "self_start_epoch", mc.self_start_epoch);
      mc.strategy_seed = get_u64(m, "/plan/masking", "strategy_seed", mc.strategy_seed);
    }
    plan.epochs = get_int(p, "/plan", "epochs", plan.epochs);
    plan.learning_rate = get_double(p, "/plan", "learning_rate", plan.learning_rate);
    plan.batch_size = get_int(p, "/plan", "batch_size", plan.batch_size);
    plan.kd_mode = get_string(p, "/plan", "kd_mode", plan.kd_mode);
    plan.kd_weight = get_double(p, "/plan", "kd_weight", plan.kd_weight);
    plan.early_stopping_patience =
        get_int(p, "/plan", "early_stopping_patience", plan.early_stopping_patience);
    plan.run_seed = get_u64(p, "/plan", "run_seed", plan.run_seed);
    plan.sum_loss = get_bool(p, "/plan", "sum_loss", plan.sum_loss);
    plan.lr_linear_decay = get_bool(p, "/plan", "lr_linear_decay", plan.lr_linear_decay);
    plan.holdout_fraction = get_double(p, "/plan", "holdout_fraction", plan.holdout_fraction);
  }
  try {
    cfg.plan.validate();
  } catch (const ConfigError& e) {
    throw bad("/plan", e.what());
  }

  cfg.teacher = get_string(root, "", "teacher", "");
  if (!cfg.teacher.empty()) {
    cfg.teacher = resolve(cfg.teacher);
    if (!std::filesystem::exists(cfg.teacher)) {
      throw bad("/teacher", "no such file: " + cfg.teacher);
    }
  }

  if (root.contains("probes")) {
    const nlohmann::json& p = object_at(root.at("probes"), "/probes");
    check_keys(p, "/probes",
               {"synthetic_examples", "seed", "files", "split_seeds", "freeze", "settings"});
    ProbeSection& ps = cfg.probes;
    ps.synthetic_examples = get_int(p, "/probes", "synthetic_examples", ps.synthetic_examples);
    if (ps.synthetic_examples < 0) throw bad("/probes/synthetic_examples", "must be >= 0");
    ps.seed = get_u64(p, "/probes", "seed", ps.seed);
    ps.files = get_string_list(p, "/probes", "files");
    for (std::string& f : ps.files) {
      f = resolve(f);
      if (!std::filesystem::exists(f)) throw bad("/probes/files", "no such file: " + f);
    }
    ps.split_seeds = get_u64_list(p, "/probes", "split_seeds", ps.split_seeds);
    if (ps.split_seeds.empty()) throw bad("/probes/split_seeds", "needs at least one seed");
    ps.freeze = get_bool(p, "/probes", "freeze", ps.freeze);
    if (p.contains("settings")) {
      const nlohmann::json& s = object_at(p.at("settings"), "/probes/settings");
      check_keys(s, "/probes/settings",
                 {"learning_rate", "batch_size", "epochs", "patience", "head_seed"});
      ps.settings.learning_rate =
          get_double(s, "/probes/settings", "learning_rate", ps.settings.learning_rate);
      ps.settings.batch_size = get_int(s, "/probes/settings", "batch_size", ps.settings.batch_size);
      ps.settings.epochs = get_int(s, "/probes/settings", "epochs", ps.settings.epochs);
      ps.settings.patience = get_int(s, "/probes/settings", "patience", ps.settings.patience);
      ps.settings.head_seed = get_u64(s, "/probes/settings", "head_seed", ps.settings.head_seed);
    }
    try {
      ps.settings.validate();
    } catch (const ConfigError& e) {
      throw bad("/probes/settings", e.what());
    }
  }

  if (root.contains("compare")) {
    const nlohmann::json& c = object_at(root.at("compare"), "/compare");
    check_keys(c, "/compare", {"variants", "run_seeds", "model_seed"});
    cfg.compare.variants = get_string_list(c, "/compare", "variants");
    cfg.compare.run_seeds = get_u64_list(c, "/compare", "run_seeds", cfg.compare.run_seeds);
    if (cfg.compare.run_seeds.empty()) throw bad("/compare/run_seeds", "needs at least one seed");
    cfg.compare.model_seed = get_u64(c, "/compare", "model_seed", cfg.compare.model_seed);
    std::vector<PlanVariant> grid = standard_variants(cfg.plan);
    for (const std::string& name : cfg.compare.variants) {
      bool known = false;
      for (const PlanVariant& v : grid) known = known || v.name == name;
      if (!known) throw bad("/compare/variants", "unknown variant '" + name + "'");
    }
  }

  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  return parse_run_config(root, std::filesystem::path(path).parent_path().string());
}

inline Vocabulary config_vocabulary(const RunConfig& cfg) {
  if (cfg.corpus.kind == "synthetic") {
    return Vocabulary::synthetic(cfg.corpus.synthetic.content_vocab);
  }
  std::ifstream in(cfg.corpus.path);
  if (!in) throw DataError("cannot open corpus file: " + cfg.corpus.path);
  return Vocabulary::build(in, cfg.vocab_max_size);
}

inline std::vector<TokenSequence> config_corpus(const RunConfig& cfg, const Vocabulary& vocab) {
  if (cfg.corpus.kind == "synthetic") {
    return generate_synthetic_corpus(cfg.corpus.synthetic);
  }
  return load_text_corpus(cfg.corpus.path, vocab, cfg.model.max_position);
}

inline EncoderConfig config_model(const RunConfig& cfg, int vocab_size) {
  EncoderConfig model = encoder_preset(cfg.model.preset, vocab_size);
  model.max_position = cfg.model.max_position;
  model.dropout_rate = cfg.model.dropout_rate;
  return model;
}

inline std::vector<ProbeTask> config_probe_tasks(const RunConfig& cfg, const Vocabulary& vocab) {
  std::vector<ProbeTask> tasks;
  if (cfg.probes.synthetic_examples > 0) {
    tasks = standard_probes(vocab.content_size(), cfg.probes.synthetic_examples, cfg.probes.seed);
  }
  for (const std::string& file : cfg.probes.files) {
    tasks.push_back(load_probe_tsv(file, vocab, cfg.model.max_position));
  }
  if (tasks.empty()) throw ConfigError("config /probes: no probe tasks configured");
  for (ProbeTask& task : tasks) task.seeds = cfg.probes.split_seeds;
  return tasks;
}

}  // namespace entmask
