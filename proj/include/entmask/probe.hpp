#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "entmask/data.hpp"
#include "entmask/train.hpp"

namespace entmask {

// A small labeled classification dataset. Each seed defines one stratified
// train/dev split and one fine-tune run; reported accuracy averages runs.
struct ProbeTask {
  std::string name;
  std::vector<LabeledExample> examples;
  int num_classes = 2;
  std::vector<uint64_t> seeds = {1, 2};
  double dev_fraction = 0.25;

  void validate() const {
    if (name.empty()) throw ConfigError("probe task: name must not be empty");
    if (num_classes < 2) throw ConfigError("probe task: need at least two classes");
    if (seeds.empty()) throw ConfigError("probe task: need at least one split seed");
    if (dev_fraction <= 0.0 || dev_fraction >= 1.0) {
      throw ConfigError("probe task: dev_fraction must lie in (0, 1)");
    }
    if (examples.empty()) throw DataError("probe task '" + name + "': no examples");
    std::vector<int> counts(static_cast<size_t>(num_classes), 0);
    for (size_t i = 0; i < examples.size(); ++i) {
      const int label = examples[i].label;
      if (label < 0 || label >= num_classes) {
        throw DataError("probe task '" + name + "': example " + std::to_string(i) +
                        " has label " + std::to_string(label) + " outside 0.." +
                        std::to_string(num_classes - 1));
      }
      ++counts[static_cast<size_t>(label)];
    }
    for (int c = 0; c < num_classes; ++c) {
      if (counts[static_cast<size_t>(c)] < 2) {
        throw DataError("probe task '" + name + "': class " + std::to_string(c) +
                        " needs at least two examples to appear in both splits");
      }
    }
  }
};

// Stratified split: every class contributes to both sides, so dev accuracy
// is defined for all classes no matter how small the task is.
inline std::pair<std::vector<LabeledExample>, std::vector<LabeledExample>> split_probe(
    const ProbeTask& task, uint64_t seed) {
  task.validate();
  std::vector<std::vector<int>> by_class(static_cast<size_t>(task.num_classes));
  for (size_t i = 0; i < task.examples.size(); ++i) {
    by_class[static_cast<size_t>(task.examples[i].label)].push_back(static_cast<int>(i));
  }
  std::vector<LabeledExample> train, dev;
  for (int c = 0; c < task.num_classes; ++c) {
    std::vector<int>& members = by_class[static_cast<size_t>(c)];
    Rng rng(derive_seed(seed, "probe-split", static_cast<uint64_t>(c)));
    rng.shuffle(members);
    const int n = static_cast<int>(members.size());
    int take = static_cast<int>(std::floor(task.dev_fraction * static_cast<double>(n) + 0.5));
    take = std::clamp(take, 1, n - 1);
    for (int i = 0; i < n; ++i) {
      (i < take ? dev : train).push_back(task.examples[static_cast<size_t>(members[static_cast<size_t>(i)])]);
    }
  }
  return {std::move(train), std::move(dev)};
}

// UTF-8 lines of "label<TAB>text"; labels are small non-negative integers.
inline ProbeTask load_probe_tsv(const std::string& path, const Vocabulary& vocab,
                                int max_len = 128) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open probe file: " + path);
  ProbeTask task;
  task.name = std::filesystem::path(path).stem().string();
  std::string line;
  int line_no = 0;
  int max_label = -1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const size_t tab = line.find('\t');
    if (tab == std::string::npos) {
      throw DataError(path + ":" + std::to_string(line_no) + ": expected label<TAB>text");
    }
    int label = -1;
    const char* first = line.data();
    const char* last = line.data() + tab;
    auto [ptr, ec] = std::from_chars(first, last, label);
    if (ec != std::errc() || ptr != last || label < 0) {
      throw DataError(path + ":" + std::to_string(line_no) + ": label '" +
                      line.substr(0, tab) + "' is not a non-negative integer");
    }
    LabeledExample ex;
    ex.ids = tokenize(line.substr(tab + 1), vocab, max_len);
    ex.label = label;
    max_label = std::max(max_label, label);
    task.examples.push_back(std::move(ex));
  }
  if (task.examples.empty()) throw DataError("probe file has no usable lines: " + path);
  task.num_classes = std::max(2, max_label + 1);
  return task;
}

namespace detail {

inline TokenSequence frame(const std::vector<int>& content) {
  TokenSequence seq;
  seq.reserve(content.size() + 2);
  seq.push_back(Vocabulary::cls_id);
  const int c0 = Vocabulary::reserved_count;
  for (int t : content) seq.push_back(c0 + t);
  seq.push_back(Vocabulary::sep_id);
  return seq;
}

}  // namespace detail

// Labels carry no signal; any classifier should sit at chance on dev.
inline ProbeTask chance_probe(int content_vocab, int examples, int classes, uint64_t seed) {
  if (content_vocab < 2) throw ConfigError("chance probe: content_vocab must be >= 2");
  if (classes < 2) throw ConfigError("chance probe: need at least two classes");
  if (examples < 4 * classes) {
    throw ConfigError("chance probe: need at least four examples per class");
  }
  Rng rng(derive_seed(seed, "probe-chance"));
  ProbeTask task;
  task.name = "chance";
  task.num_classes = classes;
  for (int i = 0; i < examples; ++i) {
    std::vector<int> content(static_cast<size_t>(rng.uniform_int(6, 12)));
    for (int& t : content) t = rng.uniform_int(0, content_vocab - 1);
    LabeledExample ex;
    ex.ids = detail::frame(content);
    ex.label = i % classes;
    task.examples.push_back(std::move(ex));
  }
  return task;
}

// Binary: class 1 sequences contain a marker token somewhere, class 0
// sequences are drawn from the rest of the alphabet.
inline ProbeTask presence_probe(int content_vocab, int examples, uint64_t seed) {
  if (content_vocab < 3) throw ConfigError("presence probe: content_vocab must be >= 3");
  if (examples < 8) throw ConfigError("presence probe: need at least eight examples");
  Rng rng(derive_seed(seed, "probe-presence"));
  const int marker = 0;
  ProbeTask task;
  task.name = "presence";
  for (int i = 0; i < examples; ++i) {
    std::vector<int> content(static_cast<size_t>(rng.uniform_int(6, 12)));
    for (int& t : content) t = rng.uniform_int(1, content_vocab - 1);
    const int label = i % 2;
    if (label == 1) {
      content[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(content.size()) - 1))] = marker;
    }
    LabeledExample ex;
    ex.ids = detail::frame(content);
    ex.label = label;
    task.examples.push_back(std::move(ex));
  }
  return task;
}

// Binary: every sequence contains markers a and b exactly once; the label is
// whether a precedes b. Bags of tokens are label-neutral by construction.
inline ProbeTask order_probe(int content_vocab, int examples, uint64_t seed) {
  if (content_vocab < 4) throw ConfigError("order probe: content_vocab must be >= 4");
  if (examples < 8) throw ConfigError("order probe: need at least eight examples");
  Rng rng(derive_seed(seed, "probe-order"));
  const int marker_a = 0, marker_b = 1;
  ProbeTask task;
  task.name = "order";
  for (int i = 0; i < examples; ++i) {
    const int len = rng.uniform_int(6, 12);
    std::vector<int> content(static_cast<size_t>(len));
    for (int& t : content) t = rng.uniform_int(2, content_vocab - 1);
    int first = rng.uniform_int(0, len - 1);
    int second = rng.uniform_int(0, len - 2);
    if (second >= first) ++second;
    if (first > second) std::swap(first, second);
    const int label = i % 2;
    content[static_cast<size_t>(first)] = label == 1 ? marker_a : marker_b;
    content[static_cast<size_t>(second)] = label == 1 ? marker_b : marker_a;
    LabeledExample ex;
    ex.ids = detail::frame(content);
    ex.label = label;
    task.examples.push_back(std::move(ex));
  }
  return task;
}

// Label equals the bucket of the first content token; a model that reads
// position 1 at all solves it.
inline ProbeTask first_token_probe(int content_vocab, int examples, int buckets, uint64_t seed) {
  if (buckets < 2 || content_vocab < buckets) {
    throw ConfigError("first-token probe: need content_vocab >= buckets >= 2");
  }
  if (examples < 4 * buckets) {
    throw ConfigError("first-token probe: need at least four examples per bucket");
  }
  Rng rng(derive_seed(seed, "probe-first-token"));
  ProbeTask task;
  task.name = "first-token";
  task.num_classes = buckets;
  for (int i = 0; i < examples; ++i) {
    std::vector<int> content(static_cast<size_t>(rng.uniform_int(6, 12)));
    for (int& t : content) t = rng.uniform_int(0, content_vocab - 1);
    const int bucket = i % buckets;
    const int lo = bucket * content_vocab / buckets;
    const int hi = (bucket + 1) * content_vocab / buckets - 1;
    content[0] = rng.uniform_int(lo, hi);
    LabeledExample ex;
    ex.ids = detail::frame(content);
    ex.label = bucket;
    task.examples.push_back(std::move(ex));
  }
  return task;
}

inline std::vector<ProbeTask> standard_probes(int content_vocab, int examples, uint64_t seed) {
  return {chance_probe(content_vocab, examples, 2, derive_seed(seed, "chance")),
          presence_probe(content_vocab, examples, derive_seed(seed, "presence")),
          order_probe(content_vocab, examples, derive_seed(seed, "order"))};
}

struct ProbeSettings {
  double learning_rate = 0.05;
  int batch_size = 8;
  int epochs = 10;
  int patience = 10;
  uint64_t head_seed = 40;

  void validate() const {
    if (learning_rate <= 0.0) throw ConfigError("probe settings: learning_rate must be positive");
    if (batch_size < 1) throw ConfigError("probe settings: batch_size must be >= 1");
    if (epochs < 1) throw ConfigError("probe settings: epochs must be >= 1");
    if (patience < 1) throw ConfigError("probe settings: patience must be >= 1");
  }
};

struct ProbeRun {
  uint64_t seed = 0;
  double accuracy = 0.0;
};

struct ProbeReport {
  std::string task;
  bool frozen = true;
  std::vector<ProbeRun> runs;
  double mean_accuracy = 0.0;
};

inline void to_json(nlohmann::json& j, const ProbeRun& r) {
  j = nlohmann::json{{"seed", r.seed}, {"accuracy", r.accuracy}};
}

inline void to_json(nlohmann::json& j, const ProbeReport& r) {
  j = nlohmann::json{{"task", r.task},
                     {"frozen", r.frozen},
                     {"runs", r.runs},
                     {"mean_accuracy", r.mean_accuracy}};
}

// One fine-tune run per task seed on a fresh clone of the model; reports dev
// accuracy per run and the mean. The caller's model is never mutated.
inline ProbeReport evaluate_probe(const EncoderModel& model, const ProbeTask& task,
                                  bool freeze_body, const ProbeSettings& settings = {}) {
  task.validate();
  settings.validate();
  for (const LabeledExample& ex : task.examples) {
    for (int id : ex.ids) {
      if (id < 0 || id >= model.config().vocab_size) {
        throw ConfigError("probe task '" + task.name + "' uses token id " + std::to_string(id) +
                          " outside the model vocabulary of " +
                          std::to_string(model.config().vocab_size));
      }
    }
  }
  if (model.has_classifier() && model.num_classes() != task.num_classes) {
    throw ConfigError("probe task '" + task.name + "' has " + std::to_string(task.num_classes) +
                      " classes but the model head has " + std::to_string(model.num_classes()));
  }

  ProbeReport report;
  report.task = task.name;
  report.frozen = freeze_body;
  double sum = 0.0;
  for (uint64_t seed : task.seeds) {
    auto [train, dev] = split_probe(task, seed);
    EncoderModel tuned = model.clone();
    if (!tuned.has_classifier()) {
      tuned.attach_classifier(task.num_classes, derive_seed(settings.head_seed, "probe-head", seed));
    }
    TrainPlan plan;
    plan.learning_rate = settings.learning_rate;
    plan.batch_size = settings.batch_size;
    plan.early_stopping_patience = settings.patience;
    plan.run_seed = derive_seed(seed, "probe-run");
    plan.holdout_fraction = 0.0;
    finetune_classifier(plan, train, tuned, freeze_body, settings.epochs);
    ProbeRun run;
    run.seed = seed;
    run.accuracy = classification_accuracy(tuned, dev);
    sum += run.accuracy;
    report.runs.push_back(run);
  }
  report.mean_accuracy = sum / static_cast<double>(report.runs.size());
  return report;
}

inline double mean_probe_accuracy(const std::vector<ProbeReport>& reports) {
  if (reports.empty()) throw ContractError("mean_probe_accuracy: no reports");
  double sum = 0.0;
  for (const ProbeReport& r : reports) sum += r.mean_accuracy;
  return sum / static_cast<double>(reports.size());
}

}  // namespace entmask
