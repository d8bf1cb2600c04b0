#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "entmask/divergence.hpp"
#include "entmask/experiment.hpp"
#include "entmask/probe.hpp"

namespace entmask {
namespace {

EncoderConfig tiny_config(int vocab) {
  EncoderConfig cfg;
  cfg.vocab_size = vocab;
  cfg.hidden_dim = 16;
  cfg.num_layers = 1;
  cfg.num_heads = 2;
  cfg.ffn_dim = 32;
  cfg.max_position = 20;
  cfg.dropout_rate = 0.0;
  return cfg;
}

std::vector<TokenSequence> tiny_corpus(int sequences, int vocab, uint64_t seed) {
  Rng rng(derive_seed(seed, "tiny-corpus"));
  std::vector<TokenSequence> out;
  for (int i = 0; i < sequences; ++i) {
    TokenSequence seq = {Vocabulary::cls_id};
    const int body = rng.uniform_int(6, 12);
    for (int j = 0; j < body; ++j) {
      seq.push_back(rng.uniform_int(Vocabulary::reserved_count, vocab - 1));
    }
    seq.push_back(Vocabulary::sep_id);
    out.push_back(seq);
  }
  return out;
}

const EncoderModel& pretrained_tiny() {
  static EncoderModel model = [] {
    EncoderModel m(tiny_config(14), 12);
    TrainPlan plan;
    plan.masking.strategy = "random";
    plan.epochs = 25;
    plan.batch_size = 8;
    plan.learning_rate = 2e-3;
    plan.run_seed = 9;
    plan.holdout_fraction = 0.0;
    pretrain(plan, tiny_corpus(50, 14, 1), m, nullptr);
    return m;
  }();
  return model;
}

bool params_equal(const EncoderModel& a, const EncoderModel& b) {
  if (a.params().size() != b.params().size()) return false;
  for (size_t i = 0; i < a.params().size(); ++i) {
    if (a.params()[i].first != b.params()[i].first) return false;
    const auto& va = a.params()[i].second.values();
    const auto& vb = b.params()[i].second.values();
    if (va.size() != vb.size()) return false;
    if (std::memcmp(va.data(), vb.data(), va.size() * sizeof(float)) != 0) return false;
  }
  return true;
}

int marker_id(int content_token) { return Vocabulary::reserved_count + content_token; }

TEST(ProbeFactories, ChanceProbeShape) {
  ProbeTask task = chance_probe(9, 48, 2, 7);
  task.validate();
  EXPECT_EQ(task.name, "chance");
  EXPECT_EQ(task.examples.size(), 48u);
  int per_class[2] = {0, 0};
  for (const LabeledExample& ex : task.examples) {
    per_class[ex.label] += 1;
    EXPECT_EQ(ex.ids.front(), Vocabulary::cls_id);
    EXPECT_EQ(ex.ids.back(), Vocabulary::sep_id);
    for (size_t j = 1; j + 1 < ex.ids.size(); ++j) {
      EXPECT_GE(ex.ids[j], Vocabulary::reserved_count);
      EXPECT_LT(ex.ids[j], Vocabulary::reserved_count + 9);
    }
  }
  EXPECT_EQ(per_class[0], 24);
  EXPECT_EQ(per_class[1], 24);
}

TEST(ProbeFactories, PresenceProbeMarker) {
  ProbeTask task = presence_probe(9, 40, 3);
  for (const LabeledExample& ex : task.examples) {
    const bool has_marker =
        std::find(ex.ids.begin(), ex.ids.end(), marker_id(0)) != ex.ids.end();
    EXPECT_EQ(has_marker, ex.label == 1);
  }
}

TEST(ProbeFactories, OrderProbeMarkersAndLabel) {
  ProbeTask task = order_probe(9, 40, 3);
  for (const LabeledExample& ex : task.examples) {
    const auto a = std::find(ex.ids.begin(), ex.ids.end(), marker_id(0));
    const auto b = std::find(ex.ids.begin(), ex.ids.end(), marker_id(1));
    ASSERT_NE(a, ex.ids.end());
    ASSERT_NE(b, ex.ids.end());
    EXPECT_EQ(std::count(ex.ids.begin(), ex.ids.end(), marker_id(0)), 1);
    EXPECT_EQ(std::count(ex.ids.begin(), ex.ids.end(), marker_id(1)), 1);
    EXPECT_EQ(ex.label == 1, a < b);
  }
}

TEST(ProbeFactories, FirstTokenProbeBuckets) {
  const int buckets = 3, content = 9;
  ProbeTask task = first_token_probe(content, 48, buckets, 11);
  EXPECT_EQ(task.num_classes, buckets);
  for (const LabeledExample& ex : task.examples) {
    const int first = ex.ids[1] - Vocabulary::reserved_count;
    EXPECT_EQ(ex.label, first * buckets / content);
  }
}

TEST(ProbeFactories, DeterministicPerSeed) {
  ProbeTask a = presence_probe(9, 40, 3);
  ProbeTask b = presence_probe(9, 40, 3);
  ASSERT_EQ(a.examples.size(), b.examples.size());
  for (size_t i = 0; i < a.examples.size(); ++i) {
    EXPECT_EQ(a.examples[i].ids, b.examples[i].ids);
    EXPECT_EQ(a.examples[i].label, b.examples[i].label);
  }
  ProbeTask c = presence_probe(9, 40, 4);
  bool any_difference = false;
  for (size_t i = 0; i < a.examples.size(); ++i) {
    if (a.examples[i].ids != c.examples[i].ids) any_difference = true;
  }
  EXPECT_TRUE(any_difference);
}

TEST(ProbeFactories, StandardTrio) {
  std::vector<ProbeTask> tasks = standard_probes(9, 40, 5);
  ASSERT_EQ(tasks.size(), 3u);
  EXPECT_EQ(tasks[0].name, "chance");
  EXPECT_EQ(tasks[1].name, "presence");
  EXPECT_EQ(tasks[2].name, "order");
  for (const ProbeTask& t : tasks) t.validate();
}

TEST(ProbeFactories, RejectsBadArguments) {
  EXPECT_THROW(chance_probe(1, 40, 2, 1), ConfigError);
  EXPECT_THROW(chance_probe(9, 4, 2, 1), ConfigError);
  EXPECT_THROW(presence_probe(2, 40, 1), ConfigError);
  EXPECT_THROW(order_probe(3, 40, 1), ConfigError);
  EXPECT_THROW(first_token_probe(9, 40, 1, 1), ConfigError);
  EXPECT_THROW(first_token_probe(2, 40, 3, 1), ConfigError);
}

TEST(ProbeValidation, CatchesBadTasks) {
  ProbeTask task = chance_probe(9, 40, 2, 1);
  task.examples[0].label = 2;
  EXPECT_THROW(task.validate(), DataError);

  ProbeTask lonely = chance_probe(9, 40, 2, 1);
  for (LabeledExample& ex : lonely.examples) ex.label = 0;
  lonely.examples[0].label = 1;
  EXPECT_THROW(lonely.validate(), DataError);

  ProbeTask unnamed = chance_probe(9, 40, 2, 1);
  unnamed.name.clear();
  EXPECT_THROW(unnamed.validate(), ConfigError);

  ProbeTask no_seeds = chance_probe(9, 40, 2, 1);
  no_seeds.seeds.clear();
  EXPECT_THROW(no_seeds.validate(), ConfigError);
}

TEST(SplitProbe, BothClassesInBothSplits) {
  for (const ProbeTask& task : standard_probes(9, 40, 21)) {
    for (uint64_t seed : {1ULL, 2ULL, 3ULL}) {
      auto [train, dev] = split_probe(task, seed);
      EXPECT_EQ(train.size() + dev.size(), task.examples.size());
      std::set<int> train_classes, dev_classes;
      for (const LabeledExample& ex : train) train_classes.insert(ex.label);
      for (const LabeledExample& ex : dev) dev_classes.insert(ex.label);
      EXPECT_EQ(static_cast<int>(train_classes.size()), task.num_classes);
      EXPECT_EQ(static_cast<int>(dev_classes.size()), task.num_classes);
    }
  }
}

TEST(SplitProbe, DevSizeFollowsFraction) {
  ProbeTask task = chance_probe(9, 48, 2, 4);
  task.dev_fraction = 0.25;
  auto [train, dev] = split_probe(task, 5);
  EXPECT_EQ(dev.size(), 12u);
  EXPECT_EQ(train.size(), 36u);

  task.dev_fraction = 0.02;
  auto [train2, dev2] = split_probe(task, 5);
  EXPECT_EQ(dev2.size(), 2u);
  EXPECT_EQ(train2.size(), 46u);
}

TEST(SplitProbe, DeterministicPerSeed) {
  ProbeTask task = presence_probe(9, 40, 8);
  auto [train_a, dev_a] = split_probe(task, 3);
  auto [train_b, dev_b] = split_probe(task, 3);
  ASSERT_EQ(dev_a.size(), dev_b.size());
  for (size_t i = 0; i < dev_a.size(); ++i) EXPECT_EQ(dev_a[i].ids, dev_b[i].ids);

  auto [train_c, dev_c] = split_probe(task, 4);
  bool any_difference = train_a.size() != train_c.size();
  for (size_t i = 0; !any_difference && i < train_a.size(); ++i) {
    any_difference = train_a[i].ids != train_c[i].ids;
  }
  EXPECT_TRUE(any_difference);
}

class TsvFile : public ::testing::Test {
 protected:
  void SetUp() override {
    path_ = std::filesystem::temp_directory_path() /
            ("probe-" + std::to_string(::getpid()) + "-" +
             ::testing::UnitTest::GetInstance()->current_test_info()->name() + ".tsv");
  }
  void TearDown() override { std::filesystem::remove(path_); }

  void write(const std::string& text) {
    std::ofstream out(path_);
    out << text;
  }

  std::filesystem::path path_;
};

TEST_F(TsvFile, RoundTrip) {
  write("1\tw0 w1 w2\n0\tw3\n\n1\tw0 zzz\n0\tw4 w5\n");
  Vocabulary vocab = Vocabulary::synthetic(9);
  ProbeTask task = load_probe_tsv(path_.string(), vocab);
  EXPECT_EQ(task.name, path_.stem().string());
  EXPECT_EQ(task.num_classes, 2);
  ASSERT_EQ(task.examples.size(), 4u);
  EXPECT_EQ(task.examples[0].label, 1);
  EXPECT_EQ(task.examples[0].ids, tokenize("w0 w1 w2", vocab));
  EXPECT_EQ(task.examples[2].ids[2], Vocabulary::unk_id);
  task.validate();
}

TEST_F(TsvFile, LabelsBeyondTwoClasses) {
  write("0\tw0\n1\tw1\n2\tw2\n2\tw3\n");
  ProbeTask task = load_probe_tsv(path_.string(), Vocabulary::synthetic(9));
  EXPECT_EQ(task.num_classes, 3);
}

TEST_F(TsvFile, RejectsMalformedLines) {
  Vocabulary vocab = Vocabulary::synthetic(9);
  write("1 w0 w1\n");
  EXPECT_THROW(load_probe_tsv(path_.string(), vocab), DataError);
  write("x\tw0\n");
  EXPECT_THROW(load_probe_tsv(path_.string(), vocab), DataError);
  write("-1\tw0\n");
  EXPECT_THROW(load_probe_tsv(path_.string(), vocab), DataError);
  write("");
  EXPECT_THROW(load_probe_tsv(path_.string(), vocab), DataError);
  EXPECT_THROW(load_probe_tsv((path_.string() + ".missing"), vocab), DataError);
}

TEST(EvaluateProbe, ChanceTaskStaysNearChanceWithFrozenBody) {
  ProbeTask task = chance_probe(9, 48, 2, 7);
  ProbeSettings settings;
  settings.learning_rate = 0.3;
  settings.epochs = 8;
  ProbeReport report = evaluate_probe(pretrained_tiny(), task, true, settings);
  EXPECT_GE(report.mean_accuracy, 0.25);
  EXPECT_LE(report.mean_accuracy, 0.75);
}

TEST(EvaluateProbe, FirstTokenTaskLearnedByFullFinetune) {
  ProbeTask task = first_token_probe(9, 64, 2, 7);
  ProbeSettings settings;
  settings.learning_rate = 5e-3;
  settings.epochs = 15;
  ProbeReport report = evaluate_probe(pretrained_tiny(), task, false, settings);
  EXPECT_GT(report.mean_accuracy, 0.9);
}

TEST(EvaluateProbe, ReportCarriesPerSeedRunsAndMean) {
  ProbeTask task = presence_probe(9, 40, 3);
  task.seeds = {4, 9};
  ProbeSettings settings;
  settings.learning_rate = 0.3;
  settings.epochs = 3;
  ProbeReport report = evaluate_probe(pretrained_tiny(), task, true, settings);
  ASSERT_EQ(report.runs.size(), 2u);
  EXPECT_EQ(report.runs[0].seed, 4u);
  EXPECT_EQ(report.runs[1].seed, 9u);
  EXPECT_TRUE(report.frozen);
  EXPECT_NEAR(report.mean_accuracy, (report.runs[0].accuracy + report.runs[1].accuracy) / 2.0,
              1e-12);
  nlohmann::json j = report;
  EXPECT_EQ(j["task"], "presence");
  EXPECT_EQ(j["runs"].size(), 2u);
  EXPECT_TRUE(j.contains("mean_accuracy"));
}

TEST(EvaluateProbe, CallerModelIsNeverMutated) {
  const EncoderModel& model = pretrained_tiny();
  EncoderModel snapshot = model.clone();
  ProbeTask task = presence_probe(9, 40, 3);
  ProbeSettings settings;
  settings.learning_rate = 0.3;
  settings.epochs = 2;
  evaluate_probe(model, task, false, settings);
  EXPECT_TRUE(params_equal(model, snapshot));
  EXPECT_FALSE(model.has_classifier());
}

TEST(EvaluateProbe, RejectsMismatches) {
  EncoderModel with_head = pretrained_tiny().clone();
  with_head.attach_classifier(3, 8);
  ProbeTask task = presence_probe(9, 40, 3);
  EXPECT_THROW(evaluate_probe(with_head, task, true), ConfigError);

  ProbeTask alien = presence_probe(30, 40, 3);
  EXPECT_THROW(evaluate_probe(pretrained_tiny(), alien, true), ConfigError);
}

TEST(EvaluateProbe, MeanAcrossTasks) {
  std::vector<ProbeReport> reports(3);
  reports[0].mean_accuracy = 0.5;
  reports[1].mean_accuracy = 0.75;
  reports[2].mean_accuracy = 1.0;
  EXPECT_NEAR(mean_probe_accuracy(reports), 0.75, 1e-12);
  EXPECT_THROW(mean_probe_accuracy({}), ContractError);
}

TEST(Divergence, IdenticalModelsReportZeroEverywhere) {
  const EncoderModel& model = pretrained_tiny();
  EncoderModel copy = model.clone();
  DivergenceReport report = weight_divergence(model, copy, "copy");
  EXPECT_EQ(report.task, "copy");
  for (const auto& [name, pct] : report.parameters) EXPECT_EQ(pct, 0.0) << name;
  for (const auto& [name, pct] : report.layers) EXPECT_EQ(pct, 0.0) << name;
  for (const auto& [name, pct] : report.components) EXPECT_EQ(pct, 0.0) << name;
}

TEST(Divergence, DoubledPositiveWeightsReportExactlyHundred) {
  EncoderModel base(tiny_config(10), 3);
  for (const auto& [name, tensor] : base.params()) {
    (void)name;
    for (float& v : tensor.values()) v = std::fabs(v) + 0.05f;
  }
  EncoderModel doubled = base.clone();
  for (const auto& [name, tensor] : doubled.params()) {
    (void)name;
    for (float& v : tensor.values()) v *= 2.0f;
  }
  DivergenceReport report = weight_divergence(base, doubled);
  for (const auto& [name, pct] : report.parameters) EXPECT_NEAR(pct, 100.0, 1e-4) << name;
  for (const auto& [name, pct] : report.layers) EXPECT_NEAR(pct, 100.0, 1e-4) << name;
  for (const auto& [name, pct] : report.components) EXPECT_NEAR(pct, 100.0, 1e-4) << name;
}

TEST(Divergence, SinglePerturbationMatchesHandComputedPercent) {
  const EncoderModel& model = pretrained_tiny();
  EncoderModel poked = model.clone();
  const Tensor& target = poked.param("layer0.ffn.w1");
  double base_norm = 0.0;
  for (float v : target.values()) base_norm += std::fabs(static_cast<double>(v));
  const float before = target.values()[7];
  target.values()[7] = before + 0.25f;
  const double moved = std::fabs(static_cast<double>(target.values()[7]) -
                                 static_cast<double>(before));

  DivergenceReport report = weight_divergence(model, poked);
  EXPECT_NEAR(report.parameter("layer0.ffn.w1"), 100.0 * moved / base_norm, 1e-9);
  EXPECT_EQ(report.parameter("layer0.ffn.w2"), 0.0);
  EXPECT_EQ(report.parameter("embeddings.token"), 0.0);
  EXPECT_GT(report.parameter("layer0.ffn.w1"), 0.0);
}

TEST(Divergence, ZeroOnlyWhenBitIdentical) {
  const EncoderModel& model = pretrained_tiny();
  EncoderModel poked = model.clone();
  poked.param("embeddings.token").values()[3] += 1e-6f;
  DivergenceReport report = weight_divergence(model, poked);
  EXPECT_GT(report.parameter("embeddings.token"), 0.0);
  double layer_pct = -1.0;
  for (const auto& [name, pct] : report.layers) {
    if (name == "embeddings") layer_pct = pct;
  }
  EXPECT_GT(layer_pct, 0.0);
}

TEST(Divergence, AggregatesAreMeansOfConstituents) {
  EncoderModel before = pretrained_tiny().clone();
  before.attach_classifier(2, 77);
  EncoderModel after = before.clone();
  Rng rng(99);
  for (const auto& [name, tensor] : after.params()) {
    (void)name;
    for (float& v : tensor.values()) v += static_cast<float>(0.01 * rng.uniform());
  }
  DivergenceReport report = weight_divergence(before, after);

  std::map<std::string, std::pair<double, int>> layer_sums, component_sums;
  for (const auto& [name, pct] : report.parameters) {
    EXPECT_GE(pct, 0.0);
    const std::string layer = name.substr(0, name.find('.'));
    layer_sums[layer].first += pct;
    layer_sums[layer].second += 1;
    if (name.find(".attn.") != std::string::npos) {
      component_sums["attention"].first += pct;
      component_sums["attention"].second += 1;
    } else if (name.find(".ffn.") != std::string::npos) {
      component_sums["feed_forward"].first += pct;
      component_sums["feed_forward"].second += 1;
    }
  }
  ASSERT_EQ(report.layers.size(), layer_sums.size());
  for (const auto& [name, pct] : report.layers) {
    const auto& [sum, n] = layer_sums.at(name);
    EXPECT_NEAR(pct, sum / n, 1e-12) << name;
  }
  ASSERT_EQ(report.components.size(), 2u);
  for (const auto& [name, pct] : report.components) {
    const auto& [sum, n] = component_sums.at(name);
    EXPECT_NEAR(pct, sum / n, 1e-12) << name;
  }
}

TEST(Divergence, FrozenFinetuneMovesOnlyTheHead) {
  EncoderModel before = pretrained_tiny().clone();
  before.attach_classifier(2, 77);
  EncoderModel after = before.clone();
  ProbeTask task = first_token_probe(9, 48, 2, 7);
  TrainPlan plan;
  plan.learning_rate = 0.3;
  plan.batch_size = 8;
  plan.holdout_fraction = 0.0;
  finetune_classifier(plan, task.examples, after, true, 5);

  DivergenceReport report = weight_divergence(before, after, task.name);
  for (const auto& [name, pct] : report.parameters) {
    if (name.rfind("classifier.", 0) == 0) {
      EXPECT_GT(pct, 0.0) << name;
    } else {
      EXPECT_EQ(pct, 0.0) << name;
    }
  }
}

TEST(Divergence, RejectsMismatchedModels) {
  EncoderModel a(tiny_config(10), 1);
  EncoderModel bigger(tiny_config(12), 1);
  EXPECT_THROW(weight_divergence(a, bigger), ConfigError);

  EncoderModel b = a.clone();
  b.attach_classifier(2, 1);
  EXPECT_THROW(weight_divergence(a, b), ConfigError);
}

TEST(Divergence, JsonUsesStableParameterKeys) {
  const EncoderModel& model = pretrained_tiny();
  DivergenceReport report = weight_divergence(model, model.clone(), "t");
  nlohmann::json j = report;
  EXPECT_EQ(j["task"], "t");
  EXPECT_TRUE(j["parameters"].contains("embeddings.token"));
  EXPECT_TRUE(j["parameters"].contains("mlm_head.decoder.b"));
  EXPECT_TRUE(j["layers"].contains("layer0"));
  EXPECT_TRUE(j["components"].contains("attention"));
  EXPECT_TRUE(j["components"].contains("feed_forward"));
}

TEST(StandardVariants, CoversTheGridWithSharedBase) {
  TrainPlan base;
  base.masking.strategy = "random";
  base.epochs = 3;
  std::vector<PlanVariant> variants = standard_variants(base);
  ASSERT_EQ(variants.size(), 10u);
  EXPECT_EQ(variants[0].name, "baseline");
  EXPECT_EQ(variants[0].plan.masking.strategy, "random");
  EXPECT_EQ(variants[1].plan.masking.strategy, "high");
  EXPECT_EQ(variants[3].plan.masking.strategy, "mid");
  EXPECT_EQ(variants[6].name, "self-cold");
  EXPECT_EQ(variants[6].plan.masking.entropy_source, "self");
  EXPECT_EQ(variants[6].plan.masking.self_start_epoch, 0);
  EXPECT_EQ(variants[7].name, "self-init");
  EXPECT_GE(variants[7].plan.masking.self_start_epoch, 1);
  EXPECT_EQ(variants[8].plan.kd_mode, "complete_transfer");
  EXPECT_EQ(variants[9].plan.kd_mode, "transfer_after_init");
  for (const PlanVariant& v : variants) {
    EXPECT_EQ(v.plan.epochs, 3);
    v.plan.validate();
  }
}

class ExperimentGrid : public ::testing::Test {
 protected:
  static TrainPlan base_plan() {
    TrainPlan base;
    base.masking.strategy = "random";
    base.epochs = 2;
    base.batch_size = 8;
    base.learning_rate = 2e-3;
    base.holdout_fraction = 0.1;
    return base;
  }

  static std::vector<PlanVariant> small_grid() {
    std::vector<PlanVariant> out;
    for (const PlanVariant& v : standard_variants(base_plan())) {
      if (v.name == "baseline" || v.name == "high" || v.name == "kd-complete") out.push_back(v);
    }
    return out;
  }

  static std::vector<ProbeTask> small_tasks() {
    std::vector<ProbeTask> tasks = {presence_probe(9, 24, 5), chance_probe(9, 24, 2, 5)};
    for (ProbeTask& t : tasks) t.seeds = {1};
    return tasks;
  }

  static ExperimentSettings settings() {
    ExperimentSettings st;
    st.model = tiny_config(14);
    st.run_seeds = {1, 2};
    st.probe.learning_rate = 0.3;
    st.probe.epochs = 4;
    return st;
  }
};

TEST_F(ExperimentGrid, TableIsOneRowPerPlanOneColumnPerTaskPlusTotal) {
  EncoderModel teacher = pretrained_tiny().clone();
  ComparisonTable table =
      strategy_experiment(small_grid(), tiny_corpus(40, 14, 3), small_tasks(), &teacher, settings());

  ASSERT_EQ(table.rows.size(), 3u);
  EXPECT_EQ(table.task_names, (std::vector<std::string>{"presence", "chance"}));
  EXPECT_EQ(table.rows[0].variant, "baseline");
  EXPECT_EQ(table.rows[0].strategy, "random");
  for (const ComparisonRow& row : table.rows) {
    ASSERT_EQ(row.tasks.size(), 2u);
    for (const CellScore& cell : row.tasks) ASSERT_EQ(cell.per_seed.size(), 2u);
    ASSERT_EQ(row.total.per_seed.size(), 2u);
    ASSERT_EQ(row.holdout_loss.per_seed.size(), 2u);
    EXPECT_GT(row.holdout_loss.mean, 0.0);
  }

  const std::string text = render_comparison(table);
  EXPECT_NE(text.find("variant"), std::string::npos);
  EXPECT_NE(text.find("presence"), std::string::npos);
  EXPECT_NE(text.find("Total"), std::string::npos);
  EXPECT_NE(text.find("baseline"), std::string::npos);
}

TEST_F(ExperimentGrid, TotalIsTheMeanOfTaskScores) {
  EncoderModel teacher = pretrained_tiny().clone();
  ComparisonTable table =
      strategy_experiment(small_grid(), tiny_corpus(40, 14, 3), small_tasks(), &teacher, settings());
  for (const ComparisonRow& row : table.rows) {
    for (size_t s = 0; s < table.seeds.size(); ++s) {
      double mean = 0.0;
      for (const CellScore& cell : row.tasks) mean += cell.per_seed[s];
      mean /= static_cast<double>(row.tasks.size());
      EXPECT_NEAR(row.total.per_seed[s], mean, 1e-9);
    }
    double mean = 0.0;
    for (const CellScore& cell : row.tasks) mean += cell.mean;
    mean /= static_cast<double>(row.tasks.size());
    EXPECT_NEAR(row.total.mean, mean, 1e-9);
  }
}

TEST_F(ExperimentGrid, ReproducibleTables) {
  EncoderModel teacher = pretrained_tiny().clone();
  ComparisonTable once =
      strategy_experiment(small_grid(), tiny_corpus(40, 14, 3), small_tasks(), &teacher, settings());
  ComparisonTable twice =
      strategy_experiment(small_grid(), tiny_corpus(40, 14, 3), small_tasks(), &teacher, settings());
  EXPECT_EQ(nlohmann::json(once).dump(), nlohmann::json(twice).dump());
}

TEST_F(ExperimentGrid, RejectsNonComparablePlans) {
  EncoderModel teacher = pretrained_tiny().clone();
  std::vector<PlanVariant> grid = small_grid();
  grid[1].plan.batch_size = 4;
  EXPECT_THROW(
      strategy_experiment(grid, tiny_corpus(40, 14, 3), small_tasks(), &teacher, settings()),
      ConfigError);

  std::vector<PlanVariant> lonely = {small_grid()[0]};
  EXPECT_THROW(
      strategy_experiment(lonely, tiny_corpus(40, 14, 3), small_tasks(), &teacher, settings()),
      ConfigError);

  std::vector<PlanVariant> no_holdout = small_grid();
  for (PlanVariant& v : no_holdout) v.plan.holdout_fraction = 0.0;
  EXPECT_THROW(
      strategy_experiment(no_holdout, tiny_corpus(40, 14, 3), small_tasks(), &teacher, settings()),
      ConfigError);
}

TEST_F(ExperimentGrid, RejectsMissingTeacherAndEmptyTasks) {
  EXPECT_THROW(
      strategy_experiment(small_grid(), tiny_corpus(40, 14, 3), small_tasks(), nullptr, settings()),
      ConfigError);
  EncoderModel teacher = pretrained_tiny().clone();
  EXPECT_THROW(strategy_experiment(small_grid(), tiny_corpus(40, 14, 3), {}, &teacher, settings()),
               ConfigError);
}

}  // namespace
}  // namespace entmask
