#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "entmask/runner.hpp"

namespace {

struct GlobalArgs {
  std::string config_path;
  std::string out_root;
  std::string teacher;
  std::optional<uint64_t> seed;
  bool force = false;
  bool mask_trace = false;
};

void add_common_flags(CLI::App* cmd, GlobalArgs& args, bool needs_config) {
  CLI::Option* config = cmd->add_option("--config", args.config_path,
                                        "Path to the declarative run configuration");
  if (needs_config) config->required();
  cmd->add_option("--seed", args.seed, "Override plan.run_seed");
  cmd->add_option("--out", args.out_root, "Override the output root directory");
  cmd->add_option("--teacher", args.teacher, "Override the teacher checkpoint path");
  cmd->add_flag("--force", args.force, "Replace an existing run directory");
  cmd->add_flag("--mask-trace", args.mask_trace, "Write a JSON-lines mask audit log");
}

entmask::RunConfig load_with_overrides(const GlobalArgs& args) {
  entmask::RunConfig cfg = entmask::load_run_config(args.config_path);
  if (args.seed) {
    cfg.plan.run_seed = *args.seed;
    cfg.raw["plan"]["run_seed"] = *args.seed;
  }
  if (!args.out_root.empty()) {
    cfg.out_root = args.out_root;
    cfg.raw["out_root"] = args.out_root;
  }
  if (!args.teacher.empty()) {
    if (!std::filesystem::exists(args.teacher)) {
      throw entmask::ConfigError("--teacher: no such file: " + args.teacher);
    }
    cfg.teacher = args.teacher;
    cfg.raw["teacher"] = args.teacher;
  }
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Entropy-aware masked language model training and analysis"};
  app.require_subcommand(1);

  GlobalArgs train_args, pre_args, eval_args, cmp_args;
  std::string eval_run_dir;
  bool eval_freeze = false, eval_full = false;
  std::string div_pre, div_ft, div_out = "divergence.json";

  CLI::App* train = app.add_subcommand("train-teacher",
                                       "Pretrain a random-baseline reference model");
  add_common_flags(train, train_args, true);

  CLI::App* pre = app.add_subcommand("pretrain", "Run one masked-language-model plan");
  add_common_flags(pre, pre_args, true);

  CLI::App* eval = app.add_subcommand("evaluate", "Fine-tune probes on a finished run");
  add_common_flags(eval, eval_args, true);
  eval->add_option("run_dir", eval_run_dir, "Run directory holding final.ckpt")->required();
  eval->add_flag("--freeze", eval_freeze, "Freeze the encoder body during probe fine-tuning");
  eval->add_flag("--full", eval_full, "Fine-tune the whole model during probes");

  CLI::App* cmp = app.add_subcommand("compare", "Train and score a grid of masking plans");
  add_common_flags(cmp, cmp_args, true);

  CLI::App* div = app.add_subcommand("divergence",
                                     "Report per-parameter drift between two checkpoints");
  div->add_option("pretrained", div_pre, "Checkpoint before fine-tuning")->required();
  div->add_option("finetuned", div_ft, "Checkpoint after fine-tuning")->required();
  div->add_option("--out", div_out, "Report file path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) {
      entmask::cmd_train_teacher(load_with_overrides(train_args), train_args.force, std::cout);
    } else if (pre->parsed()) {
      entmask::cmd_pretrain(load_with_overrides(pre_args), pre_args.force, pre_args.mask_trace,
                            std::cout);
    } else if (eval->parsed()) {
      if (eval_freeze && eval_full) {
        throw entmask::ConfigError("evaluate: --freeze and --full are mutually exclusive");
      }
      std::optional<bool> freeze;
      if (eval_freeze) freeze = true;
      if (eval_full) freeze = false;
      entmask::cmd_evaluate(load_with_overrides(eval_args), eval_run_dir, freeze,
                            eval_args.force, std::cout);
    } else if (cmp->parsed()) {
      entmask::cmd_compare(load_with_overrides(cmp_args), cmp_args.force, std::cout);
    } else if (div->parsed()) {
      entmask::cmd_divergence(div_pre, div_ft, div_out, std::cout);
    }
  } catch (const entmask::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const entmask::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const entmask::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
