// Command-line front end. Talks to the engine only through the C API.

#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "alpkd/alpkd.h"

namespace {

int report(alpkd_status status) {
  std::fprintf(stderr, "alpkd: error[%s]: %s\n", alpkd_status_name(status), alpkd_last_error());
  return alpkd_exit_code(status);
}

void print_log(const char* line, void*) { std::fprintf(stderr, "%s\n", line); }

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string output_root;
  std::string run_name;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("config", c.config_path, "Run configuration (INI); defaults when omitted");
  cmd->add_option("--set", c.overrides, "Override a config key: section.key=value")
      ->allow_extra_args(false);
  cmd->add_option("--output-root", c.output_root, "Directory that receives the run directory");
  cmd->add_option("--run-name", c.run_name, "Run directory name (default: timestamp + hash)");
}

// Loads the config and applies overrides; flag values go through the same
// validation as file keys.
alpkd_status build_config(const Common& c,
                          const std::vector<std::pair<std::string, std::string>>& flags,
                          alpkd_config** out) {
  alpkd_status st = c.config_path.empty() ? alpkd_config_new(out)
                                          : alpkd_config_load(c.config_path.c_str(), out);
  if (st != ALPKD_OK) return st;
  auto set = [&](const std::string& key, const std::string& value) {
    return alpkd_config_set(*out, key.c_str(), value.c_str());
  };
  for (const auto& o : c.overrides) {
    const auto eq = o.find('=');
    st = set(o.substr(0, eq), eq == std::string::npos ? "" : o.substr(eq + 1));
    if (st != ALPKD_OK) break;
  }
  if (st == ALPKD_OK && !c.output_root.empty()) st = set("output.root", c.output_root);
  if (st == ALPKD_OK && !c.run_name.empty()) st = set("output.run_name", c.run_name);
  for (const auto& [key, value] : flags) {
    if (st != ALPKD_OK) break;
    st = set(key, value);
  }
  if (st != ALPKD_OK) {
    alpkd_config_free(*out);
    *out = nullptr;
  }
  return st;
}

int finish(alpkd_status st, alpkd_run* run) {
  if (st != ALPKD_OK) return report(st);
  std::printf("run_dir=%s\nscore=%.17g\n", alpkd_run_dir(run), alpkd_run_score(run));
  alpkd_run_free(run);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Layer-alignment knowledge distillation on toy transformer encoders"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Suppress progress lines");

  Common teacher_opts;
  auto* teacher_cmd = app.add_subcommand("train-teacher", "Train a teacher encoder from scratch");
  add_common(teacher_cmd, teacher_opts);

  Common distill_opts;
  std::string teacher_ckpt, strategy, fusion;
  std::optional<std::size_t> student_layers;
  auto* distill_cmd = app.add_subcommand("distill", "Distill a student from a teacher checkpoint");
  add_common(distill_cmd, distill_opts);
  distill_cmd->add_option("--teacher-checkpoint", teacher_ckpt, "Teacher checkpoint file");
  distill_cmd->add_option("--strategy", strategy, alpkd_strategy_names());
  distill_cmd->add_option("--student-layers", student_layers, "Student depth m");
  distill_cmd->add_option("--fusion", fusion, "default|dot|kqv|concat");

  Common grid_opts;
  std::string strategies, grid_ckpt;
  std::optional<std::size_t> workers;
  auto* grid_cmd = app.add_subcommand("grid", "Grid-search strategies over the hyper-parameter grid");
  add_common(grid_cmd, grid_opts);
  grid_cmd->add_option("--teacher-checkpoint", grid_ckpt, "Teacher checkpoint file");
  grid_cmd->add_option("--strategies", strategies, "Comma-separated strategy names");
  grid_cmd->add_option("--workers", workers, "Worker threads (0 = available parallelism)");

  std::string run_dir, mode, compare_run;
  auto* analyze_cmd = app.add_subcommand("analyze", "Export attention, PCA or cosine data");
  analyze_cmd->add_option("--run-dir", run_dir, "Distillation run directory")->required();
  analyze_cmd->add_option("--mode", mode, "attention|pca|cosine")->required();
  analyze_cmd->add_option("--compare-run", compare_run, "Second run joining the PCA frame");

  app.add_subcommand("strategies", "List strategy names");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::fprintf(stderr, "alpkd: error[config]: %s\n", e.what());
    return 2;
  }
  if (!quiet) alpkd_set_log_handler(print_log, nullptr);
  for (const auto* opts : {&teacher_opts, &distill_opts, &grid_opts}) {
    for (const auto& o : opts->overrides) {
      if (o.find('=') == std::string::npos) {
        std::fprintf(stderr, "alpkd: error[config]: --set expects section.key=value, got '%s'\n",
                     o.c_str());
        return 2;
      }
    }
  }

  alpkd_config* config = nullptr;
  alpkd_run* run = nullptr;
  alpkd_status st = ALPKD_OK;

  if (*teacher_cmd) {
    st = build_config(teacher_opts, {}, &config);
    if (st == ALPKD_OK) st = alpkd_train_teacher(config, &run);
  } else if (*distill_cmd) {
    std::vector<std::pair<std::string, std::string>> flags;
    if (!teacher_ckpt.empty()) flags.emplace_back("distill.teacher_checkpoint", teacher_ckpt);
    if (!strategy.empty()) flags.emplace_back("distill.strategy", strategy);
    if (student_layers) flags.emplace_back("distill.student_layers", std::to_string(*student_layers));
    if (!fusion.empty()) flags.emplace_back("distill.fusion", fusion);
    st = build_config(distill_opts, flags, &config);
    if (st == ALPKD_OK) st = alpkd_distill(config, &run);
  } else if (*grid_cmd) {
    std::vector<std::pair<std::string, std::string>> flags;
    if (!grid_ckpt.empty()) flags.emplace_back("distill.teacher_checkpoint", grid_ckpt);
    if (!strategies.empty()) flags.emplace_back("grid.strategies", strategies);
    if (workers) flags.emplace_back("grid.workers", std::to_string(*workers));
    st = build_config(grid_opts, flags, &config);
    if (st == ALPKD_OK) st = alpkd_grid(config, &run);
  } else if (*analyze_cmd) {
    st = alpkd_analyze(run_dir.c_str(), mode.c_str(),
                       compare_run.empty() ? nullptr : compare_run.c_str(), &run);
  } else {
    std::printf("%s\n", alpkd_strategy_names());
    return 0;
  }
  alpkd_config_free(config);
  return finish(st, run);
}
