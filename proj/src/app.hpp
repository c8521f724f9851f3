#pragma once

// Command implementations shared by the C API. Each command owns one run
// directory and writes everything it produces there.

#include <filesystem>
#include <functional>
#include <optional>
#include <string>

#include "alpkd/run_config.hpp"
#include "json.hpp"

namespace alpkd::app {

using LogFn = std::function<void(const std::string&)>;

struct RunOutcome {
  std::filesystem::path run_dir;
  double best_accuracy = 0.0;
  nlohmann::json summary;
};

RunOutcome train_teacher(const RunConfig& config, const LogFn& log);
RunOutcome distill(const RunConfig& config, const LogFn& log);
RunOutcome grid(const RunConfig& config, const LogFn& log);
// mode: attention | pca | cosine. Outputs land in <run_dir>/analysis/.
RunOutcome analyze(const std::filesystem::path& run_dir, const std::string& mode,
                   const std::optional<std::filesystem::path>& compare_run, const LogFn& log);

std::filesystem::path default_output_root();

}  // namespace alpkd::app
