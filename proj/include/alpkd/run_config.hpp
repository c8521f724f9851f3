#pragma once

// Run configuration files: INI text with fixed sections and a strict key
// set. Every key has a default, and the effective configuration (defaults
// materialized) is what gets persisted next to each run.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "alpkd/data.hpp"
#include "alpkd/encoder.hpp"
#include "alpkd/trainer.hpp"

namespace alpkd {

struct AnalysisConfig {
  std::size_t attention_examples = 10;
  std::size_t cosine_examples = 100;
  std::size_t attention_layer = 1;
  std::uint64_t sample_seed = 11;
};

struct RunConfig {
  TaskSpec task;
  EncoderConfig teacher;  // vocab_size, max_seq_len, num_classes follow the task
  TrainConfig teacher_train;
  double teacher_accuracy_floor = 0.0;
  TrainConfig distill;  // distill.student_layers is the student depth
  std::filesystem::path teacher_checkpoint;
  std::vector<DistillStrategy> grid_strategies{DistillStrategy::Nkd, DistillStrategy::Rkd,
                                               DistillStrategy::Pkd, DistillStrategy::AlpFull};
  GridAxes grid;
  std::size_t grid_workers = 0;  // 0 = available parallelism
  // Each strategy's winning cell is rerun with this many consecutive seeds
  // (the cell's own seed first) and the accuracies averaged.
  std::size_t grid_seeds = 1;
  AnalysisConfig analysis;
  std::filesystem::path output_root;  // empty = $ALPKD_OUTPUT_ROOT, else ./runs
  std::string run_name;               // empty = timestamp + config hash

  RunConfig();
};

// Throws ConfigError naming the offending key (and line, when known).
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);

// Canonical INI text with every key present.
std::string to_ini(const RunConfig& config);

// "section.key" assignment with the same validation as the file parser.
void set_config_value(RunConfig& config, const std::string& dotted_key, const std::string& value);
std::string get_config_value(const RunConfig& config, const std::string& dotted_key);

// Fills the task-dependent encoder fields and checks cross-section rules.
void finalize(RunConfig& config, const TaskData& task);

// FNV-1a of to_ini() with the output section blanked.
std::uint64_t config_hash(const RunConfig& config);

std::string format_picks(const std::vector<std::optional<std::size_t>>& picks);
std::vector<std::optional<std::size_t>> parse_picks(const std::string& text);

}  // namespace alpkd
