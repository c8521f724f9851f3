#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "alpkd/alignment.hpp"
#include "alpkd/data.hpp"
#include "alpkd/encoder.hpp"
#include "alpkd/fusion.hpp"
#include "alpkd/losses.hpp"
#include "alpkd/optim.hpp"
#include "json.hpp"

namespace alpkd {

// Student training regimes, named after the usual table rows.
enum class DistillStrategy { Nkd, Rkd, Pkd, CkdNo, CkdPo, AlpNo, AlpPo, AlpFull };

const char* strategy_name(DistillStrategy s);
DistillStrategy strategy_from_name(const std::string& name);
std::string valid_strategy_names();
std::vector<DistillStrategy> all_strategies();

// Fusion override for the attention strategies: the default is the
// strategy's own kind (dot product for alp-*, concatenation for ckd-*).
enum class FusionChoice { Default, Dot, Kqv, Concat };
const char* fusion_choice_name(FusionChoice f);
FusionChoice fusion_choice_from_name(const std::string& name);

struct TrainConfig {
  double learning_rate = 5e-5;
  std::size_t batch_size = 32;
  std::size_t epochs = 3;
  double temperature = 1.0;
  double eta = 0.0;
  double lambda = 0.0;
  std::uint64_t seed = 1;
  OptimizerKind optimizer = OptimizerKind::Adam;
  DistillStrategy strategy = DistillStrategy::Nkd;
  FusionChoice fusion = FusionChoice::Default;
  std::size_t kqv_heads = 1;
  std::size_t student_layers = 2;
  // Empty selects the default: first layer of each equal teacher bucket.
  std::vector<std::optional<std::size_t>> pkd_picks;
  bool include_last_layer = false;
  bool kd_t_squared = false;
  bool teacher_dropout = false;

  LossWeights weights() const;
  double beta() const { return 1.0 - eta - lambda; }
};

nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const EncoderConfig& c);
nlohmann::json to_json(const LossBreakdown& b);

// Alignment plan used by a strategy, or nullopt for nkd/rkd.
std::optional<AlignmentPlan> plan_for(const TrainConfig& config, std::size_t teacher_layers);
std::vector<std::optional<std::size_t>> default_pkd_picks(std::size_t n, std::size_t m,
                                                          bool include_last);
// Throws ConfigError for inconsistent strategy/fusion/weight combinations.
void check_strategy(const TrainConfig& config);

struct EpochRecord {
  std::size_t epoch = 0;
  LossBreakdown train;  // example-weighted mean over the epoch
  double val_accuracy = 0.0;
  // ALP kinds: validation-mean attention weights, one row per participating
  // student layer, one entry per teacher layer in A(j).
  std::vector<std::vector<double>> mean_alpha;
};

struct RunRecord {
  std::string role;  // "teacher" or "student"
  nlohmann::json config;
  std::string plan;  // alignment layout, empty when unused
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val_accuracy = 0.0;
  double wall_clock_seconds = 0.0;
  std::string checkpoint;
  std::uint64_t teacher_hash_before = 0;
  std::uint64_t teacher_hash_after = 0;

  // Deterministic part only; wall-clock time is excluded.
  nlohmann::json to_json() const;
};

struct RunHooks {
  std::function<void(const std::string&)> log;
  // Called after every optimizer step with the trainable parameters.
  std::function<void(std::size_t step, std::vector<Tensor>& params)> after_step;
  // Called after every optimizer step with that batch's loss values.
  std::function<void(std::size_t step, std::size_t epoch, const LossBreakdown&)> on_step;
};

// Per-example teacher CLS states and logits computed once in eval mode.
struct TeacherCache {
  std::size_t layers = 0, hidden = 0, classes = 0;
  std::vector<double> cls;     // [example][layer][d]
  std::vector<double> logits;  // [example][class]

  std::vector<Tensor> cls_batch(std::span<const std::size_t> indices) const;
  Tensor logits_batch(std::span<const std::size_t> indices) const;
};

TeacherCache make_teacher_cache(const Encoder& teacher, const Dataset& data,
                                std::size_t batch_size = 256);

double evaluate_accuracy(const Encoder& model, const Dataset& data, std::size_t batch_size = 256);

struct TeacherResult {
  Encoder model;
  RunRecord record;
};

// Trains an encoder from scratch on cross-entropy. The returned model is the
// best-validation epoch. When checkpoint is set the model is saved there on
// success only.
TeacherResult train_teacher(const EncoderConfig& encoder_config, const TrainConfig& config,
                            const TaskData& task,
                            const std::optional<std::filesystem::path>& checkpoint = {},
                            const RunHooks& hooks = {});

struct DistillResult {
  Encoder student;
  std::optional<AlignmentPlan> plan;
  std::optional<FusionMethod> fusion;
  RunRecord record;
};

struct TeacherCaches {
  const TeacherCache* train = nullptr;
  const TeacherCache* validation = nullptr;
};

// Initializes a student from the teacher's first m layers and optimizes
// total_loss. The teacher is never modified.
DistillResult distill(const Encoder& teacher, const TrainConfig& config, const TaskData& task,
                      const RunHooks& hooks = {}, TeacherCaches caches = {});

// The losses distill() optimizes on one batch, exposed for audits.
struct BatchObjective {
  TotalLoss total;
  HiddenLoss hidden;
};
BatchObjective distill_objective(const ForwardOutput& student_out, std::span<const int> labels,
                                 std::span<const Tensor> teacher_cls, const Tensor& teacher_logits,
                                 const TrainConfig& config,
                                 const std::optional<AlignmentPlan>& plan,
                                 const std::optional<FusionMethod>& fusion);

struct GridAxes {
  std::vector<double> learning_rates{1e-5, 2e-5, 5e-5};
  std::vector<double> temperatures{1, 5, 10, 20};
  std::vector<double> etas{0.2, 0.5, 0.7};
  std::vector<double> lambdas{0.2, 0.5, 0.7};
  // PKD alternatives; empty uses the default picks only.
  std::vector<std::vector<std::optional<std::size_t>>> pkd_pick_sets;
};

struct GridCell {
  TrainConfig config;
  bool skipped = false;
  std::string skip_reason;
  RunRecord record;
};

struct GridResult {
  std::vector<GridCell> cells;
  // Index into cells of the winner per requested strategy, same order.
  std::vector<std::pair<DistillStrategy, std::size_t>> best;

  void write_csv(const std::filesystem::path& path) const;
};

// Every cell of the strategy's grid, including ones with beta < 0 (marked
// skipped). nkd: lr. rkd: lr x eta x T. Others: lr x eta x lambda x T (x
// PKD pick sets).
std::vector<GridCell> expand_grid(const TrainConfig& base, DistillStrategy strategy,
                                  const GridAxes& axes);

GridResult grid_search(const Encoder& teacher, const TaskData& task, const TrainConfig& base,
                       std::span<const DistillStrategy> strategies, const GridAxes& axes,
                       std::size_t workers = 1, const RunHooks& hooks = {});

struct SeedSummary {
  DistillStrategy strategy = DistillStrategy::Nkd;
  TrainConfig config;  // the winning cell; seeds run from config.seed upward
  std::vector<double> accuracies;
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation, 0 for a single seed
  nlohmann::json to_json() const;
};

// Reruns a configuration with `seeds` consecutive seeds. The first run reuses
// `first` when given (the grid cell's own record).
SeedSummary seed_sweep(const Encoder& teacher, const TaskData& task, const TrainConfig& config,
                       std::size_t seeds, std::size_t workers = 1,
                       const RunRecord* first = nullptr, TeacherCaches caches = {});

}  // namespace alpkd
