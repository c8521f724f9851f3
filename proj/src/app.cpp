#include "app.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>

#include "alpkd/analysis.hpp"
#include "alpkd/errors.hpp"
#include "alpkd/trainer.hpp"

namespace alpkd::app {

namespace fs = std::filesystem;

namespace {

constexpr const char* kConfigFile = "effective_config.ini";
constexpr const char* kMetricsFile = "metrics.json";
constexpr const char* kTimingFile = "timing.json";
constexpr const char* kStepsFile = "steps.csv";
constexpr const char* kTeacherCkpt = "teacher.ckpt";
constexpr const char* kStudentCkpt = "student.ckpt";
constexpr const char* kFusionFile = "fusion.bin";

std::string hex16(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
  os.flush();
  if (!os) throw IoError("failed writing " + path.string());
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

fs::path make_run_dir(const RunConfig& config, const char* command) {
  const fs::path root = config.output_root.empty() ? default_output_root() : config.output_root;
  fs::path dir;
  if (!config.run_name.empty()) {
    dir = root / config.run_name;
    std::error_code ec;
    if (fs::exists(dir, ec) && !fs::is_empty(dir, ec)) {
      throw IoError("run directory " + dir.string() + " already exists and is not empty");
    }
  } else {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream name;
    name << std::put_time(&tm, "%Y%m%dT%H%M%SZ") << '-' << command << '-'
         << hex16(config_hash(config)).substr(0, 12);
    dir = root / name.str();
    for (int k = 2; fs::exists(dir); ++k) dir = root / (name.str() + "-" + std::to_string(k));
  }
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create run directory " + dir.string() + ": " + ec.message());
  return dir;
}

struct StepLog {
  std::ofstream os;
  explicit StepLog(const fs::path& path) : os(path, std::ios::trunc) {
    if (!os) throw IoError("cannot write " + path.string());
    os << "step,epoch,l_ce,l_kd,l_hidden,total\n";
  }
  void operator()(std::size_t step, std::size_t epoch, const LossBreakdown& b) {
    os << step << ',' << epoch << ',' << nlohmann::json(b.l_ce).dump() << ','
       << nlohmann::json(b.l_kd).dump() << ',' << nlohmann::json(b.l_hidden).dump() << ','
       << nlohmann::json(b.total).dump() << '\n';
  }
};

RunHooks hooks_for(const LogFn& log, StepLog* steps) {
  RunHooks h;
  h.log = log;
  if (steps) {
    h.on_step = [steps](std::size_t s, std::size_t e, const LossBreakdown& b) { (*steps)(s, e, b); };
  }
  return h;
}

void write_timing(const fs::path& dir, double seconds) {
  write_json(dir / kTimingFile, {{"wall_clock_seconds", seconds}});
}

// Task + finalized config. The teacher checkpoint, when present, decides
// the teacher architecture.
struct Prepared {
  RunConfig config;
  TaskData task;
};

Prepared prepare(const RunConfig& in) {
  Prepared p{in, make_task(in.task)};
  finalize(p.config, p.task);
  return p;
}

Encoder load_teacher(RunConfig& config) {
  if (config.teacher_checkpoint.empty()) {
    throw ConfigError("no teacher checkpoint given (distill.teacher_checkpoint)");
  }
  std::error_code ec;
  const auto abs = fs::absolute(config.teacher_checkpoint, ec);
  if (!ec) config.teacher_checkpoint = abs.lexically_normal();
  Encoder teacher = load_checkpoint(config.teacher_checkpoint);
  const auto& tc = teacher.config();
  if (tc.vocab_size != config.teacher.vocab_size || tc.num_classes != config.teacher.num_classes ||
      tc.max_seq_len < config.teacher.max_seq_len) {
    throw ConfigError("teacher checkpoint " + config.teacher_checkpoint.string() +
                      " does not fit the task (vocab " + std::to_string(tc.vocab_size) +
                      ", classes " + std::to_string(tc.num_classes) + ", max_seq_len " +
                      std::to_string(tc.max_seq_len) + ")");
  }
  config.teacher = tc;
  if (config.distill.student_layers > tc.num_layers) {
    throw ConfigError("distill.student_layers " + std::to_string(config.distill.student_layers) +
                      " exceeds the teacher's " + std::to_string(tc.num_layers) + " layers");
  }
  return teacher;
}

std::optional<FusionMethod> rebuild_fusion(const RunConfig& config, const AlignmentPlan& plan,
                                           const fs::path& dir) {
  const auto s = config.distill.strategy;
  const auto d = config.teacher.hidden_dim;
  // Must mirror the construction in distill(); parameters then come from disk.
  if (s == DistillStrategy::CkdNo || s == DistillStrategy::CkdPo) {
    auto f = FusionMethod::ckd(plan, d, 0);
    f.load(dir / kFusionFile);
    return f;
  }
  if (s == DistillStrategy::AlpNo || s == DistillStrategy::AlpPo || s == DistillStrategy::AlpFull) {
    if (config.distill.fusion == FusionChoice::Kqv) {
      auto f = FusionMethod::kqv(plan, d, config.distill.kqv_heads, 0);
      f.load(dir / kFusionFile);
      return f;
    }
    return FusionMethod::dot();
  }
  return std::nullopt;
}

}  // namespace

fs::path default_output_root() {
  if (const char* env = std::getenv("ALPKD_OUTPUT_ROOT"); env && *env) return env;
  return "runs";
}

RunOutcome train_teacher(const RunConfig& in, const LogFn& log) {
  auto [config, task] = prepare(in);
  const auto start = std::chrono::steady_clock::now();
  const auto dir = make_run_dir(config, "teacher");
  write_text(dir / kConfigFile, to_ini(config));
  StepLog steps(dir / kStepsFile);
  auto result = alpkd::train_teacher(config.teacher, config.teacher_train, task, dir / kTeacherCkpt,
                              hooks_for(log, &steps));
  auto metrics = result.record.to_json();
  metrics["command"] = "train-teacher";
  metrics["parameter_hash"] = hex16(parameter_hash(result.model));
  const bool floor_met = result.record.best_val_accuracy >= config.teacher_accuracy_floor;
  metrics["accuracy_floor"] = config.teacher_accuracy_floor;
  metrics["accuracy_floor_met"] = floor_met;
  write_json(dir / kMetricsFile, metrics);
  write_timing(dir, std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
  if (!floor_met) {
    throw AccuracyFloorError("teacher validation accuracy " +
                             nlohmann::json(result.record.best_val_accuracy).dump() +
                             " below floor " + nlohmann::json(config.teacher_accuracy_floor).dump() +
                             " (run " + dir.string() + ")");
  }
  return {dir, result.record.best_val_accuracy, metrics};
}

RunOutcome distill(const RunConfig& in, const LogFn& log) {
  auto [config, task] = prepare(in);
  Encoder teacher = load_teacher(config);
  check_strategy(config.distill);
  const auto start = std::chrono::steady_clock::now();
  const auto dir = make_run_dir(config, strategy_name(config.distill.strategy));
  write_text(dir / kConfigFile, to_ini(config));
  StepLog steps(dir / kStepsFile);
  auto result = alpkd::distill(teacher, config.distill, task, hooks_for(log, &steps));
  save_checkpoint(result.student, dir / kStudentCkpt);
  result.record.checkpoint = kStudentCkpt;
  if (result.fusion && !result.fusion->parameters().empty()) {
    result.fusion->save(dir / kFusionFile);
  }
  auto metrics = result.record.to_json();
  metrics["command"] = "distill";
  metrics["teacher_checkpoint_hash"] = hex16(result.record.teacher_hash_before);
  write_json(dir / kMetricsFile, metrics);
  write_timing(dir, std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
  return {dir, result.record.best_val_accuracy, metrics};
}

RunOutcome grid(const RunConfig& in, const LogFn& log) {
  auto [config, task] = prepare(in);
  Encoder teacher = load_teacher(config);
  const auto start = std::chrono::steady_clock::now();
  const auto dir = make_run_dir(config, "grid");
  write_text(dir / kConfigFile, to_ini(config));
  const auto workers = config.grid_workers ? config.grid_workers
                                           : std::max(1u, std::thread::hardware_concurrency());
  auto result = grid_search(teacher, task, config.distill, config.grid_strategies, config.grid,
                            workers, hooks_for(log, nullptr));
  result.write_csv(dir / "grid.csv");

  const auto train_cache = make_teacher_cache(teacher, task.train);
  const auto val_cache = make_teacher_cache(teacher, task.validation);
  nlohmann::json winners = nlohmann::json::array();
  double best = 0.0;
  for (const auto& [strategy, index] : result.best) {
    const auto& cell = result.cells[index];
    auto sweep = seed_sweep(teacher, task, cell.config, config.grid_seeds, workers, &cell.record,
                            {&train_cache, &val_cache});
    if (log) {
      log(std::string("winner ") + strategy_name(strategy) + " mean_val_acc=" +
          nlohmann::json(sweep.mean).dump() + " over " + std::to_string(config.grid_seeds) +
          " seed(s)");
    }
    auto w = sweep.to_json();
    w["cell"] = index;
    w["record"] = cell.record.to_json();
    winners.push_back(std::move(w));
    best = std::max(best, sweep.mean);
  }
  std::size_t skipped = 0;
  for (const auto& c : result.cells) skipped += c.skipped ? 1 : 0;
  nlohmann::json metrics = {{"command", "grid"},
                            {"cells", result.cells.size()},
                            {"skipped", skipped},
                            {"table", "grid.csv"},
                            {"winners", winners}};
  write_json(dir / kMetricsFile, metrics);
  write_timing(dir, std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
  return {dir, best, metrics};
}

RunOutcome analyze(const fs::path& run_dir, const std::string& mode,
                   const std::optional<fs::path>& compare_run, const LogFn& log) {
  if (mode != "attention" && mode != "pca" && mode != "cosine") {
    throw ConfigError("unknown analysis mode '" + mode + "' (valid: attention|pca|cosine)");
  }
  struct Loaded {
    RunConfig config;
    Encoder student;
    fs::path dir;
  };
  auto load_run = [](const fs::path& dir) {
    if (!fs::exists(dir / kStudentCkpt)) {
      throw IoError(dir.string() + " is not a distillation run (no " + kStudentCkpt + ")");
    }
    RunConfig config = load_run_config(dir / kConfigFile);
    Encoder student = load_checkpoint(dir / kStudentCkpt);
    return Loaded{std::move(config), std::move(student), dir};
  };
  Loaded run = load_run(run_dir);
  auto [config, task] = prepare(run.config);
  Encoder teacher = load_teacher(config);
  const auto n = teacher.num_layers();
  const auto m = run.student.num_layers();
  const auto out_dir = run_dir / "analysis";
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  nlohmann::json summary = {{"command", "analyze"},
                            {"mode", mode},
                            {"strategy", strategy_name(config.distill.strategy)}};
  double headline = 0.0;

  if (mode == "attention") {
    const auto s = config.distill.strategy;
    if (s == DistillStrategy::CkdNo || s == DistillStrategy::CkdPo) {
      throw ConfigError("no attention weights for concatenation fusion");
    }
    if (s != DistillStrategy::AlpNo && s != DistillStrategy::AlpPo &&
        s != DistillStrategy::AlpFull) {
      throw ConfigError(std::string("no attention weights: strategy ") + strategy_name(s) +
                        " has no attention fusion");
    }
    const auto plan = *plan_for(config.distill, n);
    const auto fusion = rebuild_fusion(config, plan, run_dir);
    const auto ids = sample_examples(task.validation.size(), config.analysis.attention_examples,
                                     config.analysis.sample_seed);
    const auto dump = dump_attention(run.student, teacher, plan, *fusion, task.validation, ids,
                                     config.analysis.attention_layer);
    dump.write_csv(out_dir / "attention.csv");
    summary["file"] = "attention.csv";
    summary["student_layer"] = config.analysis.attention_layer;
    summary["teacher_layers"] = plan.at(config.analysis.attention_layer);
    summary["examples"] = ids;
    summary["rows"] = dump.rows.size();
    headline = static_cast<double>(dump.rows.size());
  } else {
    const auto ids = sample_examples(task.validation.size(), config.analysis.cosine_examples,
                                     config.analysis.sample_seed);
    const auto teacher_cls = collect_cls(teacher, task.validation, ids);
    const auto student_cls = collect_cls(run.student, task.validation, ids);
    const auto pairs = default_cosine_pairs(n, m);
    if (mode == "cosine") {
      const auto report = cosine_distance_report(student_cls, teacher_cls, pairs, ids);
      report.write_csv(out_dir / "cosine.csv");
      nlohmann::json means = nlohmann::json::object();
      std::size_t flagged = 0;
      for (const auto& r : report.rows) flagged += r.zero_norm ? 1 : 0;
      for (const auto& p : pairs) means[p.label()] = report.mean(p.label());
      summary["file"] = "cosine.csv";
      summary["examples"] = ids.size();
      summary["mean_distance"] = means;
      summary["zero_norm_rows"] = flagged;
      if (!pairs.empty()) headline = report.mean(pairs.front().label());
    } else {
      std::optional<Loaded> other;
      std::vector<Tensor> other_cls;
      if (compare_run) {
        other.emplace(load_run(*compare_run));
        other_cls = collect_cls(other->student, task.validation, ids);
      }
      std::ofstream csv(out_dir / "pca.csv", std::ios::trunc);
      if (!csv) throw IoError("cannot write " + (out_dir / "pca.csv").string());
      csv << "tag,example_id,pc1,pc2\n";
      nlohmann::json reports = nlohmann::json::array();
      for (const auto& p : pairs) {
        std::vector<TaggedStates> sets{
            {p.label() + "/teacher", ids, teacher_cls[p.teacher - 1]},
            {p.label() + "/student", ids, student_cls[p.student - 1]}};
        if (other && p.student <= other_cls.size()) {
          sets.push_back({p.label() + "/compare", ids, other_cls[p.student - 1]});
        }
        const auto report = pca_project(sets);
        for (const auto& r : report.rows) {
          csv << r.tag << ',' << r.example_id << ',' << nlohmann::json(r.pc1).dump() << ','
              << nlohmann::json(r.pc2).dump() << '\n';
        }
        reports.push_back({{"pair", p.label()},
                           {"explained_variance", report.explained_variance},
                           {"degenerate", report.degenerate}});
        headline = report.explained_variance[0] + report.explained_variance[1];
      }
      csv.flush();
      if (!csv) throw IoError("failed writing " + (out_dir / "pca.csv").string());
      summary["file"] = "pca.csv";
      summary["projections"] = reports;
      if (other) {
        summary["compare_strategy"] = strategy_name(other->config.distill.strategy);
      }
    }
  }
  write_json(out_dir / (mode + ".json"), summary);
  if (log) log("wrote " + (out_dir / summary["file"].get<std::string>()).string());
  return {run_dir, headline, summary};
}

}  // namespace alpkd::app
