#include "alpkd/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "alpkd/errors.hpp"
#include "alpkd/ops.hpp"

namespace alpkd {

namespace {

constexpr std::uint64_t kFusionSeedSalt = 0x5f3759dfULL;
constexpr std::uint64_t kDropoutSeedSalt = 0xd1b54a32d192ed03ULL;

struct StrategyInfo {
  DistillStrategy strategy;
  const char* name;
};

constexpr StrategyInfo kStrategies[] = {
    {DistillStrategy::Nkd, "nkd"},      {DistillStrategy::Rkd, "rkd"},
    {DistillStrategy::Pkd, "pkd"},      {DistillStrategy::CkdNo, "ckd-no"},
    {DistillStrategy::CkdPo, "ckd-po"}, {DistillStrategy::AlpNo, "alp-no"},
    {DistillStrategy::AlpPo, "alp-po"}, {DistillStrategy::AlpFull, "alp-full"},
};

bool is_ckd(DistillStrategy s) {
  return s == DistillStrategy::CkdNo || s == DistillStrategy::CkdPo;
}
bool is_alp(DistillStrategy s) {
  return s == DistillStrategy::AlpNo || s == DistillStrategy::AlpPo ||
         s == DistillStrategy::AlpFull;
}

std::string fmt(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string picks_str(const std::vector<std::optional<std::size_t>>& picks) {
  std::string s;
  for (std::size_t i = 0; i < picks.size(); ++i) {
    if (i) s += ';';
    s += picks[i] ? std::to_string(*picks[i]) : "-";
  }
  return s;
}

std::string describe_cell(const TrainConfig& c) {
  std::string s = std::string(strategy_name(c.strategy)) + " lr=" + fmt(c.learning_rate) +
                  " T=" + fmt(c.temperature) + " eta=" + fmt(c.eta) + " lambda=" + fmt(c.lambda);
  if (!c.pkd_picks.empty()) s += " picks=" + picks_str(c.pkd_picks);
  return s;
}

void emit(const RunHooks& hooks, const std::string& msg) {
  if (hooks.log) hooks.log(msg);
}

bool all_finite(const std::vector<Tensor>& params) {
  for (const auto& p : params) {
    for (double v : p.data()) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

std::vector<std::vector<double>> snapshot(const std::vector<Tensor>& params) {
  std::vector<std::vector<double>> out;
  for (const auto& p : params) out.emplace_back(p.data().begin(), p.data().end());
  return out;
}

void restore(std::vector<Tensor>& params, const std::vector<std::vector<double>>& values) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::copy(values[i].begin(), values[i].end(), params[i].data().begin());
  }
}

void add_scaled(LossBreakdown& acc, const LossBreakdown& b, double w) {
  acc.l_ce += w * b.l_ce;
  acc.l_kd += w * b.l_kd;
  acc.l_hidden += w * b.l_hidden;
  acc.total += w * b.total;
  if (acc.per_layer_hidden.size() < b.per_layer_hidden.size()) {
    acc.per_layer_hidden.resize(b.per_layer_hidden.size(), 0.0);
  }
  for (std::size_t i = 0; i < b.per_layer_hidden.size(); ++i) {
    acc.per_layer_hidden[i] += w * b.per_layer_hidden[i];
  }
}

using StepFn = std::function<TotalLoss(const Batch&, std::mt19937_64&)>;
using EvalFn = std::function<void(EpochRecord&)>;

// Shared epoch loop. Tracks the best validation epoch, restores its
// parameters into `params` before returning.
void run_epochs(std::vector<Tensor>& params, const TrainConfig& config, const Dataset& train,
                const StepFn& step_fn, const EvalFn& eval_fn, const RunHooks& hooks,
                RunRecord& record) {
  Optimizer opt(config.optimizer, config.learning_rate);
  std::mt19937_64 dropout_rng(config.seed ^ kDropoutSeedSalt);
  std::vector<std::vector<double>> best_params = snapshot(params);
  double best = -1.0;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    EpochRecord er;
    er.epoch = epoch;
    const auto plan = batches(train, config.batch_size, config.seed, epoch);
    for (const auto& batch : plan) {
      Optimizer::zero_grad(params);
      TotalLoss loss = step_fn(batch, dropout_rng);
      const double value = loss.breakdown.total;
      if (!std::isfinite(value)) {
        throw DivergenceError("non-finite loss " + fmt(value) + " at epoch " +
                              std::to_string(epoch) + ", step " + std::to_string(step + 1));
      }
      loss.total.backward();
      opt.step(params);
      ++step;
      if (hooks.after_step) hooks.after_step(step, params);
      if (hooks.on_step) hooks.on_step(step, epoch, loss.breakdown);
      add_scaled(er.train, loss.breakdown,
                 static_cast<double>(batch.batch_size) / static_cast<double>(train.size()));
    }
    if (!all_finite(params)) {
      throw DivergenceError("non-finite parameters after epoch " + std::to_string(epoch));
    }
    eval_fn(er);
    emit(hooks, "epoch " + std::to_string(epoch) + " loss=" + fmt(er.train.total) +
                    " val_acc=" + fmt(er.val_accuracy));
    if (er.val_accuracy > best) {
      best = er.val_accuracy;
      record.best_epoch = epoch;
      record.best_val_accuracy = er.val_accuracy;
      best_params = snapshot(params);
    }
    record.epochs.push_back(std::move(er));
  }
  restore(params, best_params);
}

// Runs body(i) for i in [0, count) on up to `workers` threads. Exceptions are
// rethrown in index order after all workers finish.
void parallel_for(std::size_t count, std::size_t workers,
                  const std::function<void(std::size_t)>& body) {
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(count);
  auto worker = [&] {
    for (;;) {
      const auto i = next.fetch_add(1);
      if (i >= count) return;
      try {
        body(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(count, 1));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::size_t argmax_row(std::span<const double> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

}  // namespace

const char* strategy_name(DistillStrategy s) {
  for (const auto& info : kStrategies) {
    if (info.strategy == s) return info.name;
  }
  return "?";
}

std::string valid_strategy_names() {
  std::string out;
  for (const auto& info : kStrategies) {
    if (!out.empty()) out += '|';
    out += info.name;
  }
  return out;
}

DistillStrategy strategy_from_name(const std::string& name) {
  for (const auto& info : kStrategies) {
    if (name == info.name) return info.strategy;
  }
  throw ConfigError("unknown strategy '" + name + "' (valid: " + valid_strategy_names() + ")");
}

std::vector<DistillStrategy> all_strategies() {
  std::vector<DistillStrategy> out;
  for (const auto& info : kStrategies) out.push_back(info.strategy);
  return out;
}

const char* fusion_choice_name(FusionChoice f) {
  switch (f) {
    case FusionChoice::Default:
      return "default";
    case FusionChoice::Dot:
      return "dot";
    case FusionChoice::Kqv:
      return "kqv";
    case FusionChoice::Concat:
      return "concat";
  }
  return "?";
}

FusionChoice fusion_choice_from_name(const std::string& name) {
  for (auto f : {FusionChoice::Default, FusionChoice::Dot, FusionChoice::Kqv,
                 FusionChoice::Concat}) {
    if (name == fusion_choice_name(f)) return f;
  }
  throw ConfigError("unknown fusion '" + name + "' (valid: default|dot|kqv|concat)");
}

LossWeights TrainConfig::weights() const { return LossWeights::from(eta, lambda, temperature); }

nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json picks = nlohmann::json::array();
  for (const auto& p : c.pkd_picks) picks.push_back(p ? nlohmann::json(*p) : nlohmann::json());
  return {{"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"temperature", c.temperature},
          {"eta", c.eta},
          {"lambda", c.lambda},
          {"beta", c.weights().beta},
          {"seed", c.seed},
          {"optimizer", c.optimizer == OptimizerKind::Adam ? "adam" : "sgd"},
          {"strategy", strategy_name(c.strategy)},
          {"fusion", fusion_choice_name(c.fusion)},
          {"kqv_heads", c.kqv_heads},
          {"student_layers", c.student_layers},
          {"pkd_picks", picks},
          {"include_last_layer", c.include_last_layer},
          {"kd_t_squared", c.kd_t_squared},
          {"teacher_dropout", c.teacher_dropout}};
}

nlohmann::json to_json(const EncoderConfig& c) {
  return {{"num_layers", c.num_layers},   {"hidden_dim", c.hidden_dim},
          {"num_heads", c.num_heads},     {"ffn_dim", c.ffn_dim},
          {"vocab_size", c.vocab_size},   {"max_seq_len", c.max_seq_len},
          {"num_classes", c.num_classes}, {"dropout_rate", c.dropout_rate}};
}

nlohmann::json to_json(const LossBreakdown& b) {
  return {{"l_ce", b.l_ce},
          {"l_kd", b.l_kd},
          {"l_hidden", b.l_hidden},
          {"total", b.total},
          {"per_layer_hidden", b.per_layer_hidden}};
}

nlohmann::json RunRecord::to_json() const {
  nlohmann::json epochs_json = nlohmann::json::array();
  for (const auto& e : epochs) {
    nlohmann::json ej = {{"epoch", e.epoch},
                         {"train", alpkd::to_json(e.train)},
                         {"val_accuracy", e.val_accuracy}};
    if (!e.mean_alpha.empty()) ej["mean_alpha"] = e.mean_alpha;
    epochs_json.push_back(std::move(ej));
  }
  nlohmann::json j = {{"role", role},
                      {"config", config},
                      {"epochs", epochs_json},
                      {"best_epoch", best_epoch},
                      {"best_val_accuracy", best_val_accuracy},
                      {"checkpoint", checkpoint}};
  if (!plan.empty()) j["alignment"] = plan;
  if (role == "student") {
    j["teacher_hash_before"] = teacher_hash_before;
    j["teacher_hash_after"] = teacher_hash_after;
  }
  return j;
}

std::vector<std::optional<std::size_t>> default_pkd_picks(std::size_t n, std::size_t m,
                                                          bool include_last) {
  std::vector<std::optional<std::size_t>> picks(m);
  const std::size_t p = include_last ? m : (m > 0 ? m - 1 : 0);
  if (p == 0 || n < p) return picks;
  const std::size_t base = n / p, extra = n % p;
  std::size_t start = 1;
  for (std::size_t j = 0; j < p; ++j) {
    picks[j] = start;
    start += base + (j < extra ? 1 : 0);
  }
  return picks;
}

std::optional<AlignmentPlan> plan_for(const TrainConfig& config, std::size_t n) {
  const auto m = config.student_layers;
  switch (config.strategy) {
    case DistillStrategy::Nkd:
    case DistillStrategy::Rkd:
      return std::nullopt;
    case DistillStrategy::Pkd:
      return make_pkd_plan(n, m,
                           config.pkd_picks.empty()
                               ? default_pkd_picks(n, m, config.include_last_layer)
                               : config.pkd_picks);
    case DistillStrategy::CkdNo:
    case DistillStrategy::AlpNo:
      return make_bucket_plan(n, m, Overlap::None, config.include_last_layer);
    case DistillStrategy::CkdPo:
    case DistillStrategy::AlpPo:
      return make_bucket_plan(n, m, Overlap::Partial, config.include_last_layer);
    case DistillStrategy::AlpFull:
      return make_full_span_plan(n, m, config.include_last_layer);
  }
  return std::nullopt;
}

void check_strategy(const TrainConfig& c) {
  c.weights();  // beta >= 0, T >= 1
  if (c.batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (c.student_layers == 0) throw ConfigError("student_layers must be >= 1");
  const auto s = c.strategy;
  const auto name = std::string(strategy_name(s));
  if (s == DistillStrategy::Nkd || s == DistillStrategy::Rkd) {
    if (c.fusion != FusionChoice::Default) {
      throw ConfigError(name + " uses no layer fusion; fusion must be 'default'");
    }
    if (c.lambda != 0.0) throw ConfigError(name + " has no hidden-state loss; lambda must be 0");
    if (s == DistillStrategy::Nkd && c.eta != 0.0) throw ConfigError("nkd requires eta = 0");
    if (s == DistillStrategy::Rkd && !(c.eta > 0.0)) throw ConfigError("rkd requires eta > 0");
  }
  if (s == DistillStrategy::Pkd && c.fusion != FusionChoice::Default) {
    throw ConfigError(std::string("PKD_SKIP alignment cannot be combined with ") +
                      fusion_choice_name(c.fusion) + " fusion");
  }
  if (is_ckd(s) && c.fusion != FusionChoice::Default && c.fusion != FusionChoice::Concat) {
    throw ConfigError(name + " fuses by concatenation; fusion must be 'default' or 'concat'");
  }
  if (is_alp(s) && c.fusion == FusionChoice::Concat) {
    throw ConfigError(name + " fuses by attention; use a ckd-* strategy for concatenation");
  }
  if (c.fusion == FusionChoice::Kqv && c.kqv_heads == 0) {
    throw ConfigError("kqv_heads must be >= 1");
  }
}

std::vector<Tensor> TeacherCache::cls_batch(std::span<const std::size_t> indices) const {
  std::vector<Tensor> out;
  for (std::size_t l = 0; l < layers; ++l) {
    std::vector<double> data(indices.size() * hidden);
    for (std::size_t r = 0; r < indices.size(); ++r) {
      const double* src = cls.data() + (indices[r] * layers + l) * hidden;
      std::copy_n(src, hidden, data.data() + r * hidden);
    }
    out.push_back(Tensor::from({indices.size(), hidden}, std::move(data)));
  }
  return out;
}

Tensor TeacherCache::logits_batch(std::span<const std::size_t> indices) const {
  std::vector<double> data(indices.size() * classes);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    std::copy_n(logits.data() + indices[r] * classes, classes, data.data() + r * classes);
  }
  return Tensor::from({indices.size(), classes}, std::move(data));
}

TeacherCache make_teacher_cache(const Encoder& teacher, const Dataset& data,
                                std::size_t batch_size) {
  NoGradGuard guard;
  TeacherCache cache;
  cache.layers = teacher.num_layers();
  cache.hidden = teacher.config().hidden_dim;
  cache.classes = teacher.config().num_classes;
  cache.cls.assign(data.size() * cache.layers * cache.hidden, 0.0);
  cache.logits.assign(data.size() * cache.classes, 0.0);
  for (const auto& batch : batches(data, batch_size, std::nullopt)) {
    const auto out = teacher.forward(batch, false);
    for (std::size_t r = 0; r < batch.batch_size; ++r) {
      const auto ex = batch.indices[r];
      for (std::size_t l = 0; l < cache.layers; ++l) {
        const auto src = out.hidden_states[l].data().subspan(r * cache.hidden, cache.hidden);
        std::copy(src.begin(), src.end(),
                  cache.cls.begin() + static_cast<std::ptrdiff_t>((ex * cache.layers + l) * cache.hidden));
      }
      const auto lg = out.logits.data().subspan(r * cache.classes, cache.classes);
      std::copy(lg.begin(), lg.end(),
                cache.logits.begin() + static_cast<std::ptrdiff_t>(ex * cache.classes));
    }
  }
  return cache;
}

double evaluate_accuracy(const Encoder& model, const Dataset& data, std::size_t batch_size) {
  if (data.size() == 0) return 0.0;
  NoGradGuard guard;
  std::size_t correct = 0;
  const auto classes = model.config().num_classes;
  for (const auto& batch : batches(data, batch_size, std::nullopt)) {
    const auto out = model.forward(batch, false);
    for (std::size_t r = 0; r < batch.batch_size; ++r) {
      const auto pred = argmax_row(out.logits.data().subspan(r * classes, classes));
      if (static_cast<int>(pred) == batch.labels[r]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

TeacherResult train_teacher(const EncoderConfig& encoder_config, const TrainConfig& config,
                            const TaskData& task,
                            const std::optional<std::filesystem::path>& checkpoint,
                            const RunHooks& hooks) {
  if (task.train.size() == 0 || task.validation.size() == 0) {
    throw ConfigError("teacher training needs train and validation splits");
  }
  if (encoder_config.vocab_size < task.train.vocab_size ||
      encoder_config.num_classes != task.train.num_classes ||
      encoder_config.max_seq_len < task.train.seq_len) {
    throw ConfigError("encoder config does not cover the task (vocab/classes/seq_len)");
  }
  if (config.batch_size == 0) throw ConfigError("batch_size must be >= 1");
  const auto start = std::chrono::steady_clock::now();
  Encoder model(encoder_config, config.seed);
  RunRecord record;
  record.role = "teacher";
  record.config = {{"train", to_json(config)}, {"encoder", to_json(encoder_config)}};
  auto params = model.parameters();

  run_epochs(
      params, config, task.train,
      [&](const Batch& batch, std::mt19937_64& rng) {
        const auto out = model.forward(batch, true, &rng);
        Tensor ce = ce_loss(out.logits, batch.labels);
        return total_loss(ce, Tensor(), Tensor(), LossWeights{});
      },
      [&](EpochRecord& er) { er.val_accuracy = evaluate_accuracy(model, task.validation); },
      hooks, record);

  if (checkpoint) {
    save_checkpoint(model, *checkpoint);
    record.checkpoint = checkpoint->filename().string();
  }
  record.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {std::move(model), std::move(record)};
}

BatchObjective distill_objective(const ForwardOutput& student_out, std::span<const int> labels,
                                 std::span<const Tensor> teacher_cls, const Tensor& teacher_logits,
                                 const TrainConfig& config,
                                 const std::optional<AlignmentPlan>& plan,
                                 const std::optional<FusionMethod>& fusion) {
  const LossWeights w = config.weights();
  BatchObjective obj;
  Tensor ce = ce_loss(student_out.logits, labels);
  Tensor kd;
  if (w.eta > 0.0) kd = kd_loss(student_out.logits, teacher_logits, w.temperature, config.kd_t_squared);
  if (w.lambda > 0.0 && plan) {
    if (plan->strategy == AlignStrategy::PkdSkip) {
      obj.hidden = pkd_loss(student_out.hidden_states, *plan, teacher_cls);
    } else {
      if (!fusion) throw ConfigError("bucketed/full-span plans need a fusion method");
      obj.hidden = alp_loss(student_out.hidden_states, *plan, teacher_cls, *fusion);
    }
  }
  obj.total = total_loss(ce, kd, obj.hidden.loss, w);
  obj.total.breakdown.per_layer_hidden = obj.hidden.per_layer;
  return obj;
}

DistillResult distill(const Encoder& teacher, const TrainConfig& config, const TaskData& task,
                      const RunHooks& hooks, TeacherCaches caches) {
  check_strategy(config);
  const auto start = std::chrono::steady_clock::now();
  const auto n = teacher.num_layers();
  if (config.student_layers > n) {
    throw ConfigError("student_layers " + std::to_string(config.student_layers) +
                      " exceeds teacher layers " + std::to_string(n));
  }
  DistillResult result{init_student_from_teacher(teacher, config.student_layers),
                       plan_for(config, n), std::nullopt, {}};
  if (result.plan) {
    const auto v = validate(*result.plan);
    if (!v.ok()) throw ConfigError("invalid alignment plan: " + v.summary());
  }
  const auto d = teacher.config().hidden_dim;
  const auto fusion_seed = config.seed ^ kFusionSeedSalt;
  if (is_ckd(config.strategy)) {
    result.fusion = FusionMethod::ckd(*result.plan, d, fusion_seed);
  } else if (is_alp(config.strategy)) {
    result.fusion = config.fusion == FusionChoice::Kqv
                        ? FusionMethod::kqv(*result.plan, d, config.kqv_heads, fusion_seed)
                        : FusionMethod::dot();
  }

  RunRecord& record = result.record;
  record.role = "student";
  record.config = {{"train", to_json(config)},
                   {"student_encoder", to_json(result.student.config())},
                   {"teacher_encoder", to_json(teacher.config())}};
  if (result.plan) record.plan = result.plan->describe();
  record.teacher_hash_before = parameter_hash(teacher);

  std::optional<TeacherCache> own_train, own_val;
  const bool live_teacher = config.teacher_dropout && teacher.config().dropout_rate > 0.0;
  if (!caches.train && !live_teacher) {
    own_train = make_teacher_cache(teacher, task.train);
    caches.train = &*own_train;
  }
  if (!caches.validation) {
    own_val = make_teacher_cache(teacher, task.validation);
    caches.validation = &*own_val;
  }

  auto params = result.student.parameters();
  if (result.fusion) {
    for (auto& p : result.fusion->parameters()) params.push_back(p);
  }
  std::mt19937_64 teacher_rng(config.seed ^ kDropoutSeedSalt ^ 0x1ULL);
  const Encoder& student = result.student;
  const auto& plan = result.plan;
  const auto& fusion = result.fusion;

  run_epochs(
      params, config, task.train,
      [&](const Batch& batch, std::mt19937_64& rng) {
        std::vector<Tensor> t_cls;
        Tensor t_logits;
        if (live_teacher) {
          NoGradGuard guard;
          auto tout = teacher.forward(batch, true, &teacher_rng);
          t_cls = std::move(tout.hidden_states);
          t_logits = tout.logits;
        } else {
          t_cls = caches.train->cls_batch(batch.indices);
          t_logits = caches.train->logits_batch(batch.indices);
        }
        const auto out = student.forward(batch, true, &rng);
        return distill_objective(out, batch.labels, t_cls, t_logits, config, plan, fusion).total;
      },
      [&](EpochRecord& er) {
        er.val_accuracy = evaluate_accuracy(student, task.validation);
        if (!fusion || !fusion->has_weights() || !plan) return;
        NoGradGuard guard;
        const auto active = plan->participating();
        for (auto j : active) er.mean_alpha.emplace_back(plan->at(j).size(), 0.0);
        for (const auto& batch : batches(task.validation, 256, std::nullopt)) {
          const auto out = student.forward(batch, false);
          const auto t_cls = caches.validation->cls_batch(batch.indices);
          for (std::size_t a = 0; a < active.size(); ++a) {
            const auto j = active[a];
            std::vector<Tensor> states;
            for (auto k : plan->at(j)) states.push_back(t_cls[k - 1]);
            const auto fr = fusion->fuse(j, out.hidden_states[j - 1], states);
            const auto K = states.size();
            auto w = fr.weights.data();
            for (std::size_t r = 0; r < batch.batch_size; ++r)
              for (std::size_t k = 0; k < K; ++k) er.mean_alpha[a][k] += w[r * K + k];
          }
        }
        for (auto& row : er.mean_alpha)
          for (auto& v : row) v /= static_cast<double>(task.validation.size());
      },
      hooks, record);

  record.teacher_hash_after = parameter_hash(teacher);
  record.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

std::vector<GridCell> expand_grid(const TrainConfig& base, DistillStrategy strategy,
                                  const GridAxes& axes) {
  std::vector<GridCell> cells;
  TrainConfig cfg = base;
  cfg.strategy = strategy;
  auto push = [&](const TrainConfig& c) {
    GridCell cell;
    cell.config = c;
    if (c.eta + c.lambda > 1.0 + 1e-12) {
      cell.skipped = true;
      cell.skip_reason = "beta=1-eta-lambda<0";
    }
    cells.push_back(std::move(cell));
  };
  for (double lr : axes.learning_rates) {
    cfg.learning_rate = lr;
    if (strategy == DistillStrategy::Nkd) {
      cfg.eta = 0.0;
      cfg.lambda = 0.0;
      cfg.temperature = 1.0;
      push(cfg);
      continue;
    }
    for (double eta : axes.etas) {
      cfg.eta = eta;
      const std::vector<double> lambdas =
          strategy == DistillStrategy::Rkd ? std::vector<double>{0.0} : axes.lambdas;
      for (double lambda : lambdas) {
        cfg.lambda = lambda;
        for (double t : axes.temperatures) {
          cfg.temperature = t;
          if (strategy == DistillStrategy::Pkd && !axes.pkd_pick_sets.empty()) {
            for (const auto& picks : axes.pkd_pick_sets) {
              cfg.pkd_picks = picks;
              push(cfg);
            }
          } else {
            push(cfg);
          }
        }
      }
    }
  }
  return cells;
}

void GridResult::write_csv(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write grid table " + path.string());
  os << "strategy,learning_rate,temperature,eta,lambda,beta,pkd_picks,fusion,kqv_heads,"
        "student_layers,epochs,batch_size,seed,optimizer,skipped,skip_reason,"
        "best_val_accuracy,best_epoch\n";
  for (const auto& c : cells) {
    const auto& k = c.config;
    os << strategy_name(k.strategy) << ',' << fmt(k.learning_rate) << ',' << fmt(k.temperature)
       << ',' << fmt(k.eta) << ',' << fmt(k.lambda) << ',' << fmt(k.beta()) << ','
       << picks_str(k.pkd_picks) << ',' << fusion_choice_name(k.fusion) << ',' << k.kqv_heads
       << ',' << k.student_layers << ',' << k.epochs << ',' << k.batch_size << ',' << k.seed
       << ',' << (k.optimizer == OptimizerKind::Adam ? "adam" : "sgd") << ','
       << (c.skipped ? 1 : 0) << ',' << c.skip_reason << ','
       << (c.skipped ? std::string() : fmt(c.record.best_val_accuracy)) << ','
       << (c.skipped ? std::string() : std::to_string(c.record.best_epoch)) << '\n';
  }
  if (!os) throw IoError("failed writing grid table " + path.string());
}

GridResult grid_search(const Encoder& teacher, const TaskData& task, const TrainConfig& base,
                       std::span<const DistillStrategy> strategies, const GridAxes& axes,
                       std::size_t workers, const RunHooks& hooks) {
  if (strategies.empty()) throw ConfigError("grid search needs at least one strategy");
  if (axes.learning_rates.empty() || axes.temperatures.empty() || axes.etas.empty() ||
      axes.lambdas.empty()) {
    throw ConfigError("grid axes must be nonempty");
  }
  GridResult result;
  std::vector<std::pair<std::size_t, std::size_t>> ranges;
  for (auto s : strategies) {
    auto cells = expand_grid(base, s, axes);
    const auto first = result.cells.size();
    for (auto& c : cells) result.cells.push_back(std::move(c));
    ranges.emplace_back(first, result.cells.size());
  }

  std::mutex log_mutex;
  const RunHooks cell_hooks;  // per-epoch chatter from cells is suppressed
  auto log = [&](const std::string& msg) {
    if (!hooks.log) return;
    std::lock_guard lock(log_mutex);
    hooks.log(msg);
  };
  for (const auto& c : result.cells) {
    if (c.skipped) {
      log("skip " + describe_cell(c.config) + ": " + c.skip_reason);
    }
  }

  const TeacherCache train_cache = make_teacher_cache(teacher, task.train);
  const TeacherCache val_cache = make_teacher_cache(teacher, task.validation);
  const TeacherCaches caches{&train_cache, &val_cache};

  std::atomic<std::size_t> done{0};
  parallel_for(result.cells.size(), workers, [&](std::size_t i) {
    auto& cell = result.cells[i];
    if (cell.skipped) return;
    try {
      cell.record = distill(teacher, cell.config, task, cell_hooks, caches).record;
    } catch (const DivergenceError& e) {
      cell.skipped = true;
      cell.skip_reason = std::string("diverged: ") + e.what();
      std::replace(cell.skip_reason.begin(), cell.skip_reason.end(), ',', ';');
      log("skip " + describe_cell(cell.config) + ": " + cell.skip_reason);
      return;
    }
    log("cell " + std::to_string(++done) + " " + describe_cell(cell.config) +
        " best_val_acc=" + fmt(cell.record.best_val_accuracy));
  });

  for (std::size_t s = 0; s < strategies.size(); ++s) {
    const auto [first, last] = ranges[s];
    std::optional<std::size_t> best;
    for (std::size_t i = first; i < last; ++i) {
      const auto& c = result.cells[i];
      if (c.skipped) continue;
      if (!best || c.record.best_val_accuracy > result.cells[*best].record.best_val_accuracy) {
        best = i;
      }
    }
    if (!best) {
      throw ConfigError(std::string("every grid cell for ") + strategy_name(strategies[s]) +
                        " is invalid");
    }
    result.best.emplace_back(strategies[s], *best);
  }
  return result;
}

nlohmann::json SeedSummary::to_json() const {
  return {{"strategy", strategy_name(strategy)},
          {"config", alpkd::to_json(config)},
          {"accuracies", accuracies},
          {"mean", mean},
          {"stddev", stddev}};
}

SeedSummary seed_sweep(const Encoder& teacher, const TaskData& task, const TrainConfig& config,
                       std::size_t seeds, std::size_t workers, const RunRecord* first,
                       TeacherCaches caches) {
  if (seeds == 0) throw ConfigError("seed sweep needs at least one seed");
  std::optional<TeacherCache> own_train, own_val;
  if (!caches.train) {
    own_train = make_teacher_cache(teacher, task.train);
    caches.train = &*own_train;
  }
  if (!caches.validation) {
    own_val = make_teacher_cache(teacher, task.validation);
    caches.validation = &*own_val;
  }
  SeedSummary out;
  out.strategy = config.strategy;
  out.config = config;
  out.accuracies.assign(seeds, 0.0);
  parallel_for(seeds, workers, [&](std::size_t i) {
    if (i == 0 && first) {
      out.accuracies[0] = first->best_val_accuracy;
      return;
    }
    TrainConfig c = config;
    c.seed = config.seed + i;
    out.accuracies[i] = distill(teacher, c, task, {}, caches).record.best_val_accuracy;
  });
  for (double a : out.accuracies) out.mean += a;
  out.mean /= static_cast<double>(seeds);
  if (seeds > 1) {
    double ss = 0.0;
    for (double a : out.accuracies) ss += (a - out.mean) * (a - out.mean);
    out.stddev = std::sqrt(ss / static_cast<double>(seeds - 1));
  }
  return out;
}

}  // namespace alpkd
