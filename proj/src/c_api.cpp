#include "alpkd/alpkd.h"

#include <cstring>
#include <mutex>
#include <string>

#include "alpkd/encoder.hpp"
#include "alpkd/errors.hpp"
#include "alpkd/run_config.hpp"
#include "alpkd/trainer.hpp"
#include "app.hpp"

struct alpkd_config {
  alpkd::RunConfig config;
};

struct alpkd_run {
  std::string dir;
  double score = 0.0;
  std::string summary;
};

struct alpkd_encoder {
  alpkd::Encoder model;
};

namespace {

thread_local std::string g_last_error;

std::mutex g_log_mutex;
alpkd_log_fn g_log_fn = nullptr;
void* g_log_user = nullptr;

void log_line(const std::string& line) {
  std::lock_guard lock(g_log_mutex);
  if (g_log_fn) g_log_fn(line.c_str(), g_log_user);
}

alpkd::app::LogFn logger() {
  std::lock_guard lock(g_log_mutex);
  if (!g_log_fn) return nullptr;
  return log_line;
}

alpkd_status fail(alpkd_status status, const std::string& message) {
  g_last_error = message;
  for (auto& ch : g_last_error) {
    if (ch == '\n' || ch == '\r') ch = ' ';
  }
  return status;
}

// Runs fn, mapping every exception to a status and the thread's last error.
template <class Fn>
alpkd_status guarded(Fn&& fn) {
  try {
    fn();
    return ALPKD_OK;
  } catch (const alpkd::ConfigError& e) {
    return fail(ALPKD_ERR_CONFIG, e.what());
  } catch (const alpkd::InputError& e) {
    return fail(ALPKD_ERR_INPUT, e.what());
  } catch (const alpkd::DimensionError& e) {
    return fail(ALPKD_ERR_DIMENSION, e.what());
  } catch (const alpkd::FormatError& e) {
    return fail(ALPKD_ERR_FORMAT, e.what());
  } catch (const alpkd::DivergenceError& e) {
    return fail(ALPKD_ERR_DIVERGENCE, e.what());
  } catch (const alpkd::AccuracyFloorError& e) {
    return fail(ALPKD_ERR_FLOOR, e.what());
  } catch (const alpkd::IoError& e) {
    return fail(ALPKD_ERR_IO, e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return fail(ALPKD_ERR_IO, e.what());
  } catch (const std::exception& e) {
    return fail(ALPKD_ERR_INTERNAL, e.what());
  } catch (...) {
    return fail(ALPKD_ERR_INTERNAL, "unknown exception");
  }
}

alpkd_status copy_out(const std::string& value, char* buf, std::size_t capacity,
                      std::size_t* needed) {
  if (needed) *needed = value.size() + 1;
  if (buf && capacity >= value.size() + 1) {
    std::memcpy(buf, value.c_str(), value.size() + 1);
  } else if (buf && capacity > 0) {
    buf[0] = '\0';
  }
  return ALPKD_OK;
}

alpkd_run* to_handle(const alpkd::app::RunOutcome& outcome) {
  return new alpkd_run{outcome.run_dir.string(), outcome.best_accuracy, outcome.summary.dump(2)};
}

template <class Cmd>
alpkd_status run_command(const alpkd_config* config, alpkd_run** out, Cmd cmd) {
  if (!out) return fail(ALPKD_ERR_ARGUMENT, "null output pointer");
  *out = nullptr;
  if (!config) return fail(ALPKD_ERR_ARGUMENT, "null config handle");
  return guarded([&] { *out = to_handle(cmd(config->config, logger())); });
}

}  // namespace

extern "C" {

const char* alpkd_version(void) { return "0.1.0"; }

const char* alpkd_last_error(void) { return g_last_error.c_str(); }

const char* alpkd_status_name(alpkd_status status) {
  switch (status) {
    case ALPKD_OK:
      return "ok";
    case ALPKD_ERR_INTERNAL:
      return "internal";
    case ALPKD_ERR_CONFIG:
      return "config";
    case ALPKD_ERR_DIVERGENCE:
      return "divergence";
    case ALPKD_ERR_IO:
      return "io";
    case ALPKD_ERR_FLOOR:
      return "floor";
    case ALPKD_ERR_INPUT:
      return "input";
    case ALPKD_ERR_FORMAT:
      return "format";
    case ALPKD_ERR_DIMENSION:
      return "dimension";
    case ALPKD_ERR_ARGUMENT:
      return "argument";
  }
  return "unknown";
}

int alpkd_exit_code(alpkd_status status) {
  switch (status) {
    case ALPKD_OK:
      return 0;
    case ALPKD_ERR_CONFIG:
    case ALPKD_ERR_INPUT:
      return 2;
    case ALPKD_ERR_DIVERGENCE:
      return 3;
    case ALPKD_ERR_IO:
    case ALPKD_ERR_FORMAT:
      return 4;
    case ALPKD_ERR_FLOOR:
      return 5;
    default:
      return 1;
  }
}

const char* alpkd_strategy_names(void) {
  static const std::string names = alpkd::valid_strategy_names();
  return names.c_str();
}

void alpkd_set_log_handler(alpkd_log_fn fn, void* user) {
  std::lock_guard lock(g_log_mutex);
  g_log_fn = fn;
  g_log_user = user;
}

alpkd_status alpkd_config_new(alpkd_config** out) {
  if (!out) return fail(ALPKD_ERR_ARGUMENT, "null output pointer");
  *out = nullptr;
  return guarded([&] { *out = new alpkd_config{}; });
}

alpkd_status alpkd_config_load(const char* path, alpkd_config** out) {
  if (!out) return fail(ALPKD_ERR_ARGUMENT, "null output pointer");
  *out = nullptr;
  if (!path) return fail(ALPKD_ERR_ARGUMENT, "null path");
  return guarded([&] { *out = new alpkd_config{alpkd::load_run_config(path)}; });
}

alpkd_status alpkd_config_set(alpkd_config* config, const char* key, const char* value) {
  if (!config || !key || !value) return fail(ALPKD_ERR_ARGUMENT, "null argument");
  return guarded([&] { alpkd::set_config_value(config->config, key, value); });
}

alpkd_status alpkd_config_get(const alpkd_config* config, const char* key, char* buf,
                              size_t capacity, size_t* needed) {
  if (!config || !key) return fail(ALPKD_ERR_ARGUMENT, "null argument");
  std::string value;
  const auto st = guarded([&] { value = alpkd::get_config_value(config->config, key); });
  return st == ALPKD_OK ? copy_out(value, buf, capacity, needed) : st;
}

alpkd_status alpkd_config_dump(const alpkd_config* config, char* buf, size_t capacity,
                               size_t* needed) {
  if (!config) return fail(ALPKD_ERR_ARGUMENT, "null config handle");
  return copy_out(alpkd::to_ini(config->config), buf, capacity, needed);
}

void alpkd_config_free(alpkd_config* config) { delete config; }

alpkd_status alpkd_train_teacher(const alpkd_config* config, alpkd_run** out) {
  return run_command(config, out, alpkd::app::train_teacher);
}

alpkd_status alpkd_distill(const alpkd_config* config, alpkd_run** out) {
  return run_command(config, out, alpkd::app::distill);
}

alpkd_status alpkd_grid(const alpkd_config* config, alpkd_run** out) {
  return run_command(config, out, alpkd::app::grid);
}

alpkd_status alpkd_analyze(const char* run_dir, const char* mode, const char* compare_run_dir,
                           alpkd_run** out) {
  if (!out) return fail(ALPKD_ERR_ARGUMENT, "null output pointer");
  *out = nullptr;
  if (!run_dir || !mode) return fail(ALPKD_ERR_ARGUMENT, "null run directory or mode");
  return guarded([&] {
    std::optional<std::filesystem::path> compare;
    if (compare_run_dir) compare = compare_run_dir;
    *out = to_handle(alpkd::app::analyze(run_dir, mode, compare, logger()));
  });
}

const char* alpkd_run_dir(const alpkd_run* run) { return run ? run->dir.c_str() : ""; }
double alpkd_run_score(const alpkd_run* run) { return run ? run->score : 0.0; }
const char* alpkd_run_summary(const alpkd_run* run) { return run ? run->summary.c_str() : ""; }
void alpkd_run_free(alpkd_run* run) { delete run; }

alpkd_status alpkd_encoder_load(const char* path, alpkd_encoder** out) {
  if (!out) return fail(ALPKD_ERR_ARGUMENT, "null output pointer");
  *out = nullptr;
  if (!path) return fail(ALPKD_ERR_ARGUMENT, "null path");
  return guarded([&] { *out = new alpkd_encoder{alpkd::load_checkpoint(path)}; });
}

size_t alpkd_encoder_num_layers(const alpkd_encoder* e) { return e ? e->model.num_layers() : 0; }
size_t alpkd_encoder_hidden_dim(const alpkd_encoder* e) {
  return e ? e->model.config().hidden_dim : 0;
}
size_t alpkd_encoder_num_classes(const alpkd_encoder* e) {
  return e ? e->model.config().num_classes : 0;
}
size_t alpkd_encoder_max_seq_len(const alpkd_encoder* e) {
  return e ? e->model.config().max_seq_len : 0;
}

alpkd_status alpkd_encoder_forward(const alpkd_encoder* encoder, const int32_t* token_ids,
                                   size_t batch, size_t seq_len, double* logits_out,
                                   double* cls_out) {
  if (!encoder || !token_ids || !logits_out) return fail(ALPKD_ERR_ARGUMENT, "null argument");
  if (batch == 0 || seq_len == 0) return fail(ALPKD_ERR_INPUT, "empty batch");
  return guarded([&] {
    alpkd::Batch b;
    b.batch_size = batch;
    b.seq_len = seq_len;
    b.token_ids.assign(token_ids, token_ids + batch * seq_len);
    b.mask.resize(b.token_ids.size());
    for (std::size_t i = 0; i < b.token_ids.size(); ++i) b.mask[i] = b.token_ids[i] != alpkd::kPadId;
    b.labels.assign(batch, 0);
    b.indices.resize(batch);
    for (std::size_t i = 0; i < batch; ++i) b.indices[i] = i;
    alpkd::NoGradGuard guard;
    const auto out = encoder->model.forward(b, false);
    const auto logits = out.logits.data();
    std::copy(logits.begin(), logits.end(), logits_out);
    if (cls_out) {
      double* dst = cls_out;
      for (const auto& h : out.hidden_states) {
        const auto d = h.data();
        dst = std::copy(d.begin(), d.end(), dst);
      }
    }
  });
}

void alpkd_encoder_free(alpkd_encoder* encoder) { delete encoder; }

}  // extern "C"
