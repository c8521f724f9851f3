/* alpkd C API: run configuration, the four commands, and checkpoint
 * inference behind opaque handles. Every fallible call returns an
 * alpkd_status; on failure alpkd_last_error() holds a one-line message for
 * the calling thread. Strings returned by the library stay valid until the
 * owning handle is freed (or, for alpkd_last_error, until the next failing
 * call on the same thread). */
#ifndef ALPKD_H
#define ALPKD_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define ALPKD_API __declspec(dllexport)
#else
#define ALPKD_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum alpkd_status {
  ALPKD_OK = 0,
  ALPKD_ERR_INTERNAL = 1,
  ALPKD_ERR_CONFIG = 2,
  ALPKD_ERR_DIVERGENCE = 3,
  ALPKD_ERR_IO = 4,
  ALPKD_ERR_FLOOR = 5,     /* teacher finished below teacher.accuracy_floor */
  ALPKD_ERR_INPUT = 6,     /* bad token ids, labels, or data rows */
  ALPKD_ERR_FORMAT = 7,    /* malformed checkpoint or fusion file */
  ALPKD_ERR_DIMENSION = 8, /* shape mismatch */
  ALPKD_ERR_ARGUMENT = 9   /* null handle or pointer */
} alpkd_status;

typedef struct alpkd_config alpkd_config;
typedef struct alpkd_run alpkd_run;
typedef struct alpkd_encoder alpkd_encoder;

ALPKD_API const char* alpkd_version(void);
ALPKD_API const char* alpkd_last_error(void);
/* Short category used in error lines: "config", "divergence", "io", ... */
ALPKD_API const char* alpkd_status_name(alpkd_status status);
/* Process exit code for a status: config/input 2, divergence 3,
 * io/format 4, floor 5, anything else 1. */
ALPKD_API int alpkd_exit_code(alpkd_status status);
/* '|'-separated strategy names accepted by distill.strategy. */
ALPKD_API const char* alpkd_strategy_names(void);

/* Progress lines from long-running commands. Pass NULL to silence. The
 * handler may be called from worker threads, one call at a time. */
typedef void (*alpkd_log_fn)(const char* line, void* user);
ALPKD_API void alpkd_set_log_handler(alpkd_log_fn fn, void* user);

/* Configuration. Keys are "section.key", e.g. "distill.strategy". */
ALPKD_API alpkd_status alpkd_config_new(alpkd_config** out);
ALPKD_API alpkd_status alpkd_config_load(const char* path, alpkd_config** out);
ALPKD_API alpkd_status alpkd_config_set(alpkd_config* config, const char* key, const char* value);
/* Copies the value (NUL-terminated) into buf when it fits; *needed receives
 * the full length including the terminator. */
ALPKD_API alpkd_status alpkd_config_get(const alpkd_config* config, const char* key, char* buf,
                                        size_t capacity, size_t* needed);
/* Canonical INI text of the whole configuration, same buffer protocol. */
ALPKD_API alpkd_status alpkd_config_dump(const alpkd_config* config, char* buf, size_t capacity,
                                         size_t* needed);
ALPKD_API void alpkd_config_free(alpkd_config* config);

/* Commands. Each creates a run directory under output.root (default
 * $ALPKD_OUTPUT_ROOT, else ./runs) and returns a run handle on success.
 * On failure *out is left NULL. */
ALPKD_API alpkd_status alpkd_train_teacher(const alpkd_config* config, alpkd_run** out);
ALPKD_API alpkd_status alpkd_distill(const alpkd_config* config, alpkd_run** out);
ALPKD_API alpkd_status alpkd_grid(const alpkd_config* config, alpkd_run** out);
/* mode: "attention", "pca" or "cosine". compare_run_dir may be NULL; when
 * set (pca only) that run's student joins the projection. */
ALPKD_API alpkd_status alpkd_analyze(const char* run_dir, const char* mode,
                                     const char* compare_run_dir, alpkd_run** out);

ALPKD_API const char* alpkd_run_dir(const alpkd_run* run);
/* Best validation accuracy (teacher/distill), best mean over seeds (grid),
 * or a mode-specific headline number (analyze). */
ALPKD_API double alpkd_run_score(const alpkd_run* run);
/* The metrics document as JSON text. */
ALPKD_API const char* alpkd_run_summary(const alpkd_run* run);
ALPKD_API void alpkd_run_free(alpkd_run* run);

/* Checkpoint inference. */
ALPKD_API alpkd_status alpkd_encoder_load(const char* path, alpkd_encoder** out);
ALPKD_API size_t alpkd_encoder_num_layers(const alpkd_encoder* encoder);
ALPKD_API size_t alpkd_encoder_hidden_dim(const alpkd_encoder* encoder);
ALPKD_API size_t alpkd_encoder_num_classes(const alpkd_encoder* encoder);
ALPKD_API size_t alpkd_encoder_max_seq_len(const alpkd_encoder* encoder);
/* token_ids: batch * seq_len row-major, position 0 of each row must be the
 * CLS id (1), padding is id 0. logits_out: batch * num_classes. cls_out, if
 * not NULL: num_layers * batch * hidden_dim, layer-major. */
ALPKD_API alpkd_status alpkd_encoder_forward(const alpkd_encoder* encoder, const int32_t* token_ids,
                                             size_t batch, size_t seq_len, double* logits_out,
                                             double* cls_out);
ALPKD_API void alpkd_encoder_free(alpkd_encoder* encoder);

#ifdef __cplusplus
}
#endif

#endif /* ALPKD_H */
