/* C interface to the artaug pipeline.
 *
 * Every function returns an artaug_status. On failure the thread-local
 * message from artaug_last_error() describes the cause. Strings returned
 * through `char**` out-parameters are heap copies owned by the caller and
 * released with artaug_string_free(). Handles are opaque and released with
 * their matching *_free function; passing NULL to a free function is a no-op.
 * Structured results are JSON documents.
 */
#ifndef ARTAUG_H
#define ARTAUG_H

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(ARTAUG_BUILDING)
#define ARTAUG_API __attribute__((visibility("default")))
#else
#define ARTAUG_API
#endif

typedef enum artaug_status {
  ARTAUG_OK = 0,
  ARTAUG_E_USAGE = 1,
  ARTAUG_E_SHAPE = 2,
  ARTAUG_E_CONTRACT = 3,
  ARTAUG_E_NUMERICAL = 4,
  ARTAUG_E_FORMAT = 5,
  ARTAUG_E_IO = 6,
  ARTAUG_E_TRANSITION = 7,
  ARTAUG_E_DEGENERATE_REGION = 8,
  ARTAUG_E_CRITIC_UNAVAILABLE = 9,
  ARTAUG_E_PARSE = 10,
  ARTAUG_E_ITERATION_STARVED = 11,
  ARTAUG_E_INTEGRITY = 12,
  ARTAUG_E_FATAL = 13,
  ARTAUG_E_LOCKED = 14,
  ARTAUG_E_INTERNAL = 15
} artaug_status;

typedef struct artaug_model artaug_model;
typedef struct artaug_lora artaug_lora;
typedef struct artaug_run artaug_run;
typedef struct artaug_review_server artaug_review_server;

ARTAUG_API const char* artaug_version(void);
/* Message of the last failed call on this thread ("" when none). */
ARTAUG_API const char* artaug_last_error(void);
ARTAUG_API const char* artaug_status_name(artaug_status status);
ARTAUG_API void artaug_string_free(char* s);

/* Verbosity of the library's log output (always on stderr): "off", "warn", "info" or "debug". */
ARTAUG_API artaug_status artaug_set_log_level(const char* level);

/* ---- weights ---------------------------------------------------------- */

ARTAUG_API artaug_status artaug_model_load(const char* path, artaug_model** out);
ARTAUG_API artaug_status artaug_model_save(const artaug_model* model, const char* path);
/* JSON {config, parameter_count}. */
ARTAUG_API artaug_status artaug_model_info(const artaug_model* model, char** json_out);
ARTAUG_API void artaug_model_free(artaug_model* model);

ARTAUG_API artaug_status artaug_lora_load(const char* path, artaug_lora** out);
ARTAUG_API void artaug_lora_free(artaug_lora* lora);
/* JSON {rank, layers, metadata}. */
ARTAUG_API artaug_status artaug_lora_info(const artaug_lora* lora, char** json_out);
/* out = model with `lora` fused at weight `alpha`. */
ARTAUG_API artaug_status artaug_model_fuse(const artaug_model* model, const artaug_lora* lora, double alpha,
                                           artaug_model** out);

/* ---- run directory ---------------------------------------------------- */

/* Scaffolds `dir` with config.json. `config_json` may be NULL for the
 * defaults; absent keys take defaults, unknown keys fail. *created is 0 when
 * an identical config already existed. */
ARTAUG_API artaug_status artaug_run_init(const char* dir, const char* config_json, int* created);
/* Trains base.atw under the run lock. JSON report with "already_done". */
ARTAUG_API artaug_status artaug_run_train_base(const char* dir, char** json_out);

/* Opens a run for iteration work and holds its lock until artaug_run_close. */
ARTAUG_API artaug_status artaug_run_open(const char* dir, artaug_run** out);
ARTAUG_API void artaug_run_close(artaug_run* run);
ARTAUG_API artaug_status artaug_run_config(const artaug_run* run, char** json_out);
/* Number of completed iterations. */
ARTAUG_API artaug_status artaug_run_completed(const artaug_run* run, uint64_t* out);
/* One iteration; JSON stats. ARTAUG_E_ITERATION_STARVED when nothing was accepted. */
ARTAUG_API artaug_status artaug_run_iteration(artaug_run* run, char** json_out);
/* JSON {stop, reason} for the current history. */
ARTAUG_API artaug_status artaug_run_should_stop(const artaug_run* run, char** json_out);
/* Iterates until the stop rule fires. JSON {reason, iterations:[stats...]}. */
ARTAUG_API artaug_status artaug_run_loop(artaug_run* run, char** json_out);
/* Current fused weights (a copy). */
ARTAUG_API artaug_status artaug_run_model(const artaug_run* run, artaug_model** out);
ARTAUG_API artaug_status artaug_run_base_model(const artaug_run* run, artaug_model** out);
/* Writes merged.atw (and a copy at out_path when not NULL). JSON summary. */
ARTAUG_API artaug_status artaug_run_export(const artaug_run* run, const char* out_path, char** json_out);
/* Read-only, no lock: JSON {iterations:[...]} folded from the manifest. */
ARTAUG_API artaug_status artaug_run_stats(const char* dir, char** json_out);

/* ---- generation and evaluation ---------------------------------------- */

/* One interaction pair for a prompt ("a bright disk on a dark background").
 * Writes before.pgm and after.pgm into out_dir; JSON carries the scores and
 * suggestions. critic_json and schedule may be NULL (rule critic, "flow"). */
ARTAUG_API artaug_status artaug_interact(const artaug_model* model, const char* prompt, uint64_t seed,
                                         const char* critic_json, const char* schedule, uint32_t steps,
                                         const char* out_dir, char** json_out);

/* Held-out comparison of b against a over `count` prompt/seed cases.
 * JSON report plus a plain-text table in text_out (may be NULL). */
ARTAUG_API artaug_status artaug_evaluate(const artaug_model* a, const artaug_model* b, uint32_t count,
                                         uint64_t seed, const char* schedule, uint32_t steps, uint32_t parallelism,
                                         char** json_out, char** text_out);

/* Denoiser forward evaluations made by the calling thread so far. */
ARTAUG_API uint64_t artaug_denoiser_evaluations(void);
ARTAUG_API void artaug_reset_denoiser_evaluations(void);

/* ---- review API ------------------------------------------------------- */

/* Binds the review HTTP API for `dir` (port 0 picks a free port). */
ARTAUG_API artaug_status artaug_review_server_create(const char* dir, const char* host, int port,
                                                     artaug_review_server** out, int* bound_port);
/* Serves until artaug_review_server_stop is called from another thread. */
ARTAUG_API artaug_status artaug_review_server_listen(artaug_review_server* server);
ARTAUG_API void artaug_review_server_stop(artaug_review_server* server);
ARTAUG_API void artaug_review_server_free(artaug_review_server* server);

#ifdef __cplusplus
}
#endif

#endif /* ARTAUG_H */
