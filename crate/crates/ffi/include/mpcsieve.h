#ifndef MPCSIEVE_H
#define MPCSIEVE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes. Nonzero values other than the last three match the CLI exit
// codes for the same error category.
typedef enum MsStatus {
  MS_STATUS_OK = 0,
  MS_STATUS_CONFIG = 2,
  MS_STATUS_IO = 3,
  MS_STATUS_PROTOCOL = 4,
  MS_STATUS_NUMERIC = 5,
  MS_STATUS_TRAINING = 6,
  MS_STATUS_PRIVACY = 7,
  MS_STATUS_NULL_ARGUMENT = 20,
  MS_STATUS_INVALID_UTF8 = 21,
  MS_STATUS_PANIC = 22,
} MsStatus;

// Experiment configuration.
typedef struct MsConfig MsConfig;

// Result of one selection run.
typedef struct MsRun MsRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or NULL. The pointer stays
// valid until the next failing call on the same thread.
const char *ms_last_error(void);

// Default configuration.
struct MsConfig *ms_config_default(void);

// Parses config text.
//
// # Safety
// `text` must be a nul-terminated string; `out` must be writable.
enum MsStatus ms_config_parse(const char *text, struct MsConfig **out);

// Loads a config file.
//
// # Safety
// `path` must be a nul-terminated string; `out` must be writable.
enum MsStatus ms_config_load(const char *path, struct MsConfig **out);

// Serializes the config in the file grammar. Free the result with
// `ms_string_free`. Returns NULL for a NULL handle.
//
// # Safety
// `cfg` must be NULL or a live config handle.
char *ms_config_to_text(const struct MsConfig *cfg);

// # Safety
// `cfg` must be a live config handle.
enum MsStatus ms_config_set_seed(struct MsConfig *cfg, uint64_t seed);

// Working directory for inputs and outputs.
//
// # Safety
// `cfg` must be a live config handle and `dir` a nul-terminated string.
enum MsStatus ms_config_set_out(struct MsConfig *cfg, const char *dir);

// One of "P", "PM", "PMT", "full".
//
// # Safety
// `cfg` must be a live config handle and `name` a nul-terminated string.
enum MsStatus ms_config_set_variant(struct MsConfig *cfg, const char *name);

// # Safety
// `cfg` must be a live config handle.
enum MsStatus ms_config_validate(const struct MsConfig *cfg);

// # Safety
// `cfg` must be NULL or a handle not yet freed.
void ms_config_free(struct MsConfig *cfg);

// Writes the seeded model and dataset into the working directory.
//
// # Safety
// `cfg` must be a live config handle.
enum MsStatus ms_gen(const struct MsConfig *cfg);

// Builds and trains every phase's proxy.
//
// # Safety
// `cfg` must be a live config handle.
enum MsStatus ms_train_approx(const struct MsConfig *cfg);

// Runs selection with the configured variant, writes its outputs and
// returns the run.
//
// # Safety
// `cfg` must be a live config handle; `out` must be writable.
enum MsStatus ms_select(const struct MsConfig *cfg, struct MsRun **out);

// Number of selected indices; 0 for a NULL handle.
//
// # Safety
// `run` must be NULL or a live run handle.
size_t ms_run_selected_len(const struct MsRun *run);

// Copies up to `cap` selected indices into `buf` and returns how many were
// copied.
//
// # Safety
// `run` must be NULL or a live run handle; `buf` must hold `cap` values.
size_t ms_run_selected(const struct MsRun *run, uint64_t *buf, size_t cap);

// # Safety
// `run` must be NULL or a live run handle.
uint64_t ms_run_rounds(const struct MsRun *run);

// # Safety
// `run` must be NULL or a live run handle.
uint64_t ms_run_bytes(const struct MsRun *run);

// Simulated end-to-end seconds.
//
// # Safety
// `run` must be NULL or a live run handle.
double ms_run_seconds(const struct MsRun *run);

// # Safety
// `run` must be NULL or a handle not yet freed.
void ms_run_free(struct MsRun *run);

// # Safety
// `s` must be NULL or a string returned by this library and not yet freed.
void ms_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MPCSIEVE_H */
