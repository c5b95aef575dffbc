#ifndef ORTHRUS_H
#define ORTHRUS_H

/* Generated by cbindgen from orthrus-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible call.
typedef enum OrthrusStatus {
  ORTHRUS_STATUS_OK = 0,
  // A protocol property or oracle check failed during the run.
  ORTHRUS_STATUS_PROPERTY_VIOLATION = 1,
  // The configuration was missing, unreadable, or invalid.
  ORTHRUS_STATUS_CONFIG_ERROR = 2,
  ORTHRUS_STATUS_IO_ERROR = 3,
  ORTHRUS_STATUS_NULL_ARGUMENT = 4,
  ORTHRUS_STATUS_INVALID_UTF8 = 5,
} OrthrusStatus;

// Transaction subset selector for latency queries.
typedef enum OrthrusTxFilter {
  ORTHRUS_TX_FILTER_ALL = 0,
  ORTHRUS_TX_FILTER_PAYMENT = 1,
  ORTHRUS_TX_FILTER_CONTRACT = 2,
} OrthrusTxFilter;

// Opaque handle to one completed simulation run.
typedef struct OrthrusRun OrthrusRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Run a scenario from a TOML config file. On success `*out_run` owns the
// result and must be released with [`orthrus_run_free`].
//
// # Safety
// `config_path` must be a valid NUL-terminated string; `mode` may be NULL
// (keep the config's mode) or one of `"orthrus"`/`"global_all"`; `out_run`
// must point to writable memory.
enum OrthrusStatus orthrus_run_scenario(const char *config_path,
                                        uint64_t seed,
                                        const char *mode,
                                        struct OrthrusRun **out_run);

// Run a scenario from TOML text instead of a file.
//
// # Safety
// `config_toml` must be a valid NUL-terminated string; `out_run` must point
// to writable memory.
enum OrthrusStatus orthrus_run_scenario_str(const char *config_toml,
                                            uint64_t seed,
                                            struct OrthrusRun **out_run);

// True when every oracle verdict of the run passed.
//
// # Safety
// `run` must be a live handle from a run constructor.
bool orthrus_run_passed(const struct OrthrusRun *run);

// True when every transaction reached client confirmation.
//
// # Safety
// `run` must be a live handle.
bool orthrus_run_all_confirmed(const struct OrthrusRun *run);

// # Safety
// `run` must be a live handle.
uint64_t orthrus_run_confirmed(const struct OrthrusRun *run);

// # Safety
// `run` must be a live handle.
uint64_t orthrus_run_submitted(const struct OrthrusRun *run);

// Simulated completion time of the run in seconds.
//
// # Safety
// `run` must be a live handle.
double orthrus_run_completion_seconds(const struct OrthrusRun *run);

// Mean end-to-end latency in milliseconds over the selected transaction
// kind; negative when no transaction matched.
//
// # Safety
// `run` must be a live handle.
double orthrus_run_mean_latency_ms(const struct OrthrusRun *run, enum OrthrusTxFilter filter);

// Write the run's metrics, verdicts, and resolved config into a directory.
//
// # Safety
// `run` must be a live handle and `dir` a valid NUL-terminated string.
enum OrthrusStatus orthrus_run_write_outputs(const struct OrthrusRun *run, const char *dir);

// The run's oracle verdicts as newline-separated text; release with
// [`orthrus_string_free`]. NULL on a dead handle.
//
// # Safety
// `run` must be a live handle.
char *orthrus_run_verdicts(const struct OrthrusRun *run);

// Release a run handle. NULL is ignored.
//
// # Safety
// `run` must come from a run constructor and not have been freed before.
void orthrus_run_free(struct OrthrusRun *run);

// Last error message recorded on this thread; release with
// [`orthrus_string_free`]. NULL when no error was recorded.
char *orthrus_last_error(void);

// Release a string allocated by this library. NULL is ignored.
//
// # Safety
// `s` must originate from this library and not have been freed before.
void orthrus_string_free(char *s);

// Crate version as a static string; do not free.
const char *orthrus_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ORTHRUS_H */
