#ifndef EDGELAM_H
#define EDGELAM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum EdgelamStatus {
  EDGELAM_STATUS_OK = 0,
  EDGELAM_STATUS_NULL_POINTER = 1,
  EDGELAM_STATUS_INVALID_UTF8 = 2,
  EDGELAM_STATUS_CONFIG_ERROR = 3,
  EDGELAM_STATUS_MISSING_SECTION = 4,
  EDGELAM_STATUS_RUNTIME_ERROR = 5,
  EDGELAM_STATUS_IO_ERROR = 6,
  EDGELAM_STATUS_UNKNOWN_COMMAND = 7,
  EDGELAM_STATUS_OUT_OF_RANGE = 8,
  EDGELAM_STATUS_PANIC = 9,
} EdgelamStatus;

// Artifacts produced by one run, held in memory.
typedef struct EdgelamRun EdgelamRun;

// A parsed, validated scenario.
typedef struct EdgelamScenario EdgelamScenario;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread as a JSON record, or
// null. The pointer stays valid until the next call on this thread.
const char *edgelam_last_error(void);

// Library version as a static string.
const char *edgelam_version(void);

// Parses scenario TOML, applying `n_overrides` `key=value` strings in
// order. On success `*out` owns a new handle.
//
// # Safety
// `toml` is a NUL-terminated string; `overrides` points to `n_overrides`
// such strings (or is null when `n_overrides` is 0); `out` is writable.
enum EdgelamStatus edgelam_scenario_parse(const char *toml,
                                          const char *const *overrides,
                                          size_t n_overrides,
                                          struct EdgelamScenario **out);

// # Safety
// `scenario` is null or a handle from [`edgelam_scenario_parse`] not yet
// freed.
void edgelam_scenario_free(struct EdgelamScenario *scenario);

// # Safety
// `scenario` is a live handle.
uint64_t edgelam_scenario_seed(const struct EdgelamScenario *scenario);

// # Safety
// `scenario` is a live handle.
enum EdgelamStatus edgelam_scenario_set_seed(struct EdgelamScenario *scenario, uint64_t seed);

// Dry-run validation. `*report_json` receives `{"issues": [...]}` and
// `*n_issues` the issue count; free the string with
// [`edgelam_string_free`].
//
// # Safety
// `scenario` is a live handle; both out pointers are writable.
enum EdgelamStatus edgelam_verify(const struct EdgelamScenario *scenario,
                                  char **report_json,
                                  size_t *n_issues);

// Runs a subcommand (`fedft`, `tparallel`, `micro-deploy`,
// `micro-orchestrate`, `micro-migrate`, `chanpred`) in memory.
//
// # Safety
// `scenario` is a live handle, `command_name` a NUL-terminated string and
// `out` writable.
enum EdgelamStatus edgelam_run(const struct EdgelamScenario *scenario,
                               const char *command_name,
                               struct EdgelamRun **out);

// # Safety
// `run` is a live handle.
size_t edgelam_run_count(const struct EdgelamRun *run);

// Name and contents of artifact `index`. Both pointers borrow from `run`.
//
// # Safety
// `run` is a live handle; the out pointers are writable.
enum EdgelamStatus edgelam_run_artifact(const struct EdgelamRun *run,
                                        size_t index,
                                        const char **name,
                                        const uint8_t **data,
                                        size_t *len);

// Writes every artifact into `dir` atomically, creating it if needed.
//
// # Safety
// `run` is a live handle and `dir` a NUL-terminated path.
enum EdgelamStatus edgelam_run_write(const struct EdgelamRun *run, const char *dir);

// # Safety
// `run` is null or a handle from [`edgelam_run`] not yet freed.
void edgelam_run_free(struct EdgelamRun *run);

// # Safety
// `s` is null or a string returned by this library and not yet freed.
void edgelam_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EDGELAM_H */
