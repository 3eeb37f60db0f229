/* C interface of the federated IDS training simulator. */

#ifndef SENTINEL_H
#define SENTINEL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code of every FFI call.
 */
typedef enum SentinelStatus {
  SENTINEL_STATUS_OK = 0,
  SENTINEL_STATUS_NULL_POINTER = 1,
  SENTINEL_STATUS_INVALID_UTF8 = 2,
  SENTINEL_STATUS_INVALID_ARGUMENT = 3,
  SENTINEL_STATUS_CONFIG_ERROR = 4,
  SENTINEL_STATUS_DATA_ERROR = 5,
  SENTINEL_STATUS_NUMERIC_ERROR = 6,
  SENTINEL_STATUS_IO_ERROR = 7,
  SENTINEL_STATUS_PARTITION_ERROR = 8,
  SENTINEL_STATUS_GRADCHECK_FAILED = 9,
  SENTINEL_STATUS_PANIC = 10,
} SentinelStatus;

/**
 * Opaque run configuration handle.
 */
typedef struct SentinelConfig SentinelConfig;

/**
 * Headline numbers of a finished run.
 */
typedef struct SentinelRunMetrics {
  uint64_t rounds_completed;
  /**
   * Mean macro-F1 across clients at the final round (teacher for the
   * dual-model variants, global model for the baseline).
   */
  double final_mean_macro_f1;
  double final_std_macro_f1;
  uint64_t student_param_count;
  uint64_t teacher_param_count;
} SentinelRunMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the detail message of the most recent failure on this thread into
 * `buf` (truncated to `len` bytes including the terminating NUL).
 * Returns the full message length in bytes, excluding the NUL.
 *
 * # Safety
 * `buf` must point to at least `len` writable bytes (or be null).
 */
size_t sentinel_last_error(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sentinel_version(void);

/**
 * New configuration with the reference defaults. Never fails.
 * Free with [`sentinel_config_free`].
 */
struct SentinelConfig *sentinel_config_new(void);

/**
 * Parse a configuration from TOML text.
 *
 * # Safety
 * `text` must be a valid NUL-terminated string; `out` must be a valid
 * destination pointer.
 */
enum SentinelStatus sentinel_config_from_string(const char *text, struct SentinelConfig **out);

/**
 * Parse a configuration from a TOML file.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string; `out` must be a valid
 * destination pointer.
 */
enum SentinelStatus sentinel_config_from_file(const char *path, struct SentinelConfig **out);

/**
 * Set one configuration key from its TOML value representation, e.g.
 * `sentinel_config_set(cfg, "alpha", "0.1")` or
 * `sentinel_config_set(cfg, "variant", "\"fedavg\"")`.
 *
 * # Safety
 * `cfg` must be a live handle from this library; `key` and `value` must
 * be valid NUL-terminated strings.
 */
enum SentinelStatus sentinel_config_set(struct SentinelConfig *cfg,
                                        const char *key,
                                        const char *value);

/**
 * Convenience seed setter.
 *
 * # Safety
 * `cfg` must be a live handle from this library.
 */
enum SentinelStatus sentinel_config_set_seed(struct SentinelConfig *cfg, uint64_t seed);

/**
 * Convenience thread-count setter (0 selects one worker per core).
 *
 * # Safety
 * `cfg` must be a live handle from this library.
 */
enum SentinelStatus sentinel_config_set_threads(struct SentinelConfig *cfg, size_t threads);

/**
 * Convenience output-directory setter.
 *
 * # Safety
 * `cfg` must be a live handle; `out_dir` a valid NUL-terminated string.
 */
enum SentinelStatus sentinel_config_set_out_dir(struct SentinelConfig *cfg, const char *out_dir);

/**
 * Execute the configured experiment, write `rounds.csv`, `summary.json`,
 * `effective_config.toml` and `label_mapping.json` into the configured
 * output directory, and (when `metrics` is non-null) report the headline
 * numbers.
 *
 * # Safety
 * `cfg` must be a live handle; `metrics` must be null or valid.
 */
enum SentinelStatus sentinel_run(const struct SentinelConfig *cfg,
                                 struct SentinelRunMetrics *metrics);

/**
 * Verify every analytic gradient against central finite differences.
 * Returns `Ok` when all worst-case relative errors stay below `1e-4`,
 * `GradcheckFailed` otherwise; the worst error lands in `max_rel_err`
 * when non-null.
 *
 * # Safety
 * `max_rel_err` must be null or valid.
 */
enum SentinelStatus sentinel_gradcheck(size_t trials, uint64_t seed, double *max_rel_err);

/**
 * Release a configuration handle. Null is a no-op.
 *
 * # Safety
 * `cfg` must be null or a handle previously returned by this library,
 * not yet freed.
 */
void sentinel_config_free(struct SentinelConfig *cfg);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SENTINEL_H */
