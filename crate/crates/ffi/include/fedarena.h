#ifndef FEDARENA_H
#define FEDARENA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes.
typedef enum FedarenaStatus {
  FEDARENA_STATUS_OK = 0,
  FEDARENA_STATUS_NULL_POINTER = 1,
  FEDARENA_STATUS_INVALID_ARGUMENT = 2,
  FEDARENA_STATUS_CONFIG_ERROR = 3,
  FEDARENA_STATUS_RUNTIME_ERROR = 4,
  FEDARENA_STATUS_BUFFER_TOO_SMALL = 5,
  FEDARENA_STATUS_PANIC = 6,
} FedarenaStatus;

// Opaque experiment configuration.
typedef struct FedarenaConfig FedarenaConfig;

// Opaque experiment result.
typedef struct FedarenaResult FedarenaResult;

// Headline metrics of a finished run.
typedef struct FedarenaSummary {
  double attack_accuracy;
  double attack_precision;
  double attack_recall;
  double final_test_accuracy;
  uintptr_t best_round;
  uintptr_t rounds;
} FedarenaSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message on this thread into `buf` as a
// NUL-terminated string, truncating if needed. Returns the full message
// length excluding the terminator. `buf` may be null when `len` is 0.
//
// # Safety
// `buf` must be valid for writes of `len` bytes.
uintptr_t fedarena_last_error(char *buf, uintptr_t len);

// Library version as a static NUL-terminated string.
const char *fedarena_version(void);

// Creates a configuration holding the shipped defaults.
//
// # Safety
// `out` must be a valid pointer.
enum FedarenaStatus fedarena_config_default(struct FedarenaConfig **out);

// Parses a TOML configuration. Missing keys take defaults; unknown keys
// are rejected.
//
// # Safety
// `toml` must be a NUL-terminated string and `out` a valid pointer.
enum FedarenaStatus fedarena_config_from_toml(const char *toml, struct FedarenaConfig **out);

// Overrides the master seed.
//
// # Safety
// `config` must come from a `fedarena_config_*` constructor.
enum FedarenaStatus fedarena_config_set_seed(struct FedarenaConfig *config, uint64_t seed);

// Releases a configuration. Null is ignored.
//
// # Safety
// `config` must come from a `fedarena_config_*` constructor and not be
// used afterwards.
void fedarena_config_free(struct FedarenaConfig *config);

// Runs an experiment. `threads` of 0 runs sequentially; results do not
// depend on it.
//
// # Safety
// `config` must be a live configuration handle and `out` a valid pointer.
enum FedarenaStatus fedarena_run(const struct FedarenaConfig *config,
                                 uintptr_t threads,
                                 struct FedarenaResult **out);

// Copies the headline metrics of `result` into `out`.
//
// # Safety
// `result` must be a live result handle and `out` a valid pointer.
enum FedarenaStatus fedarena_result_summary(const struct FedarenaResult *result,
                                            struct FedarenaSummary *out);

// Test accuracy after round `round`.
//
// # Safety
// `result` must be a live result handle and `out` a valid pointer.
enum FedarenaStatus fedarena_result_round_test_accuracy(const struct FedarenaResult *result,
                                                        uintptr_t round,
                                                        double *out);

// Releases a result. Null is ignored.
//
// # Safety
// `result` must come from [`fedarena_run`] and not be used afterwards.
void fedarena_result_free(struct FedarenaResult *result);

// Angular trimmed mean of `count` row-major gradients of length `dim`.
//
// Writes the aggregate into `aggregate` (`dim` values) and the ascending
// indices of the kept gradients into `kept` (capacity `kept_capacity`),
// storing their number in `kept_len`.
//
// # Safety
// `grads` must hold `count * dim` values, `aggregate` room for `dim`,
// `kept` room for `kept_capacity`, and `kept_len` must be valid.
enum FedarenaStatus fedarena_atm(const double *grads,
                                 uintptr_t count,
                                 uintptr_t dim,
                                 uintptr_t trim,
                                 double *aggregate,
                                 uintptr_t *kept,
                                 uintptr_t kept_capacity,
                                 uintptr_t *kept_len);

// Deviation bound `2(n-m)(b+1)σ² / (n-b-m)²`.
//
// # Safety
// `out` must be a valid pointer.
enum FedarenaStatus fedarena_theorem1_bound(uintptr_t n,
                                            uintptr_t m,
                                            uintptr_t b,
                                            double sigma2,
                                            double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDARENA_H */
