#ifndef UCOS_H
#define UCOS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible function.
typedef enum UcosStatus {
  UCOS_STATUS_OK = 0,
  UCOS_STATUS_NULL_POINTER = 1,
  UCOS_STATUS_INVALID_ARGUMENT = 2,
  UCOS_STATUS_CONFIG = 3,
  UCOS_STATUS_DIMENSION = 4,
  UCOS_STATUS_NUMERICAL = 5,
  UCOS_STATUS_SAMPLING = 6,
  UCOS_STATUS_IO = 7,
  UCOS_STATUS_PANIC = 8,
} UcosStatus;

// A configured problem: forward map, prior, noise and schedule.
typedef struct UcosProblem UcosProblem;

// A problem with a registered measurement and its score models.
typedef struct UcosSampler UcosSampler;

// Forward and adjoint application counts.
typedef struct UcosCallCounts {
  uint64_t forward;
  uint64_t adjoint;
} UcosCallCounts;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *ucos_version(void);

// Message of the most recent failure on this thread, or NULL. The pointer
// stays valid until the next failing call on the same thread.
const char *ucos_last_error(void);

// Loads a problem from a TOML config file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum UcosStatus ucos_problem_load(const char *path, struct UcosProblem **out);

// Built-in defaults for `kind` ("inpainting", "ct" or "deblur"); `rows`
// of 0 keeps the default grid size.
//
// # Safety
// `kind` must be a NUL-terminated string; `out` must be writable.
enum UcosStatus ucos_problem_new(const char *kind, size_t rows, struct UcosProblem **out);

// # Safety
// `p` must come from a `ucos_problem_*` constructor (or be NULL) and not
// be used afterwards.
void ucos_problem_free(struct UcosProblem *p);

// Image length `n` and measurement length `m`.
//
// # Safety
// `p` must be a live problem handle; `n` and `m` must be writable.
enum UcosStatus ucos_problem_dims(const struct UcosProblem *p, size_t *n, size_t *m);

// Cumulative forward/adjoint applications on this problem.
//
// # Safety
// `p` must be a live problem handle; `out` must be writable.
enum UcosStatus ucos_problem_calls(const struct UcosProblem *p, struct UcosCallCounts *out);

// Draws a ground truth from the prior and its noisy measurement, both
// determined by the configured problem seed.
//
// # Safety
// `truth` must hold `n` doubles and `y` must hold `m` doubles.
enum UcosStatus ucos_problem_synthesize(const struct UcosProblem *p,
                                        double *truth,
                                        size_t n,
                                        double *y,
                                        size_t m);

// Registers the measurement `y` (one forward and one adjoint application)
// and builds the score models.
//
// # Safety
// `p` must be a live problem handle, `y` must hold `m` doubles and `out`
// must be writable.
enum UcosStatus ucos_sampler_new(const struct UcosProblem *p,
                                 const double *y,
                                 size_t m,
                                 struct UcosSampler **out);

// # Safety
// `s` must come from `ucos_sampler_new` (or be NULL) and not be used
// afterwards.
void ucos_sampler_free(struct UcosSampler *s);

// Draws `count` posterior samples into `out` (`count * n` doubles, one
// sample after another). `method` is "ucos", "conditional", "sde_ald",
// "dps" or "proj"; NULL uses the configured method. `calls`, if not NULL,
// receives the operator applications made while sampling.
//
// # Safety
// `s` must be a live sampler handle and `out` must hold `out_len` doubles.
enum UcosStatus ucos_sampler_run(const struct UcosSampler *s,
                                 const char *method,
                                 size_t count,
                                 uint64_t seed,
                                 double *out,
                                 size_t out_len,
                                 struct UcosCallCounts *calls);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UCOS_H */
