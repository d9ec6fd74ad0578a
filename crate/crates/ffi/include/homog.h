#ifndef HOMOG_H
#define HOMOG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes. Positive values match the `homog` exit codes.
typedef enum HomogStatus {
  HOMOG_STATUS_OK = 0,
  HOMOG_STATUS_IO = 1,
  HOMOG_STATUS_CONFIG = 2,
  HOMOG_STATUS_CONVERGENCE = 3,
  HOMOG_STATUS_GATE_FAILED = 4,
  HOMOG_STATUS_NULL_POINTER = 10,
  HOMOG_STATUS_BUFFER_TOO_SMALL = 11,
  HOMOG_STATUS_INVALID_UTF8 = 12,
  HOMOG_STATUS_PANIC = 13,
} HomogStatus;

// An interval map.
typedef struct HomogMap HomogMap;

// An observable on the map domain.
typedef struct HomogObservable HomogObservable;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copy the last error message of this thread into `buf` (NUL-terminated,
// truncated to `len`). Returns the full message length in bytes.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t homog_last_error(char *buf, size_t len);

// Library version as a static NUL-terminated string.
const char *homog_version(void);

// Create a map from a preset name (`lsv`, `doubling`, `quadratic`). `gamma`
// is read for `lsv` only; `p` ≤ 0 selects the default moment order.
//
// # Safety
// `kind` must be a NUL-terminated string and `out` a valid pointer.
enum HomogStatus homog_map_new(const char *kind, double gamma, double p, struct HomogMap **out);

// # Safety
// `map` must be null or a handle from [`homog_map_new`] not yet freed.
void homog_map_free(struct HomogMap *map);

// One application of the map.
//
// # Safety
// `map` and `out` must be valid pointers.
enum HomogStatus homog_map_step(const struct HomogMap *map, double x, double *out);

// Observable preset (`linear`, `cos`, `sin`, `mixed3`, `zero`). With a
// non-null `map` the observable is centered against its invariant measure.
//
// # Safety
// `name` must be a NUL-terminated string, `map` null or valid, `out` valid.
enum HomogStatus homog_observable_new(const char *name,
                                      const struct HomogMap *map,
                                      struct HomogObservable **out);

// # Safety
// `obs` must be null or a handle from [`homog_observable_new`] not yet freed.
void homog_observable_free(struct HomogObservable *obs);

// Dimension of the observable, or 0 for a null handle.
//
// # Safety
// `obs` must be null or valid.
size_t homog_observable_dim(const struct HomogObservable *obs);

// `S_n` (length `d`) and `𝕊_n` (length `d²`, row-major) along the orbit of
// `x0`, plus the relative residual of the pair identity.
//
// # Safety
// Handles must be valid; `s` and `ss` must hold `s_len` and `ss_len`
// doubles; `residual` may be null.
enum HomogStatus homog_iterated_sums(const struct HomogMap *map,
                                     const struct HomogObservable *obs,
                                     double x0,
                                     size_t n,
                                     double *s,
                                     size_t s_len,
                                     double *ss,
                                     size_t ss_len,
                                     double *residual);

// `Σ` and `E` from the tower decomposition (`lsv` and `doubling` only).
// Output arrays hold `len ≥ d²` doubles; the error-bar arrays may be null.
//
// # Safety
// Handles must be valid and non-null outputs must hold `len` doubles.
enum HomogStatus homog_tower_coefficients(const struct HomogMap *map,
                                          const struct HomogObservable *obs,
                                          size_t bins,
                                          double *sigma,
                                          double *e,
                                          double *sigma_stderr,
                                          double *e_stderr,
                                          size_t len);

// `Σ` and `E` from `samples` independent sums of length `n`.
//
// # Safety
// As for [`homog_tower_coefficients`].
enum HomogStatus homog_direct_coefficients(const struct HomogMap *map,
                                           const struct HomogObservable *obs,
                                           size_t n,
                                           size_t samples,
                                           uint64_t seed,
                                           double *sigma,
                                           double *e,
                                           double *sigma_stderr,
                                           double *e_stderr,
                                           size_t len);

// Run an experiment described by a JSON config, as the `homog` tool does.
// Returns [`HomogStatus::GateFailed`] when outputs were written but a
// statistical check failed.
//
// # Safety
// `config_json` must be a NUL-terminated string.
enum HomogStatus homog_run_json(const char *config_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HOMOG_H */
