#ifndef FLUIDMC_H
#define FLUIDMC_H

/* Generated by cbindgen from fluidmc-capi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code of a fallible call.
 */
typedef enum FluidmcStatus {
  FLUIDMC_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  FLUIDMC_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  FLUIDMC_STATUS_INVALID_UTF8 = 2,
  /**
   * The model or formula failed to parse or resolve.
   */
  FLUIDMC_STATUS_PARSE_ERROR = 3,
  /**
   * Integration, equilibrium search, or linear algebra failed.
   */
  FLUIDMC_STATUS_NUMERIC_ERROR = 4,
  /**
   * The formula is well-formed but cannot be checked as requested.
   */
  FLUIDMC_STATUS_CHECK_ERROR = 5,
  /**
   * An index or buffer length did not match the model.
   */
  FLUIDMC_STATUS_OUT_OF_RANGE = 6,
  /**
   * An internal panic was caught at the boundary.
   */
  FLUIDMC_STATUS_PANIC = 7,
} FluidmcStatus;

/**
 * Truth component of a check result.
 */
typedef enum FluidmcTruth {
  FLUIDMC_TRUTH_FALSE = 0,
  FLUIDMC_TRUTH_TRUE = 1,
  /**
   * `=?` query: `value` carries the computed quantity, no truth claimed.
   */
  FLUIDMC_TRUTH_VALUE = 2,
  /**
   * Threshold query too close to the threshold to resolve reliably.
   */
  FLUIDMC_TRUTH_INDETERMINATE = 3,
} FluidmcTruth;

/**
 * Opaque parsed population model.
 */
typedef struct FluidmcModel FluidmcModel;

/**
 * Opaque dense-output fluid trajectory.
 */
typedef struct FluidmcTrajectory FluidmcTrajectory;

/**
 * Result of checking one formula from one initial state at time zero.
 */
typedef struct FluidmcCheckResult {
  /**
   * The computed probability or reward.
   */
  double value;
  enum FluidmcTruth truth;
} FluidmcCheckResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string. Never freed.
 */
const char *fluidmc_version(void);

/**
 * Description of the most recent failure on this thread, or an empty string
 * if nothing failed yet. Do not free; the pointer is invalidated by the next
 * failing call on the same thread.
 */
const char *fluidmc_last_error_message(void);

/**
 * Releases a string allocated by this library.
 *
 * # Safety
 * `s` must be null or a pointer previously returned by a `char*`-returning
 * function of this library, not yet freed.
 */
void fluidmc_string_free(char *s);

/**
 * Parses model source text into a new model handle.
 *
 * # Safety
 * `src` must be a NUL-terminated string valid for reads; `out` must be valid
 * for writes.
 */
enum FluidmcStatus fluidmc_model_parse(const char *src, struct FluidmcModel **out);

/**
 * Releases a model handle.
 *
 * # Safety
 * `m` must be null or a handle from [`fluidmc_model_parse`], not yet freed.
 */
void fluidmc_model_free(struct FluidmcModel *m);

/**
 * Number of agent states, or 0 if `m` is null.
 *
 * # Safety
 * `m` must be null or a live model handle.
 */
size_t fluidmc_model_n_states(const struct FluidmcModel *m);

/**
 * Name of state `index` as a newly allocated string, or null (with the error
 * message set) when `m` is null or the index is out of range. Free the
 * result with [`fluidmc_string_free`].
 *
 * # Safety
 * `m` must be null or a live model handle.
 */
char *fluidmc_model_state_name(const struct FluidmcModel *m, size_t index);

/**
 * Resolves a state name to its index.
 *
 * # Safety
 * `m` must be a live model handle; `name` a readable NUL-terminated string;
 * `out` valid for writes.
 */
enum FluidmcStatus fluidmc_model_state_index(const struct FluidmcModel *m,
                                             const char *name,
                                             size_t *out);

/**
 * Integrates the fluid ODE over `[0, t_max]` into a trajectory handle.
 *
 * # Safety
 * `m` must be a live model handle; `out` valid for writes.
 */
enum FluidmcStatus fluidmc_fluid_solve(const struct FluidmcModel *m,
                                       double t_max,
                                       struct FluidmcTrajectory **out);

/**
 * Releases a trajectory handle.
 *
 * # Safety
 * `tr` must be null or a handle from [`fluidmc_fluid_solve`], not yet freed.
 */
void fluidmc_trajectory_free(struct FluidmcTrajectory *tr);

/**
 * End of the covered time interval, or NaN if `tr` is null.
 *
 * # Safety
 * `tr` must be null or a live trajectory handle.
 */
double fluidmc_trajectory_t_end(const struct FluidmcTrajectory *tr);

/**
 * Writes the state densities at `t` (clamped into the covered interval) to
 * `out`, which must hold exactly one `double` per agent state.
 *
 * # Safety
 * `tr` must be a live trajectory handle; `out` valid for `len` writes.
 */
enum FluidmcStatus fluidmc_trajectory_eval(const struct FluidmcTrajectory *tr,
                                           double t,
                                           double *out,
                                           size_t len);

/**
 * Computes the fluid equilibrium and writes it to `out` (one `double` per
 * agent state). When `out_residual` is non-null it receives the sup norm of
 * the drift at the returned point.
 *
 * # Safety
 * `m` must be a live model handle; `out` valid for `len` writes;
 * `out_residual` null or valid for writes.
 */
enum FluidmcStatus fluidmc_steady_state(const struct FluidmcModel *m,
                                        double *out,
                                        size_t len,
                                        double *out_residual);

/**
 * Checks one CSL or reward formula from initial state `s0` at time zero and
 * writes the outcome to `out`. A null `s0` selects the state with the
 * largest initial density.
 *
 * # Safety
 * `m` must be a live model handle; `formula` a readable NUL-terminated
 * string; `s0` null or a readable NUL-terminated string; `out` valid for
 * writes.
 */
enum FluidmcStatus fluidmc_check_formula(const struct FluidmcModel *m,
                                         const char *formula,
                                         const char *s0,
                                         struct FluidmcCheckResult *out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* FLUIDMC_H */
