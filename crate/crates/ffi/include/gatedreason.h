#ifndef GATEDREASON_H
#define GATEDREASON_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GrStatus {
  GR_STATUS_OK = 0,
  GR_STATUS_NULL_POINTER = 1,
  GR_STATUS_INVALID_UTF8 = 2,
  GR_STATUS_INVALID_ARGUMENT = 3,
  GR_STATUS_PARSE = 4,
  GR_STATUS_CONFIG = 5,
  GR_STATUS_ENDPOINT = 6,
  GR_STATUS_PANIC = 7,
} GrStatus;

/**
 * Opaque engine handle with its own in-memory image store.
 */
typedef struct GrEngine GrEngine;

/**
 * Opaque trajectory handle.
 */
typedef struct GrTrajectory GrTrajectory;

/**
 * One verifier score. `has_action` is false for the final-answer score.
 */
typedef struct GrStepScore {
  double planning_tuned;
  double planning_reference;
  double action_tuned;
  double action_reference;
  bool has_action;
} GrStepScore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or NULL. Valid until
 * the next call into this library from the same thread.
 */
const char *gr_last_error(void);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library and not yet freed.
 */
void gr_string_free(char *s);

/**
 * Raw log-ratio of one step, before scaling by eta.
 *
 * # Safety
 * `score` and `out` must be valid pointers.
 */
enum GrStatus gr_step_log_ratio(const struct GrStepScore *score, double *out);

/**
 * Whether the stopping rule fires for `raw_ratio`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum GrStatus gr_should_stop(double raw_ratio, double eta, double epsilon, bool *out);

/**
 * Trajectory reward over `len` scores.
 *
 * # Safety
 * `scores` must point to `len` readable scores; `out` must be valid.
 */
enum GrStatus gr_reward(const struct GrStepScore *scores,
                        size_t len,
                        double eta,
                        double epsilon,
                        double *out);

/**
 * Writes the minimizer of the KL-regularized objective into `out[0..len]`.
 *
 * # Safety
 * `p0`, `values` and `out` must each point to `len` doubles.
 */
enum GrStatus gr_gibbs_optimum(const double *p0,
                               const double *values,
                               size_t len,
                               double eta,
                               double *out);

/**
 * Value of the KL-regularized objective at `p`.
 *
 * # Safety
 * `p`, `p0` and `values` must each point to `len` doubles; `out` must be valid.
 */
enum GrStatus gr_kl_objective(const double *p,
                              const double *p0,
                              const double *values,
                              size_t len,
                              double eta,
                              double *out);

/**
 * Parses a trajectory from JSON.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be valid.
 */
enum GrStatus gr_trajectory_from_json(const char *json, struct GrTrajectory **out);

/**
 * # Safety
 * `t` and `out` must be valid pointers.
 */
enum GrStatus gr_trajectory_horizon(const struct GrTrajectory *t, size_t *out);

/**
 * Counts schema violations. When non-zero, [`gr_last_error`] lists them.
 *
 * # Safety
 * `t` and `out` must be valid pointers.
 */
enum GrStatus gr_trajectory_validate(const struct GrTrajectory *t, size_t *out);

/**
 * # Safety
 * `t` and `out` must be valid pointers.
 */
enum GrStatus gr_trajectory_to_json(const struct GrTrajectory *t, char **out);

/**
 * # Safety
 * `t` must be NULL or a handle from [`gr_trajectory_from_json`] not yet freed.
 */
void gr_trajectory_free(struct GrTrajectory *t);

/**
 * Builds an engine from a directory of mock model fixtures
 * (`reasoner.json`, `verifier_tuned.json`, `verifier_reference.json`).
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must be valid.
 */
enum GrStatus gr_engine_from_mock_dir(const char *dir, struct GrEngine **out);

/**
 * Runs one gated episode and writes the episode report as JSON.
 *
 * # Safety
 * `engine` and `out` must be valid; strings must be NUL-terminated.
 */
enum GrStatus gr_engine_run(const struct GrEngine *engine,
                            const char *question,
                            const char *png_path,
                            char **out);

/**
 * # Safety
 * `e` must be NULL or a handle from [`gr_engine_from_mock_dir`] not yet freed.
 */
void gr_engine_free(struct GrEngine *e);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GATEDREASON_H */
