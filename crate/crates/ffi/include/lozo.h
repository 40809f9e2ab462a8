#ifndef LOZO_H
#define LOZO_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LozoSampler {
  LOZO_SAMPLER_NORMAL = 0,
  LOZO_SAMPLER_HAAR = 1,
  LOZO_SAMPLER_COORDINATE = 2,
} LozoSampler;

typedef enum LozoStatus {
  LOZO_STATUS_OK = 0,
  LOZO_STATUS_NULL_POINTER = 1,
  LOZO_STATUS_INVALID_ARGUMENT = 2,
  LOZO_STATUS_DIMENSION_MISMATCH = 3,
  LOZO_STATUS_NON_FINITE_LOSS = 4,
  LOZO_STATUS_STEP_ABORTED = 5,
  LOZO_STATUS_CONFIG = 6,
  LOZO_STATUS_IO = 7,
  LOZO_STATUS_PANIC = 8,
} LozoStatus;

typedef enum LozoAlgorithm {
  LOZO_ALGORITHM_ZO_SGD = 0,
  LOZO_ALGORITHM_LOZO = 1,
  LOZO_ALGORITHM_LOZO_M = 2,
} LozoAlgorithm;

typedef struct LozoOptimizer LozoOptimizer;

typedef struct LozoParams LozoParams;

typedef struct LozoProblem LozoProblem;

/**
 * Optimizer settings. `rank` applies to every layer.
 */
typedef struct LozoOptimizerConfig {
  double alpha;
  double epsilon;
  uint64_t nu;
  size_t rank;
  double beta;
  uint64_t total_steps;
  uint64_t seed;
  enum LozoSampler sampler;
} LozoOptimizerConfig;

typedef struct LozoStepReport {
  uint64_t step;
  double fd_scalar;
  double est_norm;
} LozoStepReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *lozo_last_error(void);

struct LozoOptimizerConfig lozo_optimizer_config_default(void);

/**
 * Builds a problem from a JSON problem spec, e.g.
 * `{"kind": "quadratic", "shapes": [[8, 6]]}`.
 *
 * # Safety
 * `json` must be NULL or a NUL-terminated string; `out` must be NULL or writable.
 */
enum LozoStatus lozo_problem_from_json(const char *json, struct LozoProblem **out);

/**
 * # Safety
 * `problem` must be NULL or a handle from [`lozo_problem_from_json`] not yet freed.
 */
void lozo_problem_free(struct LozoProblem *problem);

/**
 * # Safety
 * `problem` must be a live handle; `out` must be writable.
 */
enum LozoStatus lozo_problem_num_layers(const struct LozoProblem *problem, size_t *out);

/**
 * # Safety
 * `problem` must be a live handle; `rows` and `cols` must be writable.
 */
enum LozoStatus lozo_problem_layer_dims(const struct LozoProblem *problem,
                                        size_t layer,
                                        size_t *rows,
                                        size_t *cols);

/**
 * Expected loss `f(X)` averaged over all samples.
 *
 * # Safety
 * `problem` and `params` must be live handles; `out` must be writable.
 */
enum LozoStatus lozo_problem_loss(const struct LozoProblem *problem,
                                  const struct LozoParams *params,
                                  double *out);

/**
 * Optimal expected loss when the problem knows it; `NaN` otherwise.
 *
 * # Safety
 * `problem` must be a live handle; `out` must be writable.
 */
enum LozoStatus lozo_problem_optimal_loss(const struct LozoProblem *problem, double *out);

/**
 * Zero parameters shaped for `problem`.
 *
 * # Safety
 * `problem` must be a live handle; `out` must be writable.
 */
enum LozoStatus lozo_params_zeros(const struct LozoProblem *problem, struct LozoParams **out);

/**
 * # Safety
 * `params` must be NULL or a live handle not yet freed.
 */
void lozo_params_free(struct LozoParams *params);

/**
 * Total number of entries across all layers.
 *
 * # Safety
 * `params` must be a live handle; `out` must be writable.
 */
enum LozoStatus lozo_params_len(const struct LozoParams *params, size_t *out);

/**
 * Copies all entries, layer by layer in row-major order, into `buf`.
 *
 * # Safety
 * `params` must be a live handle; `buf` must have room for `len` doubles.
 */
enum LozoStatus lozo_params_read(const struct LozoParams *params, double *buf, size_t len);

/**
 * Overwrites all entries from `buf`, in the layout of [`lozo_params_read`].
 *
 * # Safety
 * `params` must be a live handle; `buf` must hold `len` readable doubles.
 */
enum LozoStatus lozo_params_write(struct LozoParams *params, const double *buf, size_t len);

/**
 * Creates an optimizer for the layer shapes of `problem`.
 *
 * # Safety
 * `problem` must be a live handle; `config` must be readable; `out` must be writable.
 */
enum LozoStatus lozo_optimizer_new(enum LozoAlgorithm algo,
                                   const struct LozoOptimizerConfig *config,
                                   const struct LozoProblem *problem,
                                   struct LozoOptimizer **out);

/**
 * # Safety
 * `optimizer` must be NULL or a live handle not yet freed.
 */
void lozo_optimizer_free(struct LozoOptimizer *optimizer);

/**
 * Takes one step in place. On failure `params` and the optimizer are unchanged.
 * `report` may be NULL.
 *
 * # Safety
 * All handles must be live and `params` must not be aliased during the call.
 */
enum LozoStatus lozo_optimizer_step(struct LozoOptimizer *optimizer,
                                    const struct LozoProblem *problem,
                                    struct LozoParams *params,
                                    struct LozoStepReport *report);

/**
 * # Safety
 * `optimizer` must be a live handle; `out` must be writable.
 */
enum LozoStatus lozo_optimizer_steps_taken(const struct LozoOptimizer *optimizer, uint64_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LOZO_H */
