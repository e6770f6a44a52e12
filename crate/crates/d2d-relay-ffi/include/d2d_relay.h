#ifndef D2D_RELAY_H
#define D2D_RELAY_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum D2dStatus {
  D2D_STATUS_OK = 0,
  D2D_STATUS_NULL_POINTER = 1,
  D2D_STATUS_INVALID_UTF8 = 2,
  D2D_STATUS_INVALID_INPUT = 3,
  D2D_STATUS_CONFIG = 4,
  D2D_STATUS_DEGENERATE_LINK = 5,
  D2D_STATUS_INFEASIBLE_GEOMETRY = 6,
  D2D_STATUS_TOO_LARGE = 7,
  D2D_STATUS_DOMAIN = 8,
  D2D_STATUS_IO = 9,
  D2D_STATUS_OUT_OF_RANGE = 10,
  D2D_STATUS_PANIC = 11,
} D2dStatus;

/**
 * Experiment description.
 */
typedef struct D2dExperiment D2dExperiment;

/**
 * One relay's allocation problem.
 */
typedef struct D2dProblem D2dProblem;

/**
 * Metrics of a finished experiment.
 */
typedef struct D2dResults D2dResults;

/**
 * Allocation returned by the solver.
 */
typedef struct D2dSolution D2dSolution;

/**
 * Numeric fields of one result row. `rate_gain_pct` is +inf when
 * `rate_gain_undefined` is set.
 */
typedef struct D2dMetricsRow {
  bool has_sweep_value;
  double sweep_value;
  size_t num_drops;
  double mean_rate_per_ue;
  double mean_d2d_rate;
  double ref_d2d_rate;
  double rate_gain_pct;
  bool rate_gain_undefined;
  double sum_rate;
  double r_delta;
  double iters_median;
  double iters_p90;
  size_t iters_max;
  size_t converged_drops;
  size_t infeasible_drops;
} D2dMetricsRow;

/**
 * Solver settings; start from [`d2d_solver_options_default`].
 */
typedef struct D2dSolverOptions {
  double step_a;
  size_t t_max;
  double epsilon;
  double mult_init;
  double lambda_ceiling;
} D2dSolverOptions;

/**
 * Summary of a solution.
 */
typedef struct D2dSolutionSummary {
  double sum_rate;
  size_t iterations;
  bool converged;
  bool infeasible;
} D2dSolutionSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into this library on the same thread.
 */
const char *d2d_last_error_message(void);

/**
 * Free a string returned by this library.
 *
 * # Safety
 * `s` must come from this library or be null.
 */
void d2d_string_free(char *s);

/**
 * Parse an experiment spec file's text.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out` must be writable.
 */
enum D2dStatus d2d_experiment_from_toml(const char *text, struct D2dExperiment **out);

/**
 * Override the number of drops and the master seed.
 *
 * # Safety
 * `exp` must be a live handle.
 */
enum D2dStatus d2d_experiment_set_drops(struct D2dExperiment *exp,
                                        size_t num_drops,
                                        uint64_t master_seed);

/**
 * # Safety
 * `exp` must come from [`d2d_experiment_from_toml`] or be null.
 */
void d2d_experiment_free(struct D2dExperiment *exp);

/**
 * Run every drop of every sweep value. `workers = 0` uses every core.
 *
 * # Safety
 * `exp` must be a live handle; `out` must be writable.
 */
enum D2dStatus d2d_experiment_run(const struct D2dExperiment *exp,
                                  size_t workers,
                                  struct D2dResults **out);

/**
 * Number of rows; 0 for a null handle.
 *
 * # Safety
 * `res` must be a live handle or null.
 */
size_t d2d_results_len(const struct D2dResults *res);

/**
 * # Safety
 * `res` must be a live handle; `out` must be writable.
 */
enum D2dStatus d2d_results_row(const struct D2dResults *res,
                               size_t index,
                               struct D2dMetricsRow *out);

/**
 * Results as CSV text; release with [`d2d_string_free`].
 *
 * # Safety
 * `res` must be a live handle; `out` must be writable.
 */
enum D2dStatus d2d_results_to_csv(const struct D2dResults *res, char **out);

/**
 * # Safety
 * `res` must come from [`d2d_experiment_run`] or be null.
 */
void d2d_results_free(struct D2dResults *res);

/**
 * Parse a problem from its JSON form (as written by `dump-drop`).
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum D2dStatus d2d_problem_from_json(const char *json, struct D2dProblem **out);

/**
 * # Safety
 * `p` must be a live handle; the outputs must be writable.
 */
enum D2dStatus d2d_problem_dims(const struct D2dProblem *p, size_t *num_ues, size_t *num_rbs);

/**
 * # Safety
 * `p` must come from [`d2d_problem_from_json`] or be null.
 */
void d2d_problem_free(struct D2dProblem *p);

struct D2dSolverOptions d2d_solver_options_default(void);

/**
 * Solve without uncertainty protection. `opts` may be null for defaults.
 *
 * # Safety
 * `p` must be a live handle; `opts` null or valid; `out` writable.
 */
enum D2dStatus d2d_solve_nominal(const struct D2dProblem *p,
                                 const struct D2dSolverOptions *opts,
                                 struct D2dSolution **out);

/**
 * # Safety
 * `s` must be a live handle; `out` writable.
 */
enum D2dStatus d2d_solution_summary(const struct D2dSolution *s, struct D2dSolutionSummary *out);

/**
 * Achieved rate of one user in bit/s.
 *
 * # Safety
 * `s` must be a live handle; `out` writable.
 */
enum D2dStatus d2d_solution_user_rate(const struct D2dSolution *s, size_t ue, double *out);

/**
 * User holding `rb`, or -1 when the RB is idle.
 *
 * # Safety
 * `s` must be a live handle; `out` writable.
 */
enum D2dStatus d2d_solution_rb_owner(const struct D2dSolution *s, size_t rb, int64_t *out);

/**
 * First- and second-hop powers of `ue` on `rb` in watts.
 *
 * # Safety
 * `s` must be a live handle; outputs writable.
 */
enum D2dStatus d2d_solution_powers(const struct D2dSolution *s,
                                   size_t ue,
                                   size_t rb,
                                   double *p1,
                                   double *p2);

/**
 * # Safety
 * `s` must come from [`d2d_solve_nominal`] or be null.
 */
void d2d_solution_free(struct D2dSolution *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* D2D_RELAY_H */
