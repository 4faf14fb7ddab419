#ifndef PROBTOA_H
#define PROBTOA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Largest supported spatial dimension.
 */
#define PROBTOA_MAX_DIM 3

/**
 * `(PROBTOA_MAX_DIM + 1)²`, the covariance buffer length.
 */
#define PROBTOA_COV_LEN 16

typedef enum ProbtoaStatus {
  PROBTOA_STATUS_OK = 0,
  PROBTOA_STATUS_NULL_POINTER = 1,
  PROBTOA_STATUS_INVALID_ARGUMENT = 2,
  PROBTOA_STATUS_INSUFFICIENT_APS = 3,
  PROBTOA_STATUS_UNKNOWN_AP = 4,
  /**
   * Numerical breakdown inside a solver.
   */
  PROBTOA_STATUS_NUMERICAL = 5,
  /**
   * A Rust panic was caught at the boundary.
   */
  PROBTOA_STATUS_PANIC = 6,
} ProbtoaStatus;

/**
 * Opaque NLOS bias prior.
 */
typedef struct ProbtoaPrior ProbtoaPrior;

/**
 * Opaque solver: AP layout, prior, noise scale, box, calibration, EP settings.
 */
typedef struct ProbtoaSolver ProbtoaSolver;

typedef struct ProbtoaEpConfig {
  size_t max_iters;
  double tol;
  double damping;
  /**
   * Nonzero for simultaneous site updates.
   */
  int32_t parallel;
  /**
   * Nonzero to drop the per-component evidence from the mixture weights.
   */
  int32_t paper_weights;
  size_t linearization_passes;
} ProbtoaEpConfig;

/**
 * Outcome of one solve. Unused trailing entries are zero.
 */
typedef struct ProbtoaEstimate {
  size_t dim;
  double position[PROBTOA_MAX_DIM];
  /**
   * Relative time offset τ (meters).
   */
  double tau;
  /**
   * Row-major `(dim + 1)²` covariance over `(x, τ)`; zero for baselines.
   */
  double covariance[PROBTOA_COV_LEN];
  size_t iterations;
  /**
   * 1 when the solver met its stopping rule.
   */
  int32_t converged;
  /**
   * Baselines only: residual norm of the fitted arrivals.
   */
  double residual_norm;
} ProbtoaEstimate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, a static NUL-terminated string.
 */
const char *probtoa_version(void);

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *probtoa_last_error(void);

/**
 * Piecewise prior with grid step `sigma_clk / 10`: half the mass uniform on
 * the first `k` points, the rest decaying linearly over the next `l`.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum ProbtoaStatus probtoa_prior_new(double sigma_clk,
                                     size_t k,
                                     size_t l,
                                     struct ProbtoaPrior **out);

/**
 * Prior from explicit nonnegative masses (normalized internally).
 *
 * # Safety
 * `masses` must be valid for `n` reads and `out` for writes.
 */
enum ProbtoaStatus probtoa_prior_from_masses(double sigma_clk,
                                             const double *masses,
                                             size_t n,
                                             struct ProbtoaPrior **out);

/**
 * # Safety
 * `prior` must be null or a handle from this library, not yet freed.
 */
void probtoa_prior_free(struct ProbtoaPrior *prior);

/**
 * Number of grid points, or 0 for a null handle.
 *
 * # Safety
 * `prior` must be null or a live handle.
 */
size_t probtoa_prior_len(const struct ProbtoaPrior *prior);

/**
 * Mass and bias (meters) of grid point `ell`.
 *
 * # Safety
 * `prior` must be a live handle; `mass` and `bias` null or valid for writes.
 */
enum ProbtoaStatus probtoa_prior_point(const struct ProbtoaPrior *prior,
                                       size_t ell,
                                       double *mass,
                                       double *bias);

/**
 * Default EP settings.
 */
struct ProbtoaEpConfig probtoa_ep_config_default(void);

/**
 * Creates a solver over `n_aps` APs with row-major `positions`
 * (`n_aps × dim`). The prior is copied. The solve box defaults to the APs'
 * bounding box.
 *
 * # Safety
 * `ap_ids` and `positions` must be valid for `n_aps` and `n_aps * dim`
 * reads; `prior` must be a live handle; `out` valid for writes.
 */
enum ProbtoaStatus probtoa_solver_new(size_t dim,
                                      const uint32_t *ap_ids,
                                      const double *positions,
                                      size_t n_aps,
                                      const struct ProbtoaPrior *prior,
                                      double sigma_clk,
                                      struct ProbtoaSolver **out);

/**
 * # Safety
 * `solver` must be null or a live handle.
 */
void probtoa_solver_free(struct ProbtoaSolver *solver);

/**
 * Replaces the solve box (EP initialization).
 *
 * # Safety
 * `min` and `max` must be valid for `dim` reads.
 */
enum ProbtoaStatus probtoa_solver_set_box(struct ProbtoaSolver *solver,
                                          const double *min,
                                          const double *max);

/**
 * Sets per-AP calibration delays (meters); APs not listed get zero. `n = 0`
 * clears the table.
 *
 * # Safety
 * `ap_ids` and `deltas` must be valid for `n` reads.
 */
enum ProbtoaStatus probtoa_solver_set_calibration(struct ProbtoaSolver *solver,
                                                  const uint32_t *ap_ids,
                                                  const double *deltas,
                                                  size_t n);

/**
 * # Safety
 * `config` must be valid for reads.
 */
enum ProbtoaStatus probtoa_solver_set_ep_config(struct ProbtoaSolver *solver,
                                                const struct ProbtoaEpConfig *config);

/**
 * Expectation-propagation solve of one epoch. `toas` are relative arrivals
 * in meters, with the reference AP's entry 0.
 *
 * # Safety
 * `ap_ids` and `toas` must be valid for `n` reads; `out` for writes.
 */
enum ProbtoaStatus probtoa_solve_ep(const struct ProbtoaSolver *solver,
                                    uint32_t reference_ap,
                                    const uint32_t *ap_ids,
                                    const double *toas,
                                    size_t n,
                                    struct ProbtoaEstimate *out);

/**
 * Linear squared-range TDoA solve.
 *
 * # Safety
 * As for [`probtoa_solve_ep`].
 */
enum ProbtoaStatus probtoa_solve_linear(const struct ProbtoaSolver *solver,
                                        uint32_t reference_ap,
                                        const uint32_t *ap_ids,
                                        const double *toas,
                                        size_t n,
                                        struct ProbtoaEstimate *out);

/**
 * Levenberg-Marquardt solve, started from the linear solution.
 *
 * # Safety
 * As for [`probtoa_solve_ep`].
 */
enum ProbtoaStatus probtoa_solve_nonlinear(const struct ProbtoaSolver *solver,
                                           uint32_t reference_ap,
                                           const uint32_t *ap_ids,
                                           const double *toas,
                                           size_t n,
                                           struct ProbtoaEstimate *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROBTOA_H */
