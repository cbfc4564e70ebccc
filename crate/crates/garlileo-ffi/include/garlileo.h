#ifndef GARLILEO_H
#define GARLILEO_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum GrlStatus {
  /**
   * Success.
   */
  GrlOk = 0,
  /**
   * Internal failure; see `grl_last_error_message`.
   */
  GrlInternalError = 1,
  /**
   * Invalid argument or unreadable input.
   */
  GrlInvalidArgument = 2,
} GrlStatus;

/**
 * Opaque handle to a loaded dataset.
 */
typedef struct GrlDataset GrlDataset;

/**
 * RMSE pose metrics plus the mean gravity-direction error.
 */
typedef struct GrlMetricReport {
  /**
   * Translational absolute pose error (m).
   */
  double ape_t;
  /**
   * Rotational absolute pose error (deg).
   */
  double ape_r;
  /**
   * Translational relative pose error (m/m).
   */
  double rpe_t;
  /**
   * Rotational relative pose error (deg/m).
   */
  double rpe_r;
  /**
   * Vertical absolute pose error (m).
   */
  double ape_z;
  /**
   * Horizontal absolute pose error (m).
   */
  double ape_xy;
  /**
   * Mean gravity angular error (deg); NaN when not evaluated.
   */
  double gravity_mean_deg;
} GrlMetricReport;

/**
 * One radar return for [`grl_ego_velocity`].
 */
typedef struct GrlRadarPoint {
  double x;
  double y;
  double z;
  double doppler;
} GrlRadarPoint;

/**
 * Result of the instantaneous ego-velocity estimate, radar frame.
 */
typedef struct GrlEgoVelocity {
  double vx;
  double vy;
  double vz;
  uintptr_t inliers;
  double residual_rms;
  /**
   * 1 when the estimate is usable, 0 otherwise.
   */
  int32_t valid;
} GrlEgoVelocity;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static string; do not free.
 */
const char *grl_version(void);

/**
 * Returns the last error message of this thread as a newly allocated
 * string, or null when no error occurred. Free with [`grl_string_free`].
 */
char *grl_last_error_message(void);

/**
 * Frees a string returned by this library.
 *
 * # Safety
 * `s` must have been returned by a function of this library and not freed
 * before; null is ignored.
 */
void grl_string_free(char *s);

/**
 * Generates a synthetic dataset for a named scenario into `out_dir`.
 * `noise_json` optionally overrides the default noise configuration.
 *
 * # Safety
 * All pointer arguments must be valid NUL-terminated strings (or null
 * where documented).
 */
enum GrlStatus grl_simulate(const char *scenario,
                            uint64_t seed,
                            const char *out_dir,
                            const char *noise_json);

/**
 * Loads a dataset directory; returns null on failure (see
 * [`grl_last_error_message`]). Release with [`grl_dataset_free`].
 *
 * # Safety
 * `dir` must be a valid NUL-terminated string.
 */
struct GrlDataset *grl_dataset_load(const char *dir);

/**
 * Frees a dataset handle; null is ignored.
 *
 * # Safety
 * `ds` must have been returned by [`grl_dataset_load`] and not freed.
 */
void grl_dataset_free(struct GrlDataset *ds);

/**
 * Stream lengths of a loaded dataset. Null output pointers are skipped.
 *
 * # Safety
 * `ds` must be a live handle; output pointers must be writable or null.
 */
enum GrlStatus grl_dataset_counts(const struct GrlDataset *ds,
                                  uintptr_t *imu,
                                  uintptr_t *radar,
                                  uintptr_t *leg);

/**
 * Runs the estimator on a loaded dataset, writing the trajectory and
 * diagnostics into `out_dir`. `config_json` optionally overrides the
 * default configuration; `ablate_csv` is a comma-separated list of
 * `no-gravity`, `no-s2`, `no-bias`.
 *
 * # Safety
 * `ds` must be a live handle; strings as in [`grl_simulate`].
 */
enum GrlStatus grl_dataset_run(const struct GrlDataset *ds,
                               const char *out_dir,
                               const char *config_json,
                               const char *ablate_csv);

/**
 * Scores an estimated TUM trajectory against a ground-truth one, with an
 * optional estimated-gravity JSONL log.
 *
 * # Safety
 * Paths must be valid strings (gravity may be null); `report` must point
 * to writable memory.
 */
enum GrlStatus grl_evaluate(const char *est_tum,
                            const char *gt_tum,
                            const char *est_gravity,
                            double rpe_delta,
                            struct GrlMetricReport *report);

/**
 * RANSAC + least-squares ego velocity from one scan's Doppler returns.
 * Equal seeds give bit-identical results.
 *
 * # Safety
 * `points` must reference `n` readable elements; `out` must be writable.
 */
enum GrlStatus grl_ego_velocity(const struct GrlRadarPoint *points,
                                uintptr_t n,
                                double threshold,
                                uintptr_t min_inliers,
                                uint64_t seed,
                                struct GrlEgoVelocity *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GARLILEO_H */
