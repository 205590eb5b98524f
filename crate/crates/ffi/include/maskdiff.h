#ifndef MASKDIFF_H
#define MASKDIFF_H

/* Generated from the maskdiff-ffi crate by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every `mdf_` call.
 */
typedef enum MdfStatus {
  MDF_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  MDF_STATUS_NULL_ARGUMENT = 1,
  /**
   * A value argument was out of range or otherwise malformed.
   */
  MDF_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Buffer lengths or array shapes disagree.
   */
  MDF_STATUS_SHAPE_MISMATCH = 3,
  /**
   * A pipeline stage cannot run in the current run-directory state
   * (missing prerequisite, lock held, stale inputs under strict mode).
   */
  MDF_STATUS_PIPELINE_STATE = 4,
  /**
   * The operation itself failed; see mdf_last_error_message.
   */
  MDF_STATUS_RUNTIME_ERROR = 5,
  /**
   * An internal panic was caught at the boundary.
   */
  MDF_STATUS_PANIC = 6,
} MdfStatus;

/**
 * Noise schedule handle; contents are not visible to C.
 */
typedef struct MdfSchedule MdfSchedule;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Explanation of the most recent failure on this thread, empty after a
 * success. The pointer is invalidated by the thread's next `mdf_` call.
 */
const char *mdf_last_error_message(void);

/**
 * Static name for a status code ("ok", "null_argument", ...).
 */
const char *mdf_status_name(enum MdfStatus status);

/**
 * Creates a linear-beta schedule with `steps` steps over
 * [`beta_start`, `beta_end`] and stores the handle in `*out`.
 *
 * # Safety
 * `out` must point to writable storage for one pointer.
 */
enum MdfStatus mdf_schedule_new(size_t steps,
                                double beta_start,
                                double beta_end,
                                struct MdfSchedule **out);

/**
 * Releases a schedule handle. Passing null is a no-op.
 *
 * # Safety
 * `schedule` must be a handle from [`mdf_schedule_new`] not yet freed.
 */
void mdf_schedule_free(struct MdfSchedule *schedule);

/**
 * Step count of the schedule.
 *
 * # Safety
 * `schedule` must be a live handle; `out` must be writable.
 */
enum MdfStatus mdf_schedule_steps(const struct MdfSchedule *schedule, size_t *out);

/**
 * Variance increment at 1-based step `t`.
 *
 * # Safety
 * `schedule` must be a live handle; `out` must be writable.
 */
enum MdfStatus mdf_schedule_beta(const struct MdfSchedule *schedule, size_t t, double *out);

/**
 * Signal retention `1 - beta` at step `t`.
 *
 * # Safety
 * `schedule` must be a live handle; `out` must be writable.
 */
enum MdfStatus mdf_schedule_alpha(const struct MdfSchedule *schedule, size_t t, double *out);

/**
 * Cumulative signal retention up to step `t`.
 *
 * # Safety
 * `schedule` must be a live handle; `out` must be writable.
 */
enum MdfStatus mdf_schedule_alpha_bar(const struct MdfSchedule *schedule, size_t t, double *out);

/**
 * Reverse-step noise scale at step `t` (zero at t = 1).
 *
 * # Safety
 * `schedule` must be a live handle; `out` must be writable.
 */
enum MdfStatus mdf_schedule_sigma(const struct MdfSchedule *schedule, size_t t, double *out);

/**
 * Diffuses `x0` to step `t`: `out = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
 * All three buffers hold `len` contiguous f32 values.
 *
 * # Safety
 * `x0`, `eps`, and `out` must each point to `len` readable (writable for
 * `out`) f32 values; `schedule` must be a live handle.
 */
enum MdfStatus mdf_schedule_q_sample(const struct MdfSchedule *schedule,
                                     const float *x0,
                                     const float *eps,
                                     float *out,
                                     size_t len,
                                     size_t t);

/**
 * One reverse denoising step from `x_t` to `x_{t-1}` given the predicted
 * noise and a unit Gaussian draw `z`. `z` may be null for a deterministic
 * step (and is ignored at t = 1 regardless).
 *
 * # Safety
 * `x_t`, `eps_hat`, `out`, and (when non-null) `z` must each point to `len`
 * f32 values, `out` writable; `schedule` must be a live handle.
 */
enum MdfStatus mdf_schedule_reverse_step(const struct MdfSchedule *schedule,
                                         const float *x_t,
                                         const float *eps_hat,
                                         const float *z,
                                         float *out,
                                         size_t len,
                                         size_t t);

/**
 * Per-pixel mean absolute channel difference between two reconstructions.
 * Inputs are channels x height x width, row-major; `out` receives
 * height x width values.
 *
 * # Safety
 * `mu_mixture` and `mu_normal` must each point to
 * `channels * height * width` f32 values and `out` to `height * width`
 * writable f32 values.
 */
enum MdfStatus mdf_inter_discrepancy(const float *mu_mixture,
                                     const float *mu_normal,
                                     size_t channels,
                                     size_t height,
                                     size_t width,
                                     float *out);

/**
 * Per-pixel RMS spread of ensemble members around their mean. `members`
 * holds `n_members` stacked channels x height x width blocks; `out`
 * receives height x width values.
 *
 * # Safety
 * `members` must point to `n_members * channels * height * width` f32
 * values, `mu` to `channels * height * width`, and `out` to
 * `height * width` writable f32 values.
 */
enum MdfStatus mdf_intra_discrepancy(const float *members,
                                     size_t n_members,
                                     const float *mu,
                                     size_t channels,
                                     size_t height,
                                     size_t width,
                                     float *out);

/**
 * Dice overlap of two flattened binary masks (values 0 or 1); both empty
 * scores 1.
 *
 * # Safety
 * `pred` and `gt` must each point to `len` bytes; `out` must be writable.
 */
enum MdfStatus mdf_dice(const uint8_t *pred, const uint8_t *gt, size_t len, double *out);

/**
 * Mean IoU over the lesion and background classes of two flattened binary
 * masks; an absent class scores 1 for that class.
 *
 * # Safety
 * `pred` and `gt` must each point to `len` bytes; `out` must be writable.
 */
enum MdfStatus mdf_miou(const uint8_t *pred, const uint8_t *gt, size_t len, double *out);

/**
 * Fraction of agreeing pixels between two flattened binary masks.
 *
 * # Safety
 * `pred` and `gt` must each point to `len` bytes; `out` must be writable.
 */
enum MdfStatus mdf_pixel_accuracy(const uint8_t *pred, const uint8_t *gt, size_t len, double *out);

/**
 * Probability that a random abnormal score exceeds a random normal score
 * (ties count half), the area under the ROC curve.
 *
 * # Safety
 * `normal` must point to `n_normal` f64 values, `abnormal` to `n_abnormal`,
 * and `out` must be writable.
 */
enum MdfStatus mdf_auroc(const double *normal,
                         size_t n_normal,
                         const double *abnormal,
                         size_t n_abnormal,
                         double *out);

/**
 * Runs one pipeline stage against the run directory named by the config at
 * `config_path` (TOML). `stage` is one of "synth", "train-ae:mixture",
 * "train-ae:normal_only", "features", "train-diff", "sample", "eval".
 * `strict` promotes stale-input warnings to failures.
 *
 * # Safety
 * `config_path` and `stage` must be valid NUL-terminated strings.
 */
enum MdfStatus mdf_run_stage(const char *config_path, const char *stage, bool strict);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MASKDIFF_H */
