#ifndef GUIDELAB_H
#define GUIDELAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GlStatus {
  GL_STATUS_OK = 0,
  GL_STATUS_NULL_POINTER = 1,
  GL_STATUS_INVALID_ARGUMENT = 2,
  GL_STATUS_DIMENSION_MISMATCH = 3,
  GL_STATUS_NUMERICAL = 4,
  GL_STATUS_INCONSISTENT_TRAJECTORY = 5,
  GL_STATUS_IO = 6,
  GL_STATUS_PANIC = 7,
} GlStatus;

typedef struct GlCalibration GlCalibration;

typedef struct GlMixture GlMixture;

typedef struct GlSchedule GlSchedule;

typedef struct GlTrajectory GlTrajectory;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread; empty when none. Valid until the next failure.
 */
const char *gl_last_error(void);

/*
 Linear beta schedule with `steps` steps from `beta_min` to `beta_max`.

 # Safety
 `out` must be a valid pointer to write a handle into.
 */
enum GlStatus gl_schedule_linear(size_t steps,
                                 double beta_min,
                                 double beta_max,
                                 struct GlSchedule **out);

/*
 # Safety
 `schedule` must be a live handle or null.
 */
size_t gl_schedule_steps(const struct GlSchedule *schedule);

/*
 `alpha_bar(t)` for `t` in `0..=steps`.

 # Safety
 `schedule` must be a live handle; `out` must be writable.
 */
enum GlStatus gl_schedule_alpha_bar(const struct GlSchedule *schedule, size_t t, double *out);

/*
 # Safety
 `schedule` must be a handle from this library or null; it must not be used afterwards.
 */
void gl_schedule_free(struct GlSchedule *schedule);

/*
 Mixture from its JSON description.

 # Safety
 `json` must be a NUL-terminated string; `out` must be writable.
 */
enum GlStatus gl_mixture_from_json(const char *json, struct GlMixture **out);

/*
 The built-in toy mixture in `dim` dimensions.

 # Safety
 `out` must be writable.
 */
enum GlStatus gl_mixture_toy(size_t dim, struct GlMixture **out);

/*
 # Safety
 `mixture` must be a live handle or null.
 */
size_t gl_mixture_dim(const struct GlMixture *mixture);

/*
 # Safety
 `mixture` must be a handle from this library or null; it must not be used afterwards.
 */
void gl_mixture_free(struct GlMixture *mixture);

/*
 Runs one guided sampler.

 `spec_json` is a guidance spec such as `{"omega": 5.5, "method": "zigzag"}`.
 The final sample is written to `out_x` (length `dim`); the trajectory
 handle is written to `out_trajectory` unless it is null.

 # Safety
 Handles must be live, `tokens` must hold `n_tokens` ids, `out_x` must hold `dim` doubles.
 */
enum GlStatus gl_sample(const struct GlMixture *mixture,
                        const struct GlSchedule *schedule,
                        const char *spec_json,
                        const int64_t *tokens,
                        size_t n_tokens,
                        uint64_t seed,
                        double *out_x,
                        size_t dim,
                        struct GlTrajectory **out_trajectory);

/*
 Number of committed steps.

 # Safety
 `trajectory` must be a live handle or null.
 */
size_t gl_trajectory_len(const struct GlTrajectory *trajectory);

/*
 Step `index` (0 is `t = T`): its timestep and both latents.

 # Safety
 `trajectory` must be live; `x_t` and `x_prev` must hold `dim` doubles (either may be null).
 */
enum GlStatus gl_trajectory_step(const struct GlTrajectory *trajectory,
                                 size_t index,
                                 size_t *out_t,
                                 double *x_t,
                                 double *x_prev,
                                 size_t dim);

/*
 # Safety
 `trajectory` must be a handle from this library or null; it must not be used afterwards.
 */
void gl_trajectory_free(struct GlTrajectory *trajectory);

/*
 Calibrates a trajectory against the mixture's predictor under the given condition.

 # Safety
 Handles must be live, `tokens` must hold `n_tokens` ids, `out` must be writable.
 */
enum GlStatus gl_calibrate(const struct GlTrajectory *trajectory,
                           const struct GlMixture *mixture,
                           const struct GlSchedule *schedule,
                           const int64_t *tokens,
                           size_t n_tokens,
                           struct GlCalibration **out);

/*
 Mean effective guidance scale over the calibrated steps.

 # Safety
 `calibration` must be live; `out` must be writable.
 */
enum GlStatus gl_calibration_omega_e_mean(const struct GlCalibration *calibration, double *out);

/*
 Number of calibrated (not skipped) steps.

 # Safety
 `calibration` must be a live handle or null.
 */
size_t gl_calibration_len(const struct GlCalibration *calibration);

/*
 Per-step scale: timestep and `omega_e_t` of calibrated step `index`.

 # Safety
 `calibration` must be live; outputs may be null.
 */
enum GlStatus gl_calibration_step(const struct GlCalibration *calibration,
                                  size_t index,
                                  size_t *out_t,
                                  double *out_omega_e);

/*
 # Safety
 `calibration` must be a handle from this library or null; it must not be used afterwards.
 */
void gl_calibration_free(struct GlCalibration *calibration);

/*
 Scale of one step: `|proj(eps_star - eps_u)| / |eps_c - eps_u|` and the signed coefficient.

 # Safety
 Input buffers must hold `dim` doubles; outputs may be null.
 */
enum GlStatus gl_decompose_step(const double *eps_star,
                                const double *eps_u,
                                const double *eps_c,
                                size_t dim,
                                double *out_omega_e,
                                double *out_coefficient);

/*
 The noise a DDIM step from `t` would need to move `x_t` onto `x_prev`.

 # Safety
 `schedule` must be live; all buffers must hold `dim` doubles.
 */
enum GlStatus gl_recover_noise(const struct GlSchedule *schedule,
                               size_t t,
                               const double *x_t,
                               const double *x_prev,
                               size_t dim,
                               double *out_eps);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GUIDELAB_H */
