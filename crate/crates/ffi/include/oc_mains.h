#ifndef OC_MAINS_H
#define OC_MAINS_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result of every call.
typedef enum OcMainsStatus {
  OC_MAINS_STATUS_OK = 0,
  OC_MAINS_STATUS_NULL_POINTER = 1,
  OC_MAINS_STATUS_INVALID_ARGUMENT = 2,
  OC_MAINS_STATUS_DIMENSION_MISMATCH = 3,
  OC_MAINS_STATUS_NUMERICAL = 4,
  OC_MAINS_STATUS_PANIC = 5,
} OcMainsStatus;

// Opaque filter handle.
typedef struct OcMainsFilter OcMainsFilter;

// Filter tuning and array layout. Fill with [`oc_mains_config_default`]
// before changing individual fields.
typedef struct OcMainsConfig {
  // Sampling period (s).
  double ts;
  // Gravity in the navigation frame (m/s²).
  double gravity[3];
  // m/s²/√Hz
  double accel_noise;
  // rad/s/√Hz
  double gyro_noise;
  double theta_noise;
  double accel_bias_walk;
  double gyro_bias_walk;
  // µT
  double mag_noise;
  double init_position_std;
  double init_velocity_std;
  double init_roll_pitch_std;
  double init_yaw_std;
  double init_theta_std;
  double init_accel_bias_std;
  double init_gyro_bias_std;
  bool estimate_biases;
  // 0: factored coefficient constraint, 1: direct.
  uint32_t theta_constraint;
  // Field model order.
  uint32_t order;
  // Planar sensor grid.
  uint32_t grid_rows;
  uint32_t grid_cols;
  // m
  double grid_pitch;
} OcMainsConfig;

// Navigation state. `q` is scalar-first, body to navigation.
typedef struct OcMainsState {
  double t;
  double p[3];
  double v[3];
  double q[4];
  double accel_bias[3];
  double gyro_bias[3];
  // Perceived yaw standard deviation (rad).
  double yaw_std;
} OcMainsState;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Writes the default configuration to `out`.
//
// # Safety
// `out` must be null or valid for writes.
enum OcMainsStatus oc_mains_config_default(struct OcMainsConfig *out);

// Creates a filter at `initial`, with field coefficients fitted to the
// array reading `mag` (`mag_len` = 3 × sensors).
//
// # Safety
// `config` and `initial` must be valid for reads, `mag` for `mag_len`
// reads and `out` for writes.
enum OcMainsStatus oc_mains_filter_new(const struct OcMainsConfig *config,
                                       const struct OcMainsState *initial,
                                       const double *mag,
                                       size_t mag_len,
                                       bool constrained,
                                       struct OcMainsFilter **out);

// One filter iteration: update with `mag` (may be null to skip), then
// propagate with the IMU sample. The posterior at `t` is written to
// `posterior` when it is non-null.
//
// # Safety
// `filter` must come from [`oc_mains_filter_new`]; `accel` and `gyro` must
// hold 3 values, `mag` `mag_len` values, `posterior` must be null or valid
// for writes.
enum OcMainsStatus oc_mains_filter_step(struct OcMainsFilter *filter,
                                        double t,
                                        const double *accel,
                                        const double *gyro,
                                        const double *mag,
                                        size_t mag_len,
                                        struct OcMainsState *posterior);

// Current (propagated) state.
//
// # Safety
// `filter` must come from [`oc_mains_filter_new`], `out` must be valid for writes.
enum OcMainsStatus oc_mains_filter_get_state(const struct OcMainsFilter *filter,
                                             struct OcMainsState *out);

// Error-state dimension `n`.
//
// # Safety
// `filter` must come from [`oc_mains_filter_new`], `out` must be valid for writes.
enum OcMainsStatus oc_mains_filter_dim(const struct OcMainsFilter *filter, size_t *out);

// Copies the `n × n` error covariance, row-major, into `buf` (`len` ≥ n²).
//
// # Safety
// `filter` must come from [`oc_mains_filter_new`], `buf` valid for `len` writes.
enum OcMainsStatus oc_mains_filter_covariance(const struct OcMainsFilter *filter,
                                              double *buf,
                                              size_t len);

// Releases a filter. Null is ignored.
//
// # Safety
// `filter` must be null or come from [`oc_mains_filter_new`], and not be
// used afterwards.
void oc_mains_filter_free(struct OcMainsFilter *filter);

// Closest 3×3 matrix to `f` (Frobenius norm) with `out · u = w`.
//
// # Safety
// `f` and `out` must hold 9 values, `u` and `w` 3.
enum OcMainsStatus oc_mains_project_row(const double *f,
                                        const double *u,
                                        const double *w,
                                        double *out);

// Rotation closest to `r` (geodesic distance) with `out · u = w`;
// requires `|u| = |w|`.
//
// # Safety
// `r` and `out` must hold 9 values, `u` and `w` 3.
enum OcMainsStatus oc_mains_project_rotation(const double *r,
                                             const double *u,
                                             const double *w,
                                             double *out);

// Message of the last failed call on this thread; empty if none. The
// pointer stays valid until the next failing call on the same thread.
const char *oc_mains_last_error(void);

// Library version, NUL terminated.
const char *oc_mains_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OC_MAINS_H */
