/* C interface to the lpci LiDAR diffusion toolkit. */

#ifndef LPCI_H
#define LPCI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Call outcome. Mirrors the CLI exit codes, plus a code for caught
 * panics so the boundary never unwinds into C.
 */
typedef enum LpciStatus {
  LPCI_OK = 0,
  LPCI_ERR = 2,
  LPCI_ERR_NUMERICAL = 3,
  LPCI_ERR_INTERNAL = 70,
} LpciStatus;

/**
 * Point cloud handle; points are (x, y, z, intensity).
 */
typedef struct LpciCloud LpciCloud;

/**
 * A trained denoiser plus the schedule and embedding it was trained
 * with, ready to generate images.
 */
typedef struct LpciSampler LpciSampler;

/**
 * Materialized noise schedule.
 */
typedef struct LpciSchedule LpciSchedule;

/**
 * Angular/range geometry of the equirect grid, plus the bird's-eye
 * footprint. Field meanings match the library's projection config.
 */
typedef struct LpciProjectionMeta {
  double d_max;
  double theta_min;
  double theta_max;
  double bev_extent;
  size_t height;
  size_t width;
} LpciProjectionMeta;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread; empty string when
 * nothing failed yet. The pointer stays valid until the next failure on
 * the same thread.
 */
const char *lpci_last_error(void);

/**
 * Build a schedule. `kind` is one of: constant, linear, quadratic,
 * cosine2, sigmoid, hyperbolic, time-dependent, ramp. Families that
 * ignore the beta endpoints still validate them; pass the defaults
 * 1e-4 and 0.02 when unsure. Returns NULL on error.
 */
struct LpciSchedule *lpci_schedule_new(const char *kind,
                                       size_t steps,
                                       double beta_start,
                                       double beta_end);

void lpci_schedule_free(struct LpciSchedule *s);

/**
 * Number of steps, or 0 for a NULL handle.
 */
size_t lpci_schedule_steps(const struct LpciSchedule *s);

/**
 * Copy the per-step tables into caller buffers of length `steps`.
 * Any output pointer may be NULL to skip that table.
 */
enum LpciStatus lpci_schedule_tables(const struct LpciSchedule *s,
                                     double *betas,
                                     double *alphas,
                                     double *alpha_bars);

/**
 * Wrap `n` packed (x, y, z, intensity) float32 records. Non-finite
 * coordinates are rejected. Returns NULL on error.
 */
struct LpciCloud *lpci_cloud_create(const float *xyzi, size_t n);

/**
 * Load a scan from disk: `.bin` packed records or `.lpci` N×4 tensor.
 */
struct LpciCloud *lpci_cloud_load(const char *path);

void lpci_cloud_free(struct LpciCloud *c);

/**
 * Point count, or 0 for a NULL handle.
 */
size_t lpci_cloud_len(const struct LpciCloud *c);

/**
 * Copy the points into a caller buffer of `4 * len` float32 values.
 */
enum LpciStatus lpci_cloud_points(const struct LpciCloud *c, float *out);

/**
 * The default 64×1024 sensor geometry.
 */
struct LpciProjectionMeta lpci_projection_default(void);

/**
 * Rasterize a cloud onto the equirect grid; writes height×width pixels
 * (range / d_max, 0 = no return) into the caller buffer.
 */
enum LpciStatus lpci_project_equirect(const struct LpciCloud *cloud,
                                      const struct LpciProjectionMeta *meta,
                                      float *out_pixels);

/**
 * Lift height×width equirect pixels back to a point cloud (one point per
 * nonzero pixel, on the pixel-center ray). Returns NULL on error.
 */
struct LpciCloud *lpci_backproject_equirect(const float *pixels,
                                            const struct LpciProjectionMeta *meta);

/**
 * Load a training checkpoint. Returns NULL on error.
 */
struct LpciSampler *lpci_sampler_load(const char *path);

void lpci_sampler_free(struct LpciSampler *s);

/**
 * Generate one height×width image in [0,1] into the caller buffer.
 * `steps` = 0 walks the full schedule; smaller values run the evenly
 * strided reduction. The same (seed, steps, shape) triple always
 * produces the same image.
 */
enum LpciStatus lpci_sampler_generate(struct LpciSampler *s,
                                      uint64_t seed,
                                      size_t steps,
                                      size_t height,
                                      size_t width,
                                      float *out_pixels);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LPCI_H */
