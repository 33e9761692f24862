/* C interface to the pano-depth equirectangular depth toolkit. */

#ifndef PANO_DEPTH_H
#define PANO_DEPTH_H

/* Generated by cbindgen from pano-depth-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Wall texture selector for [`pd_scene_new`].
 */
typedef enum PdTexture {
  PD_TEXTURE_SMOOTH_NOISE = 0,
  PD_TEXTURE_CHECKERBOARD = 1,
  PD_TEXTURE_UNIFORM = 2,
} PdTexture;

/**
 * Status code returned by every fallible entry point.
 */
typedef enum PdStatus {
  PD_STATUS_OK = 0,
  PD_STATUS_ERR_NULL_POINTER = 1,
  PD_STATUS_ERR_INVALID_INPUT = 2,
  PD_STATUS_ERR_IO = 3,
  PD_STATUS_ERR_NUMERICAL = 4,
  PD_STATUS_ERR_PANIC = 5,
} PdStatus;

/**
 * Loss schedule selector.
 */
typedef enum PdFlow {
  PD_FLOW_SELF_ONLY = 0,
  PD_FLOW_SUPERVISED_ONLY = 1,
  PD_FLOW_JOINT_RANDOM = 2,
} PdFlow;

/**
 * Opaque non-local block weights.
 */
typedef struct PdNlfb PdNlfb;

/**
 * Opaque textured box-room description.
 */
typedef struct PdScene PdScene;

/**
 * Depth error statistics (see the library's evaluation protocol).
 */
typedef struct PdMetricsReport {
  double abs_rel;
  double sq_rel;
  double rms;
  double rms_log;
  double delta1;
  double delta2;
  double delta3;
} PdMetricsReport;

/**
 * Optimization settings; fill with [`pd_optim_config_default`] first.
 */
typedef struct PdOptimConfig {
  uint32_t iterations;
  double learning_rate;
  double beta1;
  double beta2;
  double lambda_i;
  double lambda_d;
  double alpha;
  double crop_degrees;
  enum PdFlow flow;
  uint64_t seed;
  uint32_t pyramid_levels;
} PdOptimConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Version of the underlying library, as a static nul-terminated string.
 */
const char *pd_version(void);

/**
 * Message of the calling thread's most recent error. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *pd_last_error_message(void);

/**
 * Create a box room with half-extents in meters. `checker_period` is only
 * read for the checkerboard texture. Returns null on invalid parameters.
 */
struct PdScene *pd_scene_new(double half_x,
                             double half_y,
                             double half_z,
                             enum PdTexture texture,
                             double checker_period,
                             uint64_t seed);

/**
 * Release a scene handle. A null pointer is ignored.
 *
 * # Safety
 * `scene` must have come from [`pd_scene_new`] and not be freed twice.
 */
void pd_scene_free(struct PdScene *scene);

/**
 * Render the room from a camera position. `rgb_out` receives `3·H·2H`
 * values in `[0,1]`; `depth_out` receives `H·2H` radial distances.
 *
 * # Safety
 * `scene` must be a live handle; the output buffers must hold at least the
 * stated number of `f64`s.
 */
enum PdStatus pd_scene_render(const struct PdScene *scene,
                              double pos_x,
                              double pos_y,
                              double pos_z,
                              uint32_t height,
                              double *rgb_out,
                              double *depth_out);

/**
 * Carry one spherical point (θ, φ, ρ) through a gravity-aligned motion.
 *
 * # Safety
 * The three output pointers must be valid.
 */
enum PdStatus pd_reproject_point(double theta,
                                 double phi,
                                 double rho,
                                 double dv_x,
                                 double dv_y,
                                 double dv_z,
                                 double dr_x,
                                 double *theta_out,
                                 double *phi_out,
                                 double *rho_out);

/**
 * Synthesize the frame at the viewpoint reached by the motion.
 * `weights_out` (optional, `H·2H`) receives the splat coverage weights;
 * pixels below the coverage threshold come back zero in `rgb_out`.
 *
 * # Safety
 * Buffers must match the documented lengths for `height`.
 */
enum PdStatus pd_synthesize_image(const double *rgb,
                                  const double *depth,
                                  uint32_t height,
                                  double dv_x,
                                  double dv_y,
                                  double dv_z,
                                  double dr_x,
                                  double *rgb_out,
                                  double *weights_out);

/**
 * Synthesize the depth map at the viewpoint reached by the motion;
 * uncovered pixels come back as zero holes.
 *
 * # Safety
 * Buffers must match the documented lengths for `height`.
 */
enum PdStatus pd_synthesize_depth(const double *depth,
                                  uint32_t height,
                                  double dv_x,
                                  double dv_y,
                                  double dv_z,
                                  double dr_x,
                                  double *depth_out,
                                  double *weights_out);

/**
 * Least-squares scale/shift aligning `pred` to `gt` over pixels where
 * `gt > 0`.
 *
 * # Safety
 * `pred` and `gt` must hold `H·2H` values; the two outputs must be valid.
 */
enum PdStatus pd_align_scale_shift(const double *pred,
                                   const double *gt,
                                   uint32_t height,
                                   double *s_out,
                                   double *t_out);

/**
 * Error statistics of an already-aligned prediction over the pixels where
 * `valid` is nonzero (`valid` may be null for all-valid).
 *
 * # Safety
 * `pred`/`gt` must hold `H·2H` values; `valid`, when non-null, as many
 * bytes; `report_out` must be valid.
 */
enum PdStatus pd_compute_metrics(const double *pred,
                                 const double *gt,
                                 const uint8_t *valid,
                                 uint32_t height,
                                 struct PdMetricsReport *report);

/**
 * The full evaluation protocol: scale-shift alignment, 45° polar crop,
 * then metrics. Zeros in `gt` are treated as holes.
 *
 * # Safety
 * `pred`/`gt` must hold `H·2H` values; `report_out` must be valid.
 */
enum PdStatus pd_eval_protocol(const double *pred,
                               const double *gt,
                               uint32_t height,
                               struct PdMetricsReport *report);

/**
 * Fresh non-local block weights: random θ/φ/g projections, zero `W_z`
 * (identity behavior). `channels` must be even. Returns null on error.
 */
struct PdNlfb *pd_nlfb_new_seeded(uint32_t channels, uint64_t seed);

/**
 * Load block weights from the binary interchange format.
 *
 * # Safety
 * `path` must be a valid nul-terminated string.
 */
struct PdNlfb *pd_nlfb_load(const char *path);

/**
 * Save block weights to the binary interchange format.
 *
 * # Safety
 * `nlfb` must be a live handle; `path` must be nul-terminated.
 */
enum PdStatus pd_nlfb_save(const struct PdNlfb *nlfb, const char *path);

/**
 * Apply the residual non-local operator to a `C×H×W` feature map.
 *
 * # Safety
 * `features` and `out` must hold `channels·h·w` values each.
 */
enum PdStatus pd_nlfb_forward(const struct PdNlfb *nlfb,
                              const double *features,
                              uint32_t channels,
                              uint32_t h,
                              uint32_t w,
                              double *out);

/**
 * Release a weights handle. A null pointer is ignored.
 *
 * # Safety
 * `nlfb` must have come from a `pd_nlfb_*` constructor and not be freed
 * twice.
 */
void pd_nlfb_free(struct PdNlfb *nlfb);

/**
 * Fill an optimization config with the library defaults.
 *
 * # Safety
 * `config` must be valid.
 */
void pd_optim_config_default(struct PdOptimConfig *config);

/**
 * Recover per-pixel depth for the first frame plus the two directed
 * motions. `gt` (optional unless the flow is supervised/joint) holds
 * `H·2H` depths with zeros as holes. `motion_fwd_out`/`motion_bwd_out`
 * receive `[dv_x, dv_y, dv_z, dr_x]`; `final_loss_out` may be null.
 *
 * # Safety
 * Buffers must match the documented lengths for `height`.
 */
enum PdStatus pd_optimize_pair(const double *v,
                               const double *v_prime,
                               uint32_t height,
                               const double *gt,
                               const struct PdOptimConfig *config,
                               double *depth_out,
                               double *motion_fwd_out,
                               double *motion_bwd_out,
                               double *final_loss_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PANO_DEPTH_H */
