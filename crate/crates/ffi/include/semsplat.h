#ifndef SEMSPLAT_H
#define SEMSPLAT_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum SemsplatStatus {
  SEMSPLAT_STATUS_OK = 0,
  SEMSPLAT_STATUS_NULL_POINTER = 1,
  SEMSPLAT_STATUS_INVALID_ARGUMENT = 2,
  SEMSPLAT_STATUS_IO = 3,
  SEMSPLAT_STATUS_FORMAT = 4,
  SEMSPLAT_STATUS_CONFIG = 5,
  SEMSPLAT_STATUS_DIMENSION = 6,
  SEMSPLAT_STATUS_NUMERIC = 7,
  SEMSPLAT_STATUS_TRACKING = 8,
  SEMSPLAT_STATUS_BUFFER_TOO_SMALL = 9,
  SEMSPLAT_STATUS_PANIC = 10,
} SemsplatStatus;

// Pipeline configuration handle.
typedef struct SemsplatConfig SemsplatConfig;

// Gaussian map handle.
typedef struct SemsplatMap SemsplatMap;

// Rendered images handle.
typedef struct SemsplatRender SemsplatRender;

// Finished run handle.
typedef struct SemsplatReport SemsplatReport;

// Pinhole camera; `width`/`height` in pixels.
typedef struct SemsplatIntrinsics {
  double fx;
  double fy;
  double cx;
  double cy;
  uint32_t width;
  uint32_t height;
} SemsplatIntrinsics;

// Summary numbers of a finished run. Metrics that could not be computed
// (no ground truth) are NaN.
typedef struct SemsplatMetrics {
  double ate_rmse_cm;
  double mean_keyframe_psnr;
  double mean_keyframe_ssim;
  double accuracy;
  double miou;
  uint64_t num_frames;
  uint64_t num_keyframes;
  uint64_t num_gaussians;
  double runtime_seconds;
} SemsplatMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. The pointer
// stays valid until the next call into this library on the same thread.
const char *semsplat_last_error(void);

// Library version as a static NUL-terminated string.
const char *semsplat_version(void);

// Empty map whose Gaussians carry `feature_dim` feature channels.
struct SemsplatMap *semsplat_map_new(uint32_t feature_dim);

enum SemsplatStatus semsplat_map_load(const char *path, struct SemsplatMap **out);

enum SemsplatStatus semsplat_map_save(const struct SemsplatMap *map, const char *path);

// Number of Gaussians; 0 for a NULL handle.
uint64_t semsplat_map_len(const struct SemsplatMap *map);

uint32_t semsplat_map_feature_dim(const struct SemsplatMap *map);

void semsplat_map_free(struct SemsplatMap *map);

// Renders `map` from `pose` (16 doubles). With `features` nonzero the
// feature image is rendered too.
enum SemsplatStatus semsplat_render(const struct SemsplatMap *map,
                                    const double *pose,
                                    const struct SemsplatIntrinsics *intrinsics,
                                    bool features,
                                    struct SemsplatRender **out);

uint32_t semsplat_render_width(const struct SemsplatRender *r);

uint32_t semsplat_render_height(const struct SemsplatRender *r);

// Feature channels per pixel; 0 when features were not rendered.
uint32_t semsplat_render_feature_dim(const struct SemsplatRender *r);

// Copies the interleaved RGB image (`3·w·h` doubles, row-major).
enum SemsplatStatus semsplat_render_color(const struct SemsplatRender *r,
                                          double *buf,
                                          uintptr_t len);

// Copies the depth image in meters (`w·h` doubles).
enum SemsplatStatus semsplat_render_depth(const struct SemsplatRender *r,
                                          double *buf,
                                          uintptr_t len);

// Copies accumulated opacity (`w·h` doubles).
enum SemsplatStatus semsplat_render_alpha(const struct SemsplatRender *r,
                                          double *buf,
                                          uintptr_t len);

// Copies the interleaved feature image (`N·w·h` doubles).
enum SemsplatStatus semsplat_render_features(const struct SemsplatRender *r,
                                             double *buf,
                                             uintptr_t len);

void semsplat_render_free(struct SemsplatRender *r);

struct SemsplatConfig *semsplat_config_default(void);

// Parses a TOML configuration; omitted keys take their defaults.
enum SemsplatStatus semsplat_config_from_toml(const char *text, struct SemsplatConfig **out);

// Where the run writes its exports; NULL disables writing.
enum SemsplatStatus semsplat_config_set_output_dir(struct SemsplatConfig *cfg, const char *dir);

void semsplat_config_free(struct SemsplatConfig *cfg);

// Runs tracking and mapping over the configured sequence.
enum SemsplatStatus semsplat_run(const struct SemsplatConfig *cfg, struct SemsplatReport **out);

enum SemsplatStatus semsplat_report_metrics(const struct SemsplatReport *report,
                                            struct SemsplatMetrics *out);

// Number of tracked frames; 0 for a NULL handle.
uint64_t semsplat_report_num_poses(const struct SemsplatReport *report);

// Estimated pose of frame `index` into `out` (16 doubles).
enum SemsplatStatus semsplat_report_pose(const struct SemsplatReport *report,
                                         uint64_t index,
                                         double *out);

// Copies the final map into a new handle owned by the caller.
enum SemsplatStatus semsplat_report_map(const struct SemsplatReport *report,
                                        struct SemsplatMap **out);

void semsplat_report_free(struct SemsplatReport *report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEMSPLAT_H */
