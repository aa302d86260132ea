#ifndef TUMORSEG_H
#define TUMORSEG_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TsStatus {
  TS_STATUS_OK = 0,
  TS_STATUS_NULL_POINTER = 1,
  TS_STATUS_INVALID_ARGUMENT = 2,
  TS_STATUS_SHAPE = 3,
  TS_STATUS_FORMAT = 4,
  TS_STATUS_DATA = 5,
  TS_STATUS_IO = 6,
  TS_STATUS_INTERNAL = 7,
  TS_STATUS_PANIC = 8,
} TsStatus;

/**
 * Label grid, axes (z, y, x).
 */
typedef struct TsMask TsMask;

/**
 * Trained segmentation network.
 */
typedef struct TsNetwork TsNetwork;

/**
 * Intensity grid, axes (z, y, x).
 */
typedef struct TsVolume TsVolume;

/**
 * Metrics for one case. Undefined values are NaN and flagged by `has_*`.
 */
typedef struct TsMetrics {
  double dc;
  double voe;
  double rvd;
  double assd_mm;
  double msd_mm;
  double rmsd_mm;
  bool has_rvd;
  bool has_surface;
} TsMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call on the same thread.
 */
const char *ts_last_error_message(void);

/**
 * Library version as a static string.
 */
const char *ts_version(void);

/**
 * # Safety
 * `dims` and `spacing` point to 3 values, `values` to `len` floats.
 */
enum TsStatus ts_volume_new(const size_t *dims,
                            const double *spacing,
                            const float *values,
                            size_t len,
                            struct TsVolume **out);

/**
 * # Safety
 * `path` is a nul-terminated string; `out` is writable.
 */
enum TsStatus ts_volume_read_raw(const char *path, struct TsVolume **out);

/**
 * Reads a `.nii` or `.nii.gz` image. `labels_out` may be null; otherwise it
 * receives a mask handle when the image holds labels, or null.
 *
 * # Safety
 * `path` is a nul-terminated string; `out` is writable.
 */
enum TsStatus ts_volume_read_nifti(const char *path,
                                   struct TsVolume **out,
                                   struct TsMask **labels_out);

/**
 * # Safety
 * `volume` is a live handle; `dims` and `spacing` hold 3 values each.
 */
enum TsStatus ts_volume_geometry(const struct TsVolume *volume, size_t *dims, double *spacing);

/**
 * # Safety
 * `volume` is a live handle; `buffer` holds `len` floats.
 */
enum TsStatus ts_volume_copy_values(const struct TsVolume *volume, float *buffer, size_t len);

/**
 * # Safety
 * `volume` is null or a handle from this library, freed at most once.
 */
void ts_volume_free(struct TsVolume *volume);

/**
 * Clamps to `[lo, hi]` and rescales to `[0, 1]`.
 *
 * # Safety
 * `volume` is a live handle; `out` is writable.
 */
enum TsStatus ts_window_transform(const struct TsVolume *volume,
                                  float lo,
                                  float hi,
                                  struct TsVolume **out);

/**
 * # Safety
 * `dims` and `spacing` point to 3 values, `labels` to `len` bytes.
 */
enum TsStatus ts_mask_new(const size_t *dims,
                          const double *spacing,
                          const uint8_t *labels,
                          size_t len,
                          struct TsMask **out);

/**
 * # Safety
 * `path` is a nul-terminated string; `out` is writable.
 */
enum TsStatus ts_mask_read_raw(const char *path, struct TsMask **out);

/**
 * # Safety
 * `mask` is a live handle; `dims` and `spacing` hold 3 values each.
 */
enum TsStatus ts_mask_geometry(const struct TsMask *mask, size_t *dims, double *spacing);

/**
 * # Safety
 * `mask` is a live handle; `buffer` holds `len` bytes.
 */
enum TsStatus ts_mask_copy_labels(const struct TsMask *mask, uint8_t *buffer, size_t len);

/**
 * Binary mask of voxels equal to `label`.
 *
 * # Safety
 * `mask` is a live handle; `out` is writable.
 */
enum TsStatus ts_mask_binarize(const struct TsMask *mask, uint8_t label, struct TsMask **out);

/**
 * # Safety
 * `mask` is null or a handle from this library, freed at most once.
 */
void ts_mask_free(struct TsMask *mask);

/**
 * Synthetic case with the default phantom settings.
 *
 * # Safety
 * `volume_out` and `mask_out` are writable.
 */
enum TsStatus ts_phantom_generate(uint64_t seed,
                                  struct TsVolume **volume_out,
                                  struct TsMask **mask_out);

/**
 * # Safety
 * `path` is a nul-terminated string; `out` is writable.
 */
enum TsStatus ts_network_load(const char *path, struct TsNetwork **out);

/**
 * # Safety
 * `network` is a live handle; `count` is writable.
 */
enum TsStatus ts_network_param_count(const struct TsNetwork *network, size_t *count);

/**
 * Binary mask from sliding depth windows of `depth` slices every `stride`.
 *
 * # Safety
 * `network` and `volume` are live handles; `out` is writable.
 */
enum TsStatus ts_network_predict(const struct TsNetwork *network,
                                 const struct TsVolume *volume,
                                 size_t depth,
                                 size_t stride,
                                 float threshold,
                                 struct TsMask **out);

/**
 * # Safety
 * `network` is null or a handle from this library, freed at most once.
 */
void ts_network_free(struct TsNetwork *network);

/**
 * Metrics of binary `pred` against binary `gt`.
 *
 * # Safety
 * `pred` and `gt` are live handles; `out` is writable.
 */
enum TsStatus ts_metrics_evaluate(const struct TsMask *pred,
                                  const struct TsMask *gt,
                                  struct TsMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TUMORSEG_H */
