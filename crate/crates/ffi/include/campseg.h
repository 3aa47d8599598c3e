#ifndef CAMPSEG_H
#define CAMPSEG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum CampsegStatus {
  CAMPSEG_STATUS_OK = 0,
  CAMPSEG_STATUS_NULL_ARGUMENT = 1,
  CAMPSEG_STATUS_INVALID_UTF8 = 2,
  CAMPSEG_STATUS_IO = 3,
  CAMPSEG_STATUS_MALFORMED_FILE = 4,
  CAMPSEG_STATUS_UNSUPPORTED = 5,
  CAMPSEG_STATUS_INVALID_CONFIG = 6,
  CAMPSEG_STATUS_SHAPE_MISMATCH = 7,
  CAMPSEG_STATUS_NON_BINARY_INPUT = 8,
  CAMPSEG_STATUS_BUFFER_TOO_SMALL = 9,
  CAMPSEG_STATUS_PANIC = 10,
  CAMPSEG_STATUS_OTHER = 11,
} CampsegStatus;

/**
 * A trained segmentation model bound to its pipeline configuration.
 */
typedef struct CampsegModel CampsegModel;

/**
 * A raster with its georeference.
 */
typedef struct CampsegRaster CampsegRaster;

/**
 * Pixel confusion counts and derived scores; undefined scores are NaN.
 */
typedef struct CampsegMetrics {
  uint64_t tp;
  uint64_t fp;
  uint64_t fn_;
  uint64_t tn;
  double iou;
  double f1;
  double precision;
  double recall;
} CampsegMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *campseg_version(void);

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length excluding the NUL, or
 * 0 when there is no error.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t campseg_last_error(char *buf, size_t len);

/**
 * Reads a GeoTIFF (or plain TIFF with a world file).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CampsegStatus campseg_raster_read(const char *path, struct CampsegRaster **out);

/**
 * Wraps `width * height * bands` pixel-interleaved bytes with a north-up
 * georeference whose top-left corner is (`origin_x`, `origin_y`).
 *
 * # Safety
 * `data` must point to `len` readable bytes; `out` must be writable.
 */
enum CampsegStatus campseg_raster_from_u8(size_t width,
                                          size_t height,
                                          size_t bands,
                                          const uint8_t *data,
                                          size_t len,
                                          double origin_x,
                                          double origin_y,
                                          double pixel_size,
                                          struct CampsegRaster **out);

/**
 * Writes a raster as GeoTIFF.
 *
 * # Safety
 * `raster` must be a live handle; `path` a NUL-terminated string.
 */
enum CampsegStatus campseg_raster_write(const struct CampsegRaster *raster, const char *path);

/**
 * Writes width, height and band count; any output pointer may be null.
 *
 * # Safety
 * `raster` must be a live handle; non-null outputs must be writable.
 */
enum CampsegStatus campseg_raster_dims(const struct CampsegRaster *raster,
                                       size_t *width,
                                       size_t *height,
                                       size_t *bands);

/**
 * Copies 8-bit samples (pixel-interleaved) into `buf`.
 *
 * # Safety
 * `raster` must be a live handle; `buf` must point to `len` writable bytes.
 */
enum CampsegStatus campseg_raster_copy_u8(const struct CampsegRaster *raster,
                                          uint8_t *buf,
                                          size_t len);

/**
 * Releases a raster; null is ignored.
 *
 * # Safety
 * `raster` must be null or a handle not yet freed.
 */
void campseg_raster_free(struct CampsegRaster *raster);

/**
 * Loads a pipeline config and trained segmentation parameters.
 *
 * # Safety
 * `config_path` and `checkpoint_path` must be NUL-terminated; `out` writable.
 */
enum CampsegStatus campseg_model_load(const char *config_path,
                                      const char *checkpoint_path,
                                      struct CampsegModel **out);

/**
 * Segments a whole raster with sliding-window inference. The mask (0/255)
 * is georeferenced at the segmentation resolution.
 *
 * # Safety
 * `model` and `image` must be live handles; `out_mask` writable.
 */
enum CampsegStatus campseg_model_segment(const struct CampsegModel *model,
                                         const struct CampsegRaster *image,
                                         struct CampsegRaster **out_mask);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void campseg_model_free(struct CampsegModel *model);

/**
 * Pixel metrics of a predicted mask against a truth mask (both 0/255).
 *
 * # Safety
 * `pred` and `truth` must be live handles; `out` writable.
 */
enum CampsegStatus campseg_mask_metrics(const struct CampsegRaster *pred,
                                        const struct CampsegRaster *truth,
                                        struct CampsegMetrics *out);

/**
 * Traces a 0/255 mask into polygons and writes `<base>.shp/.shx/.dbf`
 * (plus `.prj` when the raster carries a CRS). `feature_count` may be null.
 *
 * # Safety
 * `mask` must be a live handle; `base_path` NUL-terminated.
 */
enum CampsegStatus campseg_mask_to_shapefile(const struct CampsegRaster *mask,
                                             const char *base_path,
                                             size_t *feature_count);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CAMPSEG_H */
