#ifndef DEEPVOTE_H
#define DEEPVOTE_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DvStatus {
  DV_STATUS_OK = 0,
  DV_STATUS_NULL_ARGUMENT = 1,
  DV_STATUS_CONFIG = 2,
  DV_STATUS_INPUT = 3,
  DV_STATUS_DATA = 4,
  DV_STATUS_FORMAT = 5,
  DV_STATUS_IO = 6,
  DV_STATUS_PANIC = 7,
} DvStatus;

/**
 * A `W x H x D` feature grid.
 */
typedef struct DvFeatures DvFeatures;

/**
 * A loaded checkpoint.
 */
typedef struct DvModel DvModel;

typedef struct DvDetection {
  uint32_t part_id;
  /**
   * Box in input pixels, top-left corner plus size.
   */
  float x;
  float y;
  float w;
  float h;
  float score;
  /**
   * Peak cell on the scale-normalized grid.
   */
  uint32_t peak_w;
  uint32_t peak_h;
} DvDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * Valid until the next call into this library on the same thread.
 */
const char *dv_last_error(void);

/**
 * Library version as a NUL-terminated static string.
 */
const char *dv_version(void);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum DvStatus dv_model_load(const char *path, struct DvModel **out);

/**
 * # Safety
 * `model` must come from [`dv_model_load`] and not be freed twice.
 */
void dv_model_free(struct DvModel *model);

/**
 * Number of semantic parts the model detects; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uint32_t dv_model_num_parts(const struct DvModel *model);

/**
 * Feature depth the model expects; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uint32_t dv_model_feature_dim(const struct DvModel *model);

/**
 * Whether the checkpoint carries a scale regressor.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
bool dv_model_has_scale(const struct DvModel *model);

/**
 * Reads a `.dvfm` feature file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum DvStatus dv_features_load(const char *path, struct DvFeatures **out);

/**
 * Parses an in-memory `.dvfm` image.
 *
 * # Safety
 * `bytes` must point to `len` readable bytes and `out` be writable.
 */
enum DvStatus dv_features_decode(const uint8_t *bytes, size_t len, struct DvFeatures **out);

/**
 * Copies a raw grid in `((h * width + w) * depth + d)` order.
 *
 * # Safety
 * `data` must point to `width * height * depth` floats and `out` be writable.
 */
enum DvStatus dv_features_from_raw(uint32_t width,
                                   uint32_t height,
                                   uint32_t depth,
                                   const float *data,
                                   struct DvFeatures **out);

/**
 * # Safety
 * `features` must be null or a live handle, and each out pointer null or writable.
 */
enum DvStatus dv_features_dims(const struct DvFeatures *features,
                               uint32_t *width,
                               uint32_t *height,
                               uint32_t *depth);

/**
 * # Safety
 * `features` must come from a `dv_features_*` constructor and not be freed twice.
 */
void dv_features_free(struct DvFeatures *features);

/**
 * Detects parts on one feature grid.
 *
 * `scale_ratio > 0` fixes the object scale; otherwise the checkpoint's
 * regressor predicts it. Detections are written best-first up to
 * `capacity`; `out_count` receives the total found, which may exceed
 * `capacity`. `out` may be null when `capacity` is 0.
 *
 * # Safety
 * Handles must be live, `out` must hold `capacity` elements and
 * `out_count` must be writable.
 */
enum DvStatus dv_detect(const struct DvModel *model,
                        const struct DvFeatures *features,
                        float tau,
                        float nms_iou,
                        float scale_ratio,
                        struct DvDetection *out,
                        size_t capacity,
                        size_t *out_count);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DEEPVOTE_H */
