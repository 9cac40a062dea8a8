#ifndef MESHCAP_H
#define MESHCAP_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible call.
 */
typedef enum MeshcapStatus {
  MESHCAP_STATUS_OK = 0,
  MESHCAP_STATUS_NULL_POINTER = 1,
  MESHCAP_STATUS_INVALID_UTF8 = 2,
  MESHCAP_STATUS_IO = 3,
  MESHCAP_STATUS_CORRUPT_CHECKPOINT = 4,
  MESHCAP_STATUS_INVALID_INPUT = 5,
  MESHCAP_STATUS_CONFIG = 6,
  MESHCAP_STATUS_METRIC = 7,
  MESHCAP_STATUS_INTERNAL = 8,
  MESHCAP_STATUS_PANIC = 9,
} MeshcapStatus;

/**
 * A loaded model and its vocabulary.
 */
typedef struct MeshcapModel MeshcapModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a checkpoint file. On success `*out` owns a new model.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MeshcapStatus meshcap_model_load(const char *path, struct MeshcapModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from `meshcap_model_load` and not be used afterwards.
 */
void meshcap_model_free(struct MeshcapModel *model);

/**
 * Image height, width and channel count the model expects.
 *
 * # Safety
 * All pointers must be valid.
 */
enum MeshcapStatus meshcap_model_image_shape(const struct MeshcapModel *model,
                                             size_t *height,
                                             size_t *width,
                                             size_t *channels);

/**
 * Greedy-decodes a caption for `pixels`, an `H×W×C` row-major array of
 * values in `[0, 1]` with `len` elements. `max_len` of 0 means the
 * model's caption length. The caption is written to `*out`.
 *
 * # Safety
 * `pixels` must point to `len` doubles; `out` must be valid.
 */
enum MeshcapStatus meshcap_caption(const struct MeshcapModel *model,
                                   const double *pixels,
                                   size_t len,
                                   size_t max_len,
                                   char **out);

/**
 * Unsmoothed sentence BLEU-`n` of `candidate` against `n_refs`
 * references.
 *
 * # Safety
 * `refs` must point to `n_refs` NUL-terminated strings; `out` must be
 * valid.
 */
enum MeshcapStatus meshcap_bleu(const char *candidate,
                                const char *const *refs,
                                size_t n_refs,
                                uint32_t n,
                                double *out);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void meshcap_string_free(char *s);

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call on the same thread.
 */
const char *meshcap_last_error(void);

/**
 * Library version as a static string.
 */
const char *meshcap_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MESHCAP_H */
