#ifndef DGE_H
#define DGE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DgeStatus {
  DGE_STATUS_OK = 0,
  DGE_STATUS_NULL_POINTER = 1,
  DGE_STATUS_INVALID_ARGUMENT = 2,
  DGE_STATUS_IO = 3,
  DGE_STATUS_CHECKPOINT = 4,
  DGE_STATUS_NUMERIC = 5,
  DGE_STATUS_CONFIG = 6,
  DGE_STATUS_BUFFER_TOO_SMALL = 7,
  DGE_STATUS_PANIC = 8,
  DGE_STATUS_INTERNAL = 9,
} DgeStatus;

/**
 * Loaded classifier; opaque to C.
 */
typedef struct DgeModel DgeModel;

/**
 * Compute summary of one routed inference.
 */
typedef struct DgeRouteSummary {
  /**
   * Realized compute ratio of the dynamic part.
   */
  double beta;
  double dynamic_flops;
  double static_flops;
  /**
   * Queries summed over all layers.
   */
  size_t queries;
} DgeRouteSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *dge_version(void);

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next dge call on the same thread.
 */
const char *dge_last_error_message(void);

/**
 * Loads a checkpoint manifest. Parameters stay in the precision they were
 * saved with.
 *
 * # Safety
 * `manifest_path` must be a NUL-terminated string and `out` a writable
 * pointer.
 */
enum DgeStatus dge_model_load(const char *manifest_path, struct DgeModel **out);

/**
 * # Safety
 * `model` must come from [`dge_model_load`] and not have been freed; null
 * is ignored.
 */
void dge_model_free(struct DgeModel *model);

/**
 * Number of pixels one image must have (channels × size × size); 0 for null.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t dge_model_input_len(const struct DgeModel *model);

/**
 * Number of logits per image; 0 for null.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t dge_model_num_classes(const struct DgeModel *model);

/**
 * Routed inference on one channel-major image.
 *
 * Writes `num_classes` logits into `logits_out`. `report_out` may be null.
 *
 * # Safety
 * `pixels` must hold `pixels_len` values and `logits_out` room for
 * `logits_len` values.
 */
enum DgeStatus dge_model_classify(const struct DgeModel *model,
                                  const double *pixels,
                                  size_t pixels_len,
                                  double *logits_out,
                                  size_t logits_len,
                                  struct DgeRouteSummary *report_out);

/**
 * Per-layer routing decisions and the FLOPs report as a JSON string.
 * Release it with [`dge_string_free`].
 *
 * # Safety
 * As [`dge_model_classify`]; `json_out` must be writable.
 */
enum DgeStatus dge_model_route_json(const struct DgeModel *model,
                                    const double *pixels,
                                    size_t pixels_len,
                                    char **json_out);

/**
 * # Safety
 * `s` must come from [`dge_model_route_json`] and not have been freed;
 * null is ignored.
 */
void dge_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DGE_H */
