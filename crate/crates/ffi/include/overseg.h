#ifndef OVERSEG_H
#define OVERSEG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every API function.
 */
typedef enum OversegStatus {
  /**
   * success
   */
  OversegOk = 0,
  /**
   * a pointer argument was null
   */
  OversegNullArgument = 1,
  /**
   * a path or string argument was not valid UTF-8
   */
  OversegInvalidString = 2,
  /**
   * I/O or format failure; see overseg_last_error
   */
  OversegIoError = 3,
  /**
   * invalid input data or configuration; see overseg_last_error
   */
  OversegInvalidInput = 4,
  /**
   * internal processing failure; see overseg_last_error
   */
  OversegProcessingError = 5,
} OversegStatus;

/**
 * Opaque handle to a trained classifier model.
 */
typedef struct OversegModel OversegModel;

/**
 * Opaque handle to a loaded label volume.
 */
typedef struct OversegVolume OversegVolume;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *overseg_last_error(void);

/**
 * Load a label volume (.lbl raw with JSON sidecar, or .tif/.tiff).
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum OversegStatus overseg_volume_load(const char *path, struct OversegVolume **out);

/**
 * Release a volume handle. Null is a no-op.
 *
 * # Safety
 * `handle` must come from this library and not be freed twice.
 */
void overseg_volume_free(struct OversegVolume *handle);

/**
 * Volume dimensions as (z, y, x).
 *
 * # Safety
 * All pointers must be valid.
 */
enum OversegStatus overseg_volume_dims(const struct OversegVolume *handle,
                                       uint64_t *z,
                                       uint64_t *y,
                                       uint64_t *x);

/**
 * Count of nonzero (labelled) voxels.
 *
 * # Safety
 * All pointers must be valid.
 */
enum OversegStatus overseg_volume_nonzero(const struct OversegVolume *handle, uint64_t *out);

/**
 * Write a volume in the format implied by the path extension.
 *
 * # Safety
 * `handle` and `path` must be valid.
 */
enum OversegStatus overseg_volume_write(const struct OversegVolume *handle, const char *path);

/**
 * Load a trained model file.
 *
 * # Safety
 * `path` must be NUL-terminated, `out` valid.
 */
enum OversegStatus overseg_model_load(const char *path, struct OversegModel **out);

/**
 * Release a model handle. Null is a no-op.
 *
 * # Safety
 * `handle` must come from this library and not be freed twice.
 */
void overseg_model_free(struct OversegModel *handle);

/**
 * Screen a volume for oversegmentation candidates and write the feature
 * CSV. `n_found` receives the candidate count and may be null.
 *
 * # Safety
 * `volume` and `csv_path` must be valid.
 */
enum OversegStatus overseg_screen_to_csv(const struct OversegVolume *volume,
                                         uint64_t max_gap,
                                         uint64_t projections,
                                         uint64_t seed,
                                         const char *csv_path,
                                         uint64_t *n_found);

/**
 * Screen, classify with the model, and repair the volume in place.
 * `n_merged` receives the number of merges and may be null.
 *
 * # Safety
 * `volume` (mutable) and `model` must be valid handles.
 */
enum OversegStatus overseg_correct(struct OversegVolume *volume,
                                   const struct OversegModel *model,
                                   uint64_t projections,
                                   uint64_t seed,
                                   uint64_t *n_merged);

/**
 * Segmentation quality of a prediction against ground truth. Either
 * output pointer may be null.
 *
 * # Safety
 * Volume handles must be valid.
 */
enum OversegStatus overseg_evaluate(const struct OversegVolume *pred,
                                    const struct OversegVolume *gt,
                                    double *mean_ap_out,
                                    double *jaccard_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OVERSEG_H */
