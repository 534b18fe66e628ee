/* C interface to the caps training-free adaptation engine. */

#pragma once

/* Generated with cbindgen:0.29.4 */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code of every fallible call.
 */
typedef enum CapsStatus {
  CAPS_STATUS_OK = 0,
  CAPS_STATUS_NULL_ARGUMENT = 1,
  CAPS_STATUS_INVALID_ARGUMENT = 2,
  CAPS_STATUS_DIM_MISMATCH = 3,
  CAPS_STATUS_NOT_NORMALIZED = 4,
  CAPS_STATUS_SHAPE_MISMATCH = 5,
  CAPS_STATUS_FORMAT_ERROR = 6,
  CAPS_STATUS_IO_ERROR = 7,
  CAPS_STATUS_INTERNAL_ERROR = 8,
} CapsStatus;

/**
 * Opaque one-hot label handle.
 */
typedef struct CapsLabels CapsLabels;

/**
 * Opaque logits handle.
 */
typedef struct CapsLogits CapsLogits;

/**
 * Opaque feature matrix handle.
 */
typedef struct CapsMatrix CapsMatrix;

/**
 * Inference hyperparameters, mirroring the engine's tuple.
 */
typedef struct CapsHyperParams {
  double alpha;
  double beta;
  double gamma;
  double delta;
  double tau;
} CapsHyperParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *caps_last_error(void);

/**
 * Create a matrix from a row-major buffer of `rows * dim` f32 values.
 *
 * # Safety
 * `data` must point to at least `rows * dim` readable f32 values and `out`
 * must be a valid pointer.
 */
enum CapsStatus caps_matrix_create(uintptr_t rows,
                                   uintptr_t dim,
                                   const float *data,
                                   bool normalized,
                                   struct CapsMatrix **out);

/**
 * Load a matrix from a cache file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CapsStatus caps_matrix_load(const char *path, struct CapsMatrix **out);

/**
 * Write a matrix to a cache file (atomic replace).
 *
 * # Safety
 * `matrix` must be a live handle and `path` a NUL-terminated string.
 */
enum CapsStatus caps_matrix_save(const struct CapsMatrix *matrix, const char *path);

/**
 * Row count; 0 for a null handle.
 *
 * # Safety
 * `matrix` must be null or a live handle.
 */
uintptr_t caps_matrix_rows(const struct CapsMatrix *matrix);

/**
 * Embedding width; 0 for a null handle.
 *
 * # Safety
 * `matrix` must be null or a live handle.
 */
uintptr_t caps_matrix_dim(const struct CapsMatrix *matrix);

/**
 * Whether the matrix rows are unit-normalized.
 *
 * # Safety
 * `matrix` must be null or a live handle.
 */
bool caps_matrix_is_normalized(const struct CapsMatrix *matrix);

/**
 * Produce a row-normalized copy of the matrix.
 *
 * # Safety
 * `matrix` must be a live handle and `out` a valid pointer.
 */
enum CapsStatus caps_matrix_normalize(const struct CapsMatrix *matrix, struct CapsMatrix **out);

/**
 * Copy the row-major matrix data into `buffer` (`len` must be
 * `rows * dim`).
 *
 * # Safety
 * `matrix` must be a live handle; `buffer` must point to `len` writable
 * f32 slots.
 */
enum CapsStatus caps_matrix_copy_data(const struct CapsMatrix *matrix,
                                      float *buffer,
                                      uintptr_t len);

/**
 * Release a matrix handle. Null is ignored.
 *
 * # Safety
 * `matrix` must be null or a handle not yet freed.
 */
void caps_matrix_free(struct CapsMatrix *matrix);

/**
 * Build one-hot labels from per-sample class indices (must form contiguous
 * ascending class blocks).
 *
 * # Safety
 * `classes` must point to `len` readable usize values and `out` must be a
 * valid pointer.
 */
enum CapsStatus caps_labels_create(const uintptr_t *classes,
                                   uintptr_t len,
                                   uintptr_t n_classes,
                                   struct CapsLabels **out);

/**
 * Release a labels handle. Null is ignored.
 *
 * # Safety
 * `labels` must be null or a handle not yet freed.
 */
void caps_labels_free(struct CapsLabels *labels);

/**
 * Zero-shot logits: `tau * (test . classifier^T)`.
 *
 * # Safety
 * All handles must be live; `out` must be a valid pointer.
 */
enum CapsStatus caps_zeroshot_logits(const struct CapsMatrix *test,
                                     const struct CapsMatrix *classifier,
                                     double tau,
                                     struct CapsLogits **out);

/**
 * TIP-X logits over an image support cache.
 *
 * # Safety
 * All handles must be live; `out` must be a valid pointer.
 */
enum CapsStatus caps_tipx_logits(const struct CapsMatrix *test,
                                 const struct CapsMatrix *classifier,
                                 const struct CapsMatrix *image_cache,
                                 const struct CapsLabels *labels,
                                 struct CapsHyperParams hp,
                                 struct CapsLogits **out);

/**
 * M-Adapter logits over a paired image + caption support cache.
 *
 * # Safety
 * All handles must be live; `out` must be a valid pointer.
 */
enum CapsStatus caps_m_adapter_logits(const struct CapsMatrix *test,
                                      const struct CapsMatrix *classifier,
                                      const struct CapsMatrix *image_cache,
                                      const struct CapsMatrix *caption_cache,
                                      const struct CapsLabels *labels,
                                      struct CapsHyperParams hp,
                                      struct CapsLogits **out);

/**
 * Fast-variant logits: M-Adapter without the KL term.
 *
 * # Safety
 * All handles must be live; `out` must be a valid pointer.
 */
enum CapsStatus caps_f_variant_logits(const struct CapsMatrix *test,
                                      const struct CapsMatrix *classifier,
                                      const struct CapsMatrix *image_cache,
                                      const struct CapsMatrix *caption_cache,
                                      const struct CapsLabels *labels,
                                      struct CapsHyperParams hp,
                                      struct CapsLogits **out);

/**
 * Test-row count; 0 for a null handle.
 *
 * # Safety
 * `logits` must be null or a live handle.
 */
uintptr_t caps_logits_rows(const struct CapsLogits *logits);

/**
 * Class count; 0 for a null handle.
 *
 * # Safety
 * `logits` must be null or a live handle.
 */
uintptr_t caps_logits_classes(const struct CapsLogits *logits);

/**
 * Copy the row-major logits into `buffer` (`len` must be
 * `rows * classes`).
 *
 * # Safety
 * `logits` must be a live handle; `buffer` must point to `len` writable
 * f64 slots.
 */
enum CapsStatus caps_logits_copy_data(const struct CapsLogits *logits,
                                      double *buffer,
                                      uintptr_t len);

/**
 * Top-1 accuracy of the logits against per-row class labels.
 *
 * # Safety
 * `logits` must be a live handle; `labels` must point to `len` readable
 * usize values; `out` must be a valid pointer.
 */
enum CapsStatus caps_top1_accuracy(const struct CapsLogits *logits,
                                   const uintptr_t *labels,
                                   uintptr_t len,
                                   double *out);

/**
 * Release a logits handle. Null is ignored.
 *
 * # Safety
 * `logits` must be null or a handle not yet freed.
 */
void caps_logits_free(struct CapsLogits *logits);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus
