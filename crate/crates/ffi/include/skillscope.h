#ifndef SKILLSCOPE_H
#define SKILLSCOPE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum SkStatus {
  SK_STATUS_OK = 0,
  SK_STATUS_NULL_POINTER = 1,
  SK_STATUS_INVALID_ARGUMENT = 2,
  SK_STATUS_IO = 3,
  SK_STATUS_PARSE = 4,
  SK_STATUS_VALIDATION = 5,
  SK_STATUS_DATASET = 6,
  SK_STATUS_CONFIG = 7,
  SK_STATUS_LAYOUT = 8,
  SK_STATUS_MODEL = 9,
  SK_STATUS_OUT_OF_RANGE = 10,
  SK_STATUS_BUFFER_TOO_SMALL = 11,
  SK_STATUS_PANIC = 12,
  SK_STATUS_INTERNAL = 13,
} SkStatus;

/**
 * Opaque handle to a loaded, validated session file.
 */
typedef struct SkDataset SkDataset;

/**
 * Opaque handle to a trained model.
 */
typedef struct SkModel SkModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *sk_version(void);

/**
 * Message of the last failing call on this thread; empty if none. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *sk_last_error(void);

/**
 * Loads and validates a line-delimited session file. With `strict`, unknown fields are
 * rejected.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SkStatus sk_dataset_load(const char *path, bool strict, struct SkDataset **out);

/**
 * Releases a dataset. Null is ignored.
 *
 * # Safety
 * `ds` must come from [`sk_dataset_load`] and not be used afterwards.
 */
void sk_dataset_free(struct SkDataset *ds);

/**
 * # Safety
 * Pointers must be valid.
 */
enum SkStatus sk_dataset_len(const struct SkDataset *ds, size_t *out_len);

/**
 * Frame count of session `index`.
 *
 * # Safety
 * Pointers must be valid.
 */
enum SkStatus sk_dataset_frame_count(const struct SkDataset *ds, size_t index, size_t *out_frames);

/**
 * Copies the id of session `index` into `buf` as a NUL-terminated string. `*out_len`
 * receives the id length in bytes, without the terminator.
 *
 * # Safety
 * `buf` must hold `cap` bytes; other pointers must be valid.
 */
enum SkStatus sk_dataset_session_id(const struct SkDataset *ds,
                                    size_t index,
                                    char *buf,
                                    size_t cap,
                                    size_t *out_len);

/**
 * Loads a saved model and checks its feature layout against this library.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SkStatus sk_model_load(const char *path, struct SkModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`sk_model_load`] and not be used afterwards.
 */
void sk_model_free(struct SkModel *model);

/**
 * Predicted skill score in [1, 10] for session `index`.
 *
 * # Safety
 * Pointers must be valid.
 */
enum SkStatus sk_predict(const struct SkModel *model,
                         const struct SkDataset *ds,
                         size_t index,
                         double *out_score);

/**
 * Per-frame importance of session `index` (one value per frame, summing to 1).
 *
 * # Safety
 * `out` must hold `cap` doubles; other pointers must be valid.
 */
enum SkStatus sk_temporal_importance(const struct SkModel *model,
                                     const struct SkDataset *ds,
                                     size_t index,
                                     double *out,
                                     size_t cap,
                                     size_t *out_len);

/**
 * Number of global features (19).
 */
size_t sk_global_feature_count(void);

/**
 * Static name of global feature `i`, or null when out of range.
 */
const char *sk_global_feature_name(size_t i);

/**
 * Raw global feature vector of session `index`, computed with the model's feature
 * configuration, or the default one when `model` is null.
 *
 * # Safety
 * `out` must hold `cap` doubles; `ds` and `out_len` must be valid.
 */
enum SkStatus sk_global_features(const struct SkModel *model,
                                 const struct SkDataset *ds,
                                 size_t index,
                                 double *out,
                                 size_t cap,
                                 size_t *out_len);

/**
 * Sampling Shapley attribution of session `index`'s score over the global features, with
 * absent features drawn from `background`. Writes one value per feature to `out_values`;
 * `out_std_errors` and `out_base` may be null.
 *
 * # Safety
 * Output buffers must hold `cap` doubles; other pointers must be valid or null where
 * allowed.
 */
enum SkStatus sk_shap(const struct SkModel *model,
                      const struct SkDataset *background,
                      const struct SkDataset *ds,
                      size_t index,
                      size_t n_samples,
                      uint64_t seed,
                      double *out_values,
                      double *out_std_errors,
                      size_t cap,
                      size_t *out_len,
                      double *out_base);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SKILLSCOPE_H */
