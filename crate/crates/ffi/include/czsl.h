#ifndef CZSL_H
#define CZSL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum CzslStatus {
  CZSL_STATUS_OK = 0,
  CZSL_STATUS_NULL_POINTER = 1,
  CZSL_STATUS_INVALID_ARGUMENT = 2,
  CZSL_STATUS_CONFIG = 3,
  CZSL_STATUS_DATA = 4,
  CZSL_STATUS_LOOKUP = 5,
  CZSL_STATUS_INTEGRITY = 6,
  CZSL_STATUS_IO = 7,
  CZSL_STATUS_CONTRACT = 8,
  CZSL_STATUS_NUMERIC = 9,
  CZSL_STATUS_BUFFER_TOO_SMALL = 10,
  CZSL_STATUS_PANIC = 11,
} CzslStatus;

typedef enum CzslSetting {
  CZSL_SETTING_STANDARD = 0,
  CZSL_SETTING_GENERALIZED = 1,
  CZSL_SETTING_OPEN_WORLD = 2,
} CzslSetting;

typedef enum CzslPhase {
  CZSL_PHASE_VAL = 0,
  CZSL_PHASE_TEST = 1,
} CzslPhase;

/**
 * Split files plus the image feature table.
 */
typedef struct CzslDataset CzslDataset;

/**
 * A scoring snapshot (trained or untrained).
 */
typedef struct CzslModel CzslModel;

/**
 * Summary metrics of one evaluation.
 */
typedef struct CzslMetrics {
  double seen;
  double unseen;
  double harmonic_mean;
  double auc;
  size_t n_images;
  size_t n_pairs;
} CzslMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or NULL.
 * The pointer stays valid until the next call into this library.
 */
const char *czsl_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *czsl_version(void);

/**
 * Load split files from `data_dir` and features from `features_path`
 * (NULL means `<data_dir>/features.bin`).
 *
 * # Safety
 * String arguments must be NUL-terminated or NULL where allowed; `out` must be writable.
 */
enum CzslStatus czsl_dataset_load(const char *data_dir,
                                  const char *features_path,
                                  struct CzslDataset **out);

/**
 * # Safety
 * `ds` must come from [`czsl_dataset_load`] and not be used afterwards. NULL is ignored.
 */
void czsl_dataset_free(struct CzslDataset *ds);

/**
 * Number of attributes and objects.
 *
 * # Safety
 * `ds` must be a live handle; outputs must be writable.
 */
enum CzslStatus czsl_dataset_dims(const struct CzslDataset *ds, size_t *n_attrs, size_t *n_objs);

/**
 * Write `"<attribute> <object>"` into `buf` (with NUL). `needed` receives
 * the required size including the NUL, even when the buffer is too small.
 *
 * # Safety
 * `ds` must be live; `buf` must hold `cap` bytes (may be NULL when `cap` is 0).
 */
enum CzslStatus czsl_pair_name(const struct CzslDataset *ds,
                               size_t attr,
                               size_t obj,
                               char *buf,
                               size_t cap,
                               size_t *needed);

/**
 * Load the validation-selected model from a checkpoint.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be writable.
 */
enum CzslStatus czsl_model_load(const char *path, struct CzslModel **out);

/**
 * Untrained model for `ds` with default settings, the given prompt mode
 * name (e.g. `"clip_hard"`) and seed.
 *
 * # Safety
 * `ds` must be live; `mode` NUL-terminated; `out` writable.
 */
enum CzslStatus czsl_model_init(const struct CzslDataset *ds,
                                const char *mode,
                                uint64_t seed,
                                struct CzslModel **out);

/**
 * # Safety
 * `m` must come from a `czsl_model_*` constructor and not be used afterwards. NULL is ignored.
 */
void czsl_model_free(struct CzslModel *m);

/**
 * # Safety
 * `m` must be a live handle.
 */
enum CzslStatus czsl_model_set_tau(struct CzslModel *m, double tau);

/**
 * Most similar pair for `image_id` among the setting's target pairs.
 * `threshold` must be NaN except in the open world.
 *
 * # Safety
 * Handles must be live; `image_id` NUL-terminated; outputs writable.
 */
enum CzslStatus czsl_predict(const struct CzslModel *m,
                             const struct CzslDataset *ds,
                             const char *image_id,
                             enum CzslSetting setting_,
                             enum CzslPhase phase_,
                             double threshold,
                             size_t *attr,
                             size_t *obj);

/**
 * S, U, HM and AUC over the phase's images. `threshold` must be NaN except in the open world.
 *
 * # Safety
 * Handles must be live; `out` writable.
 */
enum CzslStatus czsl_evaluate(const struct CzslModel *m,
                              const struct CzslDataset *ds,
                              enum CzslSetting setting_,
                              enum CzslPhase phase_,
                              double threshold,
                              struct CzslMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CZSL_H */
