#ifndef CROFT_H
#define CROFT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum CroftStatus {
  CROFT_STATUS_OK = 0,
  CROFT_STATUS_NULL_POINTER = 1,
  CROFT_STATUS_INVALID_STRING = 2,
  CROFT_STATUS_IO = 3,
  CROFT_STATUS_FORMAT = 4,
  CROFT_STATUS_VALIDATION = 5,
  CROFT_STATUS_NUMERICAL = 6,
  CROFT_STATUS_BUFFER_TOO_SMALL = 7,
  CROFT_STATUS_PANIC = 8,
} CroftStatus;

/**
 * Trained adapters, generator and history.
 */
typedef struct CroftCheckpoint CroftCheckpoint;

/**
 * Frozen image/text features of one population.
 */
typedef struct CroftFeatureSet CroftFeatureSet;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or NULL. Valid until the next failing call.
 */
const char *croft_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *croft_version(void);

/**
 * Reads a CFT1 file pair (`<path>.cft1` + `<path>.json`).
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum CroftStatus croft_feature_set_read(const char *path, struct CroftFeatureSet **out);

/**
 * Writes a CFT1 file pair.
 *
 * # Safety
 * `fs` must come from this library; `path` must be NUL-terminated.
 */
enum CroftStatus croft_feature_set_write(const struct CroftFeatureSet *fs, const char *path);

/**
 * Rows, feature dimension and number of classes.
 *
 * # Safety
 * `fs` must come from this library; the out pointers may be NULL.
 */
enum CroftStatus croft_feature_set_shape(const struct CroftFeatureSet *fs,
                                         size_t *n,
                                         size_t *d,
                                         size_t *k);

/**
 * # Safety
 * `fs` must come from this library (or be NULL) and not be used afterwards.
 */
void croft_feature_set_free(struct CroftFeatureSet *fs);

/**
 * Trains adapters on `data`. `config_json` is a JSON object of training options
 * (unknown keys are rejected) or NULL for the defaults.
 *
 * # Safety
 * `data` must come from this library, `config_json` must be NULL or NUL-terminated,
 * `out` must be writable.
 */
enum CroftStatus croft_train(const struct CroftFeatureSet *data,
                             const char *config_json,
                             struct CroftCheckpoint **out);

/**
 * Loads `<base>.json` + `<base>.bin`.
 *
 * # Safety
 * `base` must be NUL-terminated and `out` writable.
 */
enum CroftStatus croft_checkpoint_load(const char *base, struct CroftCheckpoint **out);

/**
 * Writes `<base>.json` + `<base>.bin`.
 *
 * # Safety
 * `ck` must come from this library; `base` must be NUL-terminated.
 */
enum CroftStatus croft_checkpoint_save(const struct CroftCheckpoint *ck, const char *base);

/**
 * Adapter dimension `d`, or 0 for NULL.
 *
 * # Safety
 * `ck` must come from this library or be NULL.
 */
size_t croft_checkpoint_dim(const struct CroftCheckpoint *ck);

/**
 * # Safety
 * `ck` must come from this library (or be NULL) and not be used afterwards.
 */
void croft_checkpoint_free(struct CroftCheckpoint *ck);

/**
 * Per-row energy scores of `fs` under the adapters; writes `n` values into `out`.
 *
 * # Safety
 * Handles must come from this library; `out` must hold `capacity` doubles.
 */
enum CroftStatus croft_energy_scores(const struct CroftCheckpoint *ck,
                                     const struct CroftFeatureSet *fs,
                                     double *out,
                                     size_t capacity);

/**
 * Closed-set accuracy in `[0, 1]` of a labelled feature set.
 *
 * # Safety
 * Handles must come from this library; `out` must be writable.
 */
enum CroftStatus croft_accuracy(const struct CroftCheckpoint *ck,
                                const struct CroftFeatureSet *fs,
                                double *out);

/**
 * AUROC of open-set vs closed-set scores (higher score = more out-of-distribution).
 *
 * # Safety
 * `closed` / `open` must point to `n_closed` / `n_open` doubles; `out` must be writable.
 */
enum CroftStatus croft_auroc(const double *closed,
                             size_t n_closed,
                             const double *open,
                             size_t n_open,
                             double *out);

/**
 * Fraction of open-set scores at or below the 95th percentile of closed-set scores.
 *
 * # Safety
 * As for [`croft_auroc`].
 */
enum CroftStatus croft_fpr95(const double *closed,
                             size_t n_closed,
                             const double *open,
                             size_t n_open,
                             double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CROFT_H */
