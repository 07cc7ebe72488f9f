#ifndef PGCE_H
#define PGCE_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every function in this interface.
 */
typedef enum PgceStatus {
  PGCE_STATUS_OK = 0,
  PGCE_STATUS_NULL_POINTER = 1,
  PGCE_STATUS_INVALID_UTF8 = 2,
  /**
   * Bad input file, schema or configuration.
   */
  PGCE_STATUS_USAGE = 3,
  PGCE_STATUS_DIMENSION_MISMATCH = 4,
  /**
   * The search finished without a candidate of the target class.
   */
  PGCE_STATUS_NO_VALID_CANDIDATE = 5,
  PGCE_STATUS_RUNTIME = 6,
  PGCE_STATUS_PANIC = 7,
} PgceStatus;

/**
 * Trained forest classifier.
 */
typedef struct PgceModel PgceModel;

/**
 * Fitted physics constraint spec.
 */
typedef struct PgceSpec PgceSpec;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer is
 * valid until the next call into this library on the same thread.
 */
const char *pgce_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *pgce_version(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed already.
 */
void pgce_string_free(char *s);

/**
 * Loads a model JSON file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum PgceStatus pgce_model_load(const char *path, struct PgceModel **out);

/**
 * # Safety
 * `model` must come from [`pgce_model_load`] or be null.
 */
void pgce_model_free(struct PgceModel *model);

/**
 * Feature dimension the model expects; 0 for a null handle.
 *
 * # Safety
 * `model` must be a live handle or null.
 */
size_t pgce_model_n_features(const struct PgceModel *model);

/**
 * Predicts the class of one feature vector (0 = non-SEP, 1 = SEP) and the
 * forest's SEP probability. Either out-pointer may be null.
 *
 * # Safety
 * `values` must point to `len` doubles; out-pointers must be writable or null.
 */
enum PgceStatus pgce_model_predict(const struct PgceModel *model,
                                   const double *values,
                                   size_t len,
                                   uint8_t *label,
                                   double *sep_probability);

/**
 * Loads a physics spec TOML file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum PgceStatus pgce_spec_load(const char *path, struct PgceSpec **out);

/**
 * # Safety
 * `spec` must come from [`pgce_spec_load`] or be null.
 */
void pgce_spec_free(struct PgceSpec *spec);

/**
 * Counts ordering and range violations of one feature vector.
 *
 * # Safety
 * `values` must point to `len` doubles; out-pointers must be writable.
 */
enum PgceStatus pgce_spec_violations(const struct PgceSpec *spec,
                                     const double *values,
                                     size_t len,
                                     size_t *ordering,
                                     size_t *range);

/**
 * Generates a counterfactual set for one instance and returns it as JSON.
 *
 * `config_toml` may be null; otherwise it overrides fields of the
 * `[weights]` and `[ga]` tables. With `baseline` set, defaults switch to the
 * unconstrained comparison mode. A finished search without any valid
 * candidate still returns the set and reports
 * [`PgceStatus::NoValidCandidate`].
 *
 * # Safety
 * Handles must be live; `values` must point to `len` doubles; `config_toml`
 * must be a NUL-terminated string or null; `out_json` must be writable.
 */
enum PgceStatus pgce_explain(const struct PgceModel *model,
                             const struct PgceSpec *spec,
                             const double *values,
                             size_t len,
                             const char *config_toml,
                             bool baseline,
                             char **out_json);

/**
 * Channel-summed DTW distance between two equal-layout feature vectors.
 *
 * # Safety
 * `a` and `b` must point to `len` doubles; `out` must be writable.
 */
enum PgceStatus pgce_dtw(const struct PgceSpec *spec,
                         const double *a,
                         const double *b,
                         size_t len,
                         double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PGCE_H */
