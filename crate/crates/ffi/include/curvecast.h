#ifndef CURVECAST_H
#define CURVECAST_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes; the non-zero values match the command-line exit codes.
 */
typedef enum CcStatus {
  CC_STATUS_OK = 0,
  CC_STATUS_FAILED = 1,
  CC_STATUS_CONFIG = 2,
  CC_STATUS_DATA = 3,
  CC_STATUS_PRECONDITION = 4,
  /**
   * A required pointer was null or a length was inconsistent.
   */
  CC_STATUS_INVALID_ARGUMENT = 5,
  CC_STATUS_PANIC = 6,
} CcStatus;

/**
 * Opaque trained model.
 */
typedef struct CcModel CcModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *cc_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cc_version(void);

/**
 * Loads a checkpoint written by the command-line tool or [`cc_model_save`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CcStatus cc_model_load(const char *path, struct CcModel **out);

/**
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum CcStatus cc_model_save(const struct CcModel *model, const char *path);

/**
 * Pretrains on the synthetic suite described by the configuration.
 * `config_toml` may be null for the defaults.
 *
 * # Safety
 * `config_toml` must be null or NUL-terminated; `out` must be valid.
 */
enum CcStatus cc_model_pretrain_synthetic(const char *config_toml,
                                          uint64_t data_seed,
                                          struct CcModel **out);

/**
 * Pretrains on caller-supplied curves stored back to back: curve `i` has
 * `lengths[i]` samples, read consecutively from `times` and `values`.
 *
 * # Safety
 * `times` and `values` must each hold `Σ lengths` doubles; `lengths` must
 * hold `n_curves` entries; `out` must be valid.
 */
enum CcStatus cc_model_pretrain(const char *config_toml,
                                const double *times,
                                const double *values,
                                const size_t *lengths,
                                size_t n_curves,
                                struct CcModel **out);

/**
 * Input window length of the model, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or come from this library.
 */
size_t cc_model_window(const struct CcModel *model);

/**
 * Reconstructs a curve of `total` samples from its first `observed` values.
 * Writes `total` values to `out_curve`; the first `observed` equal the prefix.
 *
 * # Safety
 * `times` must hold `total` doubles, `prefix` `observed` doubles and
 * `out_curve` room for `out_len ≥ total` doubles.
 */
enum CcStatus cc_reconstruct(const struct CcModel *model,
                             const double *times,
                             size_t total,
                             const double *prefix,
                             size_t observed,
                             double *out_curve,
                             size_t out_len);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must be null or come from this library and not be used afterwards.
 */
void cc_model_free(struct CcModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CURVECAST_H */
