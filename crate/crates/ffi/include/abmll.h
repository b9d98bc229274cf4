#ifndef ABMLL_H
#define ABMLL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes; the nonzero values match the command-line exit codes.
 */
typedef enum AbmllStatus {
  ABMLL_OK = 0,
  /**
   * Numerical or I/O failure.
   */
  ABMLL_ERR_OTHER = 1,
  /**
   * Bad configuration or arguments, including null pointers.
   */
  ABMLL_ERR_CONFIG = 2,
  /**
   * Unreadable or inconsistent data files.
   */
  ABMLL_ERR_DATA = 3,
  /**
   * Corrupt or mismatched checkpoint.
   */
  ABMLL_ERR_INTEGRITY = 4,
} AbmllStatus;

/**
 * Opaque loaded checkpoint.
 */
typedef struct AbmllCheckpoint AbmllCheckpoint;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *abmll_last_error(void);

/**
 * Pretrains a base model as configured and writes `base.ckpt` into
 * `out_dir`.
 *
 * # Safety
 * Both arguments are valid nul-terminated strings.
 */
enum AbmllStatus abmll_pretrain(const char *config_path, const char *out_dir);

/**
 * Meta-trains from a base checkpoint. `method` overrides the configured
 * method and `resume` names a run checkpoint to continue; both may be
 * null.
 *
 * # Safety
 * Non-null arguments are valid nul-terminated strings.
 */
enum AbmllStatus abmll_metatrain(const char *config_path,
                                 const char *base_checkpoint,
                                 const char *method,
                                 const char *resume,
                                 const char *out_dir);

/**
 * Loads and verifies a checkpoint file.
 *
 * # Safety
 * `path` is a valid nul-terminated string and `out` is writable.
 */
enum AbmllStatus abmll_checkpoint_open(const char *path, struct AbmllCheckpoint **out);

/**
 * Releases a handle from [`abmll_checkpoint_open`]; null is ignored.
 *
 * # Safety
 * `handle` is null or an unfreed handle from this library.
 */
void abmll_checkpoint_free(struct AbmllCheckpoint *handle);

/**
 * Reported epochs completed (0 for a base-only checkpoint) and the number
 * of trained adapter parameters (0 when there are none).
 *
 * # Safety
 * `handle` is a live handle; the output pointers are writable.
 */
enum AbmllStatus abmll_checkpoint_info(const struct AbmllCheckpoint *handle,
                                       size_t *epochs,
                                       size_t *adapter_params);

/**
 * Adapts the checkpoint's posture to each held-out task of the suite
 * generated from `suite_seed` and reports pooled accuracy and ECE.
 *
 * # Safety
 * `handle` is a live handle; the output pointers are writable.
 */
enum AbmllStatus abmll_checkpoint_evaluate(const struct AbmllCheckpoint *handle,
                                           uint64_t suite_seed,
                                           size_t adapt_steps,
                                           double *accuracy,
                                           double *calibration_error);

/**
 * Expected calibration error over `n` predictions with `bins` equal-width
 * confidence bins. `correct[i]` is nonzero for a right answer.
 *
 * # Safety
 * `confidence` and `correct` point to `n` readable elements; `out` is
 * writable.
 */
enum AbmllStatus abmll_ece(const double *confidence,
                           const uint8_t *correct,
                           size_t n,
                           size_t bins,
                           double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ABMLL_H */
