#ifndef INCREMENTAL_AUDIO_H
#define INCREMENTAL_AUDIO_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Values are stable.
 */
typedef enum IaStatus {
  IA_STATUS_OK = 0,
  IA_STATUS_NULL_POINTER = 1,
  IA_STATUS_INVALID_UTF8 = 2,
  IA_STATUS_BUFFER_TOO_SMALL = 3,
  IA_STATUS_DIMENSION = 10,
  IA_STATUS_CONTRACT = 11,
  IA_STATUS_PARAMETER = 12,
  IA_STATUS_CONFIGURATION = 13,
  IA_STATUS_FORMAT = 14,
  IA_STATUS_MANIFEST = 15,
  IA_STATUS_REGISTRY = 16,
  IA_STATUS_INDL_VIOLATION = 17,
  IA_STATUS_LABEL = 18,
  IA_STATUS_NON_FINITE = 19,
  IA_STATUS_IO = 20,
  IA_STATUS_PANIC = 99,
} IaStatus;

/**
 * A trained learner loaded from a checkpoint.
 */
typedef struct IaLearner IaLearner;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or NULL. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *ia_last_error_message(void);

/**
 * Loads a checkpoint file. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum IaStatus ia_learner_load(const char *path, struct IaLearner **out);

/**
 * Releases a handle. NULL is ignored.
 *
 * # Safety
 * `learner` must come from [`ia_learner_load`] and not be used afterwards.
 */
void ia_learner_free(struct IaLearner *learner);

/**
 * # Safety
 * `learner` and `out` must be valid pointers.
 */
enum IaStatus ia_learner_num_classes(const struct IaLearner *learner, size_t *out);

/**
 * Input geometry expected by [`ia_learner_predict`].
 *
 * # Safety
 * All pointers must be valid.
 */
enum IaStatus ia_learner_input_shape(const struct IaLearner *learner,
                                     size_t *n_mels,
                                     size_t *n_frames);

/**
 * Eval-mode logits. `features` holds `batch` examples laid out
 * `[batch][n_mels][n_frames]`; `logits` receives `[batch][num_classes]`.
 *
 * # Safety
 * `features` must point to `features_len` floats and `logits` to
 * `logits_len` writable floats.
 */
enum IaStatus ia_learner_predict(const struct IaLearner *learner,
                                 const float *features,
                                 size_t features_len,
                                 size_t batch,
                                 float *logits,
                                 size_t logits_len);

/**
 * 40-band log-mel energies of mono PCM in `[-1, 1]`, written
 * `[n_frames][40]`. Call with `out == NULL` to query `*n_frames` only.
 *
 * # Safety
 * `samples` must point to `n_samples` floats; `out`, when non-null, to
 * `out_len` writable floats.
 */
enum IaStatus ia_extract_log_mel(const float *samples,
                                 size_t n_samples,
                                 uint32_t sample_rate_hz,
                                 float *out,
                                 size_t out_len,
                                 size_t *n_frames);

/**
 * Distillation weight `omega * sqrt((total - old) / total)`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum IaStatus ia_adaptive_lambda(size_t total_classes,
                                 size_t old_classes,
                                 double omega,
                                 double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* INCREMENTAL_AUDIO_H */
