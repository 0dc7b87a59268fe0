#ifndef SIGNALIGN_H
#define SIGNALIGN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SlStatus {
  SL_STATUS_OK = 0,
  SL_STATUS_NULL_POINTER = 1,
  SL_STATUS_INVALID_UTF8 = 2,
  SL_STATUS_BUFFER_TOO_SMALL = 3,
  SL_STATUS_PANIC = 4,
  SL_STATUS_DIMENSION = 5,
  SL_STATUS_NON_FINITE = 6,
  SL_STATUS_BACKWARD = 7,
  SL_STATUS_INVALID_ARGUMENT = 8,
  SL_STATUS_FORMAT = 9,
  SL_STATUS_PARSE = 10,
  SL_STATUS_CONFIG = 11,
  SL_STATUS_CHECKPOINT = 12,
  SL_STATUS_UNKNOWN_TOKEN = 13,
  SL_STATUS_IO = 14,
} SlStatus;

typedef struct SlModel SlModel;

typedef struct SlSkeleton SlSkeleton;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Static NUL-terminated version string.
 */
const char *sl_version(void);

/**
 * Message of the last failure on this thread, or NULL. Valid until the next
 * failing call or `sl_clear_error` on the same thread.
 */
const char *sl_last_error(void);

void sl_clear_error(void);

/**
 * Builds a skeleton from `frames * 138` row-major coordinates.
 *
 * # Safety
 * `data` must point to `len` readable doubles; `out` must be writable.
 */
enum SlStatus sl_skeleton_from_frames(size_t frames,
                                      const double *data,
                                      size_t len,
                                      struct SlSkeleton **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum SlStatus sl_skeleton_read(const char *path, struct SlSkeleton **out);

/**
 * # Safety
 * `skeleton` must come from this library; `path` must be a NUL-terminated string.
 */
enum SlStatus sl_skeleton_write(const struct SlSkeleton *skeleton, const char *path);

/**
 * # Safety
 * `skeleton` must come from this library; `out` must be writable.
 */
enum SlStatus sl_skeleton_num_frames(const struct SlSkeleton *skeleton, size_t *out);

/**
 * Copies the coordinates into `out`. With a short buffer the call fails with
 * `SL_STATUS_BUFFER_TOO_SMALL` and `written` holds the required length.
 *
 * # Safety
 * `out` must hold `cap` doubles; `written` must be writable.
 */
enum SlStatus sl_skeleton_copy_frames(const struct SlSkeleton *skeleton,
                                      double *out,
                                      size_t cap,
                                      size_t *written);

/**
 * # Safety
 * `skeleton` must come from this library and not be used afterwards. NULL is ignored.
 */
void sl_skeleton_free(struct SlSkeleton *skeleton);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum SlStatus sl_model_load(const char *path, struct SlModel **out);

/**
 * # Safety
 * `model` must come from this library and not be used afterwards. NULL is ignored.
 */
void sl_model_free(struct SlModel *model);

/**
 * # Safety
 * `model` must come from this library; `out` must be writable.
 */
enum SlStatus sl_model_vocab_size(const struct SlModel *model, size_t *out);

/**
 * Greedy-decodes one sequence into a NUL-terminated string. `needed` receives
 * the buffer size including the terminator, also when the buffer is too small.
 *
 * # Safety
 * `buf` must hold `cap` bytes; `needed` must be writable.
 */
enum SlStatus sl_model_decode(const struct SlModel *model,
                              const struct SlSkeleton *skeleton,
                              char *buf,
                              size_t cap,
                              size_t *needed);

/**
 * Pooled sign-encoder embedding of one sequence; same contract as `sl_skeleton_copy_frames`.
 *
 * # Safety
 * `out` must hold `cap` doubles; `written` must be writable.
 */
enum SlStatus sl_model_embed_sign(const struct SlModel *model,
                                  const struct SlSkeleton *skeleton,
                                  double *out,
                                  size_t cap,
                                  size_t *written);

/**
 * Word error rate in percent of one hypothesis against one reference.
 *
 * # Safety
 * Strings must be NUL-terminated; `out` must be writable.
 */
enum SlStatus sl_wer(const char *reference, const char *hypothesis, double *out);

/**
 * BLEU-`n` in percent of one sentence pair.
 *
 * # Safety
 * Strings must be NUL-terminated; `out` must be writable.
 */
enum SlStatus sl_bleu(const char *reference, const char *hypothesis, size_t n, double *out);

/**
 * ROUGE-L F-measure in percent of one sentence pair.
 *
 * # Safety
 * Strings must be NUL-terminated; `out` must be writable.
 */
enum SlStatus sl_rouge_l(const char *reference, const char *hypothesis, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SIGNALIGN_H */
