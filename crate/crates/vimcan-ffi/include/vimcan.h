/* C interface for the vimcan pose estimator. Generated, do not edit. */

#ifndef VIMCAN_H
#define VIMCAN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Bumped whenever exported symbols or their contracts change.
 */
#define VIMCAN_ABI_VERSION 1

/**
 * Outcome of a fallible call.
 */
enum VimcanStatus
#if defined(__cplusplus) || __STDC_VERSION__ >= 202311L
  : int32_t
#endif // defined(__cplusplus) || __STDC_VERSION__ >= 202311L
 {
  VIMCAN_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  VIMCAN_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  VIMCAN_STATUS_INVALID_UTF8 = 2,
  /**
   * The configuration JSON failed to parse or validate.
   */
  VIMCAN_STATUS_BAD_CONFIG = 3,
  /**
   * The filesystem refused a read or write.
   */
  VIMCAN_STATUS_IO = 4,
  /**
   * The checkpoint file was readable but its contents are unusable.
   */
  VIMCAN_STATUS_BAD_CHECKPOINT = 5,
  /**
   * Input dimensions the model cannot accept.
   */
  VIMCAN_STATUS_BAD_INPUT = 6,
  /**
   * An internal invariant failed; the panic was contained.
   */
  VIMCAN_STATUS_PANICKED = 7,
};
#ifndef __cplusplus
#if __STDC_VERSION__ >= 202311L
typedef enum VimcanStatus VimcanStatus;
#else
typedef int32_t VimcanStatus;
#endif // __STDC_VERSION__ >= 202311L
#endif // __cplusplus

/**
 * Opaque model handle. Created by `vimcan_model_new` or
 * `vimcan_model_load`, released by `vimcan_model_free`. A handle may be
 * shared across threads for reading (`forward`, `save`, `param_count`), but
 * creation and destruction must not race with other calls on the same
 * handle.
 */
typedef struct VimcanModel VimcanModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * ABI revision compiled into the library.
 */
uint32_t vimcan_abi_version(void);

/**
 * Message for the most recent failure on the calling thread, NUL-terminated
 * and empty after a success. The pointer stays valid until the next library
 * call on the same thread; copy the string if it must outlive that.
 */
const char *vimcan_last_error(void);

/**
 * Builds a freshly initialized model. `config_json` is a JSON object with
 * the model hyperparameters; absent fields take their defaults, and a null
 * pointer selects the full default configuration. Identical `config_json`
 * and `seed` always produce the same parameters. On success `*out` owns the
 * handle.
 */
VimcanStatus vimcan_model_new(const char *config_json, uint64_t seed, struct VimcanModel **out);

/**
 * Restores a model from a checkpoint written by `vimcan_model_save` or the
 * CLI trainer. On success `*out` owns the handle.
 */
VimcanStatus vimcan_model_load(const char *path, struct VimcanModel **out);

/**
 * Writes the model to `path` as a checkpoint loadable by
 * `vimcan_model_load` and the CLI. Saving the same model twice produces
 * byte-identical files.
 */
VimcanStatus vimcan_model_save(const struct VimcanModel *model, const char *path);

/**
 * Number of trainable parameters; zero for a null handle.
 */
size_t vimcan_model_param_count(const struct VimcanModel *model);

/**
 * Runs inference on one sequence. `keypoints` holds `frames * 17 * 2`
 * doubles laid out frame-major as (frame, joint, xy) in normalized image
 * coordinates; `imu` holds `frames * 6 * 4` doubles as (frame, sensor,
 * wxyz) orientation quaternions; `out_positions` receives `frames * 17 * 3`
 * doubles as (frame, joint, xyz) root-relative positions in meters. The
 * caller guarantees the buffers really are that large and do not overlap.
 * Sequences shorter than two frames or beyond the scan capacity are
 * rejected with `BadInput`.
 */
VimcanStatus vimcan_model_forward(const struct VimcanModel *model,
                                  const double *keypoints,
                                  const double *imu,
                                  size_t frames,
                                  double *out_positions);

/**
 * Releases a handle. Null is accepted and ignored. The handle must not be
 * used afterwards.
 */
void vimcan_model_free(struct VimcanModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VIMCAN_H */
