#ifndef GLPDEPTH_H
#define GLPDEPTH_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GlpStatus {
  GLP_STATUS_OK = 0,
  GLP_STATUS_NULL_POINTER = 1,
  GLP_STATUS_INVALID_ARGUMENT = 2,
  GLP_STATUS_CONFIG = 3,
  GLP_STATUS_IO = 4,
  GLP_STATUS_PARSE = 5,
  GLP_STATUS_CHECKSUM = 6,
  GLP_STATUS_CHECKPOINT_MISMATCH = 7,
  GLP_STATUS_GEOMETRY = 8,
  GLP_STATUS_NUMERIC = 9,
  GLP_STATUS_PANIC = 10,
} GlpStatus;

/**
 * Opaque model handle.
 */
typedef struct GlpModel GlpModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *glp_last_error(void);

/**
 * Builds a freshly initialized model from `key = value` config text.
 *
 * # Safety
 * `config` must be a NUL-terminated string and `out` a valid pointer.
 */
enum GlpStatus glp_model_new(const char *config, uint64_t seed, struct GlpModel **out);

/**
 * Loads a checkpoint written by the CLI or [`glp_model_save`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum GlpStatus glp_model_load(const char *path, struct GlpModel **out);

/**
 * Writes the model weights (no optimizer state).
 *
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum GlpStatus glp_model_save(const struct GlpModel *model, const char *path);

/**
 * Trainable parameter counts of the encoder and decoder.
 *
 * # Safety
 * `model` must come from this library; the out pointers must be valid.
 */
enum GlpStatus glp_model_param_counts(const struct GlpModel *model,
                                      uint64_t *encoder,
                                      uint64_t *decoder);

/**
 * Predicts metric depth for one image.
 *
 * `rgb` is row-major `height × width × 3` in `[0, 1]`; `depth` receives
 * `height × width` meters. Sizes off the 32-pixel grid are resized for
 * inference and the result resized back.
 *
 * # Safety
 * `rgb` must hold `3·height·width` floats and `depth` room for
 * `height·width`.
 */
enum GlpStatus glp_model_predict(const struct GlpModel *model,
                                 const float *rgb,
                                 size_t height,
                                 size_t width,
                                 float *depth);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void glp_model_free(struct GlpModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GLPDEPTH_H */
