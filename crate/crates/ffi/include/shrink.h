#ifndef SHRINK_H
#define SHRINK_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ShrinkStatus {
  SHRINK_STATUS_OK = 0,
  SHRINK_STATUS_NULL_POINTER = 1,
  SHRINK_STATUS_INVALID_ARGUMENT = 2,
  SHRINK_STATUS_IO = 3,
  SHRINK_STATUS_MISSING_FILE = 4,
  SHRINK_STATUS_CONFIG = 5,
  SHRINK_STATUS_INVALID_INPUT = 6,
  SHRINK_STATUS_DIVERGED = 7,
  SHRINK_STATUS_CHECKPOINT = 8,
  SHRINK_STATUS_ARCH = 9,
  SHRINK_STATUS_BUFFER_TOO_SMALL = 10,
  SHRINK_STATUS_PANIC = 11,
} ShrinkStatus;

/**
 * Opaque model handle.
 */
typedef struct ShrinkModel ShrinkModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call into this library on the same thread.
 */
const char *shrink_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *shrink_version(void);

/**
 * Loads a checkpoint from `path`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum ShrinkStatus shrink_model_load(const char *path, struct ShrinkModel **out);

/**
 * Builds a freshly initialised model from a JSON model config.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum ShrinkStatus shrink_model_init(const char *config_json,
                                    uint64_t seed,
                                    struct ShrinkModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void shrink_model_free(struct ShrinkModel *model);

/**
 * Writes the model to `path` atomically.
 *
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum ShrinkStatus shrink_model_save(const struct ShrinkModel *model, const char *path);

/**
 * The model config as JSON. Release with [`shrink_string_free`].
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum ShrinkStatus shrink_model_config_json(const struct ShrinkModel *model, char **out);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void shrink_string_free(char *s);

/**
 * Total and non-embedding parameter counts.
 *
 * # Safety
 * `model` must be a live handle; the out pointers may be null.
 */
enum ShrinkStatus shrink_model_param_counts(const struct ShrinkModel *model,
                                            uint64_t *total,
                                            uint64_t *non_embedding);

/**
 * Vocabulary size, which is the row length of the logits.
 *
 * # Safety
 * `model` must be a live handle.
 */
size_t shrink_model_vocab(const struct ShrinkModel *model);

/**
 * Runs a forward pass over `batch * seq` token ids laid out row-major and
 * writes `batch * seq * vocab` logits to `logits`. `logits_len` is the
 * capacity of the buffer in floats.
 *
 * # Safety
 * `tokens` must point to `batch * seq` ids and `logits` to `logits_len` floats.
 */
enum ShrinkStatus shrink_model_forward(const struct ShrinkModel *model,
                                       const uint32_t *tokens,
                                       size_t batch,
                                       size_t seq,
                                       float *logits,
                                       size_t logits_len);

/**
 * Log-likelihood in nats of `continuation` following `prefix`.
 *
 * # Safety
 * The token pointers must cover their lengths and `out` must be valid.
 */
enum ShrinkStatus shrink_model_score(const struct ShrinkModel *model,
                                     const uint32_t *prefix,
                                     size_t prefix_len,
                                     const uint32_t *continuation,
                                     size_t continuation_len,
                                     double *out);

/**
 * Removes the listed layers (0-based) and returns the shallower model as a
 * new handle.
 *
 * # Safety
 * `layers` must cover `n_layers` entries and `out` must be valid.
 */
enum ShrinkStatus shrink_model_drop_layers(const struct ShrinkModel *model,
                                           const size_t *layers,
                                           size_t n_layers,
                                           struct ShrinkModel **out);

/**
 * Width-prunes to the JSON target config with a seeded random selection and
 * returns the result as a new handle.
 *
 * # Safety
 * `target_json` must be a NUL-terminated string and `out` must be valid.
 */
enum ShrinkStatus shrink_model_random_prune(const struct ShrinkModel *model,
                                            const char *target_json,
                                            uint64_t seed,
                                            struct ShrinkModel **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SHRINK_H */
