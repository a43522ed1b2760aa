#ifndef LAC_H
#define LAC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LacStatus {
  LAC_STATUS_OK = 0,
  LAC_STATUS_NULL_POINTER = 1,
  LAC_STATUS_INVALID_ARGUMENT = 2,
  LAC_STATUS_BUFFER_TOO_SMALL = 3,
  LAC_STATUS_IO = 4,
  LAC_STATUS_FORMAT = 5,
  LAC_STATUS_INTERNAL = 6,
} LacStatus;

/**
 * Loaded model; opaque to C.
 */
typedef struct LacModel LacModel;

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *lac_last_error(void);

/**
 * Load a checkpoint into a new handle written to `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum LacStatus lac_model_load(const char *path, struct LacModel **out);

/**
 * Release a handle; null is ignored.
 *
 * # Safety
 * `m` must come from `lac_model_load` and not be used afterwards.
 */
void lac_model_free(struct LacModel *m);

/**
 * Length of a flattened scene (slots × slot width).
 *
 * # Safety
 * `m` must be a live handle and `out` writable.
 */
enum LacStatus lac_model_scene_dim(const struct LacModel *m, size_t *out);

/**
 * Draw a task prompt of `category` (0..6 in report column order) as tokens.
 * `*n_tokens` receives the prompt length even when `cap` is too small.
 *
 * # Safety
 * `m` must be a live handle; `tokens` must hold `cap` elements; `n_tokens`
 * must be writable.
 */
enum LacStatus lac_sample_task(const struct LacModel *m,
                               uint32_t category,
                               uint64_t seed,
                               uint32_t *tokens,
                               size_t cap,
                               size_t *n_tokens);

/**
 * Generate a scene for a prompt. Writes the flattened scene to `scene`
 * (`scene_len` must equal `lac_model_scene_dim`), its toy reward to
 * `*reward` and the number of latent actions to `*n_actions`. Null output
 * pointers other than `scene` are skipped.
 *
 * # Safety
 * `m` must be a live handle; `tokens` must hold `n_tokens` elements;
 * `scene` must hold `scene_len` elements.
 */
enum LacStatus lac_sample(const struct LacModel *m,
                          const uint32_t *tokens,
                          size_t n_tokens,
                          bool stochastic,
                          uint64_t seed,
                          double *scene,
                          size_t scene_len,
                          double *reward,
                          size_t *n_actions);

/**
 * Toy reward of a flattened scene against a prompt.
 *
 * # Safety
 * `m` must be a live handle; `tokens` and `scene` must hold `n_tokens` and
 * `scene_len` elements; `out` must be writable.
 */
enum LacStatus lac_reward(const struct LacModel *m,
                          const uint32_t *tokens,
                          size_t n_tokens,
                          const double *scene,
                          size_t scene_len,
                          double *out);

#endif  /* LAC_H */
