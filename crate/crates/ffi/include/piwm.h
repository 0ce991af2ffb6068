#ifndef PIWM_H
#define PIWM_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * `mode` argument of [`piwm_mask`].
 */
#define PIWM_MASK_HARD 0

#define PIWM_MASK_SOFT 1

typedef enum PiwmStatus {
  PIWM_STATUS_OK = 0,
  PIWM_STATUS_NULL_POINTER = 1,
  PIWM_STATUS_INVALID_ARGUMENT = 2,
  PIWM_STATUS_IO = 3,
  PIWM_STATUS_FORMAT = 4,
  PIWM_STATUS_TERMINAL = 5,
  PIWM_STATUS_BUFFER_TOO_SMALL = 6,
  PIWM_STATUS_INTERNAL = 7,
} PiwmStatus;

/**
 * Loaded denoiser, shareable between rollouts.
 */
typedef struct PiwmModel PiwmModel;

/**
 * Autoregressive rollout bound to a model.
 */
typedef struct PiwmRollout PiwmRollout;

/**
 * Simulator world.
 */
typedef struct PiwmSim PiwmSim;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty if none. Valid
 * until the next failing call on the same thread.
 */
const char *piwm_last_error(void);

/**
 * Library version, static string.
 */
const char *piwm_version(void);

/**
 * Frame size of the default simulator.
 */
enum PiwmStatus piwm_frame_dims(uint32_t *h, uint32_t *w, uint32_t *c);

enum PiwmStatus piwm_sim_new(uint64_t seed, struct PiwmSim **out);

void piwm_sim_free(struct PiwmSim *sim);

/**
 * Advances one step. Returns `PIWM_STATUS_TERMINAL` once the ego has collided.
 */
enum PiwmStatus piwm_sim_step(struct PiwmSim *sim, uint8_t action_code);

enum PiwmStatus piwm_sim_collided(const struct PiwmSim *sim, bool *out);

enum PiwmStatus piwm_sim_render(const struct PiwmSim *sim, uint8_t *out, size_t len);

enum PiwmStatus piwm_model_load(const char *path, struct PiwmModel **out);

void piwm_model_free(struct PiwmModel *model);

enum PiwmStatus piwm_model_info(const struct PiwmModel *model,
                                uint32_t *history_len,
                                uint32_t *mask_channels,
                                uint64_t *params);

/**
 * Starts a rollout from the simulator seeded with `seed`, warmed up with
 * IDLE steps to fill the history. The model handle may be freed afterwards.
 */
enum PiwmStatus piwm_rollout_new(const struct PiwmModel *model,
                                 uint64_t seed,
                                 bool warm_start,
                                 struct PiwmRollout **out);

void piwm_rollout_free(struct PiwmRollout *rollout);

/**
 * Generates the next frame for `action_code` into `out` (RGB bytes).
 */
enum PiwmStatus piwm_rollout_step(struct PiwmRollout *rollout,
                                  uint8_t action_code,
                                  uint8_t *out,
                                  size_t len);

/**
 * Conditioning mask of an RGB frame, `h × w` floats in `[0, 1]`.
 */
enum PiwmStatus piwm_mask(const uint8_t *rgb,
                          uint32_t h,
                          uint32_t w,
                          uint32_t mode,
                          float *out,
                          size_t len);

/**
 * Nearest-rank percentile of `n` values.
 */
enum PiwmStatus piwm_percentile(const double *values, size_t n, double p, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PIWM_H */
