#ifndef HAMLETBENCH_H
#define HAMLETBENCH_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum HbStatus {
  HB_STATUS_OK = 0,
  HB_STATUS_NULL_POINTER = 1,
  HB_STATUS_INVALID_UTF8 = 2,
  HB_STATUS_INVALID_ARGUMENT = 3,
  HB_STATUS_IO = 4,
  HB_STATUS_CONFIG = 5,
  HB_STATUS_RUNTIME = 6,
  HB_STATUS_BUFFER_TOO_SMALL = 7,
  HB_STATUS_PANIC = 8,
} HbStatus;

/**
 * Per-episode policy state (memory buffer, frame history, timestep). Only
 * valid with the policy that created it.
 */
typedef struct HbEpisode HbEpisode;

/**
 * A loaded policy bundle.
 */
typedef struct HbPolicy HbPolicy;

/**
 * Success rates of a seeded evaluation.
 */
typedef struct HbEvalResult {
  uint32_t episodes;
  double full;
  double partial;
  double full_se;
  double mean_length;
} HbEvalResult;

/**
 * Library version as a static NUL-terminated string.
 */
const char *hb_version(void);

/**
 * Copies the calling thread's last error message into `buf` (truncated and
 * NUL-terminated when `len > 0`). Returns the full message length plus one.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t hb_last_error(char *buf, size_t len);

/**
 * Loads a policy checkpoint written by the training tools.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum HbStatus hb_policy_load(const char *path, struct HbPolicy **out);

/**
 * # Safety
 * `policy` must be null or a handle from [`hb_policy_load`] not yet freed.
 */
void hb_policy_free(struct HbPolicy *policy);

/**
 * Actions per decision, or 0 for a null handle.
 *
 * # Safety
 * `policy` must be null or a live handle.
 */
size_t hb_policy_chunk(const struct HbPolicy *policy);

/**
 * Writes the policy variant name (`single_frame`, `hamlet`, ...) into `buf`.
 *
 * # Safety
 * `policy` must be a live handle; `buf` must point to `len` writable bytes.
 */
enum HbStatus hb_policy_mode(const struct HbPolicy *policy, char *buf, size_t len);

/**
 * Starts an episode for `policy`.
 *
 * # Safety
 * `policy` must be a live handle; `out` must be writable.
 */
enum HbStatus hb_episode_new(const struct HbPolicy *policy, struct HbEpisode **out);

/**
 * # Safety
 * `episode` must be null or a handle from [`hb_episode_new`] not yet freed.
 */
void hb_episode_free(struct HbEpisode *episode);

/**
 * Environment steps the episode has been advanced by.
 *
 * # Safety
 * `episode` must be null or a live handle.
 */
size_t hb_episode_timestep(const struct HbEpisode *episode);

/**
 * One decision: `cells` holds the 49 grid tokens row-major, `proprio` the
 * normalised gripper x, y and holding flag, `instruction` its tokens.
 * Writes the chunk's action ids into `actions` and their count into
 * `written`, then advances the episode by one chunk.
 *
 * # Safety
 * Pointers must be valid for the stated lengths; `episode` must come from
 * `policy`.
 */
enum HbStatus hb_policy_act(const struct HbPolicy *policy,
                            struct HbEpisode *episode,
                            const uint8_t *cells,
                            const float *proprio,
                            const uint8_t *instruction,
                            size_t instruction_len,
                            uint8_t *actions,
                            size_t actions_cap,
                            size_t *written);

/**
 * The first observation of a seeded episode of `task`: 49 cell tokens,
 * 3 proprio values and the instruction tokens (`instruction_len` receives
 * the count).
 *
 * # Safety
 * `task` must be a NUL-terminated string; output pointers must be valid for
 * their lengths.
 */
enum HbStatus hb_env_reset(const char *task,
                           uint64_t seed,
                           uint8_t *cells,
                           float *proprio,
                           uint8_t *instruction,
                           size_t instruction_cap,
                           size_t *instruction_len);

/**
 * Runs `episodes` seeded simulator episodes of `task`.
 *
 * # Safety
 * `policy` must be a live handle, `task` a NUL-terminated string and `out`
 * writable.
 */
enum HbStatus hb_evaluate(const struct HbPolicy *policy,
                          const char *task,
                          uint32_t episodes,
                          uint64_t seed,
                          struct HbEvalResult *out);

/**
 * Checks an experiment configuration (JSON text) against the schema and
 * its cross-field rules.
 *
 * # Safety
 * `json` must be a NUL-terminated string.
 */
enum HbStatus hb_config_validate(const char *json);

#endif  /* HAMLETBENCH_H */
