#ifndef UNGER_H
#define UNGER_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum UngerStatus {
  UNGER_STATUS_OK = 0,
  UNGER_STATUS_NULL_ARGUMENT = 1,
  UNGER_STATUS_INVALID_UTF8 = 2,
  UNGER_STATUS_IO = 3,
  UNGER_STATUS_PARSE = 4,
  UNGER_STATUS_FORMAT = 5,
  UNGER_STATUS_JSON = 6,
  UNGER_STATUS_CONFIG = 7,
  UNGER_STATUS_INVALID = 8,
  UNGER_STATUS_SHAPE = 9,
  UNGER_STATUS_NON_FINITE = 10,
  UNGER_STATUS_OUT_OF_RANGE = 11,
  UNGER_STATUS_PANIC = 12,
} UngerStatus;

/**
 * A ranked list of `(item token, score)` pairs.
 */
typedef struct UngerRecommendations UngerRecommendations;

/**
 * A trained run loaded for serving.
 */
typedef struct UngerRecommender UngerRecommender;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *unger_version(void);

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into the library from the same thread.
 */
const char *unger_last_error(void);

/**
 * Runs one pipeline subcommand (`synth-data`, `train-stage1`, ...) with an
 * optional JSON config file (null for defaults) into `out_dir`.
 *
 * # Safety
 * String arguments must be null or valid NUL-terminated strings.
 */
enum UngerStatus unger_run_command(const char *command,
                                   const char *config_path,
                                   const char *out_dir);

/**
 * Loads a trained run directory. On success `*out` owns a new handle.
 *
 * # Safety
 * `run_dir` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum UngerStatus unger_recommender_open(const char *run_dir, struct UngerRecommender **out);

/**
 * Releases a recommender. Null is ignored.
 *
 * # Safety
 * `handle` must come from [`unger_recommender_open`] and not be used again.
 */
void unger_recommender_free(struct UngerRecommender *handle);

/**
 * Number of items in the catalogue, or 0 for a null handle.
 *
 * # Safety
 * `handle` must be null or a live recommender.
 */
size_t unger_recommender_n_items(const struct UngerRecommender *handle);

/**
 * Top-`k` items after `history` (item tokens, oldest first) with beam
 * width `beam >= k`. On success `*out` owns a new list.
 *
 * # Safety
 * `handle` must be live, `history` must point to `n_history` valid strings
 * and `out` must be a valid pointer.
 */
enum UngerStatus unger_recommend(const struct UngerRecommender *handle,
                                 const char *const *history,
                                 size_t n_history,
                                 size_t beam,
                                 size_t k,
                                 struct UngerRecommendations **out);

/**
 * Top-`k` items for a user of the loaded corpus at its test split.
 *
 * # Safety
 * As for [`unger_recommend`]; `user` must be a valid string.
 */
enum UngerStatus unger_recommend_user(const struct UngerRecommender *handle,
                                      const char *user,
                                      size_t beam,
                                      size_t k,
                                      struct UngerRecommendations **out);

/**
 * Length of a list, or 0 for null.
 *
 * # Safety
 * `list` must be null or live.
 */
size_t unger_recommendations_len(const struct UngerRecommendations *list);

/**
 * Item token at `index`; valid while the list lives. Null when out of range.
 *
 * # Safety
 * `list` must be null or live.
 */
const char *unger_recommendations_item(const struct UngerRecommendations *list, size_t index);

/**
 * Score at `index` written to `*score`.
 *
 * # Safety
 * `list` must be null or live and `score` a valid pointer.
 */
enum UngerStatus unger_recommendations_score(const struct UngerRecommendations *list,
                                             size_t index,
                                             double *score);

/**
 * Releases a list. Null is ignored.
 *
 * # Safety
 * `list` must come from a recommend call and not be used again.
 */
void unger_recommendations_free(struct UngerRecommendations *list);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UNGER_H */
