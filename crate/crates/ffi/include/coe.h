#ifndef COE_H
#define COE_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/*
 Result code of every fallible call.
 */
typedef enum CoeStatus {
  COE_STATUS_OK = 0,
  COE_STATUS_NULL_POINTER = 1,
  COE_STATUS_INVALID_UTF8 = 2,
  COE_STATUS_INVALID_ARGUMENT = 3,
  COE_STATUS_IO = 4,
  COE_STATUS_BAD_FORMAT = 5,
  COE_STATUS_NOT_FOUND = 6,
  COE_STATUS_PANIC = 7,
} CoeStatus;

/*
 Fused embedding index loaded from or built for a meme pool.
 */
typedef struct CoeIndex CoeIndex;

/*
 Dataset profile: label words, amplifier text and prompt templates.
 */
typedef struct CoeProfile CoeProfile;

/*
 One retrieval hit: row position in the index and cosine similarity.
 */
typedef struct CoeHit {
  size_t position;
  double similarity;
} CoeHit;

/*
 Outcome of label parsing.
 */
typedef struct CoeLabel {
  uint8_t prediction;
  double score;
  bool unparseable;
} CoeLabel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or NULL after a success.
 The pointer stays valid until the next call into the library on this thread.
 */
const char *coe_last_error_message(void);

/*
 Releases a string returned by the library. NULL is ignored.

 # Safety
 `s` must come from this library and not have been freed.
 */
void coe_string_free(char *s);

/*
 Loads a CIDX index file.

 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CoeStatus coe_index_load(const char *path, struct CoeIndex **out);

/*
 Builds an index from `count` already-fused rows of width `dim`, stored
 row-major in `rows`. `ids` holds `count` strings. The fusion weights are
 recorded in the index and used for nothing else.

 # Safety
 `ids` must hold `count` valid strings and `rows` `count * dim` floats.
 */
enum CoeStatus coe_index_from_rows(const char *const *ids,
                                   const float *rows,
                                   size_t count,
                                   size_t dim,
                                   float text_weight,
                                   float image_weight,
                                   bool normalize,
                                   struct CoeIndex **out);

/*
 Writes the index as a CIDX file.

 # Safety
 `index` must be a live handle and `path` a NUL-terminated string.
 */
enum CoeStatus coe_index_save(const struct CoeIndex *index, const char *path);

/*
 Number of rows; 0 for NULL.

 # Safety
 `index` must be NULL or a live handle.
 */
size_t coe_index_len(const struct CoeIndex *index);

/*
 Row width; 0 for NULL.

 # Safety
 `index` must be NULL or a live handle.
 */
size_t coe_index_dim(const struct CoeIndex *index);

/*
 Copies the id of row `position` into a new string.

 # Safety
 `index` must be a live handle; `out` must be writable.
 */
enum CoeStatus coe_index_id(const struct CoeIndex *index, size_t position, char **out);

/*
 Exact cosine top-k. `hits` must have room for `k` entries; the number
 written (min(k, rows available)) goes to `written`. Ties rank by position.
 `exclude_id` may be NULL.

 # Safety
 `query` must hold `dim` floats and `hits` `k` entries.
 */
enum CoeStatus coe_index_top_k(const struct CoeIndex *index,
                               const float *query,
                               size_t dim,
                               size_t k,
                               const char *exclude_id,
                               struct CoeHit *hits,
                               size_t *written);

/*
 Releases an index. NULL is ignored.

 # Safety
 `index` must be NULL or a live handle, not used afterwards.
 */
void coe_index_free(struct CoeIndex *index);

/*
 Weighted mix of a text and an image embedding (weights rescaled to sum to
 one), L2-normalized when `normalize` is set. Writes `dim` floats to `out`.

 # Safety
 `text`, `image` and `out` must each hold `dim` floats.
 */
enum CoeStatus coe_fuse(const float *text,
                        const float *image,
                        size_t dim,
                        float text_weight,
                        float image_weight,
                        bool normalize,
                        float *out);

/*
 Cosine similarity of two nonzero vectors, computed in double precision.

 # Safety
 `a` and `b` must each hold `dim` floats; `out` must be writable.
 */
enum CoeStatus coe_cosine(const float *a, const float *b, size_t dim, double *out);

/*
 Area under the ROC curve with half credit for ties. Labels are 0 or 1 and
 both classes must be present.

 # Safety
 `scores` and `labels` must each hold `n` entries; `out` must be writable.
 */
enum CoeStatus coe_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

/*
 Looks up a built-in profile (FHM, MAMI, HarM; case-insensitive) or, failing
 that, reads a profile JSON file at that path.

 # Safety
 `name_or_path` must be a NUL-terminated string; `out` must be writable.
 */
enum CoeStatus coe_profile_load(const char *name_or_path, struct CoeProfile **out);

/*
 Canonical profile name as a new string.

 # Safety
 `profile` must be a live handle; `out` must be writable.
 */
enum CoeStatus coe_profile_name(const struct CoeProfile *profile, char **out);

/*
 Releases a profile. NULL is ignored.

 # Safety
 `profile` must be NULL or a live handle, not used afterwards.
 */
void coe_profile_free(struct CoeProfile *profile);

/*
 Maps a model answer to a label. `first_token` (nullable) and its log
 probability, when given, turn the score into P(positive).

 # Safety
 `profile` must be a live handle, `text` a NUL-terminated string and `out`
 writable.
 */
enum CoeStatus coe_parse_label(const struct CoeProfile *profile,
                               const char *text,
                               const char *first_token,
                               double logprob,
                               struct CoeLabel *out);

/*
 Renders the final classification prompt for a meme caption. `info`
 (nullable) is the extracted evolution information from `source_count`
 neighbors; `use_amplifier` adds the profile's definition as a rule.

 # Safety
 `profile` must be a live handle, `caption` a NUL-terminated string and
 `out` writable.
 */
enum CoeStatus coe_render_final_prompt(const struct CoeProfile *profile,
                                       const char *caption,
                                       const char *info,
                                       size_t source_count,
                                       bool use_amplifier,
                                       char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COE_H */
