#ifndef BOWRANK_H
#define BOWRANK_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum BwStatus {
  BW_STATUS_OK = 0,
  BW_STATUS_NULL_ARGUMENT = 1,
  BW_STATUS_INVALID_UTF8 = 2,
  BW_STATUS_IO = 3,
  BW_STATUS_PARSE = 4,
  BW_STATUS_INVALID_DATA = 5,
  BW_STATUS_CONFIG = 6,
  BW_STATUS_CHECKPOINT = 7,
  BW_STATUS_DEGENERATE = 8,
  BW_STATUS_DIVERGED = 9,
  BW_STATUS_PANIC = 10,
} BwStatus;

// BM25 inverted index.
typedef struct BwIndex BwIndex;

// Trained cross-encoder of either precision.
typedef struct BwModel BwModel;

// Tokenizer vocabulary.
typedef struct BwVocab BwVocab;

// Mean metrics of a run: NDCG@10, MAP, Recall@100 and MRR@10.
typedef struct BwMetrics {
  double ndcg_at_10;
  double map;
  double recall_at_100;
  double mrr_at_10;
  // Queries with at least one relevant document.
  size_t n_queries;
  // Judged queries without any relevant document.
  size_t n_skipped;
} BwMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or NULL. The pointer stays
// valid until the next failing call on the same thread.
const char *bw_last_error(void);

// Releases a string returned by this library.
//
// # Safety
// `s` must come from this library and not have been freed.
void bw_string_free(char *s);

// Loads a vocabulary file (one token per line).
//
// # Safety
// `path` must be a valid C string and `out` writable.
enum BwStatus bw_vocab_load(const char *path, struct BwVocab **out);

// Number of tokens, specials included; 0 for NULL.
//
// # Safety
// `vocab` must be NULL or a live handle.
size_t bw_vocab_len(const struct BwVocab *vocab);

// # Safety
// `vocab` must be NULL or a live handle, not used afterwards.
void bw_vocab_free(struct BwVocab *vocab);

// Tokenizes `text`, applies `mode` (`natural`, `sort` or
// `shuffle:<seed>`; NULL means natural) with example key `key`, and
// writes the space-joined tokens to `*out`.
//
// # Safety
// Pointers must be valid; `key` may be NULL (empty key).
enum BwStatus bw_perturb_text(const struct BwVocab *vocab,
                              const char *text,
                              const char *mode,
                              const char *key,
                              char **out);

// Loads a checkpoint.
//
// # Safety
// `path` must be a valid C string and `out` writable.
enum BwStatus bw_model_load(const char *path, struct BwModel **out);

// # Safety
// `model` must be NULL or a live handle, not used afterwards.
void bw_model_free(struct BwModel *model);

// Scores a (query, passage) pair after perturbing it with `mode` under
// example key `key`. Writes the relevance probability to `*prob` and the
// logit margin (the ranking score) to `*margin`; either may be NULL.
//
// # Safety
// Handles and strings must be valid; `mode` and `key` may be NULL.
enum BwStatus bw_model_score(const struct BwModel *model,
                             const struct BwVocab *vocab,
                             const char *query,
                             const char *passage,
                             const char *mode,
                             const char *key,
                             double *prob,
                             double *margin);

// Builds a BM25 index over a collection file (`id<TAB>text`).
//
// # Safety
// `collection_path` must be a valid C string and `out` writable.
enum BwStatus bw_index_build(const char *collection_path, struct BwIndex **out);

// # Safety
// `path` must be a valid C string and `out` writable.
enum BwStatus bw_index_load(const char *path, struct BwIndex **out);

// # Safety
// `index` must be a live handle and `path` a valid C string.
enum BwStatus bw_index_save(const struct BwIndex *index, const char *path);

// Number of indexed documents; 0 for NULL.
//
// # Safety
// `index` must be NULL or a live handle.
size_t bw_index_num_docs(const struct BwIndex *index);

// # Safety
// `index` must be NULL or a live handle, not used afterwards.
void bw_index_free(struct BwIndex *index);

// Retrieves the top `k` documents for every query of `queries_path` and
// writes a TREC run to `run_path`.
//
// # Safety
// `index` must be a live handle and the paths valid C strings.
enum BwStatus bw_index_retrieve(const struct BwIndex *index,
                                const char *queries_path,
                                size_t k,
                                double k1,
                                double b,
                                const char *run_path);

// Evaluates a TREC run against qrels with default cutoffs and relevance
// threshold 1.
//
// # Safety
// Paths must be valid C strings and `out` writable.
enum BwStatus bw_evaluate(const char *run_path, const char *qrels_path, struct BwMetrics *out);

// Linear CKA of two row-major matrices with `n` rows each (`dx` and `dy`
// columns).
//
// # Safety
// `x` must hold `n * dx` values, `y` `n * dy` values, `out` be writable.
enum BwStatus bw_cka_linear(const double *x,
                            const double *y,
                            size_t n,
                            size_t dx,
                            size_t dy,
                            double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BOWRANK_H */
