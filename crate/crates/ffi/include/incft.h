#ifndef INCFT_H
#define INCFT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Split mode selector for unit-based calls.
#define INCFT_MODE_INTRA 0

#define INCFT_MODE_INTER 1

// Result of every fallible call.
typedef enum IncftStatus {
  INCFT_STATUS_OK = 0,
  // A required pointer argument was null.
  INCFT_STATUS_NULL_POINTER = 1,
  INCFT_STATUS_INVALID_ARGUMENT = 2,
  // File system error.
  INCFT_STATUS_IO = 3,
  // Checkpoint failed to parse or its CRC did not verify.
  INCFT_STATUS_CHECKPOINT = 4,
  // Corpus is malformed or its digest did not verify.
  INCFT_STATUS_CORPUS = 5,
  // Configuration could not be parsed or is invalid.
  INCFT_STATUS_CONFIG = 6,
  // Tensor or buffer sizes do not match.
  INCFT_STATUS_SHAPE = 7,
  // Requested units do not exist or overlap.
  INCFT_STATUS_PLAN = 8,
  // The library panicked; the handle involved should be discarded.
  INCFT_STATUS_PANIC = 9,
  INCFT_STATUS_INTERNAL = 10,
} IncftStatus;

// A loaded or generated session corpus.
typedef struct IncftCorpus IncftCorpus;

// A network with its parameters, as stored in a checkpoint.
typedef struct IncftModel IncftModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the last failure on the calling thread, or an empty
// string. Valid until the next library call on this thread.
const char *incft_last_error(void);

// Library version as a static NUL-terminated string.
const char *incft_version(void);

// Frees a string returned by the library. Null is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void incft_string_free(char *s);

// Loads a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum IncftStatus incft_model_load(const char *path, struct IncftModel **out);

// Writes the model as a checkpoint file.
//
// # Safety
// `model` must be a live handle; `path` a NUL-terminated string.
enum IncftStatus incft_model_save(const struct IncftModel *model, const char *path);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from this library and not have been freed.
void incft_model_free(struct IncftModel *model);

// Input shape `channels × height × width` and class count of a model.
//
// # Safety
// `model` must be a live handle; output pointers must be writable.
enum IncftStatus incft_model_shape(const struct IncftModel *model,
                                   uint32_t *out_channels,
                                   uint32_t *out_height,
                                   uint32_t *out_width,
                                   uint32_t *out_classes);

// Number of fine-tune phases applied to the model (0 after initial training).
//
// # Safety
// `model` must be a live handle; `out` writable.
enum IncftStatus incft_model_phase(const struct IncftModel *model, uint32_t *out);

// Runs `count` images (`count × C × H × W` floats in `[0, 1]`, row-major)
// through the model. Writes `count × classes` logits to `out_logits` when it
// is non-null and the argmax class of each image to `out_classes` when that is
// non-null.
//
// # Safety
// Buffers must hold at least the stated number of elements.
enum IncftStatus incft_model_predict(const struct IncftModel *model,
                                     const float *pixels,
                                     size_t pixels_len,
                                     size_t count,
                                     float *out_logits,
                                     size_t logits_len,
                                     uint32_t *out_classes);

// Fraction of correctly classified images among the given units of `corpus`
// (sessions in inter mode, rounds of `session` in intra mode).
//
// # Safety
// Handles must be live; `units` must hold `units_len` values.
enum IncftStatus incft_model_evaluate(const struct IncftModel *model,
                                      const struct IncftCorpus *corpus,
                                      uint32_t mode,
                                      uint32_t session,
                                      const uint32_t *units,
                                      size_t units_len,
                                      double *out_accuracy);

// Trains a fresh default network on the given units, using the
// `[experiment]` settings of `config_toml` (null for defaults).
//
// # Safety
// `corpus` must be live; `units` must hold `units_len` values; `out` writable.
enum IncftStatus incft_model_train(const struct IncftCorpus *corpus,
                                   const char *config_toml,
                                   uint32_t mode,
                                   uint32_t session,
                                   const uint32_t *units,
                                   size_t units_len,
                                   uint64_t seed,
                                   struct IncftModel **out);

// Runs the next fine-tune phase on `model` in place. With the same seed this
// reproduces the corresponding phase of an experiment run.
//
// # Safety
// Handles must be live and `model` not shared; `units` must hold `units_len` values.
enum IncftStatus incft_model_finetune(struct IncftModel *model,
                                      const struct IncftCorpus *corpus,
                                      const char *config_toml,
                                      uint32_t mode,
                                      uint32_t session,
                                      const uint32_t *units,
                                      size_t units_len,
                                      uint64_t seed);

// Generates a synthetic corpus from the `[corpus]` settings of `config_toml`
// (null for defaults).
//
// # Safety
// `config_toml` must be null or NUL-terminated; `out` writable.
enum IncftStatus incft_corpus_generate(const char *config_toml, struct IncftCorpus **out);

// Loads a corpus directory and verifies its manifest digest.
//
// # Safety
// `dir` must be NUL-terminated; `out` writable.
enum IncftStatus incft_corpus_load(const char *dir, struct IncftCorpus **out);

// Writes the corpus as PGM files plus a manifest.
//
// # Safety
// `corpus` must be live; `dir` NUL-terminated.
enum IncftStatus incft_corpus_save(const struct IncftCorpus *corpus, const char *dir);

// Releases a corpus. Null is ignored.
//
// # Safety
// `corpus` must come from this library and not have been freed.
void incft_corpus_free(struct IncftCorpus *corpus);

// Session count, rounds per session and total image count.
//
// # Safety
// `corpus` must be live; output pointers writable.
enum IncftStatus incft_corpus_counts(const struct IncftCorpus *corpus,
                                     uint32_t *out_sessions,
                                     uint32_t *out_rounds,
                                     uint64_t *out_images);

// Content digest (64 hex characters) as a new string; free with
// [`incft_string_free`].
//
// # Safety
// `corpus` must be live; `out` writable.
enum IncftStatus incft_corpus_digest(const struct IncftCorpus *corpus, char **out);

// Runs the cross-validated experiment described by `config_toml` (null for
// defaults) on `corpus` and returns the results document as JSON; free it
// with [`incft_string_free`].
//
// # Safety
// `corpus` must be live; `out_json` writable.
enum IncftStatus incft_experiment_run(const struct IncftCorpus *corpus,
                                      const char *config_toml,
                                      char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* INCFT_H */
