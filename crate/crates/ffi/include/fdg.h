#ifndef FDG_H
#define FDG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum FdgStatus {
  FDG_STATUS_OK = 0,
  FDG_STATUS_NULL_POINTER = 1,
  FDG_STATUS_INVALID_UTF8 = 2,
  FDG_STATUS_CONFIG = 3,
  FDG_STATUS_NUMERIC = 4,
  FDG_STATUS_SHAPE = 5,
  FDG_STATUS_IO = 6,
  FDG_STATUS_FORMAT = 7,
  FDG_STATUS_OTHER = 8,
  FDG_STATUS_PANIC = 9,
} FdgStatus;

/**
 * Synthetic multi-domain corpus.
 */
typedef struct FdgCorpus FdgCorpus;

/**
 * Model parameters (a trained global model or a loaded checkpoint).
 */
typedef struct FdgModel FdgModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *fdg_last_error(void);

/**
 * Generate the corpus described by a flat TOML config (null or "" for defaults).
 *
 * # Safety
 * `config` is null or a NUL-terminated string; `out` is a valid pointer.
 */
enum FdgStatus fdg_corpus_generate(const char *config, struct FdgCorpus **out);

/**
 * Number of samples, or 0 for a null handle.
 *
 * # Safety
 * `corpus` is null or a live handle.
 */
size_t fdg_corpus_len(const struct FdgCorpus *corpus);

/**
 * Number of domains, or 0 for a null handle.
 *
 * # Safety
 * `corpus` is null or a live handle.
 */
size_t fdg_corpus_num_domains(const struct FdgCorpus *corpus);

/**
 * Copy sample `index` into `image` (`3·S·S` floats, CHW) and its label into `label`.
 *
 * # Safety
 * `corpus` is a live handle; `image` holds `image_len` floats; `label` is valid.
 */
enum FdgStatus fdg_corpus_sample(const struct FdgCorpus *corpus,
                                 size_t index,
                                 float *image,
                                 size_t image_len,
                                 size_t *label);

/**
 * # Safety
 * `corpus` is null or a handle not yet freed.
 */
void fdg_corpus_free(struct FdgCorpus *corpus);

/**
 * Run one federation (config mode, seed and target_domain) on `corpus`.
 * Writes the global model to `out_model` and the final target-domain accuracy
 * to `target_acc` (which may be null).
 *
 * # Safety
 * `config` is null or NUL-terminated; `corpus` is live; `out_model` is valid.
 */
enum FdgStatus fdg_federation_run(const char *config,
                                  const struct FdgCorpus *corpus,
                                  struct FdgModel **out_model,
                                  double *target_acc);

/**
 * Eval-mode accuracy of `model` on every sample of `domain`.
 *
 * # Safety
 * `model` and `corpus` are live handles; `accuracy` is valid.
 */
enum FdgStatus fdg_model_domain_accuracy(const struct FdgModel *model,
                                         const struct FdgCorpus *corpus,
                                         size_t domain,
                                         double *accuracy);

/**
 * Number of output classes, or 0 for a null handle.
 *
 * # Safety
 * `model` is null or a live handle.
 */
size_t fdg_model_num_classes(const struct FdgModel *model);

/**
 * Floats per input image (`channels · size · size`), or 0 for a null handle.
 *
 * # Safety
 * `model` is null or a live handle.
 */
size_t fdg_model_image_len(const struct FdgModel *model);

/**
 * Eval-mode logits for `n` images. `images` holds `n · fdg_model_image_len`
 * floats (NCHW); `logits` receives `n · fdg_model_num_classes` floats.
 *
 * # Safety
 * Buffers hold at least the stated number of elements.
 */
enum FdgStatus fdg_model_predict(const struct FdgModel *model,
                                 const float *images,
                                 size_t n,
                                 float *logits,
                                 size_t logits_len);

/**
 * Write a checkpoint file.
 *
 * # Safety
 * `model` is live; `path` is NUL-terminated.
 */
enum FdgStatus fdg_model_save(const struct FdgModel *model, const char *path);

/**
 * Read a checkpoint file.
 *
 * # Safety
 * `path` is NUL-terminated; `out` is valid.
 */
enum FdgStatus fdg_model_load(const char *path, struct FdgModel **out);

/**
 * # Safety
 * `model` is null or a handle not yet freed.
 */
void fdg_model_free(struct FdgModel *model);

/**
 * Channel-wise mean and standard deviation of one `[C,H,W]` feature map.
 * `mu` and `sigma` each receive `channels` floats.
 *
 * # Safety
 * `feature` holds `channels·height·width` floats; `mu`, `sigma` hold `channels`.
 */
enum FdgStatus fdg_style_stats(const float *feature,
                               size_t channels,
                               size_t height,
                               size_t width,
                               float *mu,
                               float *sigma);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FDG_H */
