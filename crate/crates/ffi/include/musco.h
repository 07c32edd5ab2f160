#ifndef MUSCO_H
#define MUSCO_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MuscoStatus {
  MUSCO_STATUS_OK = 0,
  MUSCO_STATUS_NULL_POINTER = 1,
  MUSCO_STATUS_INVALID_ARGUMENT = 2,
  MUSCO_STATUS_SHAPE_MISMATCH = 3,
  MUSCO_STATUS_INFEASIBLE_RANK = 4,
  MUSCO_STATUS_IO = 5,
  MUSCO_STATUS_CORRUPT_FILE = 6,
  MUSCO_STATUS_UNSUPPORTED = 7,
  MUSCO_STATUS_PANIC = 8,
} MuscoStatus;

/**
 * Dense real matrix.
 */
typedef struct MuscoMatrix MuscoMatrix;

/**
 * Network loaded from a manifest.
 */
typedef struct MuscoModel MuscoModel;

/**
 * Result of an EVBMF rank estimate.
 */
typedef struct MuscoEvbmf {
  size_t rank;
  double noise_variance;
  double threshold;
} MuscoEvbmf;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or an empty string. The
 * pointer stays valid until the next failing call on this thread.
 */
const char *musco_last_error(void);

/**
 * Copies `rows*cols` row-major values into a new matrix.
 *
 * # Safety
 * `data` must point to `rows*cols` doubles and `out` must be writable.
 */
enum MuscoStatus musco_matrix_new(size_t rows,
                                  size_t cols,
                                  const double *data,
                                  struct MuscoMatrix **out);

/**
 * # Safety
 * `m` must come from `musco_matrix_new` and not be used afterwards.
 */
void musco_matrix_free(struct MuscoMatrix *m);

/**
 * Estimates the rank of `m` by empirical variational Bayes.
 *
 * # Safety
 * `m` must be a live matrix handle and `out` writable.
 */
enum MuscoStatus musco_evbmf(const struct MuscoMatrix *m, struct MuscoEvbmf *out);

/**
 * Tucker-2 ranks that shrink a d×d conv from `c_in` to `c_out` channels
 * by `alpha`, with `r_out = floor(beta * r_in)`.
 *
 * # Safety
 * `r_out` and `r_in` must be writable.
 */
enum MuscoStatus musco_tucker2_rate_rank(size_t c_in,
                                         size_t c_out,
                                         size_t d,
                                         double alpha,
                                         double beta,
                                         size_t *r_out,
                                         size_t *r_in);

/**
 * CP rank that shrinks a d×d conv by `alpha`.
 *
 * # Safety
 * `rank` must be writable.
 */
enum MuscoStatus musco_cpd3_rate_rank(size_t c_in,
                                      size_t c_out,
                                      size_t d,
                                      double alpha,
                                      size_t *rank);

/**
 * Truncated-SVD rank that shrinks an `l_in`×`l_out` fc layer by `alpha`.
 *
 * # Safety
 * `rank` must be writable.
 */
enum MuscoStatus musco_svd_rate_rank(size_t l_in, size_t l_out, double alpha, size_t *rank);

/**
 * Interpolates between `r_init` (w = 0) and `r_extr` (w = 1).
 *
 * # Safety
 * `rank` must be writable.
 */
enum MuscoStatus musco_weakened_rank(size_t r_init, size_t r_extr, double w, size_t *rank);

/**
 * Loads a model manifest and its weight blob.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` writable.
 */
enum MuscoStatus musco_model_load(const char *path, struct MuscoModel **out);

/**
 * Writes the manifest to `path` and the weights next to it.
 *
 * # Safety
 * `model` must be a live handle and `path` a nul-terminated string.
 */
enum MuscoStatus musco_model_save(const struct MuscoModel *model, const char *path);

/**
 * # Safety
 * `model` must come from `musco_model_load` and not be used afterwards.
 */
void musco_model_free(struct MuscoModel *model);

/**
 * Weight and bias count, and multiply-accumulates for one sample.
 *
 * # Safety
 * `model` must be a live handle; `params` and `macs` writable.
 */
enum MuscoStatus musco_model_cost(const struct MuscoModel *model, uint64_t *params, uint64_t *macs);

/**
 * Values per input sample (H·W·C) and per output sample.
 *
 * # Safety
 * `model` must be a live handle; `input_len` and `output_len` writable.
 */
enum MuscoStatus musco_model_io_len(const struct MuscoModel *model,
                                    size_t *input_len,
                                    size_t *output_len);

/**
 * Forward pass over `n` NHWC samples. `output` receives `n * output_len`
 * values; `output_cap` is its capacity in doubles.
 *
 * # Safety
 * `input` must hold `n * input_len` doubles and `output` `output_cap`.
 */
enum MuscoStatus musco_model_forward(const struct MuscoModel *model,
                                     const double *input,
                                     size_t n,
                                     double *output,
                                     size_t output_cap);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MUSCO_H */
