#ifndef SUPFACTOR_FFI_H
#define SUPFACTOR_FFI_H

/* Generated by cbindgen from the supfactor-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Supervision variant of the linear factor model.
typedef enum SfLinearMode {
  // Scores are free per-observation variables seeing X and Y.
  SF_LINEAR_MODE_LOCAL = 0,
  // Scores are an affine encoding of X alone.
  SF_LINEAR_MODE_ENCODED = 1,
} SfLinearMode;

// Status code returned by every entry point.
typedef enum SfStatus {
  SF_STATUS_OK = 0,
  // Input values violate a data precondition.
  SF_STATUS_INVALID_DATA = 1,
  // Dimensions do not line up.
  SF_STATUS_SHAPE_ERROR = 2,
  // A parameter is outside its documented range.
  SF_STATUS_INVALID_CONFIG = 3,
  // A required linear system is numerically singular.
  SF_STATUS_SINGULAR_SYSTEM = 4,
  // A numerical routine produced no finite, usable result.
  SF_STATUS_NUMERICAL_ERROR = 5,
  // A reference optimizer failed to make progress.
  SF_STATUS_ORACLE_DIVERGED = 6,
  // The problem exceeds the documented desk-scale guard.
  SF_STATUS_SIZE_LIMIT = 7,
  // A required input file does not exist.
  SF_STATUS_MISSING_INPUT = 8,
  // The requested quantity is undefined for the given input.
  SF_STATUS_UNDEFINED = 9,
  // Filesystem failure.
  SF_STATUS_IO_ERROR = 10,
  // A required pointer argument was null.
  SF_STATUS_NULL_POINTER = 11,
  // A string argument was not valid UTF-8.
  SF_STATUS_INVALID_UTF8 = 12,
  // An internal panic was caught at the boundary.
  SF_STATUS_PANIC = 13,
} SfStatus;

// Opaque handle to a fitted linear factor model.
typedef struct SfLinearModel SfLinearModel;

// Opaque handle to a loaded supervised NMF model.
typedef struct SfNmfModel SfNmfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copy the message for the most recent failure on this thread into
// `buffer` (NUL-terminated, truncated to `capacity` bytes) and return
// the full message length in bytes, excluding the terminator. A null
// or empty buffer still returns the length, so callers can size a
// second call. The message is only meaningful after a non-OK status.
size_t sf_last_error(char *buffer, size_t capacity);

// Fit a linear factor model. `x` is p×n, `y` is q×n, both column-major
// with observations as columns; the fit centers both internally and the
// stored means are applied by the scoring and prediction calls. On
// success `*out` owns the model; release it with `sf_linear_free`.
enum SfStatus sf_linear_fit(const double *x,
                            size_t p,
                            const double *y,
                            size_t q,
                            size_t n,
                            size_t factors,
                            double mu,
                            enum SfLinearMode mode,
                            struct SfLinearModel **out);

// Release a model returned by `sf_linear_fit`. Null is a no-op.
void sf_linear_free(struct SfLinearModel *model);

// Report the model's predictor dimension, outcome dimension, and factor
// count. Any output pointer may be null to skip that value.
enum SfStatus sf_linear_dims(const struct SfLinearModel *model,
                             size_t *p,
                             size_t *q,
                             size_t *factors);

// Copy the p×factors predictor loadings W into `out` (column-major).
enum SfStatus sf_linear_loadings(const struct SfLinearModel *model, double *out);

// Copy the q×factors outcome weights D into `out` (column-major).
enum SfStatus sf_linear_outcome_weights(const struct SfLinearModel *model, double *out);

// Score new observations from predictors alone: `x` is p×n raw (not
// centered), `out` receives factors×n scores, column-major.
enum SfStatus sf_linear_encode_scores(const struct SfLinearModel *model,
                                      const double *x,
                                      size_t p,
                                      size_t n,
                                      double *out);

// Score observations using the outcome as well (`x` p×n, `y` q×n, raw).
// Defined for Local models only; an Encoded model's scores never depend
// on Y, so the call reports `SF_STATUS_INVALID_CONFIG` for it.
enum SfStatus sf_linear_scores_with_outcome(const struct SfLinearModel *model,
                                            const double *x,
                                            size_t p,
                                            const double *y,
                                            size_t q,
                                            size_t n,
                                            double *out);

// Reconstruct predictors through the factor bottleneck: `x` p×n raw in,
// `out` p×n denoised estimate (means restored).
enum SfStatus sf_linear_reconstruct(const struct SfLinearModel *model,
                                    const double *x,
                                    size_t p,
                                    size_t n,
                                    double *out);

// Predict outcomes from predictors alone: `x` p×n raw in, `out` q×n
// outcome estimate (means restored).
enum SfStatus sf_linear_predict(const struct SfLinearModel *model,
                                const double *x,
                                size_t p,
                                size_t n,
                                double *out);

// Load a supervised NMF model from a file written by the library. On
// success `*out` owns the model; release it with `sf_nmf_free`.
enum SfStatus sf_nmf_load(const char *path, struct SfNmfModel **out);

// Serialize a model to a file, overwriting any existing file.
enum SfStatus sf_nmf_save(const struct SfNmfModel *model, const char *path);

// Release a model returned by `sf_nmf_load`. Null is a no-op.
void sf_nmf_free(struct SfNmfModel *model);

// Report the model's variable count and component count. Any output
// pointer may be null to skip that value.
enum SfStatus sf_nmf_dims(const struct SfNmfModel *model, size_t *nvars, size_t *ncomponents);

// Non-negative scores for new observations (`x` p×n, `out` k×n,
// column-major). Encoded models apply their encoder; the other modes
// solve a non-negative projection against the fixed loadings.
enum SfStatus sf_nmf_encode(const struct SfNmfModel *model,
                            const double *x,
                            size_t p,
                            size_t n,
                            double *out);

// P(y = 1 | x) for each observation column of `x` (p×n); `out` receives
// n probabilities. Labels are never consulted.
enum SfStatus sf_nmf_predict_proba(const struct SfNmfModel *model,
                                   const double *x,
                                   size_t p,
                                   size_t n,
                                   double *out);

// Number of features produced by `sf_extract_features` for a channel
// count and a band-edge count: bands × (channels + channel pairs).
enum SfStatus sf_feature_count(size_t channels, size_t n_band_edges, size_t *out);

// Banded Welch power and coherence features for one window. `samples`
// is channel-major (each channel's `nsamples` values contiguous);
// `band_edges` holds `n_band_edges` ascending frequencies in Hz. The
// Welch segmentation is the library default for the window length.
// `out_len` must equal the value reported by `sf_feature_count`; the
// features hold every power value channel by channel (bands contiguous
// per channel), then every coherence value pair by pair in
// lexicographic pair order.
enum SfStatus sf_extract_features(const double *samples,
                                  size_t channels,
                                  size_t nsamples,
                                  double sample_rate_hz,
                                  const double *band_edges,
                                  size_t n_band_edges,
                                  double *out,
                                  size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SUPFACTOR_FFI_H */
