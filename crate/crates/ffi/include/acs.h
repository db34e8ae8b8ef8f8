#ifndef ACS_H
#define ACS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  ACS_STATUS_OK = 0,
  ACS_STATUS_NULL_POINTER = 1,
  ACS_STATUS_INVALID_UTF8 = 2,
  ACS_STATUS_BUFFER_TOO_SMALL = 3,
  ACS_STATUS_DIMENSION = 10,
  ACS_STATUS_CONFIG = 11,
  ACS_STATUS_STATE = 12,
  ACS_STATUS_INPUT = 13,
  ACS_STATUS_FORMAT = 14,
  ACS_STATUS_DOMAIN = 15,
  ACS_STATUS_RUN = 16,
  ACS_STATUS_IO = 17,
  ACS_STATUS_PANIC = 99,
} AcsStatus;

typedef enum {
  ACS_STRATEGY_COSINE = 0,
  ACS_STRATEGY_FIXED = 1,
  ACS_STRATEGY_LINEAR = 2,
  ACS_STRATEGY_SQRT = 3,
  ACS_STRATEGY_QUADRATIC = 4,
  ACS_STRATEGY_EVS_ONLY = 5,
  ACS_STRATEGY_DS_ONLY = 6,
} AcsStrategy;

/**
 * Opaque run configuration handle.
 */
typedef struct AcsConfig AcsConfig;

/**
 * Opaque dataset handle.
 */
typedef struct AcsDataset AcsDataset;

/**
 * Opaque model handle.
 */
typedef struct AcsModel AcsModel;

/**
 * Opaque finished-run handle.
 */
typedef struct AcsRun AcsRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null if there was none.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *acs_last_error_message(void);

/**
 * Fake-quantizes `v` with step `scale`.
 *
 * # Safety
 * `out_value` must be a valid pointer to an `f64`.
 */
AcsStatus acs_quantize(double v, uint32_t bits, bool signed_, double scale, double *out_value);

/**
 * Straight-through gradient of `upstream` at real value `v`.
 *
 * # Safety
 * `out_value` must be a valid pointer to an `f64`.
 */
AcsStatus acs_ste_gradient(double v,
                           double upstream,
                           uint32_t bits,
                           bool signed_,
                           double scale,
                           double *out_value);

/**
 * Max-abs scale for `values` at the given bit width.
 *
 * # Safety
 * `values` must point to `len` doubles; `out_scale` must be valid.
 */
AcsStatus acs_calibrate_scale(const double *values,
                              size_t len,
                              uint32_t bits,
                              bool signed_,
                              double *out_scale);

/**
 * Error-vector score between a prediction and a label distribution.
 *
 * # Safety
 * `p` and `y` must each point to `len` doubles; `out_value` must be valid.
 */
AcsStatus acs_evs(const double *p, const double *y, size_t len, double *out_value);

/**
 * Disagreement score between a student and a teacher distribution.
 *
 * # Safety
 * `p` and `p_teacher` must each point to `len` doubles; `out_value` must be valid.
 */
AcsStatus acs_ds(const double *p, const double *p_teacher, size_t len, double *out_value);

/**
 * Annealing coefficient at epoch `t` of `total`; `strategy` is an
 * `AcsStrategy` value.
 *
 * # Safety
 * `out_value` must be a valid pointer to an `f64`.
 */
AcsStatus acs_beta(size_t t, size_t total, uint32_t strategy, double *out_value);

/**
 * `β·evs + (1−β)·ds`, clamped between the two scores.
 */
double acs_score(double d_evs, double d_ds, double beta);

/**
 * Number of samples kept at `fraction` of `n`.
 */
size_t acs_coreset_size(double fraction, size_t n);

/**
 * Ids of the top `fraction` of `scores` (index = sample id), ties to the
 * lower id, written in ascending order.
 *
 * # Safety
 * `scores` must point to `n` doubles; `out_ids` to `cap` slots; `out_len` must be valid.
 */
AcsStatus acs_select_topk(const double *scores,
                          size_t n,
                          double fraction,
                          size_t *out_ids,
                          size_t cap,
                          size_t *out_len);

/**
 * Percentage of `a`'s ids also in `b`; both must have equal size.
 *
 * # Safety
 * `a` and `b` must point to `a_len` and `b_len` ids; `out_value` must be valid.
 */
AcsStatus acs_coreset_overlap(const size_t *a,
                              size_t a_len,
                              const size_t *b,
                              size_t b_len,
                              double *out_value);

/**
 * Fraction of `noisy` ids that appear in `pruned`.
 *
 * # Safety
 * `pruned` and `noisy` must point to their lengths in ids; `out_value` must be valid.
 */
AcsStatus acs_noisy_recall(const size_t *pruned,
                           size_t pruned_len,
                           const size_t *noisy,
                           size_t noisy_len,
                           double *out_value);

/**
 * Gaussian-blob dataset.
 *
 * # Safety
 * `out_dataset` must be a valid pointer; release the result with `acs_dataset_free`.
 */
AcsStatus acs_dataset_synthetic(size_t classes,
                                size_t dims,
                                size_t per_class,
                                double spread,
                                uint64_t seed,
                                AcsDataset **out_dataset);

/**
 * Loads a dataset in the native binary format.
 *
 * # Safety
 * `path` must be a nul-terminated string; `out_dataset` must be valid.
 */
AcsStatus acs_dataset_load(const char *path, AcsDataset **out_dataset);

/**
 * Number of samples, or 0 for a null handle.
 *
 * # Safety
 * `dataset` must be null or a live handle.
 */
size_t acs_dataset_len(const AcsDataset *dataset);

/**
 * Feature dimension, or 0 for a null handle.
 *
 * # Safety
 * `dataset` must be null or a live handle.
 */
size_t acs_dataset_dims(const AcsDataset *dataset);

/**
 * Copies the labels into `out_labels`.
 *
 * # Safety
 * `dataset` must be a live handle; `out_labels` must hold `cap` slots; `out_len` must be valid.
 */
AcsStatus acs_dataset_labels(const AcsDataset *dataset,
                             size_t *out_labels,
                             size_t cap,
                             size_t *out_len);

/**
 * # Safety
 * `dataset` must be null or a handle not yet freed.
 */
void acs_dataset_free(AcsDataset *dataset);

/**
 * Parses a TOML run configuration.
 *
 * # Safety
 * `text` must be a nul-terminated string; `out_config` must be valid.
 */
AcsStatus acs_config_parse(const char *text, AcsConfig **out_config);

/**
 * Reads and parses a TOML run configuration file.
 *
 * # Safety
 * `path` must be a nul-terminated string; `out_config` must be valid.
 */
AcsStatus acs_config_load(const char *path, AcsConfig **out_config);

/**
 * Overrides the coreset fraction.
 *
 * # Safety
 * `config` must be a live handle.
 */
AcsStatus acs_config_set_fraction(AcsConfig *config, double fraction);

/**
 * Overrides the master seed.
 *
 * # Safety
 * `config` must be a live handle.
 */
AcsStatus acs_config_set_seed(AcsConfig *config, uint64_t seed);

/**
 * # Safety
 * `config` must be null or a handle not yet freed.
 */
void acs_config_free(AcsConfig *config);

/**
 * Runs quantization-aware training. Nothing is written to disk.
 *
 * # Safety
 * `config` must be a live handle; `out_run` must be valid.
 */
AcsStatus acs_run_qat(const AcsConfig *config, AcsRun **out_run);

/**
 * Test accuracy after the last epoch, or NaN for a null handle.
 *
 * # Safety
 * `run` must be null or a live handle.
 */
double acs_run_final_test_acc(const AcsRun *run);

/**
 * Epochs run, or 0 for a null handle.
 *
 * # Safety
 * `run` must be null or a live handle.
 */
size_t acs_run_epochs(const AcsRun *run);

/**
 * Number of selection rounds, or 0 for a null handle.
 *
 * # Safety
 * `run` must be null or a live handle.
 */
size_t acs_run_rounds(const AcsRun *run);

/**
 * Coreset ids chosen at selection round `round`.
 *
 * # Safety
 * `run` must be a live handle; `out_ids` must hold `cap` slots; `out_len` must be valid.
 */
AcsStatus acs_run_coreset(const AcsRun *run,
                          size_t round,
                          size_t *out_ids,
                          size_t cap,
                          size_t *out_len);

/**
 * Metrics CSV as UTF-8 bytes. `out_len` receives the byte length, excluding
 * the trailing nul that is written when it fits.
 *
 * # Safety
 * `run` must be a live handle; `buf` must hold `cap` bytes; `out_len` must be valid.
 */
AcsStatus acs_run_metrics_csv(const AcsRun *run, char *buf, size_t cap, size_t *out_len);

/**
 * Takes the trained student out of a run. The run stays valid.
 *
 * # Safety
 * `run` must be a live handle; `out_model` must be valid.
 */
AcsStatus acs_run_model(const AcsRun *run, AcsModel **out_model);

/**
 * # Safety
 * `run` must be null or a handle not yet freed.
 */
void acs_run_free(AcsRun *run);

/**
 * Loads a model checkpoint.
 *
 * # Safety
 * `path` must be a nul-terminated string; `out_model` must be valid.
 */
AcsStatus acs_model_load(const char *path, AcsModel **out_model);

/**
 * Class probabilities for one input. `quantized` selects fake-quantized
 * weights (and activations) instead of the real-valued ones.
 *
 * # Safety
 * `model` must be a live handle; `x` must point to `dims` doubles; `out_probs`
 * must hold `cap` slots; `out_len` must be valid.
 */
AcsStatus acs_model_predict(const AcsModel *model,
                            const double *x,
                            size_t dims,
                            bool quantized,
                            double *out_probs,
                            size_t cap,
                            size_t *out_len);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void acs_model_free(AcsModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ACS_H */
