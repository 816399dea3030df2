#ifndef MFDELAY_H
#define MFDELAY_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every exported function.
 */
typedef enum {
  MFD_STATUS_OK = 0,
  MFD_STATUS_NULL_POINTER = 1,
  MFD_STATUS_INVALID_UTF8 = 2,
  MFD_STATUS_CONFIG = 3,
  MFD_STATUS_DIMENSION = 4,
  MFD_STATUS_ARGUMENT = 5,
  MFD_STATUS_EVALUATION = 6,
  MFD_STATUS_DIVERGENCE = 7,
  MFD_STATUS_RANK_DEFICIENT = 8,
  MFD_STATUS_UNSUPPORTED = 9,
  MFD_STATUS_FIT = 10,
  MFD_STATUS_IO = 11,
  MFD_STATUS_JSON = 12,
  MFD_STATUS_OUT_OF_RANGE = 13,
  MFD_STATUS_BUFFER_TOO_SMALL = 14,
  MFD_STATUS_PANIC = 15,
} MfdStatus;

/**
 * A simulated particle ensemble together with its cost estimate.
 */
typedef struct MfdEnsemble MfdEnsemble;

/**
 * One parsed and validated experiment.
 */
typedef struct MfdExperiment MfdExperiment;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *mfd_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mfd_version(void);

/**
 * Number of experiments in a JSON configuration document.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
MfdStatus mfd_config_count(const char *json, size_t *out);

/**
 * Parses experiment `index` of a JSON configuration document.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer. On
 * success `*out` owns a handle to release with [`mfd_experiment_free`].
 */
MfdStatus mfd_experiment_from_json(const char *json, size_t index, MfdExperiment **out);

/**
 * Releases an experiment handle. Null is ignored.
 *
 * # Safety
 * `exp` must come from [`mfd_experiment_from_json`] and not be used again.
 */
void mfd_experiment_free(MfdExperiment *exp);

/**
 * Writes the configuration digest (64 hex digits and a NUL) into `buf`.
 *
 * # Safety
 * `exp` must be a live handle and `buf` must hold `len` bytes.
 */
MfdStatus mfd_experiment_digest(const MfdExperiment *exp, char *buf, size_t len);

/**
 * Overrides the seed of an experiment.
 *
 * # Safety
 * `exp` must be a live handle.
 */
MfdStatus mfd_experiment_set_seed(MfdExperiment *exp, uint64_t seed);

/**
 * Simulates the experiment's reference control.
 *
 * # Safety
 * `exp` must be a live handle and `out` a valid pointer. On success `*out`
 * owns a handle to release with [`mfd_ensemble_free`].
 */
MfdStatus mfd_simulate(const MfdExperiment *exp, MfdEnsemble **out);

/**
 * Releases an ensemble handle. Null is ignored.
 *
 * # Safety
 * `ens` must come from [`mfd_simulate`] and not be used again.
 */
void mfd_ensemble_free(MfdEnsemble *ens);

/**
 * Number of particles, time steps and state components.
 *
 * # Safety
 * `ens` must be a live handle; each output pointer must be valid or null.
 */
MfdStatus mfd_ensemble_shape(const MfdEnsemble *ens, size_t *particles, size_t *steps, size_t *n);

/**
 * Copies the mean head path, `(steps + 1) * n` values in step-major order.
 *
 * # Safety
 * `ens` must be a live handle and `out` must hold `len` doubles.
 */
MfdStatus mfd_ensemble_mean_path(const MfdEnsemble *ens, double *out, size_t len);

/**
 * Copies the head path of one particle, `(steps + 1) * n` values.
 *
 * # Safety
 * `ens` must be a live handle and `out` must hold `len` doubles.
 */
MfdStatus mfd_ensemble_particle_path(const MfdEnsemble *ens,
                                     size_t particle,
                                     double *out,
                                     size_t len);

/**
 * Monte Carlo estimate of the cost and its standard error.
 *
 * # Safety
 * `ens` must be a live handle; `mean` and `stderr` must be valid pointers.
 */
MfdStatus mfd_ensemble_cost(const MfdEnsemble *ens, double *mean, double *stderr);

/**
 * Runs a named pipeline (`simulate`, `orders`, `adjoint`, `duality`,
 * `tensor`, `smp-check`, `cost-expansion`) and returns its records as a
 * JSON array. `*pass` is 1 when every record passes.
 *
 * # Safety
 * `exp` must be a live handle, `pipeline` a NUL-terminated string and
 * `json_out`, `pass` valid pointers. `*json_out` must be released with
 * [`mfd_string_free`].
 */
MfdStatus mfd_run_pipeline(const MfdExperiment *exp,
                           const char *pipeline,
                           char **json_out,
                           int32_t *pass);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used again.
 */
void mfd_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MFDELAY_H */
