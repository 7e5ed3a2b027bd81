#ifndef DPSYNTH_H
#define DPSYNTH_H

/* Generated by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function. Anything nonzero means
 * failure; `dps_last_error` returns a message for the calling thread.
 */
typedef enum DpsStatus {
  DPS_STATUS_OK = 0,
  DPS_STATUS_NULL_POINTER = 1,
  DPS_STATUS_INVALID_UTF8 = 2,
  DPS_STATUS_IO = 3,
  DPS_STATUS_PARSE = 4,
  DPS_STATUS_INVALID_ARGUMENT = 5,
  DPS_STATUS_OVER_BUDGET = 6,
  DPS_STATUS_INTERNAL = 7,
} DpsStatus;

/**
 * Opaque dataset handle.
 */
typedef struct DpsDataset DpsDataset;

/**
 * Opaque schema handle.
 */
typedef struct DpsSchema DpsSchema;

/**
 * Combined inference result, mirror of the library's CombinedInference.
 * `df` < 0 encodes a normal reference distribution (infinite df).
 */
typedef struct DpsCombined {
  double q_bar;
  double u_bar;
  double b_m;
  double variance;
  double df;
  double ci_lo;
  double ci_hi;
} DpsCombined;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static string.
 */
const char *dps_version(void);

/**
 * Message for the most recent failure on this thread. The pointer is valid
 * until the next failing call on the same thread.
 */
const char *dps_last_error(void);

/**
 * Load a schema from a JSON file. Returns null on failure.
 */
struct DpsSchema *dps_schema_load(const char *path);

void dps_schema_free(struct DpsSchema *schema);

/**
 * Load a CSV dataset against a schema. Returns null on failure.
 */
struct DpsDataset *dps_dataset_load(const char *path, const struct DpsSchema *schema);

void dps_dataset_free(struct DpsDataset *ds);

/**
 * Number of rows, or 0 for a null handle.
 */
uintptr_t dps_dataset_rows(const struct DpsDataset *ds);

/**
 * Number of columns, or 0 for a null handle.
 */
uintptr_t dps_dataset_cols(const struct DpsDataset *ds);

/**
 * Generate m synthetic copies of `ds` and write syn_1.csv .. syn_m.csv plus
 * manifest.json into `out_dir`. `method` is one of histogram | bayesnet |
 * gaussian | gaussian-ppd; `epsilon` may be infinity for the non-private
 * sentinel.
 */
enum DpsStatus dps_synthesize(const struct DpsDataset *ds,
                              const char *method,
                              double epsilon,
                              uintptr_t m,
                              uint64_t seed,
                              const char *out_dir);

/**
 * Pool m (q_i, u_i) pairs under a variance rule. `rule` is one of
 * tp | ts | tsppd | naive.
 */
enum DpsStatus dps_combine(const double *q,
                           const double *u,
                           uintptr_t m,
                           const char *rule,
                           double level,
                           struct DpsCombined *out);

/**
 * Evaluate an estimand on each of `n_paths` synthetic CSVs and pool the
 * results. `paths` is an array of `n_paths` C strings.
 */
enum DpsStatus dps_infer(const char *const *paths,
                         uintptr_t n_paths,
                         const struct DpsSchema *schema,
                         const char *estimand,
                         const char *rule,
                         double level,
                         struct DpsCombined *out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* DPSYNTH_H */
