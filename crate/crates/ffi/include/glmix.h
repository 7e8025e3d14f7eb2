#ifndef GLMIX_H
#define GLMIX_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result codes. Values 1 to 5 match the command-line exit codes.
 */
typedef enum GlmixStatus {
  GLMIX_STATUS_OK = 0,
  GLMIX_STATUS_IO = 1,
  GLMIX_STATUS_USAGE = 2,
  GLMIX_STATUS_PARSE = 3,
  GLMIX_STATUS_FIT = 4,
  GLMIX_STATUS_NUMERICAL = 5,
  GLMIX_STATUS_NULL_POINTER = 6,
  GLMIX_STATUS_INTERNAL = 7,
} GlmixStatus;

typedef enum GlmixFamily {
  GLMIX_FAMILY_NORMAL = 0,
  GLMIX_FAMILY_LOGIT = 1,
} GlmixFamily;

/*
 Opaque dataset handle.
 */
typedef struct GlmixDataset GlmixDataset;

/*
 Opaque test report handle.
 */
typedef struct GlmixReport GlmixReport;

/*
 Tuning for [`glmix_run_test`]. Obtain defaults from
 [`glmix_test_config_default`]. A null `beta_grid` means the default grid.
 */
typedef struct GlmixTestConfig {
  size_t k;
  double c;
  double lambda;
  const double *beta_grid;
  size_t beta_grid_len;
  size_t mc_draws;
  size_t restarts;
  uint64_t seed;
} GlmixTestConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the last failed call on this thread, or null. The pointer
 stays valid until the next library call on the same thread.
 */
const char *glmix_last_error_message(void);

/*
 Library version as a static string.
 */
const char *glmix_version(void);

/*
 Frees a string returned by this library. Null is ignored.

 # Safety
 `s` must come from this library and not have been freed.
 */
void glmix_string_free(char *s);

/*
 Builds a dataset from row-major `x` (`n * p`) and `z` (`n * q`).
 `family` is a [`GlmixFamily`] value; `sigma` is used by the normal
 family only.

 # Safety
 Buffers must hold the stated number of values; `out` must be writable.
 */
enum GlmixStatus glmix_dataset_new(int32_t family,
                                   double sigma,
                                   const double *y,
                                   size_t n,
                                   const double *x,
                                   size_t p,
                                   const double *z,
                                   size_t q,
                                   struct GlmixDataset **out);

/*
 # Safety
 `data` must come from [`glmix_dataset_new`] and not have been freed.
 */
void glmix_dataset_free(struct GlmixDataset *data);

/*
 Default test settings.
 */
struct GlmixTestConfig glmix_test_config_default(void);

/*
 Tests `m0` subgroups against `2 * m0`. A null `config` uses defaults.

 # Safety
 `data` must be a live dataset handle, `config` null or valid, `out`
 writable.
 */
enum GlmixStatus glmix_run_test(const struct GlmixDataset *data,
                                size_t m0,
                                const struct GlmixTestConfig *config,
                                struct GlmixReport **out);

/*
 # Safety
 `report` must come from [`glmix_run_test`] and not have been freed.
 */
void glmix_report_free(struct GlmixReport *report);

/*
 # Safety
 `report` must be live and `statistic` writable.
 */
enum GlmixStatus glmix_report_statistic(const struct GlmixReport *report, double *statistic);

/*
 # Safety
 `report` must be live and `pvalue` writable.
 */
enum GlmixStatus glmix_report_pvalue(const struct GlmixReport *report, double *pvalue);

/*
 Copies the chi-bar weights into `buf`. `len` receives the number of
 weights; pass a null `buf` to query it.

 # Safety
 `report` must be live, `len` writable, and `buf` null or holding
 `capacity` values.
 */
enum GlmixStatus glmix_report_weights(const struct GlmixReport *report,
                                      double *buf,
                                      size_t capacity,
                                      size_t *len);

/*
 Full report as JSON. Free the result with [`glmix_string_free`].

 # Safety
 `report` must be live and `json` writable.
 */
enum GlmixStatus glmix_report_to_json(const struct GlmixReport *report, char **json);

/*
 Maximizes `2 v.w - v' Q v` over `v >= 0` for a `d x d` row-major
 positive definite `q`. Writes the maximizer `v` (length `d`) and, if
 `objective` is not null, the maximum.

 # Safety
 `q` holds `d * d` values, `w` and `v` hold `d`.
 */
enum GlmixStatus glmix_nnqp_solve(const double *q,
                                  size_t d,
                                  const double *w,
                                  double *v,
                                  double *objective);

/*
 Upper tail at `t` of the chi-bar-square mixture with weights
 `weights[0..len]` (weight `s` on `chi2_s`).

 # Safety
 `weights` holds `len` values and `pvalue` is writable.
 */
enum GlmixStatus glmix_chibar_pvalue(double t, const double *weights, size_t len, double *pvalue);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GLMIX_H */
