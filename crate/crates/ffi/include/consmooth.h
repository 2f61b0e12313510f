#ifndef CONSMOOTH_H
#define CONSMOOTH_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  CS_STATUS_OK = 0,
  CS_STATUS_NULL_POINTER = 1,
  CS_STATUS_INVALID_ARGUMENT = 2,
  CS_STATUS_SHAPE = 3,
  CS_STATUS_NON_FINITE = 4,
  CS_STATUS_FORMAT = 5,
  CS_STATUS_CHECKSUM = 6,
  CS_STATUS_VERSION = 7,
  CS_STATUS_CONFIG = 8,
  CS_STATUS_IO = 9,
  CS_STATUS_PANIC = 10,
} CsStatus;

/**
 * A base classifier to be smoothed: an analytic halfspace or a trained model.
 */
typedef struct CsClassifier CsClassifier;

/**
 * Discretized noise levels `t_0 < ... < t_N`.
 */
typedef struct CsSchedule CsSchedule;

typedef struct {
  double sigma;
  /**
   * Noise draws used to select the top class.
   */
  uint64_t n0;
  /**
   * Noise draws used to bound its probability.
   */
  uint64_t n;
  double alpha;
  /**
   * Draws evaluated per classifier call.
   */
  uintptr_t batch;
  uint64_t seed;
} CsCertifyParams;

typedef struct {
  uint64_t sample_id;
  uintptr_t label;
  /**
   * Predicted class, or -1 on abstention.
   */
  int64_t predicted;
  double pa_lower;
  double radius;
  double ms;
  bool correct;
} CsCertifyRecord;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Length in bytes of the last error message on this thread, excluding the
 * terminating NUL.
 */
uintptr_t cs_last_error_length(void);

/**
 * Copies the last error message, NUL-terminated and truncated to `capacity`
 * bytes, and returns its full length.
 *
 * # Safety
 * `buffer` must be null or point to `capacity` writable bytes.
 */
uintptr_t cs_last_error_message(char *buffer, uintptr_t capacity);

double cs_normal_cdf(double z);

/**
 * # Safety
 * `out` must point to a writable `double`.
 */
CsStatus cs_inv_normal_cdf(double p, double *out);

/**
 * One-sided Clopper-Pearson lower bound on a binomial proportion.
 *
 * # Safety
 * `out` must point to a writable `double`.
 */
CsStatus cs_clopper_pearson_lower(uint64_t successes, uint64_t trials, double alpha, double *out);

/**
 * # Safety
 * `out` must point to a writable `double`.
 */
CsStatus cs_radius_two_class(double sigma, double p_a, double p_b, double *out);

/**
 * # Safety
 * `out` must point to writable storage for a handle pointer.
 */
CsStatus cs_schedule_new(double t_max,
                         double t_min,
                         uintptr_t intervals,
                         double rho,
                         CsSchedule **out);

/**
 * Number of intervals `N`, or 0 for a null handle.
 *
 * # Safety
 * `schedule` must be null or a live handle.
 */
uintptr_t cs_schedule_intervals(const CsSchedule *schedule);

/**
 * `t_n` for `0 <= n <= N`.
 *
 * # Safety
 * `schedule` must be a live handle and `out` a writable `double`.
 */
CsStatus cs_schedule_time(const CsSchedule *schedule, uintptr_t n, double *out);

/**
 * # Safety
 * `schedule` must be null or a handle not yet freed.
 */
void cs_schedule_free(CsSchedule *schedule);

/**
 * Class 1 where `w . x + b >= 0`, else class 0.
 *
 * # Safety
 * `weights` must point to `dim` readable doubles and `out` to writable
 * storage for a handle pointer.
 */
CsStatus cs_halfspace_new(const double *weights, uintptr_t dim, double bias, CsClassifier **out);

/**
 * Loads the model stored in a pre-training or fine-tuning checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string and `out` writable storage
 * for a handle pointer.
 */
CsStatus cs_classifier_load(const char *path, CsClassifier **out);

/**
 * Input length expected by the classifier, or 0 for a null handle.
 *
 * # Safety
 * `classifier` must be null or a live handle.
 */
uintptr_t cs_classifier_input_len(const CsClassifier *classifier);

/**
 * # Safety
 * `classifier` must be null or a live handle.
 */
uintptr_t cs_classifier_num_classes(const CsClassifier *classifier);

/**
 * # Safety
 * `classifier` must be null or a handle not yet freed.
 */
void cs_classifier_free(CsClassifier *classifier);

CsCertifyParams cs_certify_params_default(void);

/**
 * Certifies one input. Identical arguments give identical records apart
 * from `ms`.
 *
 * # Safety
 * `classifier` must be a live handle, `x` must point to `len` readable
 * doubles, `params` to a readable struct and `out` to a writable record.
 */
CsStatus cs_certify(const CsClassifier *classifier,
                    const double *x,
                    uintptr_t len,
                    uintptr_t label,
                    uint64_t sample_id,
                    const CsCertifyParams *params,
                    CsCertifyRecord *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CONSMOOTH_H */
