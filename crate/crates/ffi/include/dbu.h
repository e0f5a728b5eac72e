#ifndef DBU_H
#define DBU_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

// Result of a call. `DBU_OK` is zero; the rest mirror the core error kinds.
typedef enum DbuStatus {
  DBU_OK = 0,
  DBU_DOMAIN = 1,
  DBU_SHAPE = 2,
  DBU_NUMERIC = 3,
  DBU_INDEX = 4,
  DBU_CONTRACT = 5,
  DBU_TRAINING = 6,
  DBU_METRIC = 7,
  DBU_PARSE = 8,
  DBU_CONFIG = 9,
  DBU_FORMAT = 10,
  DBU_MISSING_ARTIFACTS = 11,
  DBU_IO = 12,
  // A required pointer was null or a string was not UTF-8.
  DBU_INVALID_ARGUMENT = 13,
  // The library panicked; the handle involved should not be reused.
  DBU_PANIC = 14,
} DbuStatus;

typedef enum DbuMeasure {
  DBU_DIFF_ENTROPY = 0,
  DBU_MUTUAL_INFO = 1,
  // Scored as `-alpha0`.
  DBU_PRECISION = 2,
} DbuMeasure;

typedef enum DbuAttackMethod {
  DBU_FGSM = 0,
  DBU_PGD = 1,
  DBU_NOISE = 2,
} DbuAttackMethod;

typedef enum DbuLossTarget {
  DBU_CROSS_ENTROPY = 0,
  DBU_DIFF_ENTROPY_TARGET = 1,
  DBU_MUTUAL_INFO_TARGET = 2,
  DBU_PRECISION_TARGET = 3,
} DbuLossTarget;

typedef enum DbuNorm {
  DBU_L2 = 0,
  DBU_LINF = 1,
} DbuNorm;

// Opaque model handle.
typedef struct DbuModel DbuModel;

// Attack settings. Zero `pgd_steps` or `noise_samples` take the defaults;
// a non-positive `pgd_step_size` uses `2.5 * radius / pgd_steps`.
typedef struct DbuAttack {
  enum DbuAttackMethod method;
  enum DbuLossTarget loss_target;
  // Nonzero to minimize the target instead of maximizing it.
  int32_t minimize;
  enum DbuNorm norm;
  double radius;
  size_t pgd_steps;
  double pgd_step_size;
  size_t noise_samples;
} DbuAttack;

// Message of the last failed call on this thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *dbu_last_error(void);

// Library version as a static NUL-terminated string.
const char *dbu_version(void);

// Loads a model container written by `dbu train`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum DbuStatus dbu_model_load(const char *path, struct DbuModel **out);

// Releases a handle from [`dbu_model_load`]. Null is ignored.
//
// # Safety
// `model` must come from [`dbu_model_load`] and not be used afterwards.
void dbu_model_free(struct DbuModel *model);

// Number of input features, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t dbu_model_input_dim(const struct DbuModel *model);

// Number of classes, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t dbu_model_num_classes(const struct DbuModel *model);

// Concentrations for `rows` inputs of `input_dim` features each, written
// to `out` (`rows x num_classes`).
//
// # Safety
// `x` must hold `rows * input_dim` values and `out` room for
// `rows * num_classes`.
enum DbuStatus dbu_model_alphas(const struct DbuModel *model,
                                const double *x,
                                size_t rows,
                                double *out);

// Predicted class per input.
//
// # Safety
// `x` must hold `rows * input_dim` values and `out` room for `rows`.
enum DbuStatus dbu_model_predict(const struct DbuModel *model,
                                 const double *x,
                                 size_t rows,
                                 size_t *out);

// Uncertainty score per input; higher means more uncertain.
//
// # Safety
// `x` must hold `rows * input_dim` values and `out` room for `rows`.
enum DbuStatus dbu_model_scores(const struct DbuModel *model,
                                enum DbuMeasure measure,
                                const double *x,
                                size_t rows,
                                double *out);

// Attacks every input. `labels` may be null unless the target is
// cross-entropy. Writes the perturbed inputs to `out_x` and, if not null,
// the achieved objective per row to `out_achieved`. `seed` drives the
// noise attack only.
//
// # Safety
// `x` and `out_x` must hold `rows * input_dim` values; `labels` and
// `out_achieved`, when not null, `rows` values.
enum DbuStatus dbu_attack(const struct DbuModel *model,
                          const struct DbuAttack *attack,
                          const double *x,
                          const size_t *labels,
                          size_t rows,
                          uint64_t seed,
                          double *out_x,
                          double *out_achieved);

// Median-smoothing certificates. For input `i` and radius `j` the bounds
// land at index `i * n_radii + j` of the three outputs; unattainable
// bounds are infinite.
//
// # Safety
// `x` must hold `rows * input_dim` values, `radii` `n_radii` values, and
// each output `rows * n_radii` values.
enum DbuStatus dbu_certify(const struct DbuModel *model,
                           enum DbuMeasure measure,
                           double sigma,
                           size_t n_samples,
                           double conf_alpha,
                           const double *x,
                           size_t rows,
                           const double *radii,
                           size_t n_radii,
                           uint64_t seed,
                           double *out_lower,
                           double *out_median,
                           double *out_upper);

#endif  /* DBU_H */
