#ifndef LINTERP_H
#define LINTERP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LtStatus {
  LT_STATUS_OK = 0,
  LT_STATUS_NULL_POINTER = 1,
  LT_STATUS_INVALID_ARGUMENT = 2,
  LT_STATUS_SHAPE = 3,
  LT_STATUS_INDEX = 4,
  LT_STATUS_IO = 5,
  LT_STATUS_LOAD = 6,
  LT_STATUS_NUMERIC = 7,
  LT_STATUS_REFUSED = 8,
  LT_STATUS_INTERNAL = 9,
} LtStatus;

/*
 Interpreter captured at one reference input.
 */
typedef struct LtInterpreter LtInterpreter;

/*
 Loaded model.
 */
typedef struct LtModel LtModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the last failed call on this thread; empty after a success.
 Valid until the next call on the same thread.
 */
const char *lt_last_error_message(void);

/*
 Loads a manifest and weight blob. `weights` may be null to use the
 manifest path with a `.bin` extension.
 */
enum LtStatus lt_model_load(const char *manifest, const char *weights, struct LtModel **out);

void lt_model_free(struct LtModel *model);

/*
 Element counts of the input and output domains.
 */
enum LtStatus lt_model_dims(const struct LtModel *model, size_t *n_in, size_t *n_out);

/*
 Captures the frozen state at `x0` (input-shaped, `len` elements).
 */
enum LtStatus lt_interpreter_capture(const struct LtModel *model,
                                     const double *x0,
                                     size_t len,
                                     struct LtInterpreter **out);

void lt_interpreter_free(struct LtInterpreter *interp);

/*
 `y = F·x + r`.
 */
enum LtStatus lt_interpreter_apply(const struct LtInterpreter *interp,
                                   const double *x,
                                   size_t x_len,
                                   double *y,
                                   size_t y_len);

/*
 `y = F·x`.
 */
enum LtStatus lt_interpreter_apply_linear(const struct LtInterpreter *interp,
                                          const double *x,
                                          size_t x_len,
                                          double *y,
                                          size_t y_len);

/*
 `x = Fᵀ·y`.
 */
enum LtStatus lt_interpreter_apply_adjoint(const struct LtInterpreter *interp,
                                           const double *y,
                                           size_t y_len,
                                           double *x,
                                           size_t x_len);

enum LtStatus lt_interpreter_residual(const struct LtInterpreter *interp, double *out, size_t len);

/*
 Row `k` of `F` (input-shaped).
 */
enum LtStatus lt_interpreter_row(const struct LtInterpreter *interp,
                                 size_t k,
                                 double *out,
                                 size_t len);

/*
 Column `k` of `F` (output-shaped).
 */
enum LtStatus lt_interpreter_column(const struct LtInterpreter *interp,
                                    size_t k,
                                    double *out,
                                    size_t len);

/*
 Top-`k` singular triplets. `sigmas` holds `k` values; `v` (`k·n_in`) and
 `u` (`k·n_out`) may be null when the vectors are not wanted.
 */
enum LtStatus lt_interpreter_svd(const struct LtInterpreter *interp,
                                 size_t k,
                                 size_t steps,
                                 double momentum,
                                 uint64_t seed,
                                 double *sigmas,
                                 double *v,
                                 double *u);

/*
 Pixel discussion map for score `class` (input-shaped). Chains only.
 */
enum LtStatus lt_interpreter_pixel_discussion(const struct LtInterpreter *interp,
                                              size_t class_,
                                              double *out,
                                              size_t len);

/*
 Static name of a status code.
 */
const char *lt_status_name(enum LtStatus status);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LINTERP_H */
