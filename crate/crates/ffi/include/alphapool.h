#ifndef ALPHAPOOL_H
#define ALPHAPOOL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AlphapoolStatus {
  ALPHAPOOL_STATUS_OK = 0,
  ALPHAPOOL_STATUS_NULL_POINTER = 1,
  ALPHAPOOL_STATUS_INVALID_ARGUMENT = 2,
  ALPHAPOOL_STATUS_DOMAIN = 3,
  ALPHAPOOL_STATUS_SHAPE_MISMATCH = 4,
  ALPHAPOOL_STATUS_IO = 5,
  ALPHAPOOL_STATUS_FORMAT = 6,
  ALPHAPOOL_STATUS_CHECKPOINT = 7,
  ALPHAPOOL_STATUS_CONFIG = 8,
  ALPHAPOOL_STATUS_NUMERIC = 9,
  ALPHAPOOL_STATUS_PANIC = 99,
} AlphapoolStatus;

/**
 * Model loaded from a checkpoint.
 */
typedef struct AlphapoolModel AlphapoolModel;

/**
 * State saved by [`alphapool_alpha_pool_forward`] for the backward pass.
 */
typedef struct AlphapoolPoolCache AlphapoolPoolCache;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call into this library from the same thread.
 */
const char *alphapool_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *alphapool_version(void);

/**
 * `f_alpha(z)`: `z^((1 - alpha) / 2)`, or `ln z` at `alpha = 1`.
 *
 * # Safety
 * `out` must be a valid pointer to a `double`.
 */
enum AlphapoolStatus alphapool_f_alpha(double z, double alpha, double *out);

/**
 * Alpha-integration of `n` positive values. `dydx` (length `n`) and
 * `dyda` may be null when the gradients are not wanted.
 *
 * # Safety
 * `values` must point to `n` doubles, `dydx` (if non-null) to `n` writable
 * doubles, and `y` / `dyda` (if non-null) to writable doubles.
 */
enum AlphapoolStatus alphapool_alpha_integrate(const double *values,
                                               size_t n,
                                               double alpha,
                                               double *y,
                                               double *dydx,
                                               double *dyda);

/**
 * Number of outputs of a square pool over an `n x c x h x w` tensor, or 0
 * when the geometry is invalid.
 */
size_t alphapool_pool_output_len(size_t n,
                                 size_t c,
                                 size_t h,
                                 size_t w,
                                 size_t window,
                                 size_t stride);

/**
 * Alpha-integration pooling of a row-major NCHW tensor with square
 * windows. Writes `out_len` outputs and, when `cache` is non-null, a handle
 * for [`alphapool_alpha_pool_backward`].
 *
 * # Safety
 * `x` must point to `n*c*h*w` doubles and `out` to `out_len` writable
 * doubles; `cache` must be null or a valid pointer to a handle slot.
 */
enum AlphapoolStatus alphapool_alpha_pool_forward(const double *x,
                                                  size_t n,
                                                  size_t c,
                                                  size_t h,
                                                  size_t w,
                                                  size_t window,
                                                  size_t stride,
                                                  double alpha,
                                                  double *out,
                                                  size_t out_len,
                                                  struct AlphapoolPoolCache **cache);

/**
 * Backward pass of a pooling call: `grad_x` receives dL/dx and
 * `grad_alpha` dL/dalpha for the upstream gradient `grad_out`.
 *
 * # Safety
 * `cache` must come from [`alphapool_alpha_pool_forward`]; the buffers must
 * have the lengths of that call's output and input.
 */
enum AlphapoolStatus alphapool_alpha_pool_backward(const struct AlphapoolPoolCache *cache,
                                                   const double *grad_out,
                                                   size_t grad_out_len,
                                                   double *grad_x,
                                                   size_t grad_x_len,
                                                   double *grad_alpha);

/**
 * Releases a pooling cache; null is ignored.
 *
 * # Safety
 * `cache` must be null or a handle from [`alphapool_alpha_pool_forward`]
 * that has not been freed.
 */
void alphapool_pool_cache_free(struct AlphapoolPoolCache *cache);

/**
 * Loads a checkpoint written by `alphapool train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `model` a valid pointer.
 */
enum AlphapoolStatus alphapool_model_load(const char *path_ptr, struct AlphapoolModel **model);

/**
 * Input image shape `(channels, height, width)` and class count.
 *
 * # Safety
 * `model` must be a live handle; the out pointers must be valid.
 */
enum AlphapoolStatus alphapool_model_shape(const struct AlphapoolModel *model,
                                           size_t *channels,
                                           size_t *height,
                                           size_t *width,
                                           size_t *classes);

/**
 * Predicted class of each of `n` images given as row-major floats in
 * `[0, 1]` (`n * channels * height * width` values).
 *
 * # Safety
 * `model` must be a live handle, `images` must hold the stated number of
 * floats and `labels` must have room for `n` entries.
 */
enum AlphapoolStatus alphapool_model_predict(struct AlphapoolModel *model,
                                             const float *images,
                                             size_t n,
                                             size_t *labels);

/**
 * Copies the model's alpha values (one per alpha pooling layer) into
 * `out` and stores how many there are in `count`. `out` may be null to
 * query the count.
 *
 * # Safety
 * `model` must be a live handle; `out` must have room for `capacity`
 * doubles when non-null; `count` must be valid.
 */
enum AlphapoolStatus alphapool_model_alphas(const struct AlphapoolModel *model,
                                            double *out,
                                            size_t capacity,
                                            size_t *count);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must be null or a live handle from [`alphapool_model_load`].
 */
void alphapool_model_free(struct AlphapoolModel *model);

/**
 * Trains from a config file. `data_dir` and `out_dir` override the config
 * when non-null. The final test accuracy goes to `test_acc` if non-null.
 *
 * # Safety
 * String arguments must be NUL-terminated or null (except `config_path`).
 */
enum AlphapoolStatus alphapool_train(const char *config_path,
                                     const char *data_dir,
                                     const char *out_dir,
                                     double *test_acc);

/**
 * Accuracy of a checkpoint on the test (`train = 0`) or train
 * (`train != 0`) split of the dataset it was trained on.
 *
 * # Safety
 * `checkpoint` and `data_dir` must be NUL-terminated; `accuracy` valid.
 */
enum AlphapoolStatus alphapool_eval(const char *checkpoint,
                                    const char *data_dir,
                                    int32_t train,
                                    double *accuracy);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ALPHAPOOL_H */
