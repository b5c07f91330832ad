#ifndef BNLAB_H
#define BNLAB_H

/* Generated by cbindgen; edit the Rust source instead. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every FFI call.
 */
typedef enum {
  BN_STATUS_OK = 0,
  /**
   * A required pointer was NULL or a length overflowed.
   */
  BN_STATUS_NULL_ARGUMENT = 1,
  /**
   * Shapes or batch sizes are unusable.
   */
  BN_STATUS_DIMENSION = 2,
  BN_STATUS_CONFIG = 3,
  /**
   * Operation is invalid for the object's current state.
   */
  BN_STATUS_STATE = 4,
  /**
   * Malformed checkpoint or dataset bytes.
   */
  BN_STATUS_FORMAT = 5,
  BN_STATUS_IO = 6,
  /**
   * A numeric verification failed.
   */
  BN_STATUS_VERIFICATION = 7,
  /**
   * Non-finite values where finite ones are required.
   */
  BN_STATUS_NUMERIC = 8,
  /**
   * An internal panic was caught at the boundary.
   */
  BN_STATUS_PANIC = 9,
} BnStatus;

/**
 * Opaque stored network. Create with `bn_network_load`, destroy with
 * `bn_network_free`.
 */
typedef struct BnNetwork BnNetwork;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. Never NULL; empty
 * before any failure. The pointer is invalidated by the next failing call.
 */
const char *bn_last_error_message(void);

/**
 * Training-mode transform of an `m` by `d` batch. Writes the normalized
 * output to `y` (`m*d`); optionally writes the per-column batch mean and
 * biased variance to `mu_out` / `var_out` (`d` each, may be NULL).
 *
 * # Safety
 * Pointers must reference buffers of the stated lengths.
 */
BnStatus bn_forward_train_f64(const double *x,
                              size_t m,
                              size_t d,
                              const double *gamma,
                              const double *beta,
                              double eps,
                              double *y,
                              double *mu_out,
                              double *var_out);

/**
 * Gradients of the training-mode transform. Recomputes the forward pass
 * from `x`, then backpropagates `dy` (`m*d`) into `dx` (`m*d`), `dgamma`
 * and `dbeta` (`d` each).
 *
 * # Safety
 * Pointers must reference buffers of the stated lengths.
 */
BnStatus bn_backward_f64(const double *x,
                         const double *dy,
                         size_t m,
                         size_t d,
                         const double *gamma,
                         const double *beta,
                         double eps,
                         double *dx,
                         double *dgamma,
                         double *dbeta);

/**
 * Inference-mode transform using fixed population statistics (`mean`,
 * `var`, `d` each). Writes `y` (`m*d`).
 *
 * # Safety
 * Pointers must reference buffers of the stated lengths.
 */
BnStatus bn_forward_inference_f64(const double *x,
                                  size_t m,
                                  size_t d,
                                  const double *gamma,
                                  const double *beta,
                                  const double *mean,
                                  const double *var,
                                  double eps,
                                  double *y);

/**
 * Collapses the inference transform into `y = scale * x + shift`,
 * writing `scale` and `shift` (`d` each).
 *
 * # Safety
 * Pointers must reference buffers of the stated lengths.
 */
BnStatus bn_fold_f64(const double *gamma,
                     const double *beta,
                     const double *mean,
                     const double *var,
                     size_t d,
                     double eps,
                     double *scale,
                     double *shift);

/**
 * Loads a checkpoint into a fresh handle stored to `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be a valid pointer.
 */
BnStatus bn_network_load(const char *path, BnNetwork **out);

/**
 * Writes the handle's network to a checkpoint file.
 *
 * # Safety
 * `net` must be a live handle; `path` a NUL-terminated string.
 */
BnStatus bn_network_save(const BnNetwork *net, const char *path);

/**
 * Expected number of input columns.
 *
 * # Safety
 * `net` must be a live handle; `out` a valid pointer.
 */
BnStatus bn_network_input_dim(const BnNetwork *net, size_t *out);

/**
 * Number of output columns produced per example.
 *
 * # Safety
 * `net` must be a live handle; `out` a valid pointer.
 */
BnStatus bn_network_output_dim(const BnNetwork *net, size_t *out);

/**
 * Forward pass in the network's stored mode. `x` is `m` by `d` row-major
 * with `d = bn_network_input_dim`; `y` must hold `m * bn_network_output_dim`
 * values (`y_len` is checked).
 *
 * # Safety
 * Pointers must reference buffers of the stated lengths.
 */
BnStatus bn_network_forward(const BnNetwork *net,
                            const double *x,
                            size_t m,
                            size_t d,
                            double *y,
                            size_t y_len);

/**
 * Folds every BN layer into a neighboring affine, storing a new handle to
 * `*out`. Requires an inference-mode network.
 *
 * # Safety
 * `net` must be a live handle; `out` a valid pointer.
 */
BnStatus bn_network_fold(const BnNetwork *net, BnNetwork **out);

/**
 * Releases a handle. NULL is a no-op.
 *
 * # Safety
 * `net` must be NULL or a pointer returned by this library, not yet freed.
 */
void bn_network_free(BnNetwork *net);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* BNLAB_H */
