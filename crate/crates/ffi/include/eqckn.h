#ifndef EQCKN_H
#define EQCKN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum EcknStatus {
  ECKN_STATUS_OK = 0,
  ECKN_STATUS_NULL_POINTER = 1,
  ECKN_STATUS_INVALID_ARGUMENT = 2,
  ECKN_STATUS_IO = 3,
  ECKN_STATUS_NUMERICAL = 4,
  ECKN_STATUS_UNSUPPORTED = 5,
  ECKN_STATUS_BUFFER_TOO_SMALL = 6,
  ECKN_STATUS_PANIC = 7,
} EcknStatus;

/**
 * A discretized group grid.
 */
typedef struct EcknGroup EcknGroup;

/**
 * A fitted network.
 */
typedef struct EcknNetwork EcknNetwork;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *eckn_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *eckn_version(void);

/**
 * SE(2) grid: `height × width` pixels times `n_theta` angles.
 */
enum EcknStatus eckn_group_se2_new(uintptr_t height,
                                   uintptr_t width,
                                   uintptr_t n_theta,
                                   struct EcknGroup **out);

/**
 * Equiangular sphere grid with `n_beta` rings of `n_phi` points.
 */
enum EcknStatus eckn_group_s2_new(uintptr_t n_beta, uintptr_t n_phi, struct EcknGroup **out);

/**
 * Number of grid elements.
 *
 * # Safety
 * `group` must come from a `eckn_group_*_new` call and not be freed.
 */
enum EcknStatus eckn_group_len(const struct EcknGroup *group, uintptr_t *out);

/**
 * Releases a group; null is ignored.
 *
 * # Safety
 * `group` must be null or a live handle; it must not be used afterwards.
 */
void eckn_group_free(struct EcknGroup *group);

/**
 * `K(x, y)` for a kernel named like the config syntax (`exponential`,
 * `arccos1`, `rbf:<bandwidth>`, `rbf_alpha:<a>`, `poly:<d>`).
 *
 * # Safety
 * `x` and `y` must point to `dim` doubles; `kernel` must be NUL-terminated.
 */
enum EcknStatus eckn_kernel_eval(const char *kernel,
                                 const double *x,
                                 const double *y,
                                 uintptr_t dim,
                                 double *out);

/**
 * Loads a network saved by `eqckn fit` (directory or manifest path).
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be writable.
 */
enum EcknStatus eckn_network_load(const char *path, struct EcknNetwork **out);

/**
 * Releases a network; null is ignored.
 *
 * # Safety
 * `net` must be null or a live handle; it must not be used afterwards.
 */
void eckn_network_free(struct EcknNetwork *net);

/**
 * Length of the vector written by [`eckn_network_represent`].
 *
 * # Safety
 * `net` must be a live handle.
 */
enum EcknStatus eckn_network_output_len(const struct EcknNetwork *net, uintptr_t *out);

/**
 * Globally pooled representation of a grayscale image (row-major,
 * values in `[0, 1]`). On an S² network the image must already be sampled
 * on the `n_beta × n_phi` grid.
 *
 * # Safety
 * `pixels` must hold `height * width` doubles and `out` `out_len` doubles.
 */
enum EcknStatus eckn_network_represent(const struct EcknNetwork *net,
                                       const double *pixels,
                                       uintptr_t height,
                                       uintptr_t width,
                                       double *out,
                                       uintptr_t out_len);

/**
 * `‖Φ(L_g x) − L_g Φ(x)‖ / ‖Φ(x)‖` for the SE(2) element `(tx, ty, theta)`.
 *
 * # Safety
 * `pixels` must hold `height * width` doubles.
 */
enum EcknStatus eckn_network_equivariance_error(const struct EcknNetwork *net,
                                                const double *pixels,
                                                uintptr_t height,
                                                uintptr_t width,
                                                double tx,
                                                double ty,
                                                double theta,
                                                double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EQCKN_H */
