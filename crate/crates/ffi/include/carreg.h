#ifndef CARREG_H
#define CARREG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CarStatus {
  CAR_STATUS_OK = 0,
  CAR_STATUS_NULL_POINTER = 1,
  CAR_STATUS_INVALID_ARGUMENT = 2,
  CAR_STATUS_SHAPE = 3,
  CAR_STATUS_FORMAT = 4,
  CAR_STATUS_IO = 5,
  CAR_STATUS_NON_FINITE = 6,
  CAR_STATUS_CONFIG = 7,
  CAR_STATUS_PANIC = 8,
} CarStatus;

/**
 * Opaque model handle.
 */
typedef struct CarModelHandle CarModelHandle;

typedef struct CarMetrics {
  double dice;
  /**
   * NaN when no label occurs in both masks.
   */
  double hd95;
  double folding_pct;
  double grad_jac;
} CarMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *car_version(void);

/**
 * Message of the last failed call on this thread; empty if none. Valid
 * until the next failing call on the same thread.
 */
const char *car_last_error(void);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CarStatus car_model_load(const char *path, struct CarModelHandle **out);

/**
 * Creates a freshly initialised model with the default architecture.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum CarStatus car_model_init(uint64_t seed, struct CarModelHandle **out);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `handle` must come from this library and not be used afterwards.
 */
void car_model_free(struct CarModelHandle *handle);

/**
 * Number of resolution levels; image extents must be multiples of
 * `2^levels`. Returns 0 for a null handle.
 *
 * # Safety
 * `handle` must be null or valid.
 */
uint32_t car_model_levels(const struct CarModelHandle *handle);

/**
 * Registers `moving` to `fixed`. Writes `2·H·W` displacements to
 * `field_out` and, if non-null, `H·W` warped pixels to `warped_out`.
 *
 * # Safety
 * Buffers must hold the stated number of elements.
 */
enum CarStatus car_register(const struct CarModelHandle *handle,
                            const double *moving,
                            const double *fixed,
                            size_t height,
                            size_t width,
                            double *field_out,
                            double *warped_out);

/**
 * Scores a field: warps `mask_moving` and compares it with `mask_fixed`.
 *
 * # Safety
 * Masks hold `H·W` labels, `field` holds `2·H·W` values, `out` is valid.
 */
enum CarStatus car_metrics(const uint32_t *mask_moving,
                           const uint32_t *mask_fixed,
                           const double *field,
                           size_t height,
                           size_t width,
                           struct CarMetrics *out);

/**
 * Renders `img` in one random contrast chosen by `seed`.
 *
 * # Safety
 * `img` and `out` hold `H·W` values.
 */
enum CarStatus car_augment(const double *img,
                           size_t height,
                           size_t width,
                           uint64_t seed,
                           uint32_t kernel_size,
                           uint32_t depth,
                           double *out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* CARREG_H */
