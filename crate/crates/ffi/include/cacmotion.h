#ifndef CACMOTION_H
#define CACMOTION_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every fallible function.
 */
typedef enum CmStatus {
  CM_STATUS_OK = 0,
  CM_STATUS_INVALID_ARGUMENT = 1,
  CM_STATUS_IO = 2,
  CM_STATUS_NUMERIC = 3,
  CM_STATUS_NULL_POINTER = 4,
  CM_STATUS_PANIC = 5,
} CmStatus;

/**
 * A correction model plus the schedule and window it expects.
 */
typedef struct CmDenoiser CmDenoiser;

/**
 * Binary calcium mask.
 */
typedef struct CmMask CmMask;

/**
 * HU volume with voxel spacing.
 */
typedef struct CmVolume CmVolume;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *cm_last_error_message(void);

/**
 * Creates a volume. `values` holds `nx*ny*nz` HU values (x fastest) or is
 * null for an all-zero volume.
 *
 * # Safety
 * `values` must be null or point to `nx*ny*nz` doubles; `out` must be writable.
 */
enum CmStatus cm_volume_new(size_t nx,
                            size_t ny,
                            size_t nz,
                            const double *spacing,
                            const double *values,
                            struct CmVolume **out);

/**
 * # Safety
 * `v` must be null or a handle from this library not yet freed.
 */
void cm_volume_free(struct CmVolume *v);

/**
 * Writes dims (3 values) and spacing in mm (3 values); either may be null.
 *
 * # Safety
 * Non-null outputs must have room for 3 elements.
 */
enum CmStatus cm_volume_dims(const struct CmVolume *v, size_t *dims, double *spacing);

/**
 * Copies all voxel values into `out`, which must hold exactly `len = nx*ny*nz`.
 *
 * # Safety
 * `out` must point to `len` writable doubles.
 */
enum CmStatus cm_volume_copy_values(const struct CmVolume *v, double *out, size_t len);

/**
 * Reads a `.raw` volume with its JSON sidecar.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CmStatus cm_volume_load(const char *path, struct CmVolume **out);

/**
 * Writes the volume as `.raw` plus sidecar (HU units).
 *
 * # Safety
 * `path` must be a NUL-terminated string.
 */
enum CmStatus cm_volume_save(const struct CmVolume *v, const char *path);

/**
 * Creates a mask from `nx*ny*nz` bytes (nonzero = calcium).
 *
 * # Safety
 * `bits` must point to `nx*ny*nz` bytes; `out` must be writable.
 */
enum CmStatus cm_mask_new(size_t nx,
                          size_t ny,
                          size_t nz,
                          const uint8_t *bits,
                          struct CmMask **out);

/**
 * Mask of voxels at or above `threshold_hu`.
 *
 * # Safety
 * `out` must be writable.
 */
enum CmStatus cm_mask_threshold(const struct CmVolume *v, double threshold_hu, struct CmMask **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CmStatus cm_mask_load(const char *path, struct CmMask **out);

/**
 * # Safety
 * `out` must be writable.
 */
enum CmStatus cm_mask_count(const struct CmMask *m, size_t *out);

/**
 * # Safety
 * `m` must be null or a handle from this library not yet freed.
 */
void cm_mask_free(struct CmMask *m);

/**
 * Agatston score and risk grade (0 none, 1 minimal, 2 mild, 3 moderate,
 * 4 severe). `grade` may be null.
 *
 * # Safety
 * `score` must be writable; `grade` null or writable.
 */
enum CmStatus cm_agatston(const struct CmVolume *v, double *score, int *grade);

/**
 * Differentiable volume score (mm³) with sigmoid temperature `tau` (HU).
 *
 * # Safety
 * `out` must be writable.
 */
enum CmStatus cm_volume_score(const struct CmVolume *v, double tau, double *out);

/**
 * `1 − Dice` between the prediction thresholded at 130 HU and `reference`.
 *
 * # Safety
 * `out` must be writable.
 */
enum CmStatus cm_dice_loss(const struct CmVolume *pred,
                           const struct CmMask *reference,
                           double *out);

/**
 * Default 64×64×16 phantom and its calcium mask.
 *
 * # Safety
 * Both outputs must be writable.
 */
enum CmStatus cm_phantom(uint64_t seed, struct CmVolume **volume, struct CmMask **mask);

/**
 * Motion-corrupted reconstruction of `clean` using a named preset with `n_angles`
 * projections. A NaN `amplitude` keeps the preset's sampled amplitude.
 *
 * # Safety
 * `preset` must be a NUL-terminated string; `out` must be writable.
 */
enum CmStatus cm_simulate(const struct CmVolume *clean,
                          const struct CmMask *mask,
                          const char *preset,
                          size_t n_angles,
                          uint64_t seed,
                          double amplitude,
                          struct CmVolume **out);

/**
 * Detector bins used for an `n × n` slice.
 */
size_t cm_detector_bins(size_t n);

/**
 * Parallel-beam projections of an `n × n` slice at `n_angles` angles (degrees,
 * strictly increasing). `out` receives `n_angles * cm_detector_bins(n)`
 * values, angle-major.
 *
 * # Safety
 * Pointers must reference buffers of the stated lengths.
 */
enum CmStatus cm_radon(const double *slice,
                       size_t n,
                       double spacing,
                       const double *angles_deg,
                       size_t n_angles,
                       double *out,
                       size_t out_len);

/**
 * Filtered back-projection of an angle-major sinogram onto an `n × n` slice.
 * `hann` selects the Hann-windowed ramp; pixels outside the inscribed circle
 * get `outside_value`.
 *
 * # Safety
 * Pointers must reference buffers of the stated lengths; `out` holds `n * n`.
 */
enum CmStatus cm_fbp(const double *sinogram,
                     size_t n_angles,
                     size_t bins,
                     double bin_spacing,
                     const double *angles_deg,
                     size_t n,
                     bool hann,
                     double outside_value,
                     double *out);

/**
 * Denoiser predicting zero noise (correction returns the clipped input).
 *
 * # Safety
 * `out` must be writable.
 */
enum CmStatus cm_denoiser_identity(size_t k, struct CmDenoiser **out);

/**
 * Loads a trained checkpoint (`model.bin` next to `model.json`).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CmStatus cm_denoiser_load(const char *path, struct CmDenoiser **out);

/**
 * # Safety
 * `d` must be null or a handle from this library not yet freed.
 */
void cm_denoiser_free(struct CmDenoiser *d);

/**
 * Corrects a volume with the 2.5D bridge sampler. `mode`: 0 direct,
 * 1 posterior, 2 stochastic (seeded by `seed`).
 *
 * # Safety
 * `out` must be writable.
 */
enum CmStatus cm_correct(const struct CmVolume *v,
                         const struct CmDenoiser *d,
                         int mode,
                         uint64_t seed,
                         struct CmVolume **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CACMOTION_H */
