#ifndef LVCE_H
#define LVCE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum LvceStatus {
  LVCE_STATUS_OK = 0,
  LVCE_STATUS_INVALID_ARGUMENT = 1,
  LVCE_STATUS_SHAPE = 2,
  LVCE_STATUS_EMPTY_REGION = 3,
  LVCE_STATUS_DEGENERATE_RANGE = 4,
  LVCE_STATUS_DEGENERATE_VARIANCE = 5,
  LVCE_STATUS_FORMAT = 6,
  LVCE_STATUS_REGISTRATION = 7,
  LVCE_STATUS_TRAINING_DIVERGENCE = 8,
  LVCE_STATUS_DEPENDENCY = 9,
  LVCE_STATUS_IO = 10,
  LVCE_STATUS_NULL_POINTER = 11,
  LVCE_STATUS_PANIC = 12,
} LvceStatus;

/**
 * A trained V-Net loaded from a checkpoint.
 */
typedef struct LvceModel LvceModel;

/**
 * A study bound to its output directory.
 */
typedef struct LvceStudy LvceStudy;

/**
 * A 3D scalar volume.
 */
typedef struct LvceVolume LvceVolume;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *lvce_version(void);

/**
 * Message of the last failed call on this thread (empty after a success).
 * Valid until the next call into the library from the same thread.
 */
const char *lvce_last_error_message(void);

/**
 * Create a volume from `len = dims[0]*dims[1]*dims[2]` values in
 * x-fastest order.
 *
 * # Safety
 * `dims` and `spacing` point to 3 values, `data` to `len` values.
 */
enum LvceStatus lvce_volume_new(const size_t *dims,
                                const double *spacing,
                                const double *data,
                                size_t len,
                                struct LvceVolume **out);

/**
 * # Safety
 * `vol` is null or a handle from this library not yet freed.
 */
void lvce_volume_free(struct LvceVolume *vol);

/**
 * # Safety
 * `vol` is a live handle; `out_dims` points to 3 writable values.
 */
enum LvceStatus lvce_volume_dims(const struct LvceVolume *vol, size_t *out_dims);

/**
 * Copy the voxel values into `out`, which must hold exactly the voxel count.
 *
 * # Safety
 * `vol` is a live handle; `out` points to `len` writable values.
 */
enum LvceStatus lvce_volume_copy_data(const struct LvceVolume *vol, double *out, size_t len);

/**
 * # Safety
 * `path` is a NUL-terminated UTF-8 string.
 */
enum LvceStatus lvce_volume_read_nifti(const char *path, struct LvceVolume **out);

/**
 * # Safety
 * `vol` is a live handle; `path` is a NUL-terminated UTF-8 string.
 */
enum LvceStatus lvce_volume_write_nifti(const struct LvceVolume *vol, const char *path);

/**
 * Mean squared error over the mask (nonzero bytes), or the whole volume
 * when `mask` is null.
 *
 * # Safety
 * Handles are live; `mask` is null or points to `mask_len` bytes.
 */
enum LvceStatus lvce_mse(const struct LvceVolume *pred,
                         const struct LvceVolume *reference,
                         const uint8_t *mask,
                         size_t mask_len,
                         double *out);

/**
 * PSNR in dB; `INFINITY` for identical inputs.
 *
 * # Safety
 * As [`lvce_mse`].
 */
enum LvceStatus lvce_psnr(const struct LvceVolume *pred,
                          const struct LvceVolume *reference,
                          const uint8_t *mask,
                          size_t mask_len,
                          double data_range,
                          double *out);

/**
 * 3D SSIM with the default Gaussian window (sigma 1.5, 11 voxels).
 *
 * # Safety
 * As [`lvce_mse`].
 */
enum LvceStatus lvce_ssim(const struct LvceVolume *pred,
                          const struct LvceVolume *reference,
                          const uint8_t *mask,
                          size_t mask_len,
                          double data_range,
                          double *out);

/**
 * Linear low-dose simulation `pc + dose * (sd - pc)` plus Gaussian noise.
 *
 * # Safety
 * Handles are live; `out` is writable.
 */
enum LvceStatus lvce_simulate_low_dose(const struct LvceVolume *pc,
                                       const struct LvceVolume *sd,
                                       double dose,
                                       double noise_sigma,
                                       uint64_t seed,
                                       struct LvceVolume **out);

/**
 * Rigid registration of `moving` onto `fixed` with default settings.
 * Writes `[rx, ry, rz, tx, ty, tz]` (radians, mm) to `out_params`.
 *
 * # Safety
 * Handles are live; `fixed_mask` is null or `mask_len` bytes;
 * `out_params` points to 6 writable values.
 */
enum LvceStatus lvce_register_rigid(const struct LvceVolume *moving,
                                    const struct LvceVolume *fixed,
                                    const uint8_t *fixed_mask,
                                    size_t mask_len,
                                    double *out_params);

/**
 * Wilcoxon signed-rank test on paired samples; writes min(W+, W-) and the
 * two-sided p-value.
 *
 * # Safety
 * `a` and `b` point to `n` values; outputs are writable.
 */
enum LvceStatus lvce_wilcoxon(const double *a,
                              const double *b,
                              size_t n,
                              double *out_statistic,
                              double *out_p);

/**
 * Paired t-test; writes t and the two-sided p-value.
 *
 * # Safety
 * `a` and `b` point to `n` values; outputs are writable.
 */
enum LvceStatus lvce_paired_t(const double *a,
                              const double *b,
                              size_t n,
                              double *out_t,
                              double *out_p);

/**
 * # Safety
 * `path` is a NUL-terminated UTF-8 string.
 */
enum LvceStatus lvce_model_load(const char *path, struct LvceModel **out);

/**
 * # Safety
 * `model` is null or a live handle.
 */
void lvce_model_free(struct LvceModel *model);

/**
 * Number of input channels (2 single-session, 4 longitudinal); 0 for null.
 *
 * # Safety
 * `model` is null or a live handle.
 */
size_t lvce_model_in_channels(const struct LvceModel *model);

/**
 * Predict the full-dose image. `channels` holds `n` volumes in the model's
 * channel order, ending with the current low-dose image.
 *
 * # Safety
 * `model` is live; `channels` points to `n` live volume handles.
 */
enum LvceStatus lvce_model_predict(const struct LvceModel *model,
                                   const struct LvceVolume *const *channels,
                                   size_t n,
                                   struct LvceVolume **out);

/**
 * Open a study from a JSON config (missing fields take defaults).
 *
 * # Safety
 * `config_json` is a NUL-terminated UTF-8 string.
 */
enum LvceStatus lvce_study_open(const char *config_json, struct LvceStudy **out);

/**
 * Run every stage at the primary dose (and the dose sweep when
 * `with_sweep` is true). Completed stages are skipped.
 *
 * # Safety
 * `study` is a live handle.
 */
enum LvceStatus lvce_study_run(struct LvceStudy *study, bool with_sweep);

/**
 * # Safety
 * `study` is null or a live handle.
 */
void lvce_study_free(struct LvceStudy *study);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LVCE_H */
