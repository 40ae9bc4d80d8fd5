#ifndef HISTOCL_H
#define HISTOCL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum HclStatus {
  HCL_STATUS_OK = 0,
  HCL_STATUS_NULL_POINTER = 1,
  HCL_STATUS_INVALID_ARGUMENT = 2,
  HCL_STATUS_CONFIG = 3,
  HCL_STATUS_DATA = 4,
  HCL_STATUS_RUNTIME = 5,
  HCL_STATUS_IO = 6,
  HCL_STATUS_PANIC = 7,
} HclStatus;

/**
 * A labeled patch collection.
 */
typedef struct HclDataset HclDataset;

/**
 * The outcome of an experiment run.
 */
typedef struct HclRunResult HclRunResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *hcl_version(void);

/**
 * Message of the last failed call on this thread ("" after a success).
 * Valid until the next histocl call on the same thread.
 */
const char *hcl_last_error(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from a histocl function and not be freed twice.
 */
void hcl_string_free(char *s);

/**
 * Optical density of one RGB pixel.
 *
 * # Safety
 * `rgb` points to 3 bytes and `od_out` to 3 doubles.
 */
enum HclStatus hcl_rgb_to_od(const uint8_t *rgb, double white_level, double *od_out);

/**
 * RGB pixel of an optical density triple.
 *
 * # Safety
 * `od` points to 3 doubles and `rgb_out` to 3 bytes.
 */
enum HclStatus hcl_od_to_rgb(const double *od, double white_level, uint8_t *rgb_out);

/**
 * Generates a synthetic dataset.
 *
 * # Safety
 * `out` must be a valid pointer; on success it receives a new handle.
 */
enum HclStatus hcl_dataset_synth(size_t classes,
                                 size_t per_class,
                                 uint32_t side,
                                 uint64_t seed,
                                 struct HclDataset **out);

/**
 * Loads a folder with one subfolder of PNG files per class.
 *
 * # Safety
 * `path` is a NUL-terminated string and `out` a valid pointer.
 */
enum HclStatus hcl_dataset_load(const char *path, struct HclDataset **out);

/**
 * Renders `ds` into the five preset stain domains.
 *
 * # Safety
 * `ds` is a live handle and `out` a valid pointer.
 */
enum HclStatus hcl_dataset_augment(const struct HclDataset *ds,
                                   uint64_t seed,
                                   struct HclDataset **out);

/**
 * Writes `ds` as a PNG folder with a `manifest.json`.
 *
 * # Safety
 * `ds` is a live handle and `path` a NUL-terminated string.
 */
enum HclStatus hcl_dataset_write(const struct HclDataset *ds, const char *path);

/**
 * Number of patches in `ds`.
 *
 * # Safety
 * `ds` is a live handle and `out` a valid pointer.
 */
enum HclStatus hcl_dataset_len(const struct HclDataset *ds, size_t *out);

/**
 * Releases a dataset handle. Null is ignored.
 *
 * # Safety
 * `ds` must come from this library and not be freed twice.
 */
void hcl_dataset_free(struct HclDataset *ds);

/**
 * Runs an experiment described by a JSON config. Result files are written
 * when the config sets `output.dir`.
 *
 * # Safety
 * `config_json` is a NUL-terminated string and `out` a valid pointer.
 */
enum HclStatus hcl_run_experiment_json(const char *config_json, struct HclRunResult **out);

/**
 * Canonical `result.json` text of a run.
 *
 * # Safety
 * `r` is a live handle and `out` a valid pointer.
 */
enum HclStatus hcl_result_json(const struct HclRunResult *r, char **out);

/**
 * Number of seeds in a run.
 *
 * # Safety
 * `r` is a live handle and `out` a valid pointer.
 */
enum HclStatus hcl_result_num_seeds(const struct HclRunResult *r, size_t *out);

/**
 * ACC, BWT and FWT of seed number `index` into `out[0..3]`.
 *
 * # Safety
 * `r` is a live handle and `out` points to 3 doubles.
 */
enum HclStatus hcl_result_metrics(const struct HclRunResult *r, size_t index, double *out);

/**
 * Writes the result files of a run into `dir`.
 *
 * # Safety
 * `r` is a live handle and `dir` a NUL-terminated string.
 */
enum HclStatus hcl_result_write(const struct HclRunResult *r, const char *dir);

/**
 * Releases a run result handle. Null is ignored.
 *
 * # Safety
 * `r` must come from this library and not be freed twice.
 */
void hcl_result_free(struct HclRunResult *r);

/**
 * ACC, BWT and FWT of a row-major `t`×`t` accuracy matrix.
 *
 * # Safety
 * `values` points to t·t doubles, `chance` to t doubles and `out` to 3.
 */
enum HclStatus hcl_compute_metrics(const double *values,
                                   size_t t,
                                   const double *chance,
                                   double *out);

/**
 * A-GEM projection of `g` against `g_ref` (both length `n`) into `out`.
 *
 * # Safety
 * All three pointers reference `n` floats; `out` may not alias the inputs.
 */
enum HclStatus hcl_agem_project(const float *g, const float *g_ref, size_t n, float *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HISTOCL_H */
