#ifndef POINTDIFFUSION_H
#define POINTDIFFUSION_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Success.
#define PD_OK 0

// A required pointer argument was null.
#define PD_NULL_ARGUMENT 1

// An argument value was rejected.
#define PD_INVALID_ARGUMENT 2

// The underlying file could not be read or written.
#define PD_IO_ERROR 3

// The file exists but is not a valid artifact (magic/version/truncation).
#define PD_FORMAT_ERROR 4

// Any other failure; see `pd_last_error`.
#define PD_RUNTIME_ERROR 5

// A point cloud with optional per-point labels.
typedef struct PdCloud PdCloud;

// A loaded model checkpoint (conditional network, optional denoiser).
typedef struct PdModel PdModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static UTF-8 string.
const char *pd_version(void);

// Message for the most recent failure on this thread. The pointer stays
// valid until the next failing call on the same thread.
const char *pd_last_error(void);

// Generate a synthetic labeled scene.
//
// `preset` is `"separable"` or `"hard"`. Points are split as evenly as
// possible over `classes`.
//
// # Safety
// `preset` must be a valid NUL-terminated string and `out` a valid pointer.
int32_t pd_cloud_generate(const char *preset,
                          uint32_t classes,
                          uint32_t points,
                          uint64_t seed,
                          struct PdCloud **out);

// Load a cloud file.
//
// # Safety
// `path` must be a valid NUL-terminated string and `out` a valid pointer.
int32_t pd_cloud_load(const char *path, struct PdCloud **out);

// Save a cloud (with its labels, when present).
//
// # Safety
// `cloud` must be a live handle and `path` a valid NUL-terminated string.
int32_t pd_cloud_save(const struct PdCloud *cloud, const char *path);

// Number of points in the cloud.
//
// # Safety
// `cloud` must be a live handle and `out` a valid pointer.
int32_t pd_cloud_points(const struct PdCloud *cloud, uint64_t *out);

// Class count the cloud was generated or stored with.
//
// # Safety
// `cloud` must be a live handle and `out` a valid pointer.
int32_t pd_cloud_classes(const struct PdCloud *cloud, uint32_t *out);

// Copy the positions into `out` as `n * 3` consecutive floats.
//
// # Safety
// `cloud` must be a live handle; `out` must point to at least `len` floats.
int32_t pd_cloud_positions(const struct PdCloud *cloud, float *out, size_t len);

// Copy the labels into `out`; fails when the cloud carries none.
//
// # Safety
// `cloud` must be a live handle; `out` must point to at least `len` values.
int32_t pd_cloud_labels(const struct PdCloud *cloud, uint16_t *out, size_t len);

// Release a cloud handle. Null is a no-op.
//
// # Safety
// `cloud` must be a handle produced by this library, not yet freed.
void pd_cloud_free(struct PdCloud *cloud);

// Load a model checkpoint.
//
// # Safety
// `path` must be a valid NUL-terminated string and `out` a valid pointer.
int32_t pd_model_load(const char *path, struct PdModel **out);

// Class count the model was built for.
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
int32_t pd_model_classes(const struct PdModel *model, uint32_t *out);

// Release a model handle. Null is a no-op.
//
// # Safety
// `model` must be a handle produced by this library, not yet freed.
void pd_model_free(struct PdModel *model);

// Run the reverse process on a cloud and write one label per point.
//
// `steps` is the sampling step count (0 picks 20). The same seed and inputs
// always produce identical labels.
//
// # Safety
// `model` and `cloud` must be live handles; `out` must point to at least
// `len` values.
int32_t pd_sample(const struct PdModel *model,
                  const struct PdCloud *cloud,
                  uint32_t steps,
                  uint64_t seed,
                  uint16_t *out,
                  size_t len);

// Mean intersection-over-union between two label arrays.
//
// # Safety
// `pred` and `gt` must point to at least `len` values; `out` must be valid.
int32_t pd_miou(const uint16_t *pred,
                const uint16_t *gt,
                size_t len,
                uint32_t classes,
                double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* POINTDIFFUSION_H */
