#ifndef MSCNN_H
#define MSCNN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MscnnStatus {
  MSCNN_STATUS_OK = 0,
  MSCNN_STATUS_NULL_POINTER = 1,
  MSCNN_STATUS_INVALID_ARGUMENT = 2,
  MSCNN_STATUS_IO = 3,
  MSCNN_STATUS_FORMAT = 4,
  MSCNN_STATUS_DIMENSION = 5,
  MSCNN_STATUS_NUMERICAL = 6,
  MSCNN_STATUS_PANIC = 7,
} MscnnStatus;

// The linear map from fine to coarse stencil weights for one stencil size
// and transfer pair.
typedef struct MscnnCoarsenMap MscnnCoarsenMap;

// A loaded model: network parameters, classifier, and provenance.
typedef struct MscnnModel MscnnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null. The pointer
// stays valid until the next call into this library on the same thread.
const char *mscnn_last_error_message(void);

// Reads a model file.
//
// # Safety
// `path` must be a nul-terminated string; `out` must be writable.
enum MscnnStatus mscnn_model_load(const char *path, struct MscnnModel **out);

// Writes a model file.
//
// # Safety
// `model` must come from this library; `path` must be nul-terminated.
enum MscnnStatus mscnn_model_save(const struct MscnnModel *model, const char *path);

// Releases a model handle. Null is ignored.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void mscnn_model_free(struct MscnnModel *model);

// Grid size, spacing, and class count of a model.
//
// # Safety
// All pointers must be valid; `model` must come from this library.
enum MscnnStatus mscnn_model_shape(const struct MscnnModel *model,
                                   size_t *nx,
                                   size_t *ny,
                                   double *h,
                                   size_t *num_classes);

// Class probabilities for one row-major image on the model grid.
//
// # Safety
// `pixels` must hold `len` values and `probs` `probs_len` values.
enum MscnnStatus mscnn_model_predict(const struct MscnnModel *model,
                                     const double *pixels,
                                     size_t len,
                                     double *probs,
                                     size_t probs_len);

// A new model moved one resolution octave in `direction`
// ([`MscnnDirection`]) with the given [`MscnnTransfer`] pair.
//
// # Safety
// `model` must come from this library; `out` must be writable.
enum MscnnStatus mscnn_model_adapt(const struct MscnnModel *model,
                                   uint32_t direction,
                                   uint32_t transfer,
                                   struct MscnnModel **out);

// Builds the coarsening map for `k`×`k` stencils.
//
// # Safety
// `out` must be writable.
enum MscnnStatus mscnn_coarsen_map_new(size_t k, uint32_t transfer, struct MscnnCoarsenMap **out);

// Releases a map handle. Null is ignored.
//
// # Safety
// `map` must come from this library and not be used afterwards.
void mscnn_coarsen_map_free(struct MscnnCoarsenMap *map);

// 2-norm condition number of the map.
//
// # Safety
// Pointers must be valid.
enum MscnnStatus mscnn_coarsen_map_condition(const struct MscnnCoarsenMap *map, double *condition);

// Coarse stencil for a fine one; both buffers hold `k*k` row-major weights.
//
// # Safety
// Buffers must hold `len` values.
enum MscnnStatus mscnn_coarsen_map_coarsen(const struct MscnnCoarsenMap *map,
                                           const double *fine,
                                           double *coarse,
                                           size_t len);

// Fine stencil whose coarsening is `coarse`.
//
// # Safety
// Buffers must hold `len` values.
enum MscnnStatus mscnn_coarsen_map_refine(const struct MscnnCoarsenMap *map,
                                          const double *coarse,
                                          double *fine,
                                          size_t len);

// Largest real part of the stencil's symbol on an `nx`×`ny` grid and the
// largest forward-Euler growth factor `|1 + dt λ|`.
//
// # Safety
// `weights` must hold `k*k` values; outputs must be writable.
enum MscnnStatus mscnn_stability_report(const double *weights,
                                        size_t k,
                                        size_t nx,
                                        size_t ny,
                                        double h,
                                        double dt,
                                        double *max_real,
                                        double *growth);

// Restricts an `nx`×`ny` image to `(nx/2)`×`(ny/2)`.
//
// # Safety
// `img` must hold `nx*ny` values and `out` `out_len` values.
enum MscnnStatus mscnn_restrict_image(const double *img,
                                      size_t nx,
                                      size_t ny,
                                      uint32_t transfer,
                                      double *out,
                                      size_t out_len);

// Prolongs an `nx`×`ny` image to `(2nx)`×`(2ny)`.
//
// # Safety
// `img` must hold `nx*ny` values and `out` `out_len` values.
enum MscnnStatus mscnn_prolong_image(const double *img,
                                     size_t nx,
                                     size_t ny,
                                     uint32_t transfer,
                                     double *out,
                                     size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MSCNN_H */
