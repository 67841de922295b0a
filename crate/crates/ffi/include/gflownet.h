#ifndef GFLOWNET_H
#define GFLOWNET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  GFN_STATUS_OK = 0,
  GFN_STATUS_NULL_POINTER = 1,
  GFN_STATUS_INVALID_ARGUMENT = 2,
  GFN_STATUS_TOO_LARGE = 3,
  GFN_STATUS_BUFFER_SIZE = 4,
  GFN_STATUS_TRAINING_FAILED = 5,
  GFN_STATUS_IO = 6,
  GFN_STATUS_PANIC = 7,
} GfnStatus;

/**
 * A hypergrid together with its enumerated state graph.
 */
typedef struct GfnGrid GfnGrid;

/**
 * A neural flow model.
 */
typedef struct GfnModel GfnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call into this library.
 */
const char *gfn_last_error_message(void);

/**
 * Corners reward with `R1 = 0.5`, `R2 = 2`.
 */
GfnStatus gfn_grid_new_corners(size_t n, size_t h, double r0, GfnGrid **out);

GfnStatus gfn_grid_new_cosine(size_t n, size_t h, GfnGrid **out);

/**
 * Releases a grid. Null is ignored.
 *
 * # Safety
 * `grid` must be null or a live handle from this library, not yet freed.
 */
void gfn_grid_free(GfnGrid *grid);

/**
 * # Safety
 * `grid` must be a live grid handle and `out` writable.
 */
GfnStatus gfn_grid_num_cells(const GfnGrid *grid, size_t *out);

/**
 * Writes `R(x)/Z` for every cell into `out[0..len]`; `len` must equal the
 * cell count.
 *
 * # Safety
 * `grid` must be a live grid handle; `out` valid for `len` writes.
 */
GfnStatus gfn_grid_target_distribution(const GfnGrid *grid, double *out, size_t len);

/**
 * A fresh model with two hidden layers of `hidden` units.
 *
 * # Safety
 * `grid` must be a live grid handle and `out` writable.
 */
GfnStatus gfn_model_new(const GfnGrid *grid, size_t hidden, uint64_t seed, GfnModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must be null or a live handle from this library, not yet freed.
 */
void gfn_model_free(GfnModel *model);

/**
 * Online training with default settings apart from the given values.
 * `final_loss` may be null.
 *
 * # Safety
 * Handles must be live; `final_loss` null or writable.
 */
GfnStatus gfn_model_train(GfnModel *model,
                          const GfnGrid *grid,
                          size_t trajectories,
                          double learning_rate,
                          uint64_t seed,
                          double *final_loss);

/**
 * Exact terminal distribution of the model's policy, per cell.
 *
 * # Safety
 * Handles must be live; `out` valid for `len` writes.
 */
GfnStatus gfn_model_terminal_distribution(const GfnModel *model,
                                          const GfnGrid *grid,
                                          double *out,
                                          size_t len);

/**
 * Samples `count` terminal cells, writing their cell indices.
 *
 * # Safety
 * Handles must be live; `out_cells` valid for `count` writes.
 */
GfnStatus gfn_model_sample(const GfnModel *model,
                           const GfnGrid *grid,
                           size_t count,
                           uint64_t seed,
                           size_t *out_cells);

/**
 * Writes a checkpoint.
 *
 * # Safety
 * `model` must be live; `path` NUL-terminated.
 */
GfnStatus gfn_model_save(const GfnModel *model, const char *path, uint64_t seed);

/**
 * Loads a checkpoint whose shape fits `grid`.
 *
 * # Safety
 * `grid` must be live, `path` NUL-terminated and `out` writable.
 */
GfnStatus gfn_model_load(const GfnGrid *grid, const char *path, GfnModel **out);

/**
 * Mean absolute difference of two distributions of length `len`.
 *
 * # Safety
 * `p` and `q` valid for `len` reads; `out` writable.
 */
GfnStatus gfn_l1_error(const double *p, const double *q, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GFLOWNET_H */
