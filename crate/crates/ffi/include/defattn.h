/* Generated by cbindgen from crates/ffi; do not edit. */

#ifndef DEFATTN_H
#define DEFATTN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DefattnStatus {
  DEFATTN_STATUS_OK = 0,
  DEFATTN_STATUS_NULL_POINTER = 1,
  DEFATTN_STATUS_INVALID_ARGUMENT = 2,
  DEFATTN_STATUS_SHAPE = 3,
  DEFATTN_STATUS_CONFIG = 4,
  DEFATTN_STATUS_DEGENERATE = 5,
  DEFATTN_STATUS_NUMERIC = 6,
  DEFATTN_STATUS_IO = 7,
  DEFATTN_STATUS_NOT_FOUND = 8,
  DEFATTN_STATUS_PARSE = 9,
  DEFATTN_STATUS_PANIC = 10,
} DefattnStatus;

/**
 * A loaded or freshly initialised network.
 */
typedef struct DefattnModel DefattnModel;

/**
 * A generated synthetic sequence.
 */
typedef struct DefattnSequence DefattnSequence;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty if none. The
 * pointer stays valid until the next failing call on this thread.
 */
const char *defattn_last_error(void);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a nul-terminated string; `out` must be writable.
 */
enum DefattnStatus defattn_model_load(const char *path, struct DefattnModel **out);

/**
 * Initialises an untrained network by architecture name (`teacher`,
 * `student`, `student-vanilla`).
 *
 * # Safety
 * `spec` must be a nul-terminated string; `out` must be writable.
 */
enum DefattnStatus defattn_model_init(const char *spec, uint64_t seed, struct DefattnModel **out);

/**
 * Writes the model to a checkpoint file.
 *
 * # Safety
 * `model` must come from this library; `path` must be nul-terminated.
 */
enum DefattnStatus defattn_model_save(const struct DefattnModel *model, const char *path);

/**
 * Number of trainable scalars.
 *
 * # Safety
 * `model` must come from this library or be null (returns 0).
 */
size_t defattn_model_num_params(const struct DefattnModel *model);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void defattn_model_free(struct DefattnModel *model);

/**
 * Segments frames `1..n_frames` from the frame-0 mask. `frames` holds
 * `n_frames·h·w·3` bytes, `first_mask` `h·w` ids in `0..=n_objects`, and
 * `out_masks` receives `(n_frames−1)·h·w` ids.
 *
 * # Safety
 * All buffers must have the stated lengths.
 */
enum DefattnStatus defattn_model_segment(const struct DefattnModel *model,
                                         const uint8_t *frames,
                                         size_t n_frames,
                                         size_t h,
                                         size_t w,
                                         const uint8_t *first_mask,
                                         size_t n_objects,
                                         uint8_t *out_masks);

/**
 * Linear CKA between an `n×ct` and an `n×cs` row-major matrix.
 *
 * # Safety
 * Buffers must have the stated lengths; `out` must be writable.
 */
enum DefattnStatus defattn_cka(const double *ft,
                               size_t n,
                               size_t ct,
                               const double *fs,
                               size_t cs,
                               double *out);

/**
 * Region similarity (IoU) of object `obj`.
 *
 * # Safety
 * `pred` and `gt` must hold `h·w` bytes; `out` must be writable.
 */
enum DefattnStatus defattn_region_j(const uint8_t *pred,
                                    const uint8_t *gt,
                                    size_t h,
                                    size_t w,
                                    uint8_t obj,
                                    double *out);

/**
 * Boundary F-measure of object `obj` with a `tol`-pixel tolerance.
 *
 * # Safety
 * `pred` and `gt` must hold `h·w` bytes; `out` must be writable.
 */
enum DefattnStatus defattn_boundary_f(const uint8_t *pred,
                                      const uint8_t *gt,
                                      size_t h,
                                      size_t w,
                                      uint8_t obj,
                                      size_t tol,
                                      double *out);

/**
 * Renders a synthetic sequence. `difficulty` is one of `easy`,
 * `fast-motion`, `clutter`, `deform`.
 *
 * # Safety
 * `difficulty` must be nul-terminated; `out` must be writable.
 */
enum DefattnStatus defattn_sequence_generate(uint64_t seed,
                                             size_t h,
                                             size_t w,
                                             size_t n_frames,
                                             size_t n_objects,
                                             const char *difficulty,
                                             struct DefattnSequence **out);

/**
 * Frame count, height, width and object count of a sequence.
 *
 * # Safety
 * `seq` must come from this library; every out pointer must be writable.
 */
enum DefattnStatus defattn_sequence_dims(const struct DefattnSequence *seq,
                                         size_t *n_frames,
                                         size_t *h,
                                         size_t *w,
                                         size_t *n_objects);

/**
 * Copies frame `t` (`h·w·3` bytes) into `out`.
 *
 * # Safety
 * `out` must hold `h·w·3` bytes.
 */
enum DefattnStatus defattn_sequence_frame(const struct DefattnSequence *seq,
                                          size_t t,
                                          uint8_t *out);

/**
 * Copies the ground-truth mask of frame `t` (`h·w` bytes) into `out`.
 *
 * # Safety
 * `out` must hold `h·w` bytes.
 */
enum DefattnStatus defattn_sequence_mask(const struct DefattnSequence *seq, size_t t, uint8_t *out);

/**
 * Releases a sequence; null is ignored.
 *
 * # Safety
 * `seq` must come from this library and not be used afterwards.
 */
void defattn_sequence_free(struct DefattnSequence *seq);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DEFATTN_H */
