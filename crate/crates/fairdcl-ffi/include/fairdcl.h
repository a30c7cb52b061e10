#ifndef FAIRDCL_H
#define FAIRDCL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

#define FAIRDCL_OK 0

#define FAIRDCL_ERR_NULL_ARG 1

#define FAIRDCL_ERR_UTF8 2

#define FAIRDCL_ERR_INVALID 3

#define FAIRDCL_ERR_IO 4

#define FAIRDCL_ERR_INTERNAL 5

typedef struct FairdclManifest FairdclManifest;

typedef struct FairdclMetrics FairdclMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent error on this thread. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *fairdcl_last_error_message(void);

/**
 * Load a dataset manifest CSV. On success writes an owned handle to
 * `out`; release it with `fairdcl_manifest_free`.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be a valid pointer.
 */
int32_t fairdcl_manifest_load(const char *path, struct FairdclManifest **out);

/**
 * # Safety
 * `m` must come from `fairdcl_manifest_load` and not be freed twice.
 */
void fairdcl_manifest_free(struct FairdclManifest *m);

/**
 * # Safety
 * `m` must be a live manifest handle; `out` valid.
 */
int32_t fairdcl_manifest_num_groups(const struct FairdclManifest *m, uint64_t *out);

/**
 * # Safety
 * `m` must be a live manifest handle; `out` valid.
 */
int32_t fairdcl_manifest_num_classes(const struct FairdclManifest *m, uint64_t *out);

/**
 * Number of tiles in one of the splits "pretrain", "finetune", "test".
 *
 * # Safety
 * `m` live handle, `split` NUL-terminated, `out` valid.
 */
int32_t fairdcl_manifest_split_count(const struct FairdclManifest *m,
                                     const char *split,
                                     uint64_t *out);

/**
 * Generate the synthetic biased-scene dataset into `out_dir` (images,
 * masks, manifest.csv).
 *
 * # Safety
 * `out_dir` must be NUL-terminated.
 */
int32_t fairdcl_generate_synthetic(uint64_t num_tiles,
                                   uint64_t tile_size,
                                   uint64_t num_classes,
                                   uint64_t k,
                                   double rho,
                                   uint64_t seed,
                                   const char *out_dir);

/**
 * Relative group-accuracy gap for two groups.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
int32_t fairdcl_diff_two(double mu1, double mu2, double *out);

/**
 * Scaled distance-from-parity for K >= 3 group means.
 *
 * # Safety
 * `mus` must point to `len` doubles; `out` valid.
 */
int32_t fairdcl_diff_k(const double *mus, uintptr_t len, double *out);

/**
 * Create an accumulator for predicted/ground-truth mask pairs.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
int32_t fairdcl_metrics_new(uint64_t k, uint64_t num_classes, struct FairdclMetrics **out);

/**
 * # Safety
 * `m` must come from `fairdcl_metrics_new` and not be freed twice.
 */
void fairdcl_metrics_free(struct FairdclMetrics *m);

/**
 * Add one pair of row-major `h`×`w` class-index masks for a group.
 *
 * # Safety
 * `pred` and `gt` must each point to `h*w` bytes; `m` live handle.
 */
int32_t fairdcl_metrics_add_pair(struct FairdclMetrics *m,
                                 const uint8_t *pred,
                                 const uint8_t *gt,
                                 uint64_t h,
                                 uint64_t w,
                                 uint64_t group);

/**
 * Pooled fairness summary over all accumulated pairs.
 *
 * # Safety
 * `m` live handle; `diff`, `wst`, `acc` valid pointers.
 */
int32_t fairdcl_metrics_report(const struct FairdclMetrics *m,
                               double *diff,
                               double *wst,
                               double *acc);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FAIRDCL_H */
