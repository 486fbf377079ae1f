#ifndef VIF_H
#define VIF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define VIF_MODE_BASELINE 0

#define VIF_MODE_VIF 1

#define VIF_MODE_PASSTHROUGH 2

typedef enum VifStatus {
  VIF_STATUS_OK = 0,
  VIF_STATUS_NULL_POINTER = 1,
  VIF_STATUS_INVALID_ARGUMENT = 2,
  VIF_STATUS_SHAPE = 3,
  VIF_STATUS_NON_FINITE = 4,
  VIF_STATUS_PRECISION = 5,
  VIF_STATUS_CONFIG = 6,
  VIF_STATUS_CHECKPOINT = 7,
  VIF_STATUS_DATASET = 8,
  VIF_STATUS_CONTRACT = 9,
  VIF_STATUS_IO = 10,
  VIF_STATUS_BUFFER_TOO_SMALL = 11,
  VIF_STATUS_PANIC = 12,
} VifStatus;

/**
 * Opaque model handle: decoder weights plus optional former weights.
 */
typedef struct VifModel VifModel;

typedef struct VifModelOptions {
  uint64_t seed;
  uint32_t grid_side;
  uint32_t n_symbols;
  uint32_t d_vision;
  uint32_t d_model;
  uint32_t n_layers;
  uint32_t n_heads;
  uint32_t ffn_mult;
  uint32_t max_seq_len;
  /**
   * Attach a former; when false only baseline decoding is available.
   */
  bool with_vif;
  uint32_t vif_heads;
  bool vif_self_attn;
  bool use_f64;
} VifModelOptions;

typedef struct VifMiReport {
  /**
   * `I(o; z | t)` in bits.
   */
  double i_oz_t;
  /**
   * `I(o; a | z, t)` in bits.
   */
  double i_oa_zt;
  /**
   * `I(o; z, a | t)` in bits.
   */
  double i_oza_t;
  double residual;
  double margin;
  bool passed;
} VifMiReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call into this library on the
 * same thread.
 */
const char *vif_last_error_message(void);

struct VifModelOptions vif_model_options_default(void);

/**
 * Creates a randomly initialized model. `options` may be null for the
 * defaults.
 *
 * # Safety
 * `options` must be null or point to a valid `VifModelOptions`; `out` must
 * be a valid pointer to writable storage for one handle.
 */
enum VifStatus vif_model_new(const struct VifModelOptions *options, struct VifModel **out);

/**
 * Loads a checkpoint written by the CLI or `vif_model_save`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum VifStatus vif_model_load(const char *path, struct VifModel **out);

/**
 * # Safety
 * `model` must be a live handle; `path` a NUL-terminated string.
 */
enum VifStatus vif_model_save(const struct VifModel *model, const char *path);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void vif_model_free(struct VifModel *model);

/**
 * Vocabulary size of the model, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t vif_model_vocab_size(const struct VifModel *model);

/**
 * Total parameter count including the former, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t vif_model_num_params(const struct VifModel *model);

/**
 * Greedy decoding on a `side x side` grid with the recall prompt. Writes
 * up to `out_cap` token ids and the generated length to `out_len`; returns
 * `BufferTooSmall` (with `out_len` set) when the buffer is short.
 *
 * # Safety
 * `model` must be a live handle, `cells` must point to `n_cells` values,
 * `out_tokens` to `out_cap` writable slots and `out_len` to one.
 */
enum VifStatus vif_generate(const struct VifModel *model,
                            const uint32_t *cells,
                            size_t n_cells,
                            uint32_t side,
                            uint32_t mode,
                            size_t max_new_tokens,
                            uint32_t *out_tokens,
                            size_t out_cap,
                            size_t *out_len);

/**
 * Conditional-MI check on a joint table over `(o, z, a, t)` stored
 * row-major with `t` fastest; `dims` holds the four support sizes.
 *
 * # Safety
 * `dims` must point to 4 values, `p` to their product, `out` to one report.
 */
enum VifStatus vif_mi_check(const double *p, const size_t *dims, struct VifMiReport *out);

/**
 * Savitzky–Golay smoothing of `n` values into `out` (also `n` long).
 *
 * # Safety
 * `values` and `out` must each point to `n` doubles; they may alias.
 */
enum VifStatus vif_savgol(const double *values,
                          size_t n,
                          size_t window,
                          size_t polyorder,
                          double *out);

/**
 * Library version as a static NUL-terminated string.
 */
const char *vif_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VIF_H */
