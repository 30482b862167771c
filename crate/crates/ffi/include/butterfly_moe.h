#ifndef BUTTERFLY_MOE_H
#define BUTTERFLY_MOE_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum BmoeStatus {
  BMOE_STATUS_OK = 0,
  BMOE_STATUS_NULL_POINTER = 1,
  /**
   * Invalid dimensions, depths or other configuration.
   */
  BMOE_STATUS_CONFIG = 2,
  /**
   * Caller buffer or tensor has the wrong size.
   */
  BMOE_STATUS_SHAPE = 3,
  /**
   * Non-finite values.
   */
  BMOE_STATUS_NUMERIC = 4,
  BMOE_STATUS_IO = 5,
  /**
   * Malformed checkpoint bytes.
   */
  BMOE_STATUS_FORMAT = 6,
  BMOE_STATUS_PANIC = 7,
} BmoeStatus;

/**
 * One butterfly MoE layer in `f32`.
 */
typedef struct BmoeLayer BmoeLayer;

/**
 * A model restored from a checkpoint, in `f32`.
 */
typedef struct BmoeModel BmoeModel;

/**
 * Per-token arithmetic of one MoE layer.
 */
typedef struct BmoeFlops {
  uint64_t rotation_flops;
  uint64_t ternary_adds;
  uint64_t ternary_muls;
} BmoeFlops;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len`). Returns the full message length in
 * bytes, or 0 when there is no error.
 *
 * # Safety
 * `buf` must be null or valid for writes of `len` bytes.
 */
size_t bmoe_last_error(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *bmoe_version(void);

/**
 * Creates a seeded layer. `layers_in`/`layers_out` of 0 select full depth.
 *
 * # Safety
 * `out` must be valid for one pointer write.
 */
enum BmoeStatus bmoe_layer_new(size_t d_model,
                               size_t d_ff,
                               size_t n_experts,
                               size_t k,
                               size_t layers_in,
                               size_t layers_out,
                               uint64_t seed,
                               struct BmoeLayer **out);

/**
 * Releases a layer; null is ignored.
 *
 * # Safety
 * `layer` must be null or a handle from [`bmoe_layer_new`] not yet freed.
 */
void bmoe_layer_free(struct BmoeLayer *layer);

/**
 * Writes `d_model`, `d_ff`, `n_experts` and `k`; any output may be null.
 *
 * # Safety
 * `layer` must be a live handle; non-null outputs must be writable.
 */
enum BmoeStatus bmoe_layer_dims(const struct BmoeLayer *layer,
                                size_t *d_model,
                                size_t *d_ff,
                                size_t *n_experts,
                                size_t *k);

/**
 * Quantizes the substrate once so later forwards reuse it.
 *
 * # Safety
 * `layer` must be a live handle not used concurrently.
 */
enum BmoeStatus bmoe_layer_freeze(struct BmoeLayer *layer);

/**
 * `y[tokens × d_ff] = MoE(x[tokens × d_model])`, row-major; non-finite
 * inputs give [`BmoeStatus::Numeric`]. `y_len` is the capacity of `y` in
 * elements and must be at least `tokens · d_ff`.
 *
 * # Safety
 * `x` must hold `tokens · d_model` floats and `y` `y_len` floats.
 */
enum BmoeStatus bmoe_layer_forward(const struct BmoeLayer *layer,
                                   const float *x,
                                   size_t tokens,
                                   float *y,
                                   size_t y_len);

/**
 * Cosine similarity of expert outputs on `probe[tokens × d_model]`,
 * written row-major into `out[n_experts × n_experts]`.
 *
 * # Safety
 * `probe` must hold `tokens · d_model` floats and `out` `out_len` doubles.
 */
enum BmoeStatus bmoe_layer_similarity(const struct BmoeLayer *layer,
                                      const float *probe,
                                      size_t tokens,
                                      double *out,
                                      size_t out_len);

/**
 * Diversity score (`1 −` mean off-diagonal similarity) of an
 * `n × n` similarity matrix.
 *
 * # Safety
 * `matrix` must hold `n · n` doubles; `out` must be writable.
 */
enum BmoeStatus bmoe_diversity_score(const double *matrix, size_t n, double *out);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` valid for one pointer write.
 */
enum BmoeStatus bmoe_model_load(const char *path, struct BmoeModel **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must be null or a handle from [`bmoe_model_load`] not yet freed.
 */
void bmoe_model_free(struct BmoeModel *model);

/**
 * Total trainable parameter count.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum BmoeStatus bmoe_model_param_count(const struct BmoeModel *model, size_t *out);

/**
 * Number of butterfly MoE layers in the model.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum BmoeStatus bmoe_model_butterfly_layers(const struct BmoeModel *model, size_t *out);

/**
 * Relative substrate quantization error of butterfly layer `index`.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum BmoeStatus bmoe_model_quant_error(const struct BmoeModel *model, size_t index, double *out);

/**
 * Butterfly MoE footprint in bytes.
 *
 * # Safety
 * `out` must be writable.
 */
enum BmoeStatus bmoe_butterfly_memory_bytes(size_t d_model,
                                            size_t d_ff,
                                            size_t n_experts,
                                            double bits_per_weight,
                                            double bytes_per_angle,
                                            double *out);

/**
 * Standard MoE footprint in bytes at `bytes_per_weight`.
 */
uint64_t bmoe_standard_moe_memory_bytes(size_t d_model,
                                        size_t d_ff,
                                        size_t n_experts,
                                        uint64_t bytes_per_weight);

/**
 * Limit of the compression ratio as the expert count grows.
 *
 * # Safety
 * `out` must be writable.
 */
enum BmoeStatus bmoe_asymptotic_compression(size_t d_model,
                                            size_t d_ff,
                                            uint64_t bytes_per_weight,
                                            double *out);

/**
 * DRAM energy in joules of reading `bytes` once.
 */
double bmoe_dram_energy_joules(double bytes);

/**
 * Per-token arithmetic of one layer.
 */
struct BmoeFlops bmoe_flops_per_token(size_t d_model,
                                      size_t d_ff,
                                      size_t k,
                                      size_t layers_in,
                                      size_t layers_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BUTTERFLY_MOE_H */
