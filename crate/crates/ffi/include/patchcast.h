#ifndef PATCHCAST_H
#define PATCHCAST_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PcStatus {
  PC_STATUS_OK = 0,
  PC_STATUS_NULL_POINTER = 1,
  PC_STATUS_INVALID_ARGUMENT = 2,
  PC_STATUS_IO = 3,
  /**
   * Weight file is malformed or inconsistent.
   */
  PC_STATUS_MODEL = 4,
  /**
   * A wire frame failed to encode or decode.
   */
  PC_STATUS_FRAME = 5,
  PC_STATUS_BUFFER_TOO_SMALL = 6,
  /**
   * A Rust panic was caught at the boundary.
   */
  PC_STATUS_PANIC = 7,
} PcStatus;

typedef enum PcAttention {
  PC_ATTENTION_MEAN = 0,
  PC_ATTENTION_ROLLOUT = 1,
} PcAttention;

typedef enum PcEntropy {
  PC_ENTROPY_SHANNON = 0,
  PC_ENTROPY_MIN = 1,
} PcEntropy;

/**
 * Loaded ViT weights. Create with [`pc_model_load`], release with [`pc_model_free`].
 */
typedef struct PcModel PcModel;

typedef struct PcModelInfo {
  size_t embed_dim;
  size_t heads;
  size_t layers;
  size_t classes;
  size_t patch_size;
  size_t channels;
  size_t max_patches;
} PcModelInfo;

typedef struct PcResult {
  uint64_t image_id;
  uint32_t label;
  float confidence;
} PcResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer is
 * valid until the next patchcast call on the same thread.
 */
const char *pc_last_error(void);

/**
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum PcStatus pc_model_load(const char *path, struct PcModel **out);

/**
 * # Safety
 * `model` must be null or a handle from [`pc_model_load`] not yet freed.
 */
void pc_model_free(struct PcModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum PcStatus pc_model_info(const struct PcModel *model, struct PcModelInfo *out);

/**
 * Classifies a full `height×width×channels` image of 8-bit values. `probs`
 * may be null when `probs_len` is 0; otherwise it receives `classes` values.
 *
 * # Safety
 * `pixels` must hold `height*width*channels` bytes and `probs` `probs_len` doubles.
 */
enum PcStatus pc_classify(const struct PcModel *model,
                          const uint8_t *pixels,
                          size_t height,
                          size_t width,
                          size_t channels,
                          uint32_t *label,
                          double *probs,
                          size_t probs_len);

/**
 * Per-patch attention scores of a full image, in raster order. `scores`
 * needs one slot per patch.
 *
 * # Safety
 * `pixels` must hold `height*width*channels` bytes and `scores` `scores_len` doubles.
 */
enum PcStatus pc_attention(const struct PcModel *model,
                           const uint8_t *pixels,
                           size_t height,
                           size_t width,
                           size_t channels,
                           enum PcAttention method,
                           double *scores,
                           size_t scores_len);

/**
 * Applies a selection rule (`topk:K`, `threshold:D`, `sum:D`, `random:M[:SEED]`)
 * to `n` patch scores. Selected indices are written in increasing order and
 * their count to `count`.
 *
 * # Safety
 * `scores` must hold `n` doubles and `indices` `indices_cap` elements.
 */
enum PcStatus pc_select(const double *scores,
                        size_t n,
                        const char *rule,
                        size_t *indices,
                        size_t indices_cap,
                        size_t *count);

/**
 * Entropy of a probability vector in bits.
 *
 * # Safety
 * `probs` must hold `len` doubles.
 */
enum PcStatus pc_entropy(const double *probs, size_t len, enum PcEntropy measure, double *out);

/**
 * Offload decision: true when the entropy reaches `eta`.
 *
 * # Safety
 * `probs` must hold `len` doubles.
 */
enum PcStatus pc_gate(const double *probs,
                      size_t len,
                      enum PcEntropy measure,
                      double eta,
                      bool *offload);

/**
 * Encodes the selected patches of an image as a patch frame. `frame_len`
 * always receives the encoded size.
 *
 * # Safety
 * `pixels` must hold `height*width*channels` bytes, `indices` `count`
 * elements and `frame` `frame_cap` bytes.
 */
enum PcStatus pc_encode_patch_frame(uint64_t image_id,
                                    const uint8_t *pixels,
                                    size_t height,
                                    size_t width,
                                    size_t channels,
                                    size_t patch_size,
                                    const size_t *indices,
                                    size_t count,
                                    uint8_t *frame,
                                    size_t frame_cap,
                                    size_t *frame_len);

/**
 * Runs server inference on a patch frame and writes the 16-byte result frame.
 *
 * # Safety
 * `frame` must hold `len` bytes and `result` 16 bytes.
 */
enum PcStatus pc_server_respond(const struct PcModel *model,
                                const uint8_t *frame,
                                size_t len,
                                uint8_t *result);

/**
 * # Safety
 * `frame` must hold `len` bytes.
 */
enum PcStatus pc_decode_result_frame(const uint8_t *frame, size_t len, struct PcResult *out);

/**
 * Server operation count for `n` patches at width `d`. Fails if the value
 * does not fit in 64 bits.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum PcStatus pc_flops(uint64_t n, uint64_t d, uint64_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PATCHCAST_H */
