#ifndef BLOCKQAT_H
#define BLOCKQAT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum BqStatus {
  BQ_STATUS_OK = 0,
  BQ_STATUS_NULL_POINTER = 1,
  BQ_STATUS_INVALID_ARGUMENT = 2,
  BQ_STATUS_IO = 3,
  BQ_STATUS_FORMAT = 4,
  BQ_STATUS_DIMENSION = 5,
  BQ_STATUS_DOMAIN = 6,
  BQ_STATUS_DATA = 7,
  BQ_STATUS_STATE = 8,
  BQ_STATUS_NUMERIC = 9,
  BQ_STATUS_INTERNAL = 10,
} BqStatus;

/**
 * Opaque model handle, full-precision or quantized.
 */
typedef struct BqModel BqModel;

/**
 * Opaque token stream handle.
 */
typedef struct BqTokens BqTokens;

/**
 * Architecture of a loaded model.
 */
typedef struct BqModelInfo {
  size_t n_layers;
  size_t d_model;
  size_t n_heads;
  size_t d_ff;
  size_t vocab_size;
  size_t max_context;
  /**
   * 0 for a full-precision model.
   */
  uint32_t bits;
  /**
   * -1 for one group per row, 0 for a full-precision model.
   */
  int32_t group_size;
  /**
   * Quantized-layer bits per weight including scales and zero points;
   * 16 for a full-precision model.
   */
  double avg_bits;
} BqModelInfo;

/**
 * Settings for [`bq_quantize`]. Zeroed fields take the defaults of
 * [`bq_quantize_options_default`].
 */
typedef struct BqQuantizeOptions {
  uint32_t bits;
  int32_t group_size;
  size_t samples;
  size_t ctx_len;
  size_t epochs;
  size_t batch;
  float lr_scale;
  uint64_t seed;
} BqQuantizeOptions;

/**
 * Settings for [`bq_finetune`].
 */
typedef struct BqFinetuneOptions {
  size_t samples;
  size_t ctx_len;
  size_t batch;
  size_t micro_batch;
  size_t epochs;
  /**
   * Multiplier on the base rate; 0 picks the default for the model's bit width.
   */
  float lr_scale;
  uint64_t seed;
} BqFinetuneOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *bq_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *bq_version(void);

/**
 * Loads a model container.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum BqStatus bq_model_load(const char *path, struct BqModel **out);

/**
 * Writes a model container.
 *
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum BqStatus bq_model_save(const struct BqModel *model, const char *path);

/**
 * Releases a model. Null is accepted.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void bq_model_free(struct BqModel *model);

/**
 * Fills `info` with the architecture and quantization of `model`.
 *
 * # Safety
 * `model` must come from this library; `info` must be writable.
 */
enum BqStatus bq_model_info(const struct BqModel *model, struct BqModelInfo *info);

/**
 * Next-token logits for one sequence: `out` receives `n_tokens * vocab`
 * values, row-major.
 *
 * # Safety
 * `tokens` must hold `n_tokens` ids and `out` `out_len` floats.
 */
enum BqStatus bq_model_logits(const struct BqModel *model,
                              const uint32_t *tokens,
                              size_t n_tokens,
                              float *out,
                              size_t out_len);

/**
 * `y = W_hat x` through the packed kernel for projection `proj` (0..7 in
 * the order q, k, v, o, gate, up, down) of block `block`.
 *
 * # Safety
 * `x` must hold `x_len` and `y` `y_len` floats.
 */
enum BqStatus bq_model_gemv(const struct BqModel *model,
                            size_t block,
                            size_t proj,
                            const float *x,
                            size_t x_len,
                            float *y,
                            size_t y_len);

/**
 * Loads a token stream file.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` writable.
 */
enum BqStatus bq_tokens_load(const char *path, struct BqTokens **out);

/**
 * Byte-level tokens of a UTF-8 buffer.
 *
 * # Safety
 * `text` must hold `len` bytes and `out` must be writable.
 */
enum BqStatus bq_tokens_from_text(const uint8_t *text, size_t len, struct BqTokens **out);

/**
 * Number of tokens in the stream, 0 for null.
 *
 * # Safety
 * `tokens` must be null or come from this library.
 */
size_t bq_tokens_len(const struct BqTokens *tokens);

/**
 * Splits off the last `fraction` of the stream: `train` and `val` receive
 * new handles.
 *
 * # Safety
 * `tokens` must come from this library; `train` and `val` must be writable.
 */
enum BqStatus bq_tokens_split(const struct BqTokens *tokens,
                              double fraction,
                              struct BqTokens **train,
                              struct BqTokens **val);

/**
 * Releases a token stream. Null is accepted.
 *
 * # Safety
 * `tokens` must come from this library and not be used afterwards.
 */
void bq_tokens_free(struct BqTokens *tokens);

/**
 * Perplexity over non-overlapping windows of `ctx_len` tokens.
 *
 * # Safety
 * Handles must come from this library; `ppl` must be writable.
 */
enum BqStatus bq_perplexity(const struct BqModel *model,
                            const struct BqTokens *tokens,
                            size_t ctx_len,
                            double *ppl);

/**
 * Defaults used by the command line tool.
 */
struct BqQuantizeOptions bq_quantize_options_default(void);

/**
 * Defaults used by the command line tool.
 */
struct BqFinetuneOptions bq_finetune_options_default(void);

/**
 * Block-wise reconstruction of a full-precision model on calibration
 * sequences drawn from `tokens`; `out` receives a frozen quantized model.
 *
 * # Safety
 * Handles must come from this library; `opts` and `out` must be valid.
 */
enum BqStatus bq_quantize(const struct BqModel *model,
                          const struct BqTokens *tokens,
                          const struct BqQuantizeOptions *opts,
                          struct BqModel **out);

/**
 * End-to-end training of step sizes of a frozen quantized model.
 *
 * # Safety
 * Handles must come from this library; `opts` and `out` must be valid.
 */
enum BqStatus bq_finetune(const struct BqModel *model,
                          const struct BqTokens *tokens,
                          const struct BqFinetuneOptions *opts,
                          struct BqModel **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BLOCKQAT_H */
