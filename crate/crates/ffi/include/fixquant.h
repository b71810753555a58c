#ifndef FIXQUANT_H
#define FIXQUANT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Deterministic rounding modes accepted by [`fq_round_value`].
 * Stochastic rounding needs a seeded quantizer handle.
 */
typedef enum FqRoundingMode {
  FQ_ROUNDING_MODE_NEAREST = 0,
  FQ_ROUNDING_MODE_ZERO = 1,
  FQ_ROUNDING_MODE_DOWN = 2,
} FqRoundingMode;

/**
 * Result code of every `fq_*` call.
 */
typedef enum FqStatus {
  FQ_STATUS_OK = 0,
  FQ_STATUS_NULL_POINTER = 1,
  FQ_STATUS_INVALID_ARGUMENT = 2,
  FQ_STATUS_INVALID_FORMAT = 3,
  FQ_STATUS_NON_FINITE = 4,
  FQ_STATUS_PARSE = 5,
  FQ_STATUS_IO = 6,
  FQ_STATUS_SHAPE_MISMATCH = 7,
  FQ_STATUS_MISSING_WEIGHTS = 8,
  FQ_STATUS_AMBIGUOUS = 9,
  FQ_STATUS_PANIC = 10,
  FQ_STATUS_INTERNAL = 11,
} FqStatus;

/**
 * A model bound to its weights and forward quantizers.
 */
typedef struct FqNetwork FqNetwork;

/**
 * A parsed quantizer (`identity` or `fixed(W,F,mode[,seed=S])`).
 */
typedef struct FqQuantizer FqQuantizer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or "" after a success.
 * The pointer stays valid until the next `fq_*` call on the same thread.
 */
const char *fq_last_error_message(void);

/**
 * Round `x` to the fixed-point format (`word_size`, `frac_bits`) with saturation.
 *
 * # Safety
 * `out` must point to writable memory for one `double`.
 */
enum FqStatus fq_round_value(double x,
                             uint32_t word_size,
                             uint32_t frac_bits,
                             enum FqRoundingMode mode,
                             double *out);

/**
 * Parse a quantizer spec such as `fixed(8,4,nearest)`.
 *
 * # Safety
 * `spec` must be a NUL-terminated string; `out` must be writable.
 */
enum FqStatus fq_quantizer_parse(const char *spec, struct FqQuantizer **out);

/**
 * Quantize `len` values from `input` into `output`. The buffers may alias.
 *
 * # Safety
 * `q` must come from [`fq_quantizer_parse`]; both buffers must hold `len` doubles.
 */
enum FqStatus fq_quantizer_quantize(const struct FqQuantizer *q,
                                    const double *input,
                                    double *output,
                                    size_t len);

/**
 * Canonical descriptor of the quantizer; free it with [`fq_string_free`].
 *
 * # Safety
 * `q` must come from [`fq_quantizer_parse`]; `out` must be writable.
 */
enum FqStatus fq_quantizer_descriptor(const struct FqQuantizer *q, char **out);

/**
 * # Safety
 * `q` must come from [`fq_quantizer_parse`] and not be used afterwards. Null is ignored.
 */
void fq_quantizer_free(struct FqQuantizer *q);

/**
 * # Safety
 * `s` must be a string returned by this library. Null is ignored.
 */
void fq_string_free(char *s);

/**
 * Load a model spec and its weight store; `quantizer_map` (nullable) attaches
 * the intrinsic and extrinsic quantizers of a map file.
 *
 * # Safety
 * Paths must be NUL-terminated strings (or null for `quantizer_map`); `out` must be writable.
 */
enum FqStatus fq_network_load(const char *model_path,
                              const char *weights_dir,
                              const char *quantizer_map,
                              struct FqNetwork **out);

/**
 * Values per input sample (product of the model's input shape).
 *
 * # Safety
 * `net` must come from [`fq_network_load`]; `out` must be writable.
 */
enum FqStatus fq_network_input_len(const struct FqNetwork *net, size_t *out);

/**
 * Values per output sample.
 *
 * # Safety
 * `net` must come from [`fq_network_load`]; `out` must be writable.
 */
enum FqStatus fq_network_output_len(const struct FqNetwork *net, size_t *out);

/**
 * Forward `batch` samples stored row-major (NHWC) in `input`, writing
 * `batch * output_len` values to `output`.
 *
 * # Safety
 * `input` must hold `batch * input_len` doubles and `output` `output_capacity` doubles.
 */
enum FqStatus fq_network_forward(const struct FqNetwork *net,
                                 const double *input,
                                 size_t batch,
                                 double *output,
                                 size_t output_capacity);

/**
 * # Safety
 * `net` must come from [`fq_network_load`] and not be used afterwards. Null is ignored.
 */
void fq_network_free(struct FqNetwork *net);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FIXQUANT_H */
