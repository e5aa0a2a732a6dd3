#ifndef SPADE_H
#define SPADE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every call.
typedef enum SpadeStatus {
  SPADE_STATUS_OK = 0,
  SPADE_STATUS_NULL_POINTER = 1,
  SPADE_STATUS_INVALID_ARGUMENT = 2,
  SPADE_STATUS_CONFIG = 3,
  SPADE_STATUS_NUMERIC = 4,
  SPADE_STATUS_RESOURCE = 5,
  SPADE_STATUS_CHECKPOINT = 6,
  SPADE_STATUS_BUFFER_TOO_SMALL = 7,
  SPADE_STATUS_PANIC = 8,
  SPADE_STATUS_OTHER = 9,
} SpadeStatus;

// Opaque single-precision model.
typedef struct SpadeModel SpadeModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on the same thread.
const char *spade_last_error(void);

// Library version as a static NUL-terminated string.
const char *spade_version(void);

// Builds a freshly initialized model from INI text using the same
// `[model]` keys and `[run] seed` as the command line. `config` may be
// empty for all defaults.
//
// # Safety
// `config` must be a NUL-terminated string and `out` a valid pointer.
enum SpadeStatus spade_model_from_config(const char *config, struct SpadeModel **out);

// Loads a `.spade` checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum SpadeStatus spade_model_load(const char *path, struct SpadeModel **out);

// Writes the model as a `.spade` checkpoint.
//
// # Safety
// `model` must come from this library; `path` must be NUL-terminated.
enum SpadeStatus spade_model_save(const struct SpadeModel *model, const char *path);

// Releases a model; null is ignored.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void spade_model_free(struct SpadeModel *model);

// Vocabulary size, width and depth of the model.
//
// # Safety
// `model` must come from this library; any output pointer may be null.
enum SpadeStatus spade_model_shape(const struct SpadeModel *model,
                                   size_t *vocab,
                                   size_t *d,
                                   size_t *depth);

// Total and trainable scalar parameter counts.
//
// # Safety
// `model` must come from this library; output pointers may be null.
enum SpadeStatus spade_model_param_count(const struct SpadeModel *model,
                                         size_t *total,
                                         size_t *trainable);

// Next-token logits for `len` tokens, written row-major into `logits`
// (`len × vocab` floats). `capacity` is the buffer length in floats; if it
// is too small nothing is written and `BufferTooSmall` is returned.
//
// # Safety
// `tokens` must point to `len` values and `logits` to `capacity` floats.
enum SpadeStatus spade_model_logits(const struct SpadeModel *model,
                                    const uint32_t *tokens,
                                    size_t len,
                                    float *logits,
                                    size_t capacity);

// Mean next-token cross-entropy (nats) of a token sequence, predicting
// `tokens[1..]` from `tokens[..len-1]`.
//
// # Safety
// `tokens` must point to `len` values and `loss` to one double.
enum SpadeStatus spade_model_sequence_loss(const struct SpadeModel *model,
                                           const uint32_t *tokens,
                                           size_t len,
                                           double *loss);

// Runs the command-line front end in-process and returns its exit code.
//
// # Safety
// `argv` must point to `argc` NUL-terminated strings.
int32_t spade_run_cli(size_t argc, const char *const *argv);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPADE_H */
