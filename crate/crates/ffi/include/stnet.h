#ifndef STNET_H
#define STNET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Segment sampling regime: random offsets for training, centered for evaluation.
typedef enum StnetSampleMode {
  STNET_SAMPLE_MODE_TRAIN = 0,
  STNET_SAMPLE_MODE_EVAL = 1,
} StnetSampleMode;

// Result code of every fallible call.
typedef enum StnetStatus {
  STNET_STATUS_OK = 0,
  STNET_STATUS_NULL_POINTER = 1,
  STNET_STATUS_INVALID_ARGUMENT = 2,
  STNET_STATUS_SHAPE_MISMATCH = 3,
  STNET_STATUS_IO = 4,
  STNET_STATUS_INTERNAL = 5,
  STNET_STATUS_PANIC = 6,
} StnetStatus;

// Opaque model handle: an architecture plus its f32 parameters.
typedef struct StnetModel StnetModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread (empty if none). The pointer stays
// valid until the next failing call on the same thread.
const char *stnet_last_error(void);

// Library version as a static NUL-terminated string.
const char *stnet_version(void);

// Builds an StNet from a JSON run config (NULL for defaults) with the standard init.
//
// # Safety
// `config_json` is null or NUL-terminated; `out` is a valid pointer.
enum StnetStatus stnet_model_new_stnet(const char *config_json,
                                       size_t num_classes,
                                       uint64_t seed,
                                       struct StnetModel **out);

// Builds an iTXN over the modalities configured in the run config.
//
// # Safety
// As for [`stnet_model_new_stnet`].
enum StnetStatus stnet_model_new_itxn(const char *config_json,
                                      size_t num_classes,
                                      uint64_t seed,
                                      struct StnetModel **out);

// # Safety
// `model` is null or a handle from a `stnet_model_new_*` call, freed at most once.
void stnet_model_free(struct StnetModel *model);

// # Safety
// `model` and `out` are valid pointers.
enum StnetStatus stnet_model_param_count(const struct StnetModel *model, size_t *out);

// Output width (number of classes) of the model.
//
// # Safety
// `model` and `out` are valid pointers.
enum StnetStatus stnet_model_num_classes(const struct StnetModel *model, size_t *out);

// Layer table as JSON. Release the string with [`stnet_string_free`].
//
// # Safety
// `model` and `out` are valid pointers.
enum StnetStatus stnet_model_describe_json(const struct StnetModel *model, char **out);

// # Safety
// `s` is null or a string returned by this library, freed at most once.
void stnet_string_free(char *s);

// Eval-mode StNet forward on clips laid out `[batch, segments, channels, height, width]`
// (row-major f32, `channels` = 3N). Writes `batch * num_classes` logits.
//
// # Safety
// `clips` holds the stated number of floats; `logits` holds `logits_len` floats.
enum StnetStatus stnet_model_forward_clips(const struct StnetModel *model,
                                           const float *clips,
                                           size_t batch,
                                           size_t segments,
                                           size_t channels,
                                           size_t height,
                                           size_t width,
                                           float *logits,
                                           size_t logits_len);

// Eval-mode iTXN forward on one sample. Modality `i` is named `names[i]`
// (`rgb`, `flow_a`, `flow_b`, `audio`) and has `lengths[i] x dims[i]` row-major floats
// at `data[i]`. Writes `num_classes` logits.
//
// # Safety
// All arrays hold `n_modalities` entries and each `data[i]` holds the stated floats.
enum StnetStatus stnet_model_forward_bundle(const struct StnetModel *model,
                                            const char *const *names,
                                            const float *const *data,
                                            const size_t *lengths,
                                            const size_t *dims,
                                            size_t n_modalities,
                                            float *logits,
                                            size_t logits_len);

// Writes the parameters as a manifest plus one binary blob per tensor under `dir`.
//
// # Safety
// `model` is valid; `dir` is NUL-terminated.
enum StnetStatus stnet_model_save_params(const struct StnetModel *model, const char *dir);

// Replaces the parameters with ones saved by [`stnet_model_save_params`]; names and
// shapes must match the architecture.
//
// # Safety
// `model` is valid; `dir` is NUL-terminated.
enum StnetStatus stnet_model_load_params(struct StnetModel *model, const char *dir);

// Start frame of each of `segments` segments of `n` frames in a clip of `frames` frames.
//
// # Safety
// `offsets` holds `offsets_len` entries.
enum StnetStatus stnet_sample_segments(size_t frames,
                                       size_t segments,
                                       size_t n,
                                       enum StnetSampleMode mode,
                                       uint64_t seed,
                                       size_t *offsets,
                                       size_t offsets_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STNET_H */
