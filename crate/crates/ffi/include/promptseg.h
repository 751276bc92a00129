#ifndef PROMPTSEG_H
#define PROMPTSEG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes returned by every fallible function.
 */
typedef enum PsgStatus {
  PSG_STATUS_OK = 0,
  PSG_STATUS_NULL_POINTER = 1,
  PSG_STATUS_INVALID_ARGUMENT = 2,
  PSG_STATUS_CONFIG = 3,
  PSG_STATUS_NUMERIC = 4,
  PSG_STATUS_IO = 5,
  PSG_STATUS_CHECKPOINT = 6,
  PSG_STATUS_PANIC = 7,
} PsgStatus;

/**
 * Run configuration handle.
 */
typedef struct PsgConfig PsgConfig;

/**
 * Trained model handle: configuration, architecture and parameters.
 */
typedef struct PsgModel PsgModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or null. The
 * pointer stays valid until the next call into this library.
 */
const char *psg_last_error_message(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *psg_version(void);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must be null or a pointer previously returned by this library.
 */
void psg_string_free(char *s);

/**
 * Creates a configuration with default values.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum PsgStatus psg_config_new(struct PsgConfig **out);

/**
 * Parses a TOML configuration on top of the defaults.
 *
 * # Safety
 * `toml` must be a nul-terminated string and `out` a valid pointer.
 */
enum PsgStatus psg_config_from_toml(const char *toml, struct PsgConfig **out);

/**
 * Applies one `key=value` override.
 *
 * # Safety
 * `cfg` must be a live handle and `assignment` a nul-terminated string.
 */
enum PsgStatus psg_config_set(struct PsgConfig *cfg, const char *assignment);

/**
 * Renders the configuration as TOML; free the result with
 * [`psg_string_free`].
 *
 * # Safety
 * `cfg` must be a live handle and `out` a valid pointer.
 */
enum PsgStatus psg_config_to_toml(const struct PsgConfig *cfg, char **out);

/**
 * # Safety
 * `cfg` must be null or a handle from this library, not used afterwards.
 */
void psg_config_free(struct PsgConfig *cfg);

/**
 * Trains on the synthetic dataset described by `cfg`. `out_dir` may be
 * null to skip writing a run directory.
 *
 * # Safety
 * `cfg` must be a live handle, `out_dir` null or a nul-terminated string,
 * and `out` a valid pointer.
 */
enum PsgStatus psg_train(const struct PsgConfig *cfg, const char *out_dir, struct PsgModel **out);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum PsgStatus psg_model_load(const char *path, struct PsgModel **out);

/**
 * Writes a checkpoint file.
 *
 * # Safety
 * `model` must be a live handle and `path` a nul-terminated string.
 */
enum PsgStatus psg_model_save(const struct PsgModel *model, const char *path);

/**
 * Number of classes the model predicts.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum PsgStatus psg_model_num_classes(const struct PsgModel *model, size_t *out);

/**
 * mIoU on a split (`"train"` or `"val"`) of the model's own synthetic
 * dataset. `raw_alignment` selects the alignment-map argmax instead of
 * the decoder.
 *
 * # Safety
 * `model` must be a live handle, `split` a nul-terminated string and
 * `miou` a valid pointer.
 */
enum PsgStatus psg_model_evaluate(const struct PsgModel *model,
                                  const char *split,
                                  bool raw_alignment,
                                  double *miou);

/**
 * Segments one image. `rgb` holds `height * width * 3` values in
 * row-major, channel-last order; `labels` receives `height * width`
 * class indices.
 *
 * # Safety
 * `model` must be a live handle and the buffers must have the stated
 * lengths.
 */
enum PsgStatus psg_model_predict(const struct PsgModel *model,
                                 const double *rgb,
                                 size_t height,
                                 size_t width,
                                 uint8_t *labels);

/**
 * # Safety
 * `model` must be null or a handle from this library, not used afterwards.
 */
void psg_model_free(struct PsgModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROMPTSEG_H */
