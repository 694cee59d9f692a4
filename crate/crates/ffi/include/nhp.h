#ifndef NHP_H
#define NHP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum NhpProtocol {
  NHP_PROTOCOL_POSE = 0,
  NHP_PROTOCOL_IDENTITY = 1,
  NHP_PROTOCOL_SEEN = 2,
} NhpProtocol;

typedef enum NhpStatus {
  NHP_STATUS_OK = 0,
  NHP_STATUS_NULL_POINTER = 1,
  NHP_STATUS_INVALID_ARGUMENT = 2,
  NHP_STATUS_IO = 3,
  NHP_STATUS_FORMAT = 4,
  NHP_STATUS_NON_FINITE = 5,
  NHP_STATUS_BUFFER_TOO_SMALL = 6,
  NHP_STATUS_PANIC = 7,
  NHP_STATUS_INTERNAL = 8,
} NhpStatus;

// A dataset directory read into memory.
typedef struct NhpDataset NhpDataset;

// Trained weights with their configuration, ready for rendering.
typedef struct NhpModel NhpModel;

// Library version as a static NUL-terminated string.
const char *nhp_version(void);

// Copies the calling thread's last error message into `buf` (truncated,
// always NUL-terminated when `len > 0`) and returns the full message length
// in bytes, excluding the terminator. The message is empty after a
// successful call.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t nhp_last_error(char *buf, size_t len);

// Reads a dataset directory written by `nhp gen-data`.
//
// # Safety
// `dir` must be a NUL-terminated string and `out` a valid pointer.
enum NhpStatus nhp_dataset_open(const char *dir, struct NhpDataset **out);

// # Safety
// `dataset` must be null or a handle from `nhp_dataset_open` not yet freed.
void nhp_dataset_free(struct NhpDataset *dataset);

// Subject, frame and camera counts and the image size of a dataset. Any
// output pointer may be null.
//
// # Safety
// `dataset` must be a live handle; non-null outputs must be valid.
enum NhpStatus nhp_dataset_info(const struct NhpDataset *dataset,
                                size_t *subjects,
                                size_t *frames,
                                size_t *views,
                                size_t *width,
                                size_t *height);

// Loads a checkpoint written by `nhp train` in either precision.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum NhpStatus nhp_model_load(const char *path, struct NhpModel **out);

// # Safety
// `model` must be null or a handle from `nhp_model_load` not yet freed.
void nhp_model_free(struct NhpModel *model);

// Renders `subject` at `frame` from dataset camera `view` into `rgb`, row
// major, three floats per pixel in [0, 1]. `rgb_len` is the buffer length
// in floats and must be at least `3·width·height`. `samples` of 0 uses the
// checkpoint's training setting.
//
// # Safety
// Handles must be live, `subject` NUL-terminated and `rgb` must point to
// `rgb_len` writable floats.
enum NhpStatus nhp_render(const struct NhpModel *model,
                          const struct NhpDataset *dataset,
                          const char *subject,
                          size_t frame,
                          size_t view,
                          size_t samples,
                          float *rgb,
                          size_t rgb_len);

// Scores the model under an evaluation protocol (an [`NhpProtocol`] value)
// of its configuration and writes the mean PSNR (dB) and SSIM. Either
// output may be null.
//
// # Safety
// Handles must be live; non-null outputs must be valid.
enum NhpStatus nhp_evaluate(const struct NhpModel *model,
                            const struct NhpDataset *dataset,
                            uint32_t protocol,
                            double *psnr,
                            double *ssim);

#endif /* NHP_H */
