#ifndef HEARTNET_H
#define HEARTNET_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HnStatus {
  HN_STATUS_OK = 0,
  HN_STATUS_NULL_POINTER = 1,
  HN_STATUS_INVALID_ARGUMENT = 2,
  HN_STATUS_IO = 3,
  HN_STATUS_PARSE = 4,
  HN_STATUS_CHECKPOINT = 5,
  // The signal is shorter than the operation needs.
  HN_STATUS_TOO_SHORT = 6,
  // No cardiac cycle of usable length was found.
  HN_STATUS_UNSEGMENTABLE = 7,
  // The output buffer is too small; the required count was written.
  HN_STATUS_BUFFER_TOO_SMALL = 8,
  HN_STATUS_NUMERIC = 9,
  HN_STATUS_INTERNAL = 10,
} HnStatus;

// Feature-based classifier.
typedef struct HnBaseline HnBaseline;

// Segmental CNN with its vote threshold.
typedef struct HnCnn HnCnn;

// HSMM heart-sound segmenter.
typedef struct HnSegmenter HnSegmenter;

// Sample-index boundaries of one cardiac cycle.
typedef struct HnCycle {
  size_t s1_start;
  size_t sys_start;
  size_t s2_start;
  size_t dia_start;
  size_t cycle_end;
} HnCycle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *hn_version(void);

// Message of the last failed call on this thread, or NULL after a
// successful call. Valid until the next call on this thread.
const char *hn_last_error(void);

// Wavelet-denoises `len` samples into `out` (also `len` long) and writes
// the estimated SNR in dB.
//
// # Safety
// `samples` and `out` must point to `len` valid doubles; `out_snr_db` must
// be a valid pointer.
enum HnStatus hn_denoise(const double *samples, size_t len, double *out, double *out_snr_db);

// Creates the default segmenter.
//
// # Safety
// `out` must be a valid pointer; it receives a handle to release with
// [`hn_segmenter_free`].
enum HnStatus hn_segmenter_new(struct HnSegmenter **out);

// # Safety
// `handle` must come from [`hn_segmenter_new`] and not be used again; NULL
// is ignored.
void hn_segmenter_free(struct HnSegmenter *handle);

// Resamples, normalizes, denoises and segments a recording. Writes up to
// `capacity` cycles to `out_cycles` and the total count to `out_count`;
// returns `BufferTooSmall` when `capacity` is short.
//
// # Safety
// `samples` must point to `len` doubles, `out_cycles` to `capacity`
// cycles (may be NULL when `capacity` is 0), and `out_count` must be valid.
enum HnStatus hn_segment(const struct HnSegmenter *segmenter,
                         const double *samples,
                         size_t len,
                         uint32_t sample_rate,
                         struct HnCycle *out_cycles,
                         size_t capacity,
                         size_t *out_count);

// Loads a CNN from a directory written by `heartnet train-cnn`.
//
// # Safety
// `dir` must be a NUL-terminated string and `out` a valid pointer; the
// handle is released with [`hn_cnn_free`].
enum HnStatus hn_cnn_load(const char *dir, struct HnCnn **out);

// # Safety
// `handle` must come from [`hn_cnn_load`] and not be used again; NULL is
// ignored.
void hn_cnn_free(struct HnCnn *handle);

// Classifies a recording by voting over its segments. `out_score` gets
// the abnormal segment fraction.
//
// # Safety
// Handles must be live, `samples` must point to `len` doubles and the
// output pointers must be valid.
enum HnStatus hn_cnn_classify(const struct HnCnn *cnn,
                              const struct HnSegmenter *segmenter,
                              const double *samples,
                              size_t len,
                              uint32_t sample_rate,
                              double *out_score,
                              int32_t *out_label);

// Loads a model file written by `heartnet train-baseline`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer; the
// handle is released with [`hn_baseline_free`].
enum HnStatus hn_baseline_load(const char *path, struct HnBaseline **out);

// # Safety
// `handle` must come from [`hn_baseline_load`] and not be used again; NULL
// is ignored.
void hn_baseline_free(struct HnBaseline *handle);

// Classifies a recording from its cycle statistics. `out_score` gets the
// model's abnormal score.
//
// # Safety
// Handles must be live, `samples` must point to `len` doubles and the
// output pointers must be valid.
enum HnStatus hn_baseline_classify(const struct HnBaseline *model,
                                   const struct HnSegmenter *segmenter,
                                   const double *samples,
                                   size_t len,
                                   uint32_t sample_rate,
                                   double *out_score,
                                   int32_t *out_label);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HEARTNET_H */
