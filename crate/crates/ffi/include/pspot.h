#ifndef PSPOT_H
#define PSPOT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PspotStatus {
  PSPOT_STATUS_OK = 0,
  PSPOT_STATUS_INVALID_ARGUMENT = 1,
  PSPOT_STATUS_CONFIG = 2,
  PSPOT_STATUS_MISSING_ASSET = 3,
  PSPOT_STATUS_CORRUPT_INDEX = 4,
  PSPOT_STATUS_IO = 5,
  PSPOT_STATUS_INTERNAL = 6,
  PSPOT_STATUS_DIMENSION = 7,
  PSPOT_STATUS_UNKNOWN_PAGE = 8,
} PspotStatus;

/**
 * A loaded configuration, extractor and index.
 */
typedef struct PspotEngine PspotEngine;

/**
 * Results of one query.
 */
typedef struct PspotResults PspotResults;

typedef struct PspotBox {
  int64_t x;
  int64_t y;
  int64_t w;
  int64_t h;
} PspotBox;

typedef struct PspotDetection {
  /**
   * 1-based.
   */
  uint32_t rank;
  /**
   * Position of the page in the index catalog.
   */
  uint32_t page_index;
  struct PspotBox bbox;
  double score;
} PspotDetection;

typedef struct PspotPageHit {
  uint32_t rank;
  uint32_t page_index;
  double score;
} PspotPageHit;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 */
const char *pspot_last_error_message(void);

/**
 * Library version, static string.
 */
const char *pspot_version(void);

/**
 * Opens the engine described by a TOML configuration file.
 *
 * # Safety
 * `config_path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum PspotStatus pspot_engine_open(const char *config_path, struct PspotEngine **out);

/**
 * # Safety
 * `engine` must come from [`pspot_engine_open`] and not be used afterwards. Null is ignored.
 */
void pspot_engine_free(struct PspotEngine *engine);

/**
 * Number of indexed pages.
 *
 * # Safety
 * `engine` must be a live handle.
 */
size_t pspot_engine_page_count(const struct PspotEngine *engine);

/**
 * Runs a query read from an image file.
 *
 * # Safety
 * Pointers must be valid; strings NUL-terminated.
 */
enum PspotStatus pspot_engine_spot_file(const struct PspotEngine *engine,
                                        const char *query_path,
                                        const char *query_id,
                                        struct PspotResults **out);

/**
 * Runs a query given as packed 8-bit RGB rows, `row_stride` bytes apart.
 *
 * # Safety
 * `pixels` must point to at least `row_stride * height` readable bytes.
 */
enum PspotStatus pspot_engine_spot_rgb(const struct PspotEngine *engine,
                                       const uint8_t *pixels,
                                       uint32_t width,
                                       uint32_t height,
                                       size_t row_stride,
                                       const char *query_id,
                                       struct PspotResults **out);

/**
 * # Safety
 * `results` must come from a spot call and not be used afterwards. Null is ignored.
 */
void pspot_results_free(struct PspotResults *results);

/**
 * # Safety
 * `results` must be a live handle.
 */
const char *pspot_results_query_id(const struct PspotResults *results);

/**
 * Pyramid level (3, 4 or 5) the query was searched at; 0 for a null handle.
 *
 * # Safety
 * `results` must be a live handle.
 */
uint8_t pspot_results_level(const struct PspotResults *results);

/**
 * # Safety
 * `results` must be a live handle.
 */
size_t pspot_results_detection_count(const struct PspotResults *results);

/**
 * Detection `n` (0-based, in rank order) and, optionally, its page id.
 *
 * # Safety
 * `results` must be a live handle, `out` valid; `page_id` may be null.
 */
enum PspotStatus pspot_results_detection(const struct PspotResults *results,
                                         size_t n,
                                         struct PspotDetection *out,
                                         const char **page_id);

/**
 * # Safety
 * `results` must be a live handle.
 */
size_t pspot_results_page_count(const struct PspotResults *results);

/**
 * Page hit `n` (0-based, in rank order) and, optionally, its page id.
 *
 * # Safety
 * `results` must be a live handle, `out` valid; `page_id` may be null.
 */
enum PspotStatus pspot_results_page(const struct PspotResults *results,
                                    size_t n,
                                    struct PspotPageHit *out,
                                    const char **page_id);

/**
 * Pyramid level for a `width x height` query, clamped to 3..=5.
 */
uint8_t pspot_assign_level(uint32_t width, uint32_t height, int32_t k0);

/**
 * Intersection over union; 0 when both boxes are empty.
 */
double pspot_iou(struct PspotBox a, struct PspotBox b);

/**
 * Average precision of a ranked relevance list (`flags[i] != 0` = relevant)
 * with `num_relevant` relevant items in total.
 *
 * # Safety
 * `flags` must point to `n` readable bytes (may be null when `n == 0`); `out` must be valid.
 */
enum PspotStatus pspot_average_precision(const uint8_t *flags,
                                         size_t n,
                                         size_t num_relevant,
                                         double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PSPOT_H */
