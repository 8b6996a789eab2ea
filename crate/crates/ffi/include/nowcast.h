#ifndef NOWCAST_H
#define NOWCAST_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes; 2 to 4 match the command-line exit codes.
 */
typedef enum NcStatus {
  NC_STATUS_OK = 0,
  NC_STATUS_NULL_POINTER = 1,
  NC_STATUS_INVALID_ARGUMENT = 2,
  NC_STATUS_DATA_ERROR = 3,
  NC_STATUS_INFERENCE_ERROR = 4,
  NC_STATUS_PANIC = 5,
} NcStatus;

/**
 * Predictive distribution of the complete counts per event date.
 */
typedef struct NcNowcast NcNowcast;

/**
 * Reporting triangle built from a snapshot directory.
 */
typedef struct NcTriangle NcTriangle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or NULL.
 */
const char *nc_last_error(void);

const char *nc_version(void);

/**
 * Sample CRPS of `n` predictive draws against `truth`.
 */
enum NcStatus nc_crps(const uint64_t *draws, size_t n, uint64_t truth, double *out);

/**
 * Log score of `n` predictive draws against `truth`.
 */
enum NcStatus nc_log_score(const uint64_t *draws, size_t n, uint64_t truth, double *out);

/**
 * Negative binomial log pmf with mean `mu` and size `phi`.
 */
enum NcStatus nc_nb_logpmf(uint64_t y, double mu, double phi, double *out);

/**
 * Delay probabilities from `n` hazards whose last entry is 1; writes `n` values.
 */
enum NcStatus nc_delay_probabilities(const double *hazards, size_t n, double *out);

/**
 * Builds the triangle as of `now` (NULL: latest snapshot) from the
 * `YYYY-MM-DD.csv` snapshots in `snapshot_dir`.
 */
enum NcStatus nc_triangle_load(const char *snapshot_dir,
                               const char *calendar_path,
                               const char *now,
                               size_t max_delay,
                               struct NcTriangle **out);

/**
 * Number of event dates (rows).
 */
enum NcStatus nc_triangle_rows(const struct NcTriangle *t, size_t *out);

/**
 * Number of delay columns, `max_delay + 1`.
 */
enum NcStatus nc_triangle_width(const struct NcTriangle *t, size_t *out);

/**
 * Count reported for event row `row` at delay `d`; 0 for unobserved cells.
 */
enum NcStatus nc_triangle_cell(const struct NcTriangle *t, size_t row, size_t d, uint64_t *out);

/**
 * Accepts NULL.
 */
void nc_triangle_free(struct NcTriangle *t);

/**
 * Fits the model of the JSON config at `config_path` as of `now` (NULL: the
 * config's date, else the latest snapshot) and keeps the predictive draws.
 */
enum NcStatus nc_nowcast_run(const char *config_path, const char *now, struct NcNowcast **out);

enum NcStatus nc_nowcast_rows(const struct NcNowcast *h, size_t *out);

/**
 * `YYYY-MM-DD` of row `index`, owned by the handle.
 */
enum NcStatus nc_nowcast_event_date(const struct NcNowcast *h, size_t index, const char **out);

/**
 * Count reported so far for row `index`.
 */
enum NcStatus nc_nowcast_observed(const struct NcNowcast *h, size_t index, uint64_t *out);

enum NcStatus nc_nowcast_mean(const struct NcNowcast *h, size_t index, double *out);

/**
 * Nearest-rank predictive quantile at `level` in (0, 1].
 */
enum NcStatus nc_nowcast_quantile(const struct NcNowcast *h,
                                  size_t index,
                                  double level,
                                  uint64_t *out);

/**
 * Ascending predictive draws of row `index`, owned by the handle.
 */
enum NcStatus nc_nowcast_draws(const struct NcNowcast *h,
                               size_t index,
                               const uint64_t **draws,
                               size_t *n);

/**
 * Accepts NULL.
 */
void nc_nowcast_free(struct NcNowcast *h);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NOWCAST_H */
