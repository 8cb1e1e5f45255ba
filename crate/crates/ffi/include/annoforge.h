#ifndef ANNOFORGE_H
#define ANNOFORGE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AfMcNemarMethod {
  AF_MC_NEMAR_METHOD_EXACT = 0,
  AF_MC_NEMAR_METHOD_CHI2_CC = 1,
  AF_MC_NEMAR_METHOD_AUTO = 2,
} AfMcNemarMethod;

typedef enum AfStatus {
  AF_STATUS_OK = 0,
  AF_STATUS_NULL_ARGUMENT = 1,
  AF_STATUS_INVALID_UTF8 = 2,
  AF_STATUS_INVALID_ARGUMENT = 3,
  AF_STATUS_CONFIG_ERROR = 4,
  AF_STATUS_DATASET_ERROR = 5,
  AF_STATUS_IO_ERROR = 6,
  AF_STATUS_PROVIDER_ERROR = 7,
  AF_STATUS_METRICS_ERROR = 8,
  AF_STATUS_PANIC = 9,
} AfStatus;

/**
 * A loaded dataset.
 */
typedef struct AfDataset AfDataset;

/**
 * A finished run: manifest, dataset and transcripts.
 */
typedef struct AfRun AfRun;

/**
 * Counts reported by `af_annotate`.
 */
typedef struct AfAnnotateSummary {
  size_t instances;
  size_t failed;
  size_t resumed;
  size_t backend_calls;
} AfAnnotateSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Free the result
 * with `af_string_free`.
 */
char *af_last_error(void);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library, freed once.
 */
void af_string_free(char *s);

/**
 * Fleiss' kappa of a row-major `items` x `categories` count table.
 *
 * # Safety
 * `counts` must point to `items * categories` values; `out` must be valid.
 */
enum AfStatus af_fleiss_kappa(const uint32_t *counts, size_t items, size_t categories, double *out);

/**
 * McNemar test on discordant counts. `statistic` receives NaN for the exact
 * method; it may be NULL.
 *
 * # Safety
 * `p_value` must be valid; `statistic` must be NULL or valid.
 */
enum AfStatus af_mcnemar(uint64_t b,
                         uint64_t c,
                         enum AfMcNemarMethod method,
                         double *p_value,
                         double *statistic);

/**
 * Parses a model response against `labels`. `out_index` receives the
 * position of the matched label, or -1 when no valid label was found.
 *
 * # Safety
 * `labels` must point to `n_labels` NUL-terminated strings.
 */
enum AfStatus af_parse_label(const char *text,
                             const char *const *labels,
                             size_t n_labels,
                             int64_t *out_index);

/**
 * # Safety
 * Paths must be NUL-terminated; `out` must be valid.
 */
enum AfStatus af_dataset_load(const char *data, const char *guideline, struct AfDataset **out);

/**
 * Number of instances, or 0 for NULL.
 *
 * # Safety
 * `ds` must be NULL or a live handle.
 */
size_t af_dataset_len(const struct AfDataset *ds);

/**
 * Size of the label space, or 0 for NULL.
 *
 * # Safety
 * `ds` must be NULL or a live handle.
 */
size_t af_dataset_label_count(const struct AfDataset *ds);

/**
 * # Safety
 * `ds` must be NULL or a handle from `af_dataset_load`, freed once.
 */
void af_dataset_free(struct AfDataset *ds);

/**
 * Runs `annotate` from a TOML config file. Failed instances are reported in
 * `summary`, not as an error status.
 *
 * # Safety
 * `config_path` must be NUL-terminated; `summary` must be NULL or valid.
 */
enum AfStatus af_annotate(const char *config_path, struct AfAnnotateSummary *summary);

/**
 * Loads a run directory written by `af_annotate`.
 *
 * # Safety
 * `dir` must be NUL-terminated; `out` must be valid.
 */
enum AfStatus af_run_load(const char *dir, struct AfRun **out);

/**
 * Number of transcripts, or 0 for NULL.
 *
 * # Safety
 * `run` must be NULL or a live handle.
 */
size_t af_run_len(const struct AfRun *run);

/**
 * Number of transcripts whose instance failed, or 0 for NULL.
 *
 * # Safety
 * `run` must be NULL or a live handle.
 */
size_t af_run_failed(const struct AfRun *run);

/**
 * Scores `n_runs` runs together and writes the report files to
 * `reports_dir`.
 *
 * # Safety
 * `runs` must point to `n_runs` live handles; `reports_dir` must be
 * NUL-terminated.
 */
enum AfStatus af_evaluate(const struct AfRun *const *runs,
                          size_t n_runs,
                          enum AfMcNemarMethod method,
                          const char *reports_dir);

/**
 * # Safety
 * `run` must be NULL or a handle from `af_run_load`, freed once.
 */
void af_run_free(struct AfRun *run);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ANNOFORGE_H */
