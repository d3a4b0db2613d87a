#ifndef GROUNDREF_H
#define GROUNDREF_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum GrAnswerKind {
  GR_ANSWER_KIND_BOXES = 0,
  GR_ANSWER_KIND_REJECTION = 1,
  GR_ANSWER_KIND_UNPARSEABLE = 2,
} GrAnswerKind;

typedef enum GrStatus {
  GR_STATUS_OK = 0,
  GR_STATUS_NULL_POINTER = 1,
  GR_STATUS_INVALID_UTF8 = 2,
  GR_STATUS_INVALID_ARGUMENT = 3,
  GR_STATUS_PARSE = 4,
  GR_STATUS_EVALUATION = 5,
  GR_STATUS_OUT_OF_RANGE = 6,
  GR_STATUS_PANIC = 7,
} GrStatus;

/**
 * Accumulates tasks and predictions, then produces an evaluation report.
 */
typedef struct GrEvaluator GrEvaluator;

/**
 * Parsed model response.
 */
typedef struct GrResponse GrResponse;

typedef struct GrRewardBreakdown {
  double precision;
  double recall;
  double f1;
  double fmt;
  double total;
} GrRewardBreakdown;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *gr_version(void);

/**
 * Message for the last failed call on this thread, or NULL. The pointer is
 * valid until the next call into this library on the same thread.
 */
const char *gr_last_error_message(void);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library, freed at most once.
 */
void gr_string_free(char *s);

/**
 * IoU of two `[x0, y0, x1, y1]` boxes.
 *
 * # Safety
 * `a` and `b` must point to 4 doubles; `out` must be writable.
 */
enum GrStatus gr_iou(const double *a, const double *b, double *out);

/**
 * # Safety
 * `raw` must be a NUL-terminated string; `out` must be writable.
 */
enum GrStatus gr_validate_format(const char *raw, bool *out);

/**
 * Parse a response. Never fails on content; returns NULL only on bad input
 * pointers or encoding.
 *
 * # Safety
 * `raw` must be a NUL-terminated string.
 */
struct GrResponse *gr_response_parse(const char *raw);

/**
 * # Safety
 * `r` must be NULL or a handle from `gr_response_parse`, freed at most once.
 */
void gr_response_free(struct GrResponse *r);

/**
 * # Safety
 * `r` must be a live response handle.
 */
bool gr_response_format_ok(const struct GrResponse *r);

/**
 * # Safety
 * `r` must be a live response handle.
 */
enum GrAnswerKind gr_response_answer_kind(const struct GrResponse *r);

/**
 * # Safety
 * `r` must be a live response handle.
 */
size_t gr_response_box_count(const struct GrResponse *r);

/**
 * Copy box `index` of the answer into `out[0..4]`.
 *
 * # Safety
 * `r` must be a live response handle; `out` must have room for 4 doubles.
 */
enum GrStatus gr_response_box(const struct GrResponse *r, size_t index, double *out);

/**
 * Score `raw` against a task given as one tasks-JSONL line.
 *
 * # Safety
 * `task_json` and `raw` must be NUL-terminated strings; `out` writable.
 */
enum GrStatus gr_reward_response(const char *task_json,
                                 const char *raw,
                                 double lambda,
                                 struct GrRewardBreakdown *out);

/**
 * Group-relative advantages of `n` rewards, written to `out[0..n]`.
 *
 * # Safety
 * `rewards` must hold `n` doubles and `out` must have room for `n`.
 */
enum GrStatus gr_normalize_advantages(const double *rewards,
                                      size_t n,
                                      double std_floor,
                                      double *out);

/**
 * Per-token KL estimate from current and reference log-probabilities.
 */
double gr_kl_term(double logp_current, double logp_ref);

double gr_importance_ratio(double logp_current, double logp_old);

struct GrEvaluator *gr_evaluator_new(void);

/**
 * # Safety
 * `ev` must be NULL or a handle from `gr_evaluator_new`, freed at most once.
 */
void gr_evaluator_free(struct GrEvaluator *ev);

/**
 * Add tasks from JSONL text (one or more lines).
 *
 * # Safety
 * `ev` must be a live evaluator; `jsonl` a NUL-terminated string.
 */
enum GrStatus gr_evaluator_add_tasks(struct GrEvaluator *ev, const char *jsonl);

/**
 * Add predictions from JSONL text (one or more lines).
 *
 * # Safety
 * `ev` must be a live evaluator; `jsonl` a NUL-terminated string.
 */
enum GrStatus gr_evaluator_add_predictions(struct GrEvaluator *ev, const char *jsonl);

/**
 * Evaluate on the default threshold grid and write the report JSON to
 * `*out` (free with `gr_string_free`).
 *
 * # Safety
 * `ev` must be a live evaluator; `out` writable.
 */
enum GrStatus gr_evaluator_report_json(const struct GrEvaluator *ev, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GROUNDREF_H */
