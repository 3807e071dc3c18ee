#ifndef CLINJUDGE_H
#define CLINJUDGE_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Zero is success.
 */
typedef enum CjStatus {
  CJ_STATUS_OK = 0,
  CJ_STATUS_NULL_ARGUMENT = 1,
  CJ_STATUS_INVALID_UTF8 = 2,
  CJ_STATUS_PARSE_ERROR = 3,
  CJ_STATUS_KB_ERROR = 4,
  CJ_STATUS_JUDGE_ERROR = 5,
  CJ_STATUS_INVALID_ARGUMENT = 6,
  CJ_STATUS_PANIC = 99,
} CjStatus;

/**
 * Judging policy, passed to [`cj_judge_note`] as its integer value.
 */
typedef enum CjPolicy {
  CJ_POLICY_STAGE1_STRICT = 1,
  CJ_POLICY_STAGE2_INFERENCE_AWARE = 2,
} CjPolicy;

/**
 * Opaque knowledge-base handle.
 */
typedef struct CjKb CjKb;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Creates a handle to the bundled seed knowledge base.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage.
 */
enum CjStatus cj_kb_seed(struct CjKb **out);

/**
 * Loads a knowledge base from bundle JSON text.
 *
 * # Safety
 * `json` must be a nul-terminated string; `out` must be writable.
 */
enum CjStatus cj_kb_load_bundle(const char *json, struct CjKb **out);

/**
 * Releases a knowledge-base handle. Null is ignored.
 *
 * # Safety
 * `kb` must be null or a handle not yet freed.
 */
void cj_kb_free(struct CjKb *kb);

/**
 * Resolves a surface term to its concept id. Writes null to `out` when the
 * term is unknown.
 *
 * # Safety
 * `kb` must be a live handle, `term` nul-terminated, `out` writable.
 */
enum CjStatus cj_kb_resolve(const struct CjKb *kb, const char *term, char **out);

/**
 * Judges a SOAP note against a transcript (both in their text formats) and
 * writes the note report as JSON to `out`. `policy` is a [`CjPolicy`]
 * value; anything else yields `InvalidArgument`.
 *
 * # Safety
 * `kb` must be a live handle, the texts nul-terminated, `out` writable.
 */
enum CjStatus cj_judge_note(const struct CjKb *kb,
                            const char *transcript,
                            const char *soap_note,
                            uint32_t policy,
                            char **out);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must be null or a string from this library not yet freed.
 */
void cj_string_free(char *s);

/**
 * Message for the last failed call on this thread, or null. Valid until the
 * next call into this library on the same thread.
 */
const char *cj_last_error_message(void);

/**
 * Library version, statically allocated.
 */
const char *cj_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CLINJUDGE_H */
