#ifndef GATESIM_H
#define GATESIM_H

/* Generated by cbindgen from crates/ffi/src. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GsStatus {
  GS_STATUS_OK = 0,
  GS_STATUS_NULL_POINTER = 1,
  GS_STATUS_INVALID_ARGUMENT = 2,
  GS_STATUS_CONFIG = 3,
  GS_STATUS_LAYOUT = 4,
  GS_STATUS_SEARCH = 5,
  GS_STATUS_BUFFER_TOO_SMALL = 6,
  GS_STATUS_PANIC = 7,
} GsStatus;

typedef enum GsPageView {
  GS_PAGE_VIEW_USER = 0,
  GS_PAGE_VIEW_KERNEL = 1,
} GsPageView;

/**
 * A booted machine with mitigations applied.
 */
typedef struct GsMachine GsMachine;

/**
 * Scenario settings; see `gs_scenario_set` for the keys.
 */
typedef struct GsScenario GsScenario;

typedef struct GsSearchResult {
  bool found;
  uint64_t idt;
  uint64_t gdt;
  uint64_t candidates_probed;
  uint64_t misclassifications;
  double simulated_seconds;
} GsSearchResult;

typedef struct GsAttackOutcome {
  bool address_found;
  bool sgdt_leaks_truth;
  bool exploit_success;
} GsAttackOutcome;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Owned by the
 * library.
 */
const char *gs_last_error(void);

/**
 * Library version, static storage.
 */
const char *gs_version(void);

struct GsScenario *gs_scenario_new(void);

/**
 * # Safety
 * `s` must come from `gs_scenario_new` and not be used afterwards.
 */
void gs_scenario_free(struct GsScenario *s);

/**
 * Sets one `key=value` scenario entry (same keys as the config file).
 *
 * # Safety
 * `s` must be a live scenario; `key` and `value` NUL-terminated strings.
 */
enum GsStatus gs_scenario_set(struct GsScenario *s, const char *key, const char *value);

/**
 * Merges a whole config file body into the scenario.
 *
 * # Safety
 * `s` must be a live scenario; `text` a NUL-terminated string.
 */
enum GsStatus gs_scenario_load_text(struct GsScenario *s, const char *text);

/**
 * Builds the machine the scenario describes.
 *
 * # Safety
 * `s` must be a live scenario and `out` writable.
 */
enum GsStatus gs_machine_new(const struct GsScenario *s, struct GsMachine **out);

/**
 * # Safety
 * `m` must come from `gs_machine_new` and not be used afterwards.
 */
void gs_machine_free(struct GsMachine *m);

/**
 * Ground-truth table bases of `core`.
 *
 * # Safety
 * `m` must be live; `idt` and `gdt` writable.
 */
enum GsStatus gs_machine_tables(const struct GsMachine *m,
                                size_t core,
                                uint64_t *idt,
                                uint64_t *gdt);

/**
 * # Safety
 * `m` must be live; `mapped` writable.
 */
enum GsStatus gs_machine_is_mapped(const struct GsMachine *m,
                                   uint64_t addr,
                                   enum GsPageView view,
                                   bool *mapped);

/**
 * Timing search for core 0's table pair.
 *
 * # Safety
 * `m` and `s` must be live; `out` writable.
 */
enum GsStatus gs_search(const struct GsMachine *m,
                        const struct GsScenario *s,
                        struct GsSearchResult *out);

/**
 * Runs the whole chain under the scenario's mitigations. When `json` is
 * non-null it receives the full report (free with `gs_string_free`).
 *
 * # Safety
 * `s` must be live; `out` writable; `json` null or writable.
 */
enum GsStatus gs_evaluate(const struct GsScenario *s, struct GsAttackOutcome *out, char **json);

/**
 * # Safety
 * `p` must come from this library, or be null.
 */
void gs_string_free(char *p);

/**
 * `index << 3 | ti << 2 | rpl`. Out-of-range fields are masked.
 */
uint16_t gs_selector(uint16_t index, bool ldt, uint8_t rpl);

/**
 * Whether a data access is allowed: `dpl >= max(cpl, rpl)`.
 */
bool gs_data_access_allowed(uint8_t cpl, uint8_t rpl, uint8_t dpl);

/**
 * Encodes a present call gate (8 bytes legacy, 16 bytes long mode) into
 * `buf`. `written` receives the byte count, also on `BufferTooSmall`.
 *
 * # Safety
 * `buf` must hold `len` bytes; `written` must be writable.
 */
enum GsStatus gs_call_gate_encode(uint64_t offset,
                                  uint16_t selector,
                                  uint8_t dpl,
                                  bool long_mode,
                                  uint8_t *buf,
                                  size_t len,
                                  size_t *written);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GATESIM_H */
