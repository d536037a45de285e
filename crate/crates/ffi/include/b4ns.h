#ifndef B4NS_H
#define B4NS_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call. Zero is success.
typedef enum B4nsStatus {
  B4NS_STATUS_OK = 0,
  B4NS_STATUS_NULL_ARGUMENT = 1,
  B4NS_STATUS_INVALID_UTF8 = 2,
  B4NS_STATUS_INVALID_JSON = 3,
  B4NS_STATUS_DUPLICATE_CONTAINER = 4,
  B4NS_STATUS_UNKNOWN_CONTAINER = 5,
  B4NS_STATUS_ATTACH_FAILED = 6,
  B4NS_STATUS_INVALID_SPEC = 7,
  B4NS_STATUS_SETUP = 8,
  B4NS_STATUS_EMPTY_TRACE = 9,
  B4NS_STATUS_IO = 10,
  B4NS_STATUS_PANIC = 11,
} B4nsStatus;

// Class of a socket-related syscall; `NotHooked` for everything else.
typedef enum B4nsSyscallClass {
  B4NS_SYSCALL_CLASS_NOT_HOOKED = 0,
  B4NS_SYSCALL_CLASS_CREATION = 1,
  B4NS_SYSCALL_CLASS_CONFIGURATION = 2,
  B4NS_SYSCALL_CLASS_CONNECTION = 3,
  B4NS_SYSCALL_CLASS_STATUS = 4,
  B4NS_SYSCALL_CLASS_DERIVATION = 5,
  B4NS_SYSCALL_CLASS_COMMUNICATION = 6,
  B4NS_SYSCALL_CLASS_CLOSE = 7,
} B4nsSyscallClass;

// Opaque handle to a running daemon.
typedef struct B4nsDaemon B4nsDaemon;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *b4ns_last_error_message(void);

// Releases a string returned through an `out` parameter. Null is ignored.
//
// # Safety
// `s` is null or a string obtained from this library, freed once.
void b4ns_string_free(char *s);

// Library version, statically allocated.
const char *b4ns_version(void);

// Classifies a syscall by name. Null and unknown names are `NotHooked`.
//
// # Safety
// `name` is null or a NUL-terminated string.
enum B4nsSyscallClass b4ns_classify_syscall(const char *name);

// Lowercase name of a class, statically allocated.
const char *b4ns_syscall_class_name(enum B4nsSyscallClass class_);

// Reconstructs socket lifecycles from a JSONL trace and writes the report
// as JSON to `out_json`.
//
// # Safety
// `trace_jsonl` is a NUL-terminated string; `out_json` is valid for one
// pointer write.
enum B4nsStatus b4ns_trace_analyze(const char *trace_jsonl, char **out_json);

// Creates a daemon from JSON settings:
// `{"runtime_dir": "...", "isolation": "thread"|"process", "probe": bool,
// "supervisor_exe": "...", "handoff_timeout_secs": n,
// "multinode": {"kvs": "...", "node_id": "...", "node_addr": "a.b.c.d"}}`.
// Only `runtime_dir` is required.
//
// # Safety
// `settings_json` is a NUL-terminated string; `out` is valid for one
// pointer write.
enum B4nsStatus b4ns_daemon_new(const char *settings_json, struct B4nsDaemon **out);

// Starts an instance for a JSON container spec and writes its status as
// JSON to `out_status_json`.
//
// # Safety
// `d` comes from [`b4ns_daemon_new`]; `spec_json` is a NUL-terminated
// string; `out_status_json` is valid for one pointer write.
enum B4nsStatus b4ns_daemon_start_instance(const struct B4nsDaemon *d,
                                           const char *spec_json,
                                           char **out_status_json);

// Stops an instance; stopping a stopped instance succeeds.
//
// # Safety
// As for [`b4ns_daemon_start_instance`].
enum B4nsStatus b4ns_daemon_stop_instance(const struct B4nsDaemon *d,
                                          const char *container_id,
                                          char **out_status_json);

// Writes a JSON array of instance statuses. A null `container_id` lists
// every instance.
//
// # Safety
// As for [`b4ns_daemon_start_instance`]; `container_id` may be null.
enum B4nsStatus b4ns_daemon_status(const struct B4nsDaemon *d,
                                   const char *container_id,
                                   char **out_json);

// Stops every instance and releases the handle. Null is ignored.
//
// # Safety
// `d` is null or comes from [`b4ns_daemon_new`], freed once.
void b4ns_daemon_free(struct B4nsDaemon *d);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* B4NS_H */
