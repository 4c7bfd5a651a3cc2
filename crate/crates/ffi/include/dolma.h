#ifndef DOLMA_H
#define DOLMA_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call.
 */
typedef enum dolma_status {
  DOLMA_STATUS_OK = 0,
  DOLMA_STATUS_NULL_ARGUMENT = 1,
  DOLMA_STATUS_INVALID_ARGUMENT = 2,
  DOLMA_STATUS_UNKNOWN_OBJECT = 3,
  DOLMA_STATUS_OUT_OF_RANGE = 4,
  DOLMA_STATUS_CACHE_FULL = 5,
  DOLMA_STATUS_REMOTE_OOM = 6,
  DOLMA_STATUS_FABRIC = 7,
  DOLMA_STATUS_CHECKPOINT = 8,
  DOLMA_STATUS_IO = 9,
  DOLMA_STATUS_PANIC = 10,
} dolma_status;

/**
 * A runtime plus the checkpoint epoch state that goes with it.
 */
typedef struct dolma_runtime dolma_runtime;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Creates a runtime over an in-process simulated fabric of
 * `remote_capacity` bytes, timed by the default latency profile.
 *
 * # Safety
 * `out` must be valid for a pointer write.
 */
enum dolma_status dolma_runtime_new_sim(uint64_t local_bytes,
                                        uint64_t cache_bytes,
                                        uint64_t metadata_bytes,
                                        uint64_t remote_capacity,
                                        struct dolma_runtime **out);

/**
 * Creates a runtime backed by a memory node at `addr` ("host:port").
 *
 * # Safety
 * `addr` must be a NUL-terminated string and `out` valid for a pointer write.
 */
enum dolma_status dolma_runtime_connect(const char *addr,
                                        uint64_t local_bytes,
                                        uint64_t cache_bytes,
                                        uint64_t metadata_bytes,
                                        struct dolma_runtime **out);

/**
 * Destroys a runtime. Null is ignored.
 *
 * # Safety
 * `rt` must come from a constructor above and not be used afterwards.
 */
void dolma_runtime_free(struct dolma_runtime *rt);

/**
 * Allocates an object of `size` bytes and stores its handle in `out`.
 *
 * # Safety
 * `rt` must be a live runtime and `out` valid for a write.
 */
enum dolma_status dolma_alloc(struct dolma_runtime *rt, uint64_t size, uint64_t *out);

/**
 * Frees an object.
 *
 * # Safety
 * `rt` must be a live runtime.
 */
enum dolma_status dolma_free(struct dolma_runtime *rt, uint64_t handle);

/**
 * Whether the handle was remote when it was issued.
 */
bool dolma_handle_is_remote(uint64_t handle);

/**
 * Copies `len` bytes from `data` into the object at `offset`.
 *
 * # Safety
 * `rt` must be a live runtime and `data` readable for `len` bytes.
 */
enum dolma_status dolma_write(struct dolma_runtime *rt,
                              uint64_t handle,
                              uint64_t offset,
                              const uint8_t *data,
                              size_t len);

/**
 * Reads `len` bytes of the object at `offset` into `out`, waiting for any
 * remote transfer.
 *
 * # Safety
 * `rt` must be a live runtime and `out` writable for `len` bytes.
 */
enum dolma_status dolma_read(struct dolma_runtime *rt,
                             uint64_t handle,
                             uint64_t offset,
                             uint8_t *out,
                             size_t len);

/**
 * Moves an object to remote memory, or drops its cached copies.
 *
 * # Safety
 * `rt` must be a live runtime.
 */
enum dolma_status dolma_demote(struct dolma_runtime *rt, uint64_t handle);

/**
 * Writes back dirty cached data and waits for it.
 *
 * # Safety
 * `rt` must be a live runtime.
 */
enum dolma_status dolma_flush(struct dolma_runtime *rt);

/**
 * Charges `us` microseconds of local computation to the runtime clock.
 *
 * # Safety
 * `rt` must be a live runtime.
 */
enum dolma_status dolma_compute(struct dolma_runtime *rt, double us);

/**
 * Current runtime clock in microseconds.
 *
 * # Safety
 * `rt` must be a live runtime and `out` valid for a write.
 */
enum dolma_status dolma_now_us(struct dolma_runtime *rt, double *out);

/**
 * Peak local bytes in use so far and the number of times the budget was
 * exceeded.
 *
 * # Safety
 * `rt` must be a live runtime; the out pointers must be valid for writes.
 */
enum dolma_status dolma_usage(struct dolma_runtime *rt,
                              uint64_t *peak_local_bytes,
                              uint64_t *capacity_violations);

/**
 * Writes a checkpoint to `path`. Objects unchanged since the previous
 * checkpoint of this runtime are carried forward by reference.
 *
 * # Safety
 * `rt` must be a live runtime and `path` a NUL-terminated string.
 */
enum dolma_status dolma_checkpoint(struct dolma_runtime *rt, const char *path);

/**
 * Restores objects from a checkpoint into an empty runtime. Handles keep
 * their values from the checkpointed run.
 *
 * # Safety
 * `rt` must be a live runtime and `path` a NUL-terminated string.
 */
enum dolma_status dolma_recover(struct dolma_runtime *rt, const char *path);

/**
 * Copies the calling thread's last error message into `buf` as a
 * NUL-terminated string, truncating to fit. Returns the full message length
 * without the terminator.
 *
 * # Safety
 * `buf` must be writable for `cap` bytes, or null with `cap` zero.
 */
size_t dolma_last_error(char *buf, size_t cap);

/**
 * Static name of a status code.
 */
const char *dolma_status_name(enum dolma_status status);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DOLMA_H */
