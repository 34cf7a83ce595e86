#ifndef DDFG_H
#define DDFG_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum DdfgStatus {
  DDFG_STATUS_OK = 0,
  DDFG_STATUS_NULL_POINTER = 1,
  DDFG_STATUS_INVALID_ARGUMENT = 2,
  DDFG_STATUS_SHAPE_MISMATCH = 3,
  DDFG_STATUS_BUDGET_EXCEEDED = 4,
  DDFG_STATUS_CONFIG = 5,
  DDFG_STATUS_CHECKPOINT = 6,
  DDFG_STATUS_IO = 7,
  DDFG_STATUS_RUNTIME = 8,
  DDFG_STATUS_PANIC = 9,
} DdfgStatus;

/**
 * Factor graph over a fixed adjacency and action count.
 */
typedef struct DdfgGraph DdfgGraph;

/**
 * A trainer with all of its networks, buffers and RNG state.
 */
typedef struct DdfgTrainer DdfgTrainer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *ddfg_last_error(void);

/**
 * Builds a factor graph from an agent-major `n_agents × n_factors` 0/1 matrix.
 *
 * # Safety
 * `entries` must point to `n_agents * n_factors` bytes; `out` must be writable.
 */
enum DdfgStatus ddfg_graph_new(size_t n_agents,
                               size_t n_factors,
                               const uint8_t *entries,
                               size_t actions,
                               struct DdfgGraph **out);

/**
 * # Safety
 * `graph` must be null or a handle from [`ddfg_graph_new`] not yet freed.
 */
void ddfg_graph_free(struct DdfgGraph *graph);

/**
 * # Safety
 * `graph` must be a live handle and `out` writable.
 */
enum DdfgStatus ddfg_graph_is_acyclic(const struct DdfgGraph *graph, bool *out);

/**
 * Runs max-plus over dense local tables laid out factor after factor, each
 * row-major with the lowest-numbered agent slowest. Writes one action per
 * agent to `out_actions` and the joint value to `out_value`.
 *
 * # Safety
 * `tables` must hold `tables_len` values, `out_actions` room for one entry per agent.
 */
enum DdfgStatus ddfg_maxplus_run(const struct DdfgGraph *graph,
                                 const double *tables,
                                 size_t tables_len,
                                 size_t max_iterations,
                                 double damping,
                                 size_t *out_actions,
                                 double *out_value);

/**
 * Multinomial probability of `counts` (summing to `d_max`) under `p`.
 *
 * # Safety
 * `p` and `counts` must each hold `n` values; `out` must be writable.
 */
enum DdfgStatus ddfg_multinomial_pmf(const double *p,
                                     const size_t *counts,
                                     size_t n,
                                     size_t d_max,
                                     double *out);

/**
 * Fresh trainer from a TOML run configuration.
 *
 * # Safety
 * `config_path` must be a NUL-terminated string and `out` writable.
 */
enum DdfgStatus ddfg_trainer_new(const char *config_path, struct DdfgTrainer **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum DdfgStatus ddfg_trainer_load(const char *path, struct DdfgTrainer **out);

/**
 * # Safety
 * `trainer` must be a live handle and `path` a NUL-terminated string.
 */
enum DdfgStatus ddfg_trainer_save(const struct DdfgTrainer *trainer, const char *path);

/**
 * Runs training iterations until at least `steps` more environment steps have elapsed.
 *
 * # Safety
 * `trainer` must be a live handle.
 */
enum DdfgStatus ddfg_trainer_train(struct DdfgTrainer *trainer, uint64_t steps);

/**
 * # Safety
 * `trainer` must be a live handle and `out` writable.
 */
enum DdfgStatus ddfg_trainer_env_steps(const struct DdfgTrainer *trainer, uint64_t *out);

/**
 * Greedy evaluation; writes the median return (NaN for zero episodes).
 *
 * # Safety
 * `trainer` must be a live handle and `out_median` writable.
 */
enum DdfgStatus ddfg_trainer_evaluate(const struct DdfgTrainer *trainer,
                                      size_t episodes,
                                      double *out_median);

/**
 * # Safety
 * `trainer` must be null or a live handle.
 */
void ddfg_trainer_free(struct DdfgTrainer *trainer);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DDFG_H */
