#ifndef TREE_ATTN_H
#define TREE_ATTN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum TaStatus {
  TA_STATUS_OK = 0,
  TA_STATUS_NULL_POINTER = 1,
  TA_STATUS_INVALID_ARGUMENT = 2,
  TA_STATUS_SHAPE = 3,
  TA_STATUS_INVALID_DATA = 4,
  TA_STATUS_OVERFLOW = 5,
  TA_STATUS_NO_KEYS_ATTENDED = 6,
  TA_STATUS_CONFIG = 7,
  TA_STATUS_BUFFER_TOO_SMALL = 8,
  TA_STATUS_PANIC = 9,
} TaStatus;

typedef enum TaAlgo {
  TA_ALGO_TREE = 0,
  TA_ALGO_RING = 1,
} TaAlgo;

typedef enum TaStrategy {
  TA_STRATEGY_TREE_BINARY = 0,
  TA_STRATEGY_RING = 1,
  TA_STRATEGY_HIERARCHICAL = 2,
} TaStrategy;

typedef enum TaDtype {
  TA_DTYPE_F64 = 0,
  TA_DTYPE_F32 = 1,
  TA_DTYPE_BF16 = 2,
} TaDtype;

/**
 * Opaque decode output plus its cost report.
 */
typedef struct TaDecodeResult TaDecodeResult;

/**
 * Opaque cluster topology.
 */
typedef struct TaTopology TaTopology;

/**
 * Cost summary of one decode.
 */
typedef struct TaCost {
  uint64_t elems_sent_intra;
  uint64_t elems_sent_inter;
  uint64_t rounds;
  uint64_t peak_elems_per_worker;
  /**
   * Modelled communication time in seconds.
   */
  double sim_time_s;
  /**
   * Modelled local attention time on the busiest worker.
   */
  double compute_s;
  /**
   * Closed-form communication volume as `numer / denom`.
   */
  uint64_t comm_volume_numer;
  uint64_t comm_volume_denom;
  double overlap_ratio;
  bool overlap_feasible;
} TaCost;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len`). Returns the full message length
 * including the terminator; pass `buf = NULL` to query it.
 */
size_t ta_last_error_message(char *buf, size_t len);

/**
 * Creates a `nodes x gpus_per_node` topology with the default link parameters.
 */
enum TaStatus ta_topology_new(size_t nodes, size_t gpus_per_node, struct TaTopology **out);

/**
 * Reads a topology from a `key = value` config file.
 */
enum TaStatus ta_topology_from_config(const char *path, struct TaTopology **out);

enum TaStatus ta_topology_set_links(struct TaTopology *topo,
                                    double intra_latency_s,
                                    double intra_bandwidth_bps,
                                    double inter_latency_s,
                                    double inter_bandwidth_bps);

enum TaStatus ta_topology_set_element_bytes(struct TaTopology *topo, uint64_t element_bytes);

/**
 * Number of workers, or 0 for a null handle.
 */
size_t ta_topology_workers(const struct TaTopology *topo);

void ta_topology_free(struct TaTopology *topo);

/**
 * Decodes one query (`q`: `[batch, heads, 1, head_dim]`) against K/V
 * (`[batch, heads, seq_len, head_dim]`) sharded over the topology's workers.
 */
enum TaStatus ta_decode(enum TaAlgo algorithm,
                        enum TaStrategy allreduce,
                        enum TaDtype element_type,
                        const struct TaTopology *topo,
                        const double *q,
                        const double *k,
                        const double *v,
                        size_t batch,
                        size_t heads,
                        size_t seq_len,
                        size_t head_dim,
                        double scale,
                        struct TaDecodeResult **out);

/**
 * Number of output elements (`batch * heads * head_dim`), or 0 for null.
 */
size_t ta_decode_result_output_len(const struct TaDecodeResult *res);

enum TaStatus ta_decode_result_copy_output(const struct TaDecodeResult *res,
                                           double *out,
                                           size_t out_len);

enum TaStatus ta_decode_result_cost(const struct TaDecodeResult *res, struct TaCost *out);

void ta_decode_result_free(struct TaDecodeResult *res);

/**
 * Single-device softmax attention. `out` receives `[batch, heads, n_q, head_dim]`.
 */
enum TaStatus ta_attention_naive(enum TaDtype element_type,
                                 const double *q,
                                 const double *k,
                                 const double *v,
                                 size_t batch,
                                 size_t heads,
                                 size_t n_q,
                                 size_t seq_len,
                                 size_t head_dim,
                                 bool causal,
                                 double scale,
                                 double *out,
                                 size_t out_len);

/**
 * Energy `log sum_a exp(q . k_a + zeta . v_a)` per query row. `zeta` has
 * the shape of `q`; `out` receives `[batch, heads, n_q]`.
 */
enum TaStatus ta_energy(const double *q,
                        const double *k,
                        const double *v,
                        const double *zeta,
                        size_t batch,
                        size_t heads,
                        size_t n_q,
                        size_t seq_len,
                        size_t head_dim,
                        double *out,
                        size_t out_len);

/**
 * Closed-form peak live elements per worker.
 */
uint64_t ta_peak_memory_formula(enum TaAlgo algorithm,
                                uint64_t batch,
                                uint64_t t,
                                uint64_t hidden,
                                uint64_t heads);

/**
 * Closed-form communication volume with `t = seq_len / workers`, written
 * as an exact fraction.
 */
enum TaStatus ta_comm_volume_formula(enum TaAlgo algorithm,
                                     uint64_t batch,
                                     uint64_t seq_len,
                                     uint64_t hidden,
                                     uint64_t heads,
                                     uint64_t workers,
                                     uint64_t *numer,
                                     uint64_t *denom);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TREE_ATTN_H */
