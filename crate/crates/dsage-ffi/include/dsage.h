#ifndef DSAGE_H
#define DSAGE_H

/* Generated from the dsage-ffi crate; edit the Rust source, not this file. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Structure-search flavor for `dsage_learn`.
typedef enum DsageAlgorithm {
  // Greedy hill-climbing to the first local optimum.
  DsageAlgorithmHillClimb = 0,
  // Hill-climbing plus tabu-list escapes, returning the best visited.
  DsageAlgorithmTabu = 1,
} DsageAlgorithm;

// Outcome of a call through the C interface.
typedef enum DsageStatus {
  // The call succeeded.
  DsageStatusOk = 0,
  // A required pointer argument was null.
  DsageStatusNullArgument = 1,
  // A string argument was not valid UTF-8.
  DsageStatusInvalidString = 2,
  // The inputs or configuration were rejected.
  DsageStatusInvalidInput = 3,
  // The operation failed while running.
  DsageStatusRuntimeError = 4,
  // The implementation panicked; state may be stale but memory is safe.
  DsageStatusPanic = 5,
} DsageStatus;

// Opaque directed acyclic graph handle.
typedef struct DsageDag DsageDag;

// Opaque tabular dataset handle.
typedef struct DsageDataset DsageDataset;

// Opaque importance-estimate handle.
typedef struct DsageResult DsageResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Version of the library as a static string; do not free.
const char *dsage_version(void);

// Message for the most recent failure on this thread, or an empty string.
// The pointer stays valid until the next failing call on the same thread.
const char *dsage_last_error(void);

// Releases a string returned by this library.
//
// # Safety
// `s` must be null or a pointer obtained from this library's functions.
void dsage_string_free(char *s);

// Loads a dataset from a CSV file with a header row of column labels.
// Returns null on failure.
//
// # Safety
// `path` must be a NUL-terminated string.
struct DsageDataset *dsage_dataset_load_csv(const char *path);

// Number of rows, or -1 if `ds` is null.
int64_t dsage_dataset_n_rows(const struct DsageDataset *ds);

// Number of columns, or -1 if `ds` is null.
int64_t dsage_dataset_n_cols(const struct DsageDataset *ds);

// Index of the column with the given label, or -1 if absent or on error.
//
// # Safety
// `label` must be a NUL-terminated string.
int64_t dsage_dataset_column_index(const struct DsageDataset *ds, const char *label);

// Releases a dataset handle.
//
// # Safety
// `ds` must be null or a pointer from `dsage_dataset_load_csv`.
void dsage_dataset_free(struct DsageDataset *ds);

// Parses a graph from edge-list text (`# nodes:` header plus one
// `parent,child` line per edge). Returns null on failure.
//
// # Safety
// `text` must be a NUL-terminated string.
struct DsageDag *dsage_dag_from_edge_list(const char *text);

// Parses a graph from its JSON form. Returns null on failure.
//
// # Safety
// `text` must be a NUL-terminated string.
struct DsageDag *dsage_dag_from_json(const char *text);

// Number of nodes, or -1 if `dag` is null.
int64_t dsage_dag_node_count(const struct DsageDag *dag);

// Number of edges, or -1 if `dag` is null.
int64_t dsage_dag_edge_count(const struct DsageDag *dag);

// Serializes the graph to JSON; release with `dsage_string_free`.
char *dsage_dag_to_json(const struct DsageDag *dag);

// Tests whether nodes `x` and `y` are d-separated given the conditioning
// nodes; writes the answer to `out`.
//
// # Safety
// `cond` must be null only when `cond_len` is zero, and otherwise point to
// `cond_len` readable elements; `out` must be writable.
enum DsageStatus dsage_dag_d_separated(const struct DsageDag *dag,
                                       uint64_t x,
                                       uint64_t y,
                                       const uint64_t *cond,
                                       uint64_t cond_len,
                                       bool *out);

// Releases a graph handle.
//
// # Safety
// `dag` must be null or a pointer from a graph constructor.
void dsage_dag_free(struct DsageDag *dag);

// Learns a graph over all dataset columns by greedy score-based search
// and writes an owned handle to `out`. `max_in_degree < 0` leaves the
// parent count uncapped.
//
// # Safety
// `out` must be writable.
enum DsageStatus dsage_learn(const struct DsageDataset *ds,
                             enum DsageAlgorithm algorithm,
                             int64_t max_in_degree,
                             struct DsageDag **out);

// Estimates global feature importance for an ordinary-least-squares model
// fitted on the dataset, marginalizing held-out features with Gaussian
// moments fitted on the same data. A non-null `graph` (covering every
// feature label and the target) enables skipping of positions it
// certifies as zero. Writes an owned handle to `out`.
//
// # Safety
// `target` must be a NUL-terminated string; `out` must be writable.
enum DsageStatus dsage_run(const struct DsageDataset *ds,
                           const char *target,
                           const struct DsageDag *graph,
                           uint64_t n_permutations,
                           uint64_t min_permutations,
                           double convergence_threshold,
                           uint64_t m_conditional_draws,
                           uint64_t seed,
                           struct DsageResult **out);

// Number of features in the estimate, or -1 if `res` is null.
int64_t dsage_result_n_features(const struct DsageResult *res);

// Copies all importance values into `buf`, which must hold exactly
// `len == dsage_result_n_features` elements, ordered as the labels.
//
// # Safety
// `buf` must point to `len` writable elements.
enum DsageStatus dsage_result_phi(const struct DsageResult *res, double *buf, uint64_t len);

// Label of feature `j` as an owned string, or null when out of range;
// release with `dsage_string_free`.
char *dsage_result_feature_label(const struct DsageResult *res, uint64_t j);

// Fraction of evaluation positions the graph certified as zero; NaN if
// `res` is null.
double dsage_result_skip_fraction(const struct DsageResult *res);

// Whether the run converged before exhausting its permutation budget;
// false if `res` is null.
bool dsage_result_converged(const struct DsageResult *res);

// Full estimate serialized to JSON; release with `dsage_string_free`.
char *dsage_result_to_json(const struct DsageResult *res);

// Releases an estimate handle.
//
// # Safety
// `res` must be null or a pointer from `dsage_run`.
void dsage_result_free(struct DsageResult *res);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DSAGE_H */
