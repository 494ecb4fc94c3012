#ifndef READMIT_H
#define READMIT_H

#include <stddef.h>
#include <stdint.h>

typedef enum ReadmitStatus {
  READMIT_STATUS_OK = 0,
  READMIT_STATUS_NULL_POINTER = 1,
  READMIT_STATUS_INVALID_CONFIG = 2,
  READMIT_STATUS_INVALID_DATA = 3,
  READMIT_STATUS_NUMERIC = 4,
  READMIT_STATUS_DEGENERATE = 5,
  READMIT_STATUS_IO = 6,
  READMIT_STATUS_PANIC = 7,
} ReadmitStatus;

// Sparse similarity graph over row vectors.
typedef struct ReadmitGraph ReadmitGraph;

// Trained model bound to a prepared cohort and its graph.
typedef struct ReadmitPredictor ReadmitPredictor;

typedef struct ReadmitDelong {
  double auroc_a;
  double auroc_b;
  double var_a;
  double var_b;
  double cov;
  double z;
  double p_value;
} ReadmitDelong;

typedef struct ReadmitCutPoint {
  double threshold;
  double sensitivity;
  double specificity;
} ReadmitCutPoint;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread into `buf` (NUL-terminated,
// truncated to `cap`). Returns the full message length without the NUL, or
// 0 when there is no error.
//
// # Safety
// `buf` must be null or point to `cap` writable bytes.
uintptr_t readmit_last_error(char *buf, uintptr_t cap);

// AUROC of `scores` against 0/1 `labels`, ties counting one half.
//
// # Safety
// `scores` and `labels` must point to `n` readable elements.
enum ReadmitStatus readmit_auroc(const double *scores,
                                 const uint8_t *labels,
                                 uintptr_t n,
                                 double *auc);

// # Safety
// `scores` and `labels` must point to `n` readable elements.
enum ReadmitStatus readmit_average_precision(const double *scores,
                                             const uint8_t *labels,
                                             uintptr_t n,
                                             double *ap);

// Paired DeLong test of equal AUROC.
//
// # Safety
// `scores_a`, `scores_b` and `labels` must point to `n` readable elements.
enum ReadmitStatus readmit_delong(const double *scores_a,
                                  const double *scores_b,
                                  const uint8_t *labels,
                                  uintptr_t n,
                                  struct ReadmitDelong *result);

// Cut-point maximizing Youden's J.
//
// # Safety
// `scores` and `labels` must point to `n` readable elements.
enum ReadmitStatus readmit_youden(const double *scores,
                                  const uint8_t *labels,
                                  uintptr_t n,
                                  struct ReadmitCutPoint *point);

// Highest cut-point whose sensitivity reaches `sens_target`.
//
// # Safety
// `scores` and `labels` must point to `n` readable elements.
enum ReadmitStatus readmit_operating_point(const double *scores,
                                           const uint8_t *labels,
                                           uintptr_t n,
                                           double sens_target,
                                           struct ReadmitCutPoint *point);

// Builds a Gaussian-kernel graph over the `n` rows of the row-major
// `n x d` matrix `vectors`, keeping the top `kappa_percent` of pairs.
//
// # Safety
// `vectors` must point to `n * d` readable doubles and `graph` to a
// writable handle slot.
enum ReadmitStatus readmit_graph_from_vectors(const double *vectors,
                                              uintptr_t n,
                                              uintptr_t d,
                                              double kappa_percent,
                                              struct ReadmitGraph **graph);

// # Safety
// `graph` must be a live handle from [`readmit_graph_from_vectors`].
uintptr_t readmit_graph_edge_count(const struct ReadmitGraph *graph);

// Kernel bandwidth, or NaN for a null handle.
//
// # Safety
// `graph` must be null or a live handle.
double readmit_graph_sigma(const struct ReadmitGraph *graph);

// Copies up to `cap` edges `(src[k], dst[k], weight[k])` with `src < dst`,
// sorted by endpoints. `copied` receives the number written.
//
// # Safety
// `graph` must be a live handle; `src`, `dst` and `weight` must point to
// `cap` writable elements.
enum ReadmitStatus readmit_graph_edges(const struct ReadmitGraph *graph,
                                       uintptr_t *src,
                                       uintptr_t *dst,
                                       double *weight,
                                       uintptr_t cap,
                                       uintptr_t *copied);

// # Safety
// `graph` must be null or a handle not yet freed.
void readmit_graph_free(struct ReadmitGraph *graph);

// Loads a checkpoint directory, a prepared-cohort directory and a graph
// file (or directory holding `graph.json`) and scores every admission.
//
// # Safety
// Paths must be NUL-terminated strings; `predictor` a writable handle slot.
enum ReadmitStatus readmit_predictor_open(const char *checkpoint_dir,
                                          const char *prepared_dir,
                                          const char *graph_path,
                                          struct ReadmitPredictor **predictor);

// # Safety
// `predictor` must be null or a live handle.
uintptr_t readmit_predictor_len(const struct ReadmitPredictor *predictor);

// Copies up to `cap` probabilities in node order.
//
// # Safety
// `predictor` must be a live handle and `probabilities` point to `cap`
// writable doubles.
enum ReadmitStatus readmit_predictor_probabilities(const struct ReadmitPredictor *predictor,
                                                   double *probabilities,
                                                   uintptr_t cap,
                                                   uintptr_t *copied);

// Admission id of node `index`, borrowed from the handle (valid until it is
// freed). Null when out of range.
//
// # Safety
// `predictor` must be null or a live handle.
const char *readmit_predictor_node_id(const struct ReadmitPredictor *predictor, uintptr_t index);

// # Safety
// `predictor` must be null or a handle not yet freed.
void readmit_predictor_free(struct ReadmitPredictor *predictor);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* READMIT_H */
