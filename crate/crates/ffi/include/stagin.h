#ifndef STAGIN_H
#define STAGIN_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result code of every fallible call.
 */
typedef enum StaginStatus {
  STAGIN_STATUS_OK = 0,
  STAGIN_STATUS_NULL_POINTER = 1,
  STAGIN_STATUS_INVALID_ARGUMENT = 2,
  STAGIN_STATUS_IO = 3,
  STAGIN_STATUS_FORMAT = 4,
  STAGIN_STATUS_MODEL = 5,
  STAGIN_STATUS_BUFFER_TOO_SMALL = 6,
  STAGIN_STATUS_PANIC = 7,
} StaginStatus;

/*
 Node attention readout.
 */
typedef enum StaginReadout {
  STAGIN_READOUT_MEAN = 0,
  STAGIN_READOUT_GARO = 1,
  STAGIN_READOUT_SERO = 2,
} StaginReadout;

/*
 Sequence of thresholded window graphs.
 */
typedef struct StaginGraph StaginGraph;

/*
 Model parameters and normalization statistics.
 */
typedef struct StaginModel StaginModel;

/*
 Logits and attention of one forward pass.
 */
typedef struct StaginPrediction StaginPrediction;

/*
 ROI timeseries.
 */
typedef struct StaginSeries StaginSeries;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or null if none. The string stays valid until
 the next failing call on the same thread.
 */
const char *stagin_last_error(void);

/*
 Library version as a static nul-terminated string.
 */
const char *stagin_version(void);

/*
 Creates a series from `n_rois * t_max` row-major values (one row per ROI).

 # Safety
 `values` must point to `n_rois * t_max` readable doubles; `out` must be writable.
 */
enum StaginStatus stagin_series_new(size_t n_rois,
                                    size_t t_max,
                                    const double *values,
                                    double repetition_time_s,
                                    struct StaginSeries **out_series);

/*
 Reads a timeseries CSV and its optional sidecar.

 # Safety
 `path` must be a nul-terminated UTF-8 string; `out_series` must be writable.
 */
enum StaginStatus stagin_series_read_csv(const char *csv_path, struct StaginSeries **out_series);

/*
 Writes the ROI count and timepoint count of a series.

 # Safety
 `series` must be a live handle; the out pointers must be writable.
 */
enum StaginStatus stagin_series_shape(const struct StaginSeries *series,
                                      size_t *out_n_rois,
                                      size_t *out_t_max);

/*
 # Safety
 `series` must be null or a handle not yet freed.
 */
void stagin_series_free(struct StaginSeries *series);

/*
 Builds window graphs: windows of `gamma` timepoints every `stride`, keeping the top
 `edge_percentile` percent of correlations as edges.

 # Safety
 `series` must be a live handle; `out_graph` must be writable.
 */
enum StaginStatus stagin_graph_build(const struct StaginSeries *series,
                                     size_t gamma,
                                     size_t stride,
                                     double edge_percentile,
                                     struct StaginGraph **out_graph);

/*
 Number of window graphs.

 # Safety
 `graph` must be a live handle; `out_len` must be writable.
 */
enum StaginStatus stagin_graph_len(const struct StaginGraph *graph, size_t *out_len);

/*
 Copies the dense `n × n` adjacency of window `index` as 0/1 doubles.

 # Safety
 `graph` must be a live handle; `buf` must have room for `len` doubles; `written` may be null.
 */
enum StaginStatus stagin_graph_adjacency(const struct StaginGraph *graph,
                                         size_t index,
                                         double *buf,
                                         size_t len,
                                         size_t *written);

/*
 # Safety
 `graph` must be a live handle; `path` a nul-terminated UTF-8 string.
 */
enum StaginStatus stagin_graph_write(const struct StaginGraph *graph, const char *dfcg_path);

/*
 # Safety
 `path` must be a nul-terminated UTF-8 string; `out_graph` must be writable.
 */
enum StaginStatus stagin_graph_read(const char *dfcg_path, struct StaginGraph **out_graph);

/*
 # Safety
 `graph` must be null or a handle not yet freed.
 */
void stagin_graph_free(struct StaginGraph *graph);

/*
 Initializes a model with default regularization and the given shape. Dropout is inactive at
 prediction time.

 # Safety
 `out_model` must be writable.
 */
enum StaginStatus stagin_model_init(size_t n_nodes,
                                    size_t n_classes,
                                    size_t n_layers,
                                    size_t hidden_dim,
                                    enum StaginReadout readout,
                                    uint64_t seed,
                                    struct StaginModel **out_model);

/*
 Loads a checkpoint written by the training command.

 # Safety
 `path` must be a nul-terminated UTF-8 string; `out_model` must be writable.
 */
enum StaginStatus stagin_model_load(const char *checkpoint, struct StaginModel **out_model);

/*
 # Safety
 `model` must be a live handle; `path` a nul-terminated UTF-8 string.
 */
enum StaginStatus stagin_model_save(const struct StaginModel *model, const char *checkpoint);

/*
 Writes the node count, class count, layer count and hidden width of a model.

 # Safety
 `model` must be a live handle; out pointers may be null to skip a field.
 */
enum StaginStatus stagin_model_shape(const struct StaginModel *model,
                                     size_t *out_n_nodes,
                                     size_t *out_n_classes,
                                     size_t *out_n_layers,
                                     size_t *out_hidden_dim);

/*
 # Safety
 `model` must be null or a handle not yet freed.
 */
void stagin_model_free(struct StaginModel *model);

/*
 Evaluation-mode forward pass on a raw series and its window graphs.

 # Safety
 All handles must be live; `out_prediction` must be writable.
 */
enum StaginStatus stagin_predict(const struct StaginModel *model,
                                 const struct StaginSeries *series,
                                 const struct StaginGraph *graph,
                                 struct StaginPrediction **out_prediction);

/*
 Writes the layer count, window count and node count of the attention in a prediction.

 # Safety
 `prediction` must be a live handle; out pointers may be null to skip a field.
 */
enum StaginStatus stagin_prediction_shape(const struct StaginPrediction *prediction,
                                          size_t *out_n_layers,
                                          size_t *out_n_steps,
                                          size_t *out_n_nodes);

/*
 Copies the class logits. `written` receives the required length even on `BufferTooSmall`.

 # Safety
 `prediction` must be a live handle; `buf` must have room for `len` doubles; `written` may be null.
 */
enum StaginStatus stagin_prediction_logits(const struct StaginPrediction *prediction,
                                           double *buf,
                                           size_t len,
                                           size_t *written);

/*
 Copies the `T × T` row-stochastic temporal attention of one layer, row-major.

 # Safety
 `prediction` must be a live handle; `buf` must have room for `len` doubles; `written` may be null.
 */
enum StaginStatus stagin_prediction_time_attention(const struct StaginPrediction *prediction,
                                                   size_t layer,
                                                   double *buf,
                                                   size_t len,
                                                   size_t *written);

/*
 Copies the `T × N` node attention of one layer, row-major.

 # Safety
 `prediction` must be a live handle; `buf` must have room for `len` doubles; `written` may be null.
 */
enum StaginStatus stagin_prediction_space_attention(const struct StaginPrediction *prediction,
                                                    size_t layer,
                                                    double *buf,
                                                    size_t len,
                                                    size_t *written);

/*
 # Safety
 `prediction` must be null or a handle not yet freed.
 */
void stagin_prediction_free(struct StaginPrediction *prediction);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STAGIN_H */
