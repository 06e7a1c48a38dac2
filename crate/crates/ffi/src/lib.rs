//! C ABI for loading models, building window graphs and running predictions.
//!
//! Every fallible function returns a [`StaginStatus`]. On failure, [`stagin_last_error`] describes
//! the most recent error on the calling thread. Handles are opaque and must be released with their
//! matching `*_free` function; passing a null handle to `*_free` is a no-op.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stagin::fcgraph::io::{read_dfcg, read_timeseries, write_dfcg};
use stagin::fcgraph::{build_dynamic_graph, DynamicGraph, RoiTimeseries, WindowConfig};
use stagin::stagin::checkpoint::{load_checkpoint, save_checkpoint};
use stagin::stagin::{predict, ModelConfig, ModelState, Prediction, Readout};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StaginStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Model = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Node attention readout.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StaginReadout {
    Mean = 0,
    Garo = 1,
    Sero = 2,
}

/// ROI timeseries.
pub struct StaginSeries(RoiTimeseries);

/// Sequence of thresholded window graphs.
pub struct StaginGraph(DynamicGraph);

/// Model parameters and normalization statistics.
pub struct StaginModel(ModelState);

/// Logits and attention of one forward pass.
pub struct StaginPrediction(Prediction);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(StaginStatus, String);

type Outcome = Result<(), Failure>;

fn fail<E: std::fmt::Display>(status: StaginStatus) -> impl FnOnce(E) -> Failure {
    move |e| Failure(status, e.to_string())
}

fn guard(f: impl FnOnce() -> Outcome) -> StaginStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => StaginStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".to_string());
            StaginStatus::Panic
        }
    }
}

unsafe fn arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure(StaginStatus::NullPointer, format!("{name} is null")))
}

unsafe fn out<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure(StaginStatus::NullPointer, format!("{name} is null")))
}

unsafe fn path(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure(StaginStatus::NullPointer, "path is null".to_string()));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(fail(StaginStatus::InvalidArgument))
}

fn boxed<T>(value: T) -> *mut T {
    Box::into_raw(Box::new(value))
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

fn copy_out(src: &[f64], buf: *mut f64, len: usize, written: *mut usize) -> Outcome {
    if !written.is_null() {
        // SAFETY: checked non-null; the caller provides a valid pointer.
        unsafe { *written = src.len() };
    }
    if len < src.len() {
        return Err(Failure(
            StaginStatus::BufferTooSmall,
            format!("buffer holds {len} values, {} needed", src.len()),
        ));
    }
    if buf.is_null() {
        return Err(Failure(StaginStatus::NullPointer, "buffer is null".to_string()));
    }
    // SAFETY: `buf` is non-null and the caller guarantees room for `len >= src.len()` values.
    unsafe { ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len()) };
    Ok(())
}

/// Message of the last failed call on this thread, or null if none. The string stays valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn stagin_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn stagin_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a series from `n_rois * t_max` row-major values (one row per ROI).
///
/// # Safety
/// `values` must point to `n_rois * t_max` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn stagin_series_new(
    n_rois: usize,
    t_max: usize,
    values: *const f64,
    repetition_time_s: f64,
    out_series: *mut *mut StaginSeries,
) -> StaginStatus {
    guard(|| {
        let slot = out(out_series, "out_series")?;
        if values.is_null() {
            return Err(Failure(StaginStatus::NullPointer, "values is null".to_string()));
        }
        let len = n_rois
            .checked_mul(t_max)
            .ok_or_else(|| Failure(StaginStatus::InvalidArgument, "series size overflows".to_string()))?;
        let data = std::slice::from_raw_parts(values, len).to_vec();
        let ts = RoiTimeseries::unlabeled(n_rois, t_max, data, repetition_time_s)
            .map_err(fail(StaginStatus::InvalidArgument))?;
        *slot = boxed(StaginSeries(ts));
        Ok(())
    })
}

/// Reads a timeseries CSV and its optional sidecar.
///
/// # Safety
/// `path` must be a nul-terminated UTF-8 string; `out_series` must be writable.
#[no_mangle]
pub unsafe extern "C" fn stagin_series_read_csv(
    csv_path: *const c_char,
    out_series: *mut *mut StaginSeries,
) -> StaginStatus {
    guard(|| {
        let slot = out(out_series, "out_series")?;
        let p = path(csv_path)?;
        let ts = read_timeseries(&p).map_err(|e| {
            let status = if p.exists() {
                StaginStatus::Format
            } else {
                StaginStatus::Io
            };
            Failure(status, format!("{}: {e}", p.display()))
        })?;
        *slot = boxed(StaginSeries(ts));
        Ok(())
    })
}

/// Writes the ROI count and timepoint count of a series.
///
/// # Safety
/// `series` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn stagin_series_shape(
    series: *const StaginSeries,
    out_n_rois: *mut usize,
    out_t_max: *mut usize,
) -> StaginStatus {
    guard(|| {
        let s = arg(series, "series")?;
        *out(out_n_rois, "out_n_rois")? = s.0.n_rois();
        *out(out_t_max, "out_t_max")? = s.0.t_max();
        Ok(())
    })
}

/// # Safety
/// `series` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn stagin_series_free(series: *mut StaginSeries) {
    free(series);
}

/// Builds window graphs: windows of `gamma` timepoints every `stride`, keeping the top
/// `edge_percentile` percent of correlations as edges.
///
/// # Safety
/// `series` must be a live handle; `out_graph` must be writable.
#[no_mangle]
pub unsafe extern "C" fn stagin_graph_build(
    series: *const StaginSeries,
    gamma: usize,
    stride: usize,
    edge_percentile: f64,
    out_graph: *mut *mut StaginGraph,
) -> StaginStatus {
    guard(|| {
        let s = arg(series, "series")?;
        let slot = out(out_graph, "out_graph")?;
        let cfg = WindowConfig {
            gamma,
            stride,
            edge_percentile,
        };
        let g = build_dynamic_graph(&s.0, &cfg).map_err(fail(StaginStatus::InvalidArgument))?;
        *slot = boxed(StaginGraph(g));
        Ok(())
    })
}

/// Number of window graphs.
///
/// # Safety
/// `graph` must be a live handle; `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn stagin_graph_len(graph: *const StaginGraph, out_len: *mut usize) -> StaginStatus {
    guard(|| {
        *out(out_len, "out_len")? = arg(graph, "graph")?.0.len();
        Ok(())
    })
}

/// Copies the dense `n × n` adjacency of window `index` as 0/1 doubles.
///
/// # Safety
/// `graph` must be a live handle; `buf` must have room for `len` doubles; `written` may be null.
#[no_mangle]
pub unsafe extern "C" fn stagin_graph_adjacency(
    graph: *const StaginGraph,
    index: usize,
    buf: *mut f64,
    len: usize,
    written: *mut usize,
) -> StaginStatus {
    guard(|| {
        let g = &arg(graph, "graph")?.0;
        let adj = g.adjacency.get(index).ok_or_else(|| {
            Failure(
                StaginStatus::InvalidArgument,
                format!("window {index} out of range ({} windows)", g.len()),
            )
        })?;
        copy_out(&adj.to_dense(), buf, len, written)
    })
}

/// # Safety
/// `graph` must be a live handle; `path` a nul-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn stagin_graph_write(graph: *const StaginGraph, dfcg_path: *const c_char) -> StaginStatus {
    guard(|| {
        let g = arg(graph, "graph")?;
        write_dfcg(&g.0, &path(dfcg_path)?).map_err(fail(StaginStatus::Io))
    })
}

/// # Safety
/// `path` must be a nul-terminated UTF-8 string; `out_graph` must be writable.
#[no_mangle]
pub unsafe extern "C" fn stagin_graph_read(dfcg_path: *const c_char, out_graph: *mut *mut StaginGraph) -> StaginStatus {
    guard(|| {
        let slot = out(out_graph, "out_graph")?;
        let p = path(dfcg_path)?;
        if !p.exists() {
            return Err(Failure(StaginStatus::Io, format!("{} does not exist", p.display())));
        }
        let g = read_dfcg(&p).map_err(fail(StaginStatus::Format))?;
        *slot = boxed(StaginGraph(g));
        Ok(())
    })
}

/// # Safety
/// `graph` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn stagin_graph_free(graph: *mut StaginGraph) {
    free(graph);
}

/// Initializes a model with default regularization and the given shape. Dropout is inactive at
/// prediction time.
///
/// # Safety
/// `out_model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn stagin_model_init(
    n_nodes: usize,
    n_classes: usize,
    n_layers: usize,
    hidden_dim: usize,
    readout: StaginReadout,
    seed: u64,
    out_model: *mut *mut StaginModel,
) -> StaginStatus {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        let cfg = ModelConfig {
            n_layers,
            hidden_dim,
            readout: match readout {
                StaginReadout::Mean => Readout::Mean,
                StaginReadout::Garo => Readout::Garo,
                StaginReadout::Sero => Readout::Sero,
            },
            ..ModelConfig::new(n_nodes, n_classes)
        };
        cfg.validate().map_err(fail(StaginStatus::InvalidArgument))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        *slot = boxed(StaginModel(ModelState::init(cfg, &mut rng)));
        Ok(())
    })
}

/// Loads a checkpoint written by the training command.
///
/// # Safety
/// `path` must be a nul-terminated UTF-8 string; `out_model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn stagin_model_load(checkpoint: *const c_char, out_model: *mut *mut StaginModel) -> StaginStatus {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        let p = path(checkpoint)?;
        if !p.exists() {
            return Err(Failure(StaginStatus::Io, format!("{} does not exist", p.display())));
        }
        let (state, _) = load_checkpoint(&p).map_err(fail(StaginStatus::Format))?;
        *slot = boxed(StaginModel(state));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `path` a nul-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn stagin_model_save(model: *const StaginModel, checkpoint: *const c_char) -> StaginStatus {
    guard(|| {
        let m = arg(model, "model")?;
        save_checkpoint(&m.0, &Default::default(), &path(checkpoint)?).map_err(fail(StaginStatus::Io))
    })
}

/// Writes the node count, class count, layer count and hidden width of a model.
///
/// # Safety
/// `model` must be a live handle; out pointers may be null to skip a field.
#[no_mangle]
pub unsafe extern "C" fn stagin_model_shape(
    model: *const StaginModel,
    out_n_nodes: *mut usize,
    out_n_classes: *mut usize,
    out_n_layers: *mut usize,
    out_hidden_dim: *mut usize,
) -> StaginStatus {
    guard(|| {
        let c = &arg(model, "model")?.0.config;
        for (p, v) in [
            (out_n_nodes, c.n_nodes),
            (out_n_classes, c.n_classes),
            (out_n_layers, c.n_layers),
            (out_hidden_dim, c.hidden_dim),
        ] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn stagin_model_free(model: *mut StaginModel) {
    free(model);
}

/// Evaluation-mode forward pass on a raw series and its window graphs.
///
/// # Safety
/// All handles must be live; `out_prediction` must be writable.
#[no_mangle]
pub unsafe extern "C" fn stagin_predict(
    model: *const StaginModel,
    series: *const StaginSeries,
    graph: *const StaginGraph,
    out_prediction: *mut *mut StaginPrediction,
) -> StaginStatus {
    guard(|| {
        let m = arg(model, "model")?;
        let s = arg(series, "series")?;
        let g = arg(graph, "graph")?;
        let slot = out(out_prediction, "out_prediction")?;
        let p = predict(&m.0, &s.0, &g.0).map_err(fail(StaginStatus::Model))?;
        *slot = boxed(StaginPrediction(p));
        Ok(())
    })
}

/// Writes the layer count, window count and node count of the attention in a prediction.
///
/// # Safety
/// `prediction` must be a live handle; out pointers may be null to skip a field.
#[no_mangle]
pub unsafe extern "C" fn stagin_prediction_shape(
    prediction: *const StaginPrediction,
    out_n_layers: *mut usize,
    out_n_steps: *mut usize,
    out_n_nodes: *mut usize,
) -> StaginStatus {
    guard(|| {
        let r = &arg(prediction, "prediction")?.0.record;
        for (p, v) in [(out_n_layers, r.n_layers), (out_n_steps, r.n_steps), (out_n_nodes, r.n_nodes)] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Copies the class logits. `written` receives the required length even on `BufferTooSmall`.
///
/// # Safety
/// `prediction` must be a live handle; `buf` must have room for `len` doubles; `written` may be null.
#[no_mangle]
pub unsafe extern "C" fn stagin_prediction_logits(
    prediction: *const StaginPrediction,
    buf: *mut f64,
    len: usize,
    written: *mut usize,
) -> StaginStatus {
    guard(|| copy_out(&arg(prediction, "prediction")?.0.logits, buf, len, written))
}

fn layer_check(layer: usize, n_layers: usize) -> Outcome {
    if layer < n_layers {
        Ok(())
    } else {
        Err(Failure(
            StaginStatus::InvalidArgument,
            format!("layer {layer} out of range ({n_layers} layers)"),
        ))
    }
}

/// Copies the `T × T` row-stochastic temporal attention of one layer, row-major.
///
/// # Safety
/// `prediction` must be a live handle; `buf` must have room for `len` doubles; `written` may be null.
#[no_mangle]
pub unsafe extern "C" fn stagin_prediction_time_attention(
    prediction: *const StaginPrediction,
    layer: usize,
    buf: *mut f64,
    len: usize,
    written: *mut usize,
) -> StaginStatus {
    guard(|| {
        let r = &arg(prediction, "prediction")?.0.record;
        layer_check(layer, r.n_layers)?;
        copy_out(r.time_layer(layer), buf, len, written)
    })
}

/// Copies the `T × N` node attention of one layer, row-major.
///
/// # Safety
/// `prediction` must be a live handle; `buf` must have room for `len` doubles; `written` may be null.
#[no_mangle]
pub unsafe extern "C" fn stagin_prediction_space_attention(
    prediction: *const StaginPrediction,
    layer: usize,
    buf: *mut f64,
    len: usize,
    written: *mut usize,
) -> StaginStatus {
    guard(|| {
        let r = &arg(prediction, "prediction")?.0.record;
        layer_check(layer, r.n_layers)?;
        copy_out(r.space_layer(layer), buf, len, written)
    })
}

/// # Safety
/// `prediction` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn stagin_prediction_free(prediction: *mut StaginPrediction) {
    free(prediction);
}
