//! Sliding-window dynamic functional-connectivity graphs.
//!
//! An ROI timeseries (`N` regions × `Tmax` timepoints) is cut into windows of length `gamma`
//! shifted by `stride`. Each window yields a Pearson correlation matrix, which is binarized by
//! keeping the top `edge_percentile` percent of its off-diagonal entries.

pub mod io;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FcError {
    #[error("every ROI is constant; nothing to standardize")]
    AllDegenerate,
    #[error("window length {gamma} with stride {stride} yields no window in a series of length {t_max}")]
    WindowTooLong { gamma: usize, stride: usize, t_max: usize },
    #[error("window [{start}, {end}) is shorter than two timepoints")]
    WindowTooShort { start: usize, end: usize },
    #[error("invalid window configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid ROI timeseries: {0}")]
    InvalidSeries(String),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Canonical intrinsic connectivity network names; anything else is binned as unknown.
pub const ICN_NAMES: [&str; 7] = ["VN", "SMN", "DAN", "SVN", "LN", "CCN", "DMN"];
pub const UNKNOWN_ICN: &str = "unknown";

/// Region-by-time signal matrix with region metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiTimeseries {
    n_rois: usize,
    t_max: usize,
    /// Row-major `n_rois × t_max`.
    values: Vec<f64>,
    roi_labels: Vec<String>,
    icn_labels: Vec<String>,
    repetition_time_s: f64,
}

impl RoiTimeseries {
    pub fn new(
        n_rois: usize,
        t_max: usize,
        values: Vec<f64>,
        roi_labels: Vec<String>,
        icn_labels: Vec<String>,
        repetition_time_s: f64,
    ) -> Result<Self, FcError> {
        let invalid = |msg: String| Err(FcError::InvalidSeries(msg));
        if n_rois < 2 {
            return invalid(format!("need at least 2 ROIs, got {n_rois}"));
        }
        if t_max < 2 {
            return invalid(format!("need at least 2 timepoints, got {t_max}"));
        }
        if values.len() != n_rois * t_max {
            return invalid(format!("{} values for {n_rois}×{t_max}", values.len()));
        }
        if roi_labels.len() != n_rois || icn_labels.len() != n_rois {
            return invalid(format!(
                "{} ROI labels and {} ICN labels for {n_rois} ROIs",
                roi_labels.len(),
                icn_labels.len()
            ));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return invalid(format!("non-finite value at ROI {}, timepoint {}", pos / t_max, pos % t_max));
        }
        if !(repetition_time_s > 0.0 && repetition_time_s.is_finite()) {
            return invalid(format!("repetition time must be positive, got {repetition_time_s}"));
        }
        Ok(Self {
            n_rois,
            t_max,
            values,
            roi_labels,
            icn_labels,
            repetition_time_s,
        })
    }

    /// Series with generated labels (`roi0`, `roi1`, ...) and unknown ICNs.
    pub fn unlabeled(n_rois: usize, t_max: usize, values: Vec<f64>, repetition_time_s: f64) -> Result<Self, FcError> {
        Self::new(
            n_rois,
            t_max,
            values,
            (0..n_rois).map(|i| format!("roi{i}")).collect(),
            vec![UNKNOWN_ICN.to_string(); n_rois],
            repetition_time_s,
        )
    }

    pub fn n_rois(&self) -> usize {
        self.n_rois
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, roi: usize) -> &[f64] {
        &self.values[roi * self.t_max..(roi + 1) * self.t_max]
    }

    pub fn get(&self, roi: usize, t: usize) -> f64 {
        self.values[roi * self.t_max + t]
    }

    pub fn roi_labels(&self) -> &[String] {
        &self.roi_labels
    }

    pub fn icn_labels(&self) -> &[String] {
        &self.icn_labels
    }

    pub fn repetition_time_s(&self) -> f64 {
        self.repetition_time_s
    }

    /// Contiguous column range `[start, start + len)`.
    pub fn slice_columns(&self, start: usize, len: usize) -> Result<Self, FcError> {
        if len < 2 || start + len > self.t_max {
            return Err(FcError::IndexOutOfRange {
                index: start + len,
                len: self.t_max,
            });
        }
        let values = (0..self.n_rois)
            .flat_map(|r| self.row(r)[start..start + len].iter().copied())
            .collect();
        Ok(Self {
            t_max: len,
            values,
            ..self.clone()
        })
    }
}

/// Result of [`standardize`]: the z-scored series plus the indices of constant ROIs.
#[derive(Clone, Debug)]
pub struct Standardized {
    pub series: RoiTimeseries,
    pub degenerate: Vec<usize>,
}

/// Z-scores every ROI across time (sample standard deviation). Constant ROIs become all-zero.
pub fn standardize(ts: &RoiTimeseries) -> Result<Standardized, FcError> {
    let t = ts.t_max as f64;
    let mut values = ts.values.clone();
    let mut degenerate = Vec::new();
    for (roi, row) in values.chunks_mut(ts.t_max).enumerate() {
        let mean = row.iter().sum::<f64>() / t;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (t - 1.0);
        let sd = var.sqrt();
        if sd <= 1e-12 * mean.abs().max(1.0) {
            row.iter_mut().for_each(|v| *v = 0.0);
            degenerate.push(roi);
        } else {
            row.iter_mut().for_each(|v| *v = (*v - mean) / sd);
        }
    }
    if degenerate.len() == ts.n_rois {
        return Err(FcError::AllDegenerate);
    }
    if !degenerate.is_empty() {
        warn!("{} constant ROI(s) set to zero: {:?}", degenerate.len(), degenerate);
    }
    Ok(Standardized {
        series: RoiTimeseries { values, ..ts.clone() },
        degenerate,
    })
}

/// Sliding-window parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    /// Window length in timepoints.
    pub gamma: usize,
    pub stride: usize,
    /// Percentage of off-diagonal correlations kept as edges, in (0, 100).
    pub edge_percentile: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            gamma: 50,
            stride: 3,
            edge_percentile: 30.0,
        }
    }
}

impl WindowConfig {
    /// Lists every violation rather than stopping at the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.gamma < 2 {
            v.push(format!("gamma must be at least 2, got {}", self.gamma));
        }
        if self.stride == 0 {
            v.push("stride must be at least 1".to_string());
        }
        if !(self.edge_percentile > 0.0 && self.edge_percentile < 100.0) {
            v.push(format!("edge-percentile must lie in (0, 100), got {}", self.edge_percentile));
        }
        v
    }

    pub fn validate(&self) -> Result<(), FcError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(FcError::InvalidConfig(v.join("; ")))
        }
    }

    /// Number of windows, `floor((t_max - gamma) / stride)`.
    pub fn window_count(&self, t_max: usize) -> usize {
        if self.gamma > t_max || self.stride == 0 {
            0
        } else {
            (t_max - self.gamma) / self.stride
        }
    }
}

/// Window `t` covers columns `[t * stride, t * stride + gamma)`.
pub fn sliding_windows(t_max: usize, cfg: &WindowConfig) -> Result<Vec<(usize, usize)>, FcError> {
    cfg.validate()?;
    let count = cfg.window_count(t_max);
    if count == 0 {
        return Err(FcError::WindowTooLong {
            gamma: cfg.gamma,
            stride: cfg.stride,
            t_max,
        });
    }
    Ok((0..count)
        .map(|t| (t * cfg.stride, t * cfg.stride + cfg.gamma))
        .collect())
}

/// Symmetric correlation matrix of one window.
#[derive(Clone, Debug, PartialEq)]
pub struct FcMatrix {
    pub n: usize,
    /// Row-major `n × n`.
    pub r: Vec<f64>,
    pub window_start: usize,
    pub window_end: usize,
    /// ROIs with zero variance inside the window; their rows and columns are 0.
    pub degenerate: Vec<usize>,
}

impl FcMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.r[i * self.n + j]
    }
}

/// Pearson correlation of every ROI pair over columns `[start, end)`.
pub fn correlation_matrix(ts: &RoiTimeseries, start: usize, end: usize) -> Result<FcMatrix, FcError> {
    if end > ts.t_max {
        return Err(FcError::IndexOutOfRange { index: end, len: ts.t_max });
    }
    if end < start + 2 {
        return Err(FcError::WindowTooShort { start, end });
    }
    let n = ts.n_rois;
    let len = end - start;
    let mut centered = vec![0.0; n * len];
    let mut norms = vec![0.0; n];
    let mut degenerate = Vec::new();
    for i in 0..n {
        let w = &ts.row(i)[start..end];
        let mean = w.iter().sum::<f64>() / len as f64;
        let dst = &mut centered[i * len..(i + 1) * len];
        for (d, v) in dst.iter_mut().zip(w) {
            *d = v - mean;
        }
        let ss: f64 = dst.iter().map(|x| x * x).sum();
        if ss <= 1e-24 * len as f64 {
            degenerate.push(i);
        } else {
            norms[i] = ss.sqrt();
        }
    }
    for i in 0..n {
        if norms[i] > 0.0 {
            centered[i * len..(i + 1) * len].iter_mut().for_each(|v| *v /= norms[i]);
        }
    }
    let mut r = vec![0.0; n * n];
    // SAFETY: `centered` is n × len and `r` is n × n, both row-major and non-overlapping.
    unsafe {
        matrixmultiply::dgemm(
            n,
            len,
            n,
            1.0,
            centered.as_ptr(),
            len as isize,
            1,
            centered.as_ptr(),
            1,
            len as isize,
            0.0,
            r.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    for i in 0..n {
        for j in 0..i {
            let v = (0.5 * (r[i * n + j] + r[j * n + i])).clamp(-1.0, 1.0);
            r[i * n + j] = v;
            r[j * n + i] = v;
        }
        r[i * n + i] = if norms[i] > 0.0 { 1.0 } else { 0.0 };
    }
    Ok(FcMatrix {
        n,
        r,
        window_start: start,
        window_end: end,
        degenerate,
    })
}

/// Binary symmetric adjacency with zero diagonal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Adjacency {
    n: usize,
    /// Row-major `n × n` of 0/1.
    bits: Vec<u8>,
}

impl Adjacency {
    pub fn empty(n: usize) -> Self {
        Self { n, bits: vec![0; n * n] }
    }

    /// Builds from the upper triangle (row-major over `i < j`).
    pub fn from_upper_triangle(n: usize, upper: &[bool]) -> Result<Self, FcError> {
        if upper.len() != n * n.saturating_sub(1) / 2 {
            return Err(FcError::Format {
                what: "adjacency",
                detail: format!("{} upper-triangle entries for n = {n}", upper.len()),
            });
        }
        let mut a = Self::empty(n);
        let mut k = 0;
        for i in 0..n {
            for j in i + 1..n {
                if upper[k] {
                    a.set_edge(i, j);
                }
                k += 1;
            }
        }
        Ok(a)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j] != 0
    }

    pub fn set_edge(&mut self, i: usize, j: usize) {
        if i != j {
            self.bits[i * self.n + j] = 1;
            self.bits[j * self.n + i] = 1;
        }
    }

    pub fn edge_count(&self) -> usize {
        self.upper_triangle().iter().filter(|&&b| b).count()
    }

    pub fn density(&self) -> f64 {
        let pairs = self.n * (self.n - 1) / 2;
        self.edge_count() as f64 / pairs as f64
    }

    pub fn upper_triangle(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.n * (self.n - 1) / 2);
        for i in 0..self.n {
            for j in i + 1..self.n {
                out.push(self.has_edge(i, j));
            }
        }
        out
    }

    /// Dense `n × n` matrix of 0.0/1.0.
    pub fn to_dense(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| b as f64).collect()
    }
}

/// Thresholded adjacency and whether the threshold saturated on an all-equal matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Thresholded {
    pub adjacency: Adjacency,
    pub degenerate: bool,
}

/// Keeps the top `edge_percentile` percent of upper-triangle correlations as edges.
///
/// The number of kept values is `ceil(M * p / 100)` for `M = N(N-1)/2`; every value equal to the
/// resulting cutoff is kept as well.
pub fn threshold_adjacency(fc: &FcMatrix, edge_percentile: f64) -> Thresholded {
    let n = fc.n;
    let mut upper = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            upper.push(fc.get(i, j));
        }
    }
    let m = upper.len();
    let keep = ((m as f64 * edge_percentile / 100.0).ceil() as usize).clamp(1, m);
    let mut scratch = upper.clone();
    let (_, &mut cutoff, _) = scratch.select_nth_unstable_by(keep - 1, |a, b| b.total_cmp(a));
    let (lo, hi) = upper
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let degenerate = lo == hi;
    let selected: Vec<bool> = upper.iter().map(|&v| v >= cutoff).collect();
    Thresholded {
        adjacency: Adjacency::from_upper_triangle(n, &selected).expect("consistent size"),
        degenerate,
    }
}

/// Sequence of thresholded window graphs built from one series.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicGraph {
    pub adjacency: Vec<Adjacency>,
    /// Exclusive end column of each window.
    pub window_ends: Vec<usize>,
    pub n_nodes: usize,
}

impl DynamicGraph {
    pub fn len(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }
}

/// Windows, correlates and thresholds `ts` into a [`DynamicGraph`].
pub fn build_dynamic_graph(ts: &RoiTimeseries, cfg: &WindowConfig) -> Result<DynamicGraph, FcError> {
    let windows = sliding_windows(ts.t_max, cfg)?;
    let mut adjacency = Vec::with_capacity(windows.len());
    let mut window_ends = Vec::with_capacity(windows.len());
    for &(start, end) in &windows {
        let fc = correlation_matrix(ts, start, end)?;
        let th = threshold_adjacency(&fc, cfg.edge_percentile);
        if th.degenerate {
            warn!("window [{start}, {end}) has all-equal correlations; every edge kept");
        }
        adjacency.push(th.adjacency);
        window_ends.push(end);
    }
    Ok(DynamicGraph {
        adjacency,
        window_ends,
        n_nodes: ts.n_rois,
    })
}
