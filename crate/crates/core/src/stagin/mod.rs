//! Spatio-temporal attention graph network.
//!
//! Each window graph gets node features from a learnable one-hot embedding plus a GRU encoding
//! of the series up to the window end. `K` GIN layers process every graph; after each layer an
//! attention readout pools the nodes, and a Transformer block attends over the per-window
//! graph vectors. The time-summed outputs of all layers are concatenated and classified by a
//! single affine map.

pub mod checkpoint;
pub mod layers;
mod params;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, BatchStats, Mode, Tape, Tensor, Var};
use crate::fcgraph::{standardize, DynamicGraph, FcError, RoiTimeseries};

use layers::{GinWeights, GruWeights, Linear, Norm, TemporalWeights};
pub use params::{Bound, ModelState, ParamSet};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Fc(#[from] FcError),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("inconsistent batch: {0}")]
    InconsistentBatch(String),
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    Garo,
    Sero,
    Mean,
}

impl FromStr for Readout {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "garo" => Ok(Self::Garo),
            "sero" => Ok(Self::Sero),
            "mean" => Ok(Self::Mean),
            other => Err(format!("unknown readout {other:?} (expected garo, sero or mean)")),
        }
    }
}

impl fmt::Display for Readout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Garo => "garo",
            Self::Sero => "sero",
            Self::Mean => "mean",
        })
    }
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_nodes: usize,
    pub n_classes: usize,
    pub readout: Readout,
    pub lambda_ortho: f64,
    pub dropout_rep: f64,
    pub dropout_attn: f64,
    /// Feed the GRU encoding of the series into the node features.
    #[serde(default = "default_true")]
    pub timestamp_encoding: bool,
}

impl ModelConfig {
    /// Default hyperparameters for a given graph size and class count.
    pub fn new(n_nodes: usize, n_classes: usize) -> Self {
        Self {
            n_layers: 4,
            hidden_dim: 128,
            n_nodes,
            n_classes,
            readout: Readout::Sero,
            lambda_ortho: 1e-5,
            dropout_rep: 0.5,
            dropout_attn: 0.1,
            timestamp_encoding: true,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.n_layers == 0 {
            v.push("n-layers must be positive".to_string());
        }
        if self.hidden_dim == 0 {
            v.push("hidden-dim must be positive".to_string());
        }
        if self.n_nodes < 2 {
            v.push(format!("n-nodes must be at least 2, got {}", self.n_nodes));
        }
        if self.n_classes < 2 {
            v.push(format!("n-classes must be at least 2, got {}", self.n_classes));
        }
        if !(self.lambda_ortho >= 0.0 && self.lambda_ortho.is_finite()) {
            v.push(format!("lambda-ortho must be a finite nonnegative number, got {}", self.lambda_ortho));
        }
        for (name, p) in [("dropout-rep", self.dropout_rep), ("dropout-attn", self.dropout_attn)] {
            if !(0.0..1.0).contains(&p) {
                v.push(format!("{name} must lie in [0, 1), got {p}"));
            }
        }
        v
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(ModelError::InvalidConfig(v.join("; ")))
        }
    }

    pub fn representation_len(&self) -> usize {
        self.n_layers * self.hidden_dim
    }
}

/// Attention values and representation of one subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub n_layers: usize,
    pub n_steps: usize,
    pub n_nodes: usize,
    /// `[K, T, N]` node attention.
    pub z_space: Vec<f64>,
    /// `[K, T, T]` row-stochastic temporal attention.
    pub z_time: Vec<f64>,
    /// `K * D` representation before the classifier.
    pub h_dyn: Vec<f64>,
}

impl AttentionRecord {
    /// `[T, N]` node attention of one layer.
    pub fn space_layer(&self, layer: usize) -> &[f64] {
        let len = self.n_steps * self.n_nodes;
        &self.z_space[layer * len..(layer + 1) * len]
    }

    /// `[T, T]` temporal attention of one layer.
    pub fn time_layer(&self, layer: usize) -> &[f64] {
        let len = self.n_steps * self.n_steps;
        &self.z_time[layer * len..(layer + 1) * len]
    }
}

/// One subject's model input: a standardized series and its window graphs.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub series: &'a RoiTimeseries,
    pub graph: &'a DynamicGraph,
}

pub struct ForwardPass {
    /// `[B, C]`.
    pub logits: Var,
    /// Scalar mean orthogonality penalty over layers and graphs.
    pub ortho: Var,
    pub records: Vec<AttentionRecord>,
    /// Batchnorm statistics observed in training mode, keyed by layer name.
    pub batch_stats: Vec<(String, BatchStats)>,
}

fn check_batch(config: &ModelConfig, batch: &[Sample]) -> Result<(usize, Vec<usize>), ModelError> {
    let first = batch
        .first()
        .ok_or_else(|| ModelError::InconsistentBatch("empty batch".to_string()))?;
    let ends = first.graph.window_ends.clone();
    if ends.is_empty() {
        return Err(ModelError::InconsistentBatch("graph sequence is empty".to_string()));
    }
    for s in batch {
        if s.graph.n_nodes != config.n_nodes || s.series.n_rois() != config.n_nodes {
            return Err(ModelError::ShapeMismatch(format!(
                "model has {} nodes, graph has {}, series has {}",
                config.n_nodes,
                s.graph.n_nodes,
                s.series.n_rois()
            )));
        }
        if s.graph.window_ends != ends || s.graph.len() != ends.len() {
            return Err(ModelError::InconsistentBatch(
                "all samples in a batch must share window positions".to_string(),
            ));
        }
        for &e in &ends {
            if e == 0 || e > s.series.t_max() {
                return Err(ModelError::IndexOutOfRange {
                    index: e,
                    len: s.series.t_max(),
                });
            }
        }
    }
    Ok((ends.len(), ends))
}

fn series_columns(batch: &[Sample], last: usize) -> Vec<Tensor> {
    let (b, n) = (batch.len(), batch[0].series.n_rois());
    (0..last)
        .map(|c| {
            let mut data = Vec::with_capacity(b * n);
            for s in batch {
                data.extend((0..n).map(|i| s.series.get(i, c)));
            }
            Tensor::new(&[b, n], data).expect("b, n > 0")
        })
        .collect()
}

fn adjacency_tensor(batch: &[Sample], steps: usize, n: usize) -> Tensor {
    let mut data = Vec::with_capacity(batch.len() * steps * n * n);
    for s in batch {
        for a in &s.graph.adjacency {
            data.extend(a.to_dense());
        }
    }
    Tensor::new(&[batch.len() * steps, n, n], data).expect("dense adjacency")
}

/// Runs the model on a batch. Parameters must have been bound on `tape` with [`Bound::new`].
pub fn forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    state: &ModelState,
    bound: &Bound,
    batch: &[Sample],
    mode: Mode,
    rng: &mut R,
) -> Result<ForwardPass, ModelError> {
    let cfg = &state.config;
    let (steps, ends) = check_batch(cfg, batch)?;
    let (b, n, d, k) = (batch.len(), cfg.n_nodes, cfg.hidden_dim, cfg.n_layers);
    let mut batch_stats = Vec::new();
    let mut record = |name: String, s: Option<BatchStats>| {
        if let Some(s) = s {
            batch_stats.push((name, s));
        }
    };

    let eta = if cfg.timestamp_encoding {
        let last = *ends.iter().max().expect("nonempty");
        let columns = series_columns(batch, last);
        Some(layers::encode_timestamps(tape, &columns, &ends, &GruWeights::bind(bound))?)
    } else {
        None
    };
    let mut h = layers::node_features(
        tape,
        eta,
        bound.var("node.w_onehot"),
        bound.var("node.w_time"),
        b,
        steps,
    )?;
    let adjacency = tape.constant(adjacency_tensor(batch, steps, n));

    let mut ortho_terms = Vec::with_capacity(k);
    let mut space = Vec::with_capacity(k);
    let mut time = Vec::with_capacity(k);
    let mut pooled_layers = Vec::with_capacity(k);
    for layer in 0..k {
        let gin = GinWeights::bind(bound, layer);
        let bn1 = format!("gin.{layer}.bn1");
        let bn2 = format!("gin.{layer}.bn2");
        let (next, [s1, s2]) = layers::gin_layer(
            tape,
            h,
            adjacency,
            &gin,
            mode,
            [&state.running[&bn1], &state.running[&bn2]],
        )?;
        record(bn1, s1);
        record(bn2, s2);
        h = next;

        let r = format!("readout.{layer}");
        let z = match cfg.readout {
            Readout::Garo => Some(layers::garo_attention(
                tape,
                h,
                bound.var(&format!("{r}.key.w")),
                bound.var(&format!("{r}.query.w")),
            )?),
            Readout::Sero => {
                let bn = format!("{r}.bn");
                let (z, s) = layers::sero_attention(
                    tape,
                    h,
                    bound.var(&format!("{r}.embed.w")),
                    &Norm::bind(bound, &bn),
                    bound.var(&format!("{r}.attend.w")),
                    mode,
                    &state.running[&bn],
                )?;
                record(bn, s);
                Some(z)
            }
            Readout::Mean => None,
        };
        let pooled = match z {
            Some(z) => {
                let zd = tape.dropout(z, cfg.dropout_attn, mode, rng);
                layers::attend_nodes(tape, zd, h)?
            }
            None => layers::readout_mean(tape, h)?,
        };
        space.push(z);

        let per_graph = layers::ortho_loss(tape, h)?.ok_or_else(|| {
            ModelError::DegenerateInput(format!("layer {layer} produced an all-zero node Gram matrix"))
        })?;
        ortho_terms.push(tape.mean_all(per_graph));

        let seq = tape.reshape(pooled, &[b, steps, d])?;
        let (out, attn) =
            layers::transformer_encoder(tape, seq, &TemporalWeights::bind(bound, layer), cfg.dropout_attn, mode, rng)?;
        time.push(attn);
        pooled_layers.push(tape.reduce_sum(out, 1)?);
    }

    let rep = tape.concat_last(&pooled_layers)?;
    let rep_dropped = tape.dropout(rep, cfg.dropout_rep, mode, rng);
    let logits = Linear::bind(bound, "head", true).apply(tape, rep_dropped)?;
    let mut ortho = ortho_terms[0];
    for &t in &ortho_terms[1..] {
        ortho = tape.add(ortho, t)?;
    }
    let ortho = tape.scale(ortho, 1.0 / k as f64);

    let records = (0..b)
        .map(|i| {
            let mut z_space = Vec::with_capacity(k * steps * n);
            let mut z_time = Vec::with_capacity(k * steps * steps);
            for layer in 0..k {
                match space[layer] {
                    Some(z) => z_space.extend_from_slice(&tape.value(z).data()[i * steps * n..(i + 1) * steps * n]),
                    None => z_space.extend(std::iter::repeat_n(1.0 / n as f64, steps * n)),
                }
                let zt = tape.value(time[layer]).data();
                z_time.extend_from_slice(&zt[i * steps * steps..(i + 1) * steps * steps]);
            }
            AttentionRecord {
                n_layers: k,
                n_steps: steps,
                n_nodes: n,
                z_space,
                z_time,
                h_dyn: tape.value(rep).data()[i * k * d..(i + 1) * k * d].to_vec(),
            }
        })
        .collect();

    Ok(ForwardPass {
        logits,
        ortho,
        records,
        batch_stats,
    })
}

/// `(total, cross_entropy)` with `total = cross_entropy + lambda * ortho`.
pub fn composite_loss(
    tape: &mut Tape,
    pass: &ForwardPass,
    labels: &[usize],
    lambda: f64,
) -> Result<(Var, Var), ModelError> {
    let xent = tape.cross_entropy(pass.logits, labels)?;
    let reg = tape.scale(pass.ortho, lambda);
    Ok((tape.add(xent, reg)?, xent))
}

impl ModelState {
    /// Folds training-mode batch statistics into the running estimates.
    pub fn absorb(&mut self, stats: &[(String, BatchStats)]) {
        for (name, s) in stats {
            if let Some(r) = self.running.get_mut(name) {
                r.update(s);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub record: AttentionRecord,
    pub ortho: f64,
}

/// Evaluation-mode forward pass on one raw (unstandardized) series and its graphs.
pub fn predict(state: &ModelState, series: &RoiTimeseries, graph: &DynamicGraph) -> Result<Prediction, ModelError> {
    let std = standardize(series)?;
    predict_standardized(state, &std.series, graph)
}

pub fn predict_standardized(
    state: &ModelState,
    series: &RoiTimeseries,
    graph: &DynamicGraph,
) -> Result<Prediction, ModelError> {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, &state.params, false);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let sample = Sample { series, graph };
    let mut pass = forward(&mut tape, state, &bound, &[sample], Mode::Eval, &mut rng)?;
    Ok(Prediction {
        logits: tape.value(pass.logits).data().to_vec(),
        record: pass.records.remove(0),
        ortho: tape.value(pass.ortho).item(),
    })
}

#[cfg(test)]
mod tests;
