//! Supervised training with stratified cross-validation.
//!
//! Each fold trains a fresh model on random fixed-length slices of the training subjects, with a
//! one-cycle learning rate and Adam updates, then scores the held-out subjects on their full
//! series.

mod metrics;

use std::f64::consts::PI;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Mode, Tape, Tensor};
use crate::fcgraph::{build_dynamic_graph, standardize, DynamicGraph, FcError, RoiTimeseries, WindowConfig};
use crate::stagin::{composite_loss, forward, predict_standardized, Bound, ModelConfig, ModelError, ModelState, Sample};

pub use metrics::{accuracy, argmax, auroc, class_auroc, mean_std, softmax};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fc(#[from] FcError),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("step {step} is outside a schedule of {total} steps")]
    OutOfRange { step: usize, total: usize },
    #[error("slice length {len} exceeds series length {t_max}")]
    SliceTooLong { len: usize, t_max: usize },
    #[error("class {class} has {count} members, fewer than the {folds} folds")]
    ClassTooSmall { class: usize, count: usize, folds: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("AUROC needs both classes present")]
    SingleClass,
    #[error("dataset is empty")]
    EmptyDataset,
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub minibatch_size: usize,
    pub lr_base: f64,
    pub lr_peak: f64,
    pub lr_final: f64,
    pub warmup_frac: f64,
    pub slice_len: usize,
    pub folds: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::rest()
    }
}

impl TrainConfig {
    /// Resting-state defaults: 30 epochs, batches of 3, slices of 600.
    pub fn rest() -> Self {
        Self {
            epochs: 30,
            minibatch_size: 3,
            lr_base: 5e-4,
            lr_peak: 1e-3,
            lr_final: 5e-7,
            warmup_frac: 0.2,
            slice_len: 600,
            folds: 5,
            seed: 0,
        }
    }

    /// Task defaults: 10 epochs, batches of 16, slices of 150.
    pub fn task() -> Self {
        Self {
            epochs: 10,
            minibatch_size: 16,
            slice_len: 150,
            ..Self::rest()
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.epochs == 0 {
            v.push("epochs must be positive".to_string());
        }
        if self.minibatch_size == 0 {
            v.push("minibatch-size must be positive".to_string());
        }
        if self.folds < 2 {
            v.push(format!("folds must be at least 2, got {}", self.folds));
        }
        if self.slice_len < 2 {
            v.push(format!("slice-len must be at least 2, got {}", self.slice_len));
        }
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            v.push(format!("warmup-frac must lie in (0, 1), got {}", self.warmup_frac));
        }
        if !(0.0 < self.lr_final && self.lr_final < self.lr_base && self.lr_base < self.lr_peak) {
            v.push(format!(
                "need 0 < lr-final < lr-base < lr-peak, got {} / {} / {}",
                self.lr_final, self.lr_base, self.lr_peak
            ));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(TrainError::InvalidConfig(v.join("; ")))
        }
    }
}

/// Linear ramp from `lr_base` to `lr_peak` over the warmup fraction, then cosine decay to
/// `lr_final` at the last step.
pub fn one_cycle_lr(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if step >= total_steps {
        return Err(TrainError::OutOfRange {
            step,
            total: total_steps,
        });
    }
    let warmup = cfg.warmup_frac * total_steps as f64;
    let s = step as f64;
    let last = (total_steps - 1) as f64;
    if s <= warmup || last <= warmup {
        let frac = if warmup > 0.0 { (s / warmup).min(1.0) } else { 1.0 };
        return Ok(cfg.lr_base + (cfg.lr_peak - cfg.lr_base) * frac);
    }
    let progress = (s - warmup) / (last - warmup);
    Ok(cfg.lr_final + (cfg.lr_peak - cfg.lr_final) * 0.5 * (1.0 + (PI * progress).cos()))
}

/// Contiguous `len`-column slice with a uniformly drawn start.
pub fn random_time_slice<R: Rng + ?Sized>(ts: &RoiTimeseries, len: usize, rng: &mut R) -> Result<RoiTimeseries> {
    if len > ts.t_max() {
        return Err(TrainError::SliceTooLong { len, t_max: ts.t_max() });
    }
    let start = rng.random_range(0..=ts.t_max() - len);
    Ok(ts.slice_columns(start, len)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub train_counts: Vec<usize>,
    pub test_counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub folds: Vec<Fold>,
}

/// Shuffles each class and deals its members round-robin over the folds, continuing from the
/// fold where the previous class stopped, so fold sizes and per-class counts differ by at most one.
pub fn stratified_kfold(labels: &[usize], n_classes: usize, k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(TrainError::InvalidConfig(format!("folds must be at least 2, got {k}")));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(TrainError::ShapeMismatch(format!("label {bad} with {n_classes} classes")));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    for (class, m) in members.iter().enumerate() {
        if m.len() < k {
            return Err(TrainError::ClassTooSmall {
                class,
                count: m.len(),
                folds: k,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut next = 0;
    for m in &mut members {
        m.shuffle(&mut rng);
        for &i in m.iter() {
            test[next].push(i);
            next = (next + 1) % k;
        }
    }
    let counts = |idx: &[usize]| {
        let mut c = vec![0; n_classes];
        idx.iter().for_each(|&i| c[labels[i]] += 1);
        c
    };
    let folds = (0..k)
        .map(|f| {
            let mut t = test[f].clone();
            t.sort_unstable();
            let train: Vec<usize> = (0..labels.len()).filter(|i| t.binary_search(i).is_err()).collect();
            Fold {
                train_counts: counts(&train),
                test_counts: counts(&t),
                train,
                test: t,
            }
        })
        .collect();
    Ok(FoldSplit { folds })
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(TrainError::ShapeMismatch(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.m[i].shape() || g.shape() != p.shape() {
                return Err(TrainError::ShapeMismatch(format!(
                    "tensor {i}: parameter {:?}, gradient {:?}, state {:?}",
                    p.shape(),
                    g.shape(),
                    self.m[i].shape()
                )));
            }
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (j, &gj) in g.data().iter().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Labeled subjects sharing one ROI set.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub series: Vec<RoiTimeseries>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

/// One line of the metrics log. Per-epoch records describe the training minibatches of that
/// epoch; the closing record of each fold (`split = "test"`) scores the held-out subjects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub fold: usize,
    pub epoch: usize,
    pub split: String,
    pub lr: f64,
    pub loss_xent: f64,
    pub loss_ortho: f64,
    pub acc: f64,
    pub auroc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub state: ModelState,
    pub test: Vec<usize>,
    /// Class probabilities of each test subject.
    pub probs: Vec<Vec<f64>>,
    pub acc: f64,
    pub auroc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub acc_mean: f64,
    pub acc_std: f64,
    pub auroc_mean: f64,
    pub auroc_std: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub split: FoldSplit,
    pub folds: Vec<FoldOutcome>,
    pub metrics: Vec<MetricRecord>,
    pub summary: Summary,
}

/// Standardized series and full-length graphs, shared across folds.
struct Prepared {
    series: Vec<RoiTimeseries>,
    graphs: Vec<DynamicGraph>,
}

fn prepare(data: &Dataset, window: &WindowConfig) -> Result<Prepared> {
    let series: Vec<RoiTimeseries> = data
        .series
        .iter()
        .map(|s| standardize(s).map(|z| z.series))
        .collect::<std::result::Result<_, _>>()?;
    let graphs = series
        .iter()
        .map(|s| build_dynamic_graph(s, window))
        .collect::<std::result::Result<_, _>>()?;
    Ok(Prepared { series, graphs })
}

fn check_dataset(data: &Dataset, model: &ModelConfig, train: &TrainConfig) -> Result<()> {
    model.validate()?;
    train.validate()?;
    if data.series.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if data.labels.len() != data.series.len() || data.ids.len() != data.series.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "{} series, {} labels, {} ids",
            data.series.len(),
            data.labels.len(),
            data.ids.len()
        )));
    }
    if model.n_classes != data.n_classes {
        return Err(TrainError::ShapeMismatch(format!(
            "model predicts {} classes, dataset has {}",
            model.n_classes, data.n_classes
        )));
    }
    for s in &data.series {
        if s.n_rois() != model.n_nodes {
            return Err(TrainError::ShapeMismatch(format!(
                "model has {} nodes, a series has {} ROIs",
                model.n_nodes,
                s.n_rois()
            )));
        }
        if train.slice_len > s.t_max() {
            return Err(TrainError::SliceTooLong {
                len: train.slice_len,
                t_max: s.t_max(),
            });
        }
    }
    Ok(())
}

fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(fold as u64 + 1)
}

struct EpochTotals {
    xent: f64,
    ortho: f64,
    batches: usize,
    probs: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

fn train_fold(
    prep: &Prepared,
    data: &Dataset,
    window: &WindowConfig,
    model: &ModelConfig,
    cfg: &TrainConfig,
    fold_index: usize,
    fold: &Fold,
    metrics: &mut Vec<MetricRecord>,
) -> Result<FoldOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(fold_seed(cfg.seed, fold_index));
    let mut state = ModelState::init(model.clone(), &mut rng);
    let mut adam = Adam::new(state.params.tensors());
    let batches_per_epoch = fold.train.len().div_ceil(cfg.minibatch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut order = fold.train.clone();
    let mut step = 0;
    let mut lr = cfg.lr_base;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut totals = EpochTotals {
            xent: 0.0,
            ortho: 0.0,
            batches: 0,
            probs: Vec::new(),
            labels: Vec::new(),
        };
        for chunk in order.chunks(cfg.minibatch_size) {
            let slices: Vec<RoiTimeseries> = chunk
                .iter()
                .map(|&i| random_time_slice(&prep.series[i], cfg.slice_len, &mut rng))
                .collect::<Result<_>>()?;
            let graphs: Vec<DynamicGraph> = slices
                .iter()
                .map(|s| build_dynamic_graph(s, window))
                .collect::<std::result::Result<_, _>>()?;
            let batch: Vec<Sample> = slices
                .iter()
                .zip(&graphs)
                .map(|(series, graph)| Sample { series, graph })
                .collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();

            let mut tape = Tape::new();
            let bound = Bound::new(&mut tape, &state.params, true);
            let pass = forward(&mut tape, &state, &bound, &batch, Mode::Train, &mut rng)?;
            let (total, xent) = composite_loss(&mut tape, &pass, &labels, model.lambda_ortho)?;
            let grads = tape.backward(total).map_err(ModelError::from)?;
            let grads: Vec<Tensor> = bound.vars().iter().map(|&v| grads.get(v)).collect();

            lr = one_cycle_lr(step, total_steps, cfg)?;
            adam.step(state.params.tensors_mut(), &grads, lr)?;
            state.absorb(&pass.batch_stats);
            step += 1;

            totals.xent += tape.value(xent).item();
            totals.ortho += tape.value(pass.ortho).item();
            totals.batches += 1;
            let logits = tape.value(pass.logits);
            let c = model.n_classes;
            totals
                .probs
                .extend(logits.data().chunks(c).map(softmax));
            totals.labels.extend(labels);
        }
        let n = totals.batches as f64;
        metrics.push(MetricRecord {
            fold: fold_index,
            epoch,
            split: "train".to_string(),
            lr,
            loss_xent: totals.xent / n,
            loss_ortho: totals.ortho / n,
            acc: accuracy(&totals.probs, &totals.labels),
            auroc: class_auroc(&totals.probs, &totals.labels, model.n_classes).ok(),
        });
    }

    let mut probs = Vec::with_capacity(fold.test.len());
    let (mut xent, mut ortho) = (0.0, 0.0);
    for &i in &fold.test {
        let p = predict_standardized(&state, &prep.series[i], &prep.graphs[i])?;
        let pr = softmax(&p.logits);
        xent -= pr[data.labels[i]].max(f64::MIN_POSITIVE).ln();
        ortho += p.ortho;
        probs.push(pr);
    }
    let labels: Vec<usize> = fold.test.iter().map(|&i| data.labels[i]).collect();
    let acc = accuracy(&probs, &labels);
    let auc = class_auroc(&probs, &labels, model.n_classes)?;
    let m = fold.test.len() as f64;
    metrics.push(MetricRecord {
        fold: fold_index,
        epoch: cfg.epochs,
        split: "test".to_string(),
        lr,
        loss_xent: xent / m,
        loss_ortho: ortho / m,
        acc,
        auroc: Some(auc),
    });
    info!("fold {fold_index}: test accuracy {acc:.4}, AUROC {auc:.4}");
    Ok(FoldOutcome {
        state,
        test: fold.test.clone(),
        probs,
        acc,
        auroc: auc,
    })
}

/// Stratified k-fold cross-validation. Training uses random slices; evaluation uses full series.
pub fn train_model(
    data: &Dataset,
    window: &WindowConfig,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    check_dataset(data, model, cfg)?;
    window.validate()?;
    let split = stratified_kfold(&data.labels, data.n_classes, cfg.folds, cfg.seed)?;
    train_with_split(data, window, model, cfg, split)
}

/// As [`train_model`] with a caller-provided split, so several models can share folds.
pub fn train_with_split(
    data: &Dataset,
    window: &WindowConfig,
    model: &ModelConfig,
    cfg: &TrainConfig,
    split: FoldSplit,
) -> Result<TrainOutcome> {
    check_dataset(data, model, cfg)?;
    let prep = prepare(data, window)?;
    let n_folds = split.folds.len();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(n_folds).max(1);
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<(FoldOutcome, Vec<MetricRecord>)>>>> =
        (0..n_folds).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let f = next.fetch_add(1, Ordering::Relaxed);
                let Some(fold) = split.folds.get(f) else { break };
                let mut records = Vec::new();
                let outcome = train_fold(&prep, data, window, model, cfg, f, fold, &mut records);
                *slots[f].lock().expect("fold slot") = Some(outcome.map(|o| (o, records)));
            });
        }
    });
    let mut metrics = Vec::new();
    let mut folds = Vec::with_capacity(n_folds);
    for slot in slots {
        let (outcome, records) = slot.into_inner().expect("fold slot").expect("every fold ran")?;
        folds.push(outcome);
        metrics.extend(records);
    }
    let (acc_mean, acc_std) = mean_std(&folds.iter().map(|f| f.acc).collect::<Vec<_>>());
    let (auroc_mean, auroc_std) = mean_std(&folds.iter().map(|f| f.auroc).collect::<Vec<_>>());
    Ok(TrainOutcome {
        split,
        folds,
        metrics,
        summary: Summary {
            acc_mean,
            acc_std,
            auroc_mean,
            auroc_std,
        },
    })
}

/// Metrics as JSON lines, one record per line.
pub fn metrics_jsonl(records: &[MetricRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("metric record serializes"));
        out.push('\n');
    }
    out
}
