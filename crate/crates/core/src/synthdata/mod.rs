//! Synthetic ROI timeseries with planted connectivity structure.
//!
//! Nodes are split into contiguous blocks. Each connectivity state makes two adjacent blocks
//! strongly correlated internally and moderately correlated with each other; every other pair
//! stays weakly correlated. Samples are Gaussian draws with the active state's correlation
//! matrix plus white noise. Rest-style runs switch states through a Markov chain; task-style runs
//! follow a block schedule.

use std::fs;
use std::path::Path;

use log::info;
use nalgebra::{Cholesky, DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fcgraph::{io, FcError, RoiTimeseries};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic configuration: {0}")]
    InvalidConfig(String),
    #[error("template {state} is not positive definite (minimum eigenvalue {min_eigenvalue:e})")]
    NotSpd { state: usize, min_eigenvalue: f64 },
    #[error(transparent)]
    Fc(#[from] FcError),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Network names given to the blocks, in order.
pub const BLOCK_ICNS: [&str; 7] = ["DMN", "SMN", "VN", "CCN", "DAN", "SVN", "LN"];

const MIN_EIGENVALUE: f64 = 1e-6;
const MAX_CORRELATION: f64 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskBlock {
    pub label: String,
    pub onset: usize,
    pub duration: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Schedule {
    /// Markov state switching. Group 0 favours state 0 and group 1 favours state 1 by a factor
    /// `1 + occupancy_bias` in the state draw.
    Rest { mean_dwell: f64, occupancy_bias: f64 },
    /// State 0 outside the blocks; inside them, state `1 + task` for the subject's task.
    Task { n_tasks: usize, blocks: Vec<TaskBlock> },
}

impl Schedule {
    /// Alternating rest/task blocks of equal length starting with rest.
    pub fn alternating(n_tasks: usize, t_max: usize, block_len: usize) -> Self {
        let mut blocks = Vec::new();
        let mut onset = block_len;
        while onset < t_max {
            blocks.push(TaskBlock {
                label: "task".to_string(),
                onset,
                duration: block_len.min(t_max - onset),
            });
            onset += 2 * block_len;
        }
        Self::Task { n_tasks, blocks }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub n_nodes: usize,
    pub t_max: usize,
    pub tr_s: f64,
    pub n_blocks: usize,
    /// Number of rest-style states; task-style runs use `1 + n_tasks`.
    pub n_states: usize,
    pub rho_in: f64,
    pub rho_out: f64,
    /// Added to the within-block correlation of block 0 for group 1.
    pub group_effect: f64,
    pub noise_std: f64,
    pub schedule: Schedule,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 200,
            n_nodes: 32,
            t_max: 400,
            tr_s: 0.72,
            n_blocks: 4,
            n_states: 4,
            rho_in: 0.6,
            rho_out: 0.1,
            group_effect: 0.2,
            noise_std: 0.5,
            schedule: Schedule::Rest {
                mean_dwell: 20.0,
                occupancy_bias: 0.0,
            },
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn state_count(&self) -> usize {
        match &self.schedule {
            Schedule::Rest { .. } => self.n_states,
            Schedule::Task { n_tasks, .. } => 1 + n_tasks,
        }
    }

    /// Number of distinct class labels in the generated dataset.
    pub fn n_classes(&self) -> usize {
        match &self.schedule {
            Schedule::Rest { .. } => 2,
            Schedule::Task { n_tasks, .. } => *n_tasks,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, x) in [
            ("n-subjects", self.n_subjects),
            ("n-nodes", self.n_nodes),
            ("t-max", self.t_max),
            ("n-blocks", self.n_blocks),
            ("n-states", self.n_states),
        ] {
            if x == 0 {
                v.push(format!("{name} must be positive"));
            }
        }
        if self.n_blocks > self.n_nodes {
            v.push(format!("n-blocks ({}) exceeds n-nodes ({})", self.n_blocks, self.n_nodes));
        }
        if !(self.tr_s > 0.0) {
            v.push(format!("tr must be positive, got {}", self.tr_s));
        }
        if !(self.rho_out > -1.0 && self.rho_in < 1.0 && self.rho_out <= self.rho_in) {
            v.push(format!(
                "need -1 < rho-out <= rho-in < 1, got rho-in {} and rho-out {}",
                self.rho_in, self.rho_out
            ));
        }
        if !(self.group_effect >= 0.0) {
            v.push(format!("group-effect must be nonnegative, got {}", self.group_effect));
        }
        if !(self.noise_std >= 0.0) {
            v.push(format!("noise-std must be nonnegative, got {}", self.noise_std));
        }
        match &self.schedule {
            Schedule::Rest {
                mean_dwell,
                occupancy_bias,
            } => {
                if !(*mean_dwell >= 1.0) {
                    v.push(format!("mean-dwell must be at least 1, got {mean_dwell}"));
                }
                if !(*occupancy_bias >= 0.0) {
                    v.push(format!("occupancy-bias must be nonnegative, got {occupancy_bias}"));
                }
                if *occupancy_bias > 0.0 && self.n_states < 2 {
                    v.push("occupancy-bias needs at least two states".to_string());
                }
            }
            Schedule::Task { n_tasks, blocks } => {
                if *n_tasks == 0 {
                    v.push("n-tasks must be positive".to_string());
                }
                for b in blocks {
                    if b.duration == 0 || b.onset + b.duration > self.t_max {
                        v.push(format!(
                            "task block {:?} at {}+{} does not fit in {} timepoints",
                            b.label, b.onset, b.duration, self.t_max
                        ));
                    }
                }
            }
        }
        v
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(SynthError::InvalidConfig(v.join("; ")))
        }
    }
}

/// Block index of every node; blocks are contiguous and differ in size by at most one.
pub fn block_assignment(n_nodes: usize, n_blocks: usize) -> Vec<usize> {
    let base = n_nodes / n_blocks;
    let extra = n_nodes % n_blocks;
    let mut out = Vec::with_capacity(n_nodes);
    for b in 0..n_blocks {
        let size = base + usize::from(b < extra);
        out.extend(std::iter::repeat_n(b, size));
    }
    out
}

pub fn block_icn_labels(n_nodes: usize, n_blocks: usize) -> Vec<String> {
    block_assignment(n_nodes, n_blocks)
        .into_iter()
        .map(|b| BLOCK_ICNS[b % BLOCK_ICNS.len()].to_string())
        .collect()
}

/// Blocks strongly correlated in `state`.
pub fn active_blocks(state: usize, n_blocks: usize) -> [usize; 2] {
    [state % n_blocks, (state + 1) % n_blocks]
}

/// Correlation templates per state, for both groups.
#[derive(Clone, Debug, PartialEq)]
pub struct Templates {
    pub group_a: Vec<DMatrix<f64>>,
    pub group_b: Vec<DMatrix<f64>>,
    pub blocks: Vec<usize>,
}

impl Templates {
    pub fn for_group(&self, group: usize) -> &[DMatrix<f64>] {
        if group == 0 {
            &self.group_a
        } else {
            &self.group_b
        }
    }
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Makes `m` positive definite by diagonal loading, then rescales back to unit diagonal.
fn ensure_spd(mut m: DMatrix<f64>, state: usize) -> Result<DMatrix<f64>, SynthError> {
    let min = min_eigenvalue(&m);
    if min > MIN_EIGENVALUE {
        return Ok(m);
    }
    let load = MIN_EIGENVALUE - min + 1e-3;
    for i in 0..m.nrows() {
        m[(i, i)] += load;
    }
    let scale: Vec<f64> = (0..m.nrows()).map(|i| 1.0 / m[(i, i)].sqrt()).collect();
    let m = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * scale[i] * scale[j]);
    let min = min_eigenvalue(&m);
    if min > MIN_EIGENVALUE {
        Ok(m)
    } else {
        Err(SynthError::NotSpd {
            state,
            min_eigenvalue: min,
        })
    }
}

fn template(cfg: &SynthConfig, blocks: &[usize], state: usize, boost: f64) -> DMatrix<f64> {
    let n = blocks.len();
    let active = active_blocks(state, cfg.n_blocks);
    let is_active = |b: usize| active.contains(&b);
    let cross = 0.5 * (cfg.rho_in + cfg.rho_out);
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            return 1.0;
        }
        let (bi, bj) = (blocks[i], blocks[j]);
        let r = if bi == bj {
            if is_active(bi) {
                cfg.rho_in
            } else {
                cfg.rho_out
            }
        } else if is_active(bi) && is_active(bj) {
            cross
        } else {
            cfg.rho_out
        };
        if bi == 0 && bj == 0 && boost > 0.0 {
            (r + boost).min(MAX_CORRELATION)
        } else {
            r
        }
    })
}

pub fn make_templates(cfg: &SynthConfig) -> Result<Templates, SynthError> {
    cfg.validate()?;
    let blocks = block_assignment(cfg.n_nodes, cfg.n_blocks);
    let mut group_a = Vec::new();
    let mut group_b = Vec::new();
    for s in 0..cfg.state_count() {
        group_a.push(ensure_spd(template(cfg, &blocks, s, 0.0), s)?);
        group_b.push(ensure_spd(template(cfg, &blocks, s, cfg.group_effect), s)?);
    }
    Ok(Templates {
        group_a,
        group_b,
        blocks,
    })
}

/// Ground truth of one generated subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectTruth {
    pub id: String,
    pub file: String,
    pub group: usize,
    /// Class used for supervised training: the group for rest-style runs, the task otherwise.
    pub label: usize,
    /// Active state at every timepoint.
    pub states: Vec<usize>,
}

impl SubjectTruth {
    /// 1 where a task block is active, 0 at rest.
    pub fn task_indicator(&self) -> Vec<bool> {
        self.states.iter().map(|&s| s != 0).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SynthConfig,
    pub blocks: Vec<usize>,
    pub icn_labels: Vec<String>,
    /// Nodes in blocks that are active during some task state but not at rest.
    pub responsive: Vec<usize>,
    pub subjects: Vec<SubjectTruth>,
}

fn responsive_nodes(cfg: &SynthConfig, blocks: &[usize]) -> Vec<usize> {
    match &cfg.schedule {
        Schedule::Rest { .. } => Vec::new(),
        Schedule::Task { n_tasks, .. } => {
            let rest = active_blocks(0, cfg.n_blocks);
            let task: Vec<usize> = (1..=*n_tasks).flat_map(|s| active_blocks(s, cfg.n_blocks)).collect();
            (0..blocks.len())
                .filter(|&i| task.contains(&blocks[i]) && !rest.contains(&blocks[i]))
                .collect()
        }
    }
}

fn draw_weighted<R: Rng + ?Sized>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn state_sequence<R: Rng + ?Sized>(cfg: &SynthConfig, group: usize, label: usize, rng: &mut R) -> Vec<usize> {
    match &cfg.schedule {
        Schedule::Rest {
            mean_dwell,
            occupancy_bias,
        } => {
            let k = cfg.n_states;
            let mut weights = vec![1.0; k];
            if k > 1 {
                weights[group.min(k - 1)] += occupancy_bias;
            }
            let switch = 1.0 / mean_dwell;
            let mut s = draw_weighted(rng, &weights);
            let mut out = Vec::with_capacity(cfg.t_max);
            for t in 0..cfg.t_max {
                if t > 0 && k > 1 && rng.random::<f64>() < switch {
                    let mut w = weights.clone();
                    w[s] = 0.0;
                    s = draw_weighted(rng, &w);
                }
                out.push(s);
            }
            out
        }
        Schedule::Task { blocks, .. } => {
            let mut out = vec![0; cfg.t_max];
            for b in blocks {
                out[b.onset..b.onset + b.duration].iter_mut().for_each(|s| *s = 1 + label);
            }
            out
        }
    }
}

/// Draws one subject's series for a given group, class label and per-subject seed.
pub fn simulate_subject(
    templates: &Templates,
    cfg: &SynthConfig,
    group: usize,
    label: usize,
    seed: u64,
) -> Result<(RoiTimeseries, Vec<usize>), SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let states = state_sequence(cfg, group, label, &mut rng);
    let factors: Vec<DMatrix<f64>> = templates
        .for_group(group)
        .iter()
        .enumerate()
        .map(|(s, m)| {
            Cholesky::new(m.clone()).map(|c| c.l()).ok_or(SynthError::NotSpd {
                state: s,
                min_eigenvalue: min_eigenvalue(m),
            })
        })
        .collect::<Result<_, _>>()?;
    let n = cfg.n_nodes;
    let mut values = vec![0.0; n * cfg.t_max];
    let mut z = vec![0.0; n];
    for (t, &s) in states.iter().enumerate() {
        z.iter_mut().for_each(|x| *x = rng.sample(StandardNormal));
        let l = &factors[s];
        for i in 0..n {
            let mut x: f64 = (0..=i).map(|j| l[(i, j)] * z[j]).sum();
            if cfg.noise_std > 0.0 {
                x += cfg.noise_std * rng.sample::<f64, _>(StandardNormal);
            }
            values[i * cfg.t_max + t] = x;
        }
    }
    let roi_labels = (0..n).map(|i| format!("roi{i:03}")).collect();
    let icn = block_icn_labels(n, cfg.n_blocks);
    let ts = RoiTimeseries::new(n, cfg.t_max, values, roi_labels, icn, cfg.tr_s)?;
    Ok((ts, states))
}

/// Balanced assignment of `n` items to `classes` labels, shuffled deterministically.
fn balanced_labels(n: usize, classes: usize, seed: u64, stream: u64) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    labels.shuffle(&mut rng);
    labels
}

/// An in-memory dataset: series plus ground truth, subject `i` drawn with seed `seed + i`.
pub fn generate(cfg: &SynthConfig) -> Result<(Vec<RoiTimeseries>, GroundTruth), SynthError> {
    let templates = make_templates(cfg)?;
    let groups = balanced_labels(cfg.n_subjects, 2, cfg.seed, 1);
    let labels = match &cfg.schedule {
        Schedule::Rest { .. } => groups.clone(),
        Schedule::Task { n_tasks, .. } => balanced_labels(cfg.n_subjects, *n_tasks, cfg.seed, 2),
    };
    let mut series = Vec::with_capacity(cfg.n_subjects);
    let mut subjects = Vec::with_capacity(cfg.n_subjects);
    for i in 0..cfg.n_subjects {
        let (ts, states) = simulate_subject(&templates, cfg, groups[i], labels[i], cfg.seed.wrapping_add(i as u64))?;
        let id = format!("sub-{i:04}");
        subjects.push(SubjectTruth {
            file: format!("{id}.csv"),
            id,
            group: groups[i],
            label: labels[i],
            states,
        });
        series.push(ts);
    }
    let truth = GroundTruth {
        config: cfg.clone(),
        responsive: responsive_nodes(cfg, &templates.blocks),
        icn_labels: block_icn_labels(cfg.n_nodes, cfg.n_blocks),
        blocks: templates.blocks,
        subjects,
    };
    Ok((series, truth))
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes one CSV (plus sidecar) per subject and `manifest.json` into `out_dir`.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<GroundTruth, SynthError> {
    let (series, truth) = generate(cfg)?;
    fs::create_dir_all(out_dir)?;
    for (ts, subject) in series.iter().zip(&truth.subjects) {
        io::write_timeseries(ts, &out_dir.join(&subject.file))?;
    }
    write_manifest(&truth, &out_dir.join(MANIFEST_FILE))?;
    info!("wrote {} subjects to {}", truth.subjects.len(), out_dir.display());
    Ok(truth)
}

pub fn write_manifest(truth: &GroundTruth, path: &Path) -> Result<(), SynthError> {
    let mut bytes = serde_json::to_vec_pretty(truth).map_err(|e| SynthError::Manifest(e.to_string()))?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<GroundTruth, SynthError> {
    serde_json::from_slice(&fs::read(path)?).map_err(|e| SynthError::Manifest(e.to_string()))
}

/// Loads every subject listed in a dataset directory's manifest.
pub fn load_dataset(dir: &Path) -> Result<(Vec<RoiTimeseries>, GroundTruth), SynthError> {
    let truth = read_manifest(&dir.join(MANIFEST_FILE))?;
    let series = truth
        .subjects
        .iter()
        .map(|s| io::read_timeseries(&dir.join(&s.file)))
        .collect::<Result<_, _>>()?;
    Ok((series, truth))
}

/// Spatial attention sequences `[T, N]` with a planted task response: responsive nodes gain
/// `effect` during task timepoints on top of a subject baseline and Gaussian noise, clipped to
/// `[0, 1]`.
pub fn planted_attention<R: Rng + ?Sized>(
    task: &[bool],
    n_nodes: usize,
    responsive: &[usize],
    effect: f64,
    noise_std: f64,
    rng: &mut R,
) -> Vec<f64> {
    let baseline: Vec<f64> = (0..n_nodes).map(|_| rng.random_range(0.3..0.6)).collect();
    let mut out = Vec::with_capacity(task.len() * n_nodes);
    for &on in task {
        for (i, &b) in baseline.iter().enumerate() {
            let lift = if on && responsive.contains(&i) { effect } else { 0.0 };
            let noise: f64 = rng.sample(StandardNormal);
            out.push((b + lift + noise_std * noise).clamp(0.0, 1.0));
        }
    }
    out
}
