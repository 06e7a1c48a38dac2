//! Interpretation of learned attention.
//!
//! Temporal side: column means of the self-attention matrix, thresholded into attended
//! timepoints whose graphs are clustered into connectivity states and compared across groups.
//! Spatial side: per-subject least-squares fits of node attention on a task/rest design, a
//! one-sided group t-test on the task-minus-rest contrast and Bonferroni correction.

pub mod svg;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("row {row} of the attention matrix sums to {sum}, not 1")]
    NotStochastic { row: usize, sum: f64 },
    #[error("{samples} samples cannot form {k} clusters")]
    TooFewSamples { samples: usize, k: usize },
    #[error("no attended graphs to tabulate")]
    EmptyAttendedSet,
    #[error("expected count is zero in row {row}")]
    ZeroExpected { row: usize },
    #[error("design matrix is rank deficient")]
    RankDeficientDesign,
    #[error("contrast test needs at least 2 subjects, got {0}")]
    TooFewSubjects(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

/// The seven canonical intrinsic connectivity networks.
pub const ICN_NAMES: [&str; 7] = ["VN", "SMN", "DAN", "SVN", "LN", "CCN", "DMN"];

/// Column means of a row-stochastic `T × T` matrix.
pub fn temporal_attention_vector(z: &[f64], t: usize) -> Result<Vec<f64>> {
    if z.len() != t * t {
        return Err(AnalysisError::ShapeMismatch(format!("{} values for a {t}x{t} matrix", z.len())));
    }
    for (row, r) in z.chunks(t).enumerate() {
        let sum: f64 = r.iter().sum();
        if (sum - 1.0).abs() > 1e-4 {
            return Err(AnalysisError::NotStochastic { row, sum });
        }
    }
    let mut out = vec![0.0; t];
    for r in z.chunks(t) {
        out.iter_mut().zip(r).for_each(|(o, v)| *o += v);
    }
    out.iter_mut().for_each(|o| *o /= t as f64);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attended {
    pub indices: Vec<usize>,
    /// Set when the attention vector is constant, so every timepoint passes the zero threshold.
    pub degenerate: bool,
}

/// Timepoints with `z_time[t] > alpha * sd(z_time)`; with `centered`, the threshold is
/// `mean + alpha * sd` instead.
pub fn attended_timepoints(z_time: &[f64], alpha: f64, centered: bool) -> Attended {
    let n = z_time.len() as f64;
    let mean = z_time.iter().sum::<f64>() / n;
    let sd = if z_time.len() < 2 {
        0.0
    } else {
        (z_time.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    if sd == 0.0 {
        return Attended {
            indices: (0..z_time.len()).collect(),
            degenerate: true,
        };
    }
    let cut = alpha * sd + if centered { mean } else { 0.0 };
    Attended {
        indices: (0..z_time.len()).filter(|&t| z_time[t] > cut).collect(),
        degenerate: false,
    }
}

/// Union of per-layer attended sets, sorted.
pub fn attended_union(sets: &[Attended]) -> Vec<usize> {
    let mut all: Vec<usize> = sets.iter().flat_map(|s| s.indices.iter().copied()).collect();
    all.sort_unstable();
    all.dedup();
    all
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Inertia after every assignment step.
    pub inertia: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    centroids
        .iter()
        .enumerate()
        .map(|(c, m)| (c, sq_dist(x, m)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

fn plus_plus<R: Rng + ?Sized>(samples: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centroids = vec![samples[rng.random_range(0..samples.len())].clone()];
    let mut d2: Vec<f64> = samples.iter().map(|x| sq_dist(x, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = samples.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    chosen = i;
                    break;
                }
                u -= d;
            }
            chosen
        } else {
            rng.random_range(0..samples.len())
        };
        centroids.push(samples[pick].clone());
        for (d, x) in d2.iter_mut().zip(samples) {
            *d = d.min(sq_dist(x, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

/// k-means++ seeding followed by Lloyd iterations until the assignment stops changing.
/// An emptied cluster is re-seeded with the sample farthest from its centroid.
pub fn kmeans(samples: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<ClusterResult> {
    if k == 0 || samples.len() < k {
        return Err(AnalysisError::TooFewSamples {
            samples: samples.len(),
            k,
        });
    }
    let dim = samples[0].len();
    if samples.iter().any(|s| s.len() != dim) {
        return Err(AnalysisError::ShapeMismatch("samples differ in length".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus(samples, k, &mut rng);
    let mut assignments = vec![usize::MAX; samples.len()];
    let mut inertia = Vec::new();
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        let mut total = 0.0;
        for (i, x) in samples.iter().enumerate() {
            let (c, d) = nearest(x, &centroids);
            total += d;
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
        }
        inertia.push(total);
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (x, &c) in samples.iter().zip(&assignments) {
            counts[c] += 1;
            sums[c].iter_mut().zip(x).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..samples.len())
                    .max_by(|&a, &b| {
                        let da = sq_dist(&samples[a], &centroids[assignments[a]]);
                        let db = sq_dist(&samples[b], &centroids[assignments[b]]);
                        da.total_cmp(&db)
                    })
                    .expect("nonempty");
                counts[assignments[far]] -= 1;
                assignments[far] = c;
                counts[c] = 1;
                centroids[c] = samples[far].clone();
            }
        }
    }
    Ok(ClusterResult {
        k,
        centroids,
        assignments,
        inertia,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRatio {
    /// `counts[c][g]`: attended graphs of group `g` assigned to cluster `c`.
    pub counts: Vec<[usize; 2]>,
    /// Per-group proportions; each column sums to 1 when the group is present.
    pub ratios: Vec<[f64; 2]>,
    /// Clusters sorted by descending group-0 over group-1 ratio.
    pub order: Vec<usize>,
}

pub fn cluster_group_ratio(assignments: &[usize], groups: &[usize], k: usize) -> Result<GroupRatio> {
    if assignments.is_empty() {
        return Err(AnalysisError::EmptyAttendedSet);
    }
    if assignments.len() != groups.len() {
        return Err(AnalysisError::ShapeMismatch(format!(
            "{} assignments, {} group labels",
            assignments.len(),
            groups.len()
        )));
    }
    if let Some(&g) = groups.iter().find(|&&g| g > 1) {
        return Err(AnalysisError::ShapeMismatch(format!("group label {g} is not binary")));
    }
    if let Some(&c) = assignments.iter().find(|&&c| c >= k) {
        return Err(AnalysisError::ShapeMismatch(format!("cluster {c} with k = {k}")));
    }
    let mut counts = vec![[0usize; 2]; k];
    for (&c, &g) in assignments.iter().zip(groups) {
        counts[c][g] += 1;
    }
    let totals = [0, 1].map(|g| counts.iter().map(|r| r[g]).sum::<usize>());
    let ratios: Vec<[f64; 2]> = counts
        .iter()
        .map(|r| [0, 1].map(|g| if totals[g] > 0 { r[g] as f64 / totals[g] as f64 } else { 0.0 }))
        .collect();
    let score = |c: usize| ratios[c][0] / ratios[c][1];
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| score(b).total_cmp(&score(a)));
    Ok(GroupRatio { counts, ratios, order })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: usize,
    pub p: f64,
}

/// Upper tail of the chi-square distribution.
pub fn chi_square_sf(statistic: f64, dof: usize) -> f64 {
    ChiSquared::new(dof as f64).expect("dof > 0").sf(statistic)
}

/// Pearson test of independence on a `k × 2` contingency table.
pub fn chi_square_independence(table: &[[usize; 2]]) -> Result<ChiSquare> {
    let total: f64 = table.iter().flatten().map(|&c| c as f64).sum();
    let cols = [0, 1].map(|g| table.iter().map(|r| r[g] as f64).sum::<f64>());
    let mut statistic = 0.0;
    for (row, r) in table.iter().enumerate() {
        let row_sum = (r[0] + r[1]) as f64;
        for g in 0..2 {
            let expected = row_sum * cols[g] / total;
            if !(expected > 0.0) {
                return Err(AnalysisError::ZeroExpected { row });
            }
            statistic += (r[g] as f64 - expected).powi(2) / expected;
        }
    }
    let dof = table.len().saturating_sub(1);
    if dof == 0 {
        return Err(AnalysisError::ShapeMismatch("need at least two rows".to_string()));
    }
    Ok(ChiSquare {
        statistic,
        dof,
        p: chi_square_sf(statistic, dof),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlmFit {
    /// `[2, N]` row-major: task coefficients, then rest coefficients.
    pub beta: Vec<f64>,
    /// `[T, N]` row-major.
    pub residuals: Vec<f64>,
}

/// Ordinary least squares of every column of `attn` (`[T, N]`) on `design` (`[T, 2]`).
pub fn glm_fit(attn: &[f64], t: usize, n: usize, design: &[f64]) -> Result<GlmFit> {
    if attn.len() != t * n || design.len() != t * 2 {
        return Err(AnalysisError::ShapeMismatch(format!(
            "{} attention values and {} design values for T = {t}, N = {n}",
            attn.len(),
            design.len()
        )));
    }
    let m = DMatrix::from_row_slice(t, 2, design);
    let svd = m.clone().svd(false, false);
    let sv = &svd.singular_values;
    let top = sv.max();
    if t < 2 || !(top > 0.0) || sv.min() <= top * 1e-10 * t as f64 {
        return Err(AnalysisError::RankDeficientDesign);
    }
    let qr = m.clone().qr();
    let (q, r) = (qr.q(), qr.r());
    let z = DMatrix::from_row_slice(t, n, attn);
    let qtz = q.transpose() * &z;
    let beta = r.solve_upper_triangular(&qtz).ok_or(AnalysisError::RankDeficientDesign)?;
    let resid = z - &m * &beta;
    Ok(GlmFit {
        beta: (0..2).flat_map(|row| (0..n).map(move |col| (row, col))).map(|(r, c)| beta[(r, c)]).collect(),
        residuals: (0..t).flat_map(|row| (0..n).map(move |col| (row, col))).map(|(r, c)| resid[(r, c)]).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcnProportion {
    /// Ordered as [`ICN_NAMES`].
    pub proportions: [f64; 7],
    pub unknown: f64,
    /// Set when no region was significant; proportions are then all zero.
    pub empty: bool,
}

/// Share of the significant regions falling in each network.
pub fn icn_proportion(significant: &[usize], icn_labels: &[String]) -> Result<IcnProportion> {
    if let Some(&i) = significant.iter().find(|&&i| i >= icn_labels.len()) {
        return Err(AnalysisError::ShapeMismatch(format!(
            "region {i} has no network label ({} labels)",
            icn_labels.len()
        )));
    }
    let mut proportions = [0.0; 7];
    let mut unknown = 0.0;
    if significant.is_empty() {
        return Ok(IcnProportion {
            proportions,
            unknown,
            empty: true,
        });
    }
    let share = 1.0 / significant.len() as f64;
    for &i in significant {
        match ICN_NAMES.iter().position(|n| n.eq_ignore_ascii_case(&icn_labels[i])) {
            Some(k) => proportions[k] += share,
            None => unknown += share,
        }
    }
    Ok(IcnProportion {
        proportions,
        unknown,
        empty: false,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlmResult {
    pub contrast: [f64; 2],
    pub t_values: Vec<f64>,
    pub p_raw: Vec<f64>,
    pub p_fwe: Vec<f64>,
    pub significant: Vec<usize>,
    pub icn: IcnProportion,
}

pub const FWE_LEVEL: f64 = 0.05;

/// One-sided one-sample t-test across subjects of `contrast · beta` per region, with Bonferroni
/// correction over regions. `betas` holds one `[2, N]` coefficient block per subject.
pub fn contrast_test(betas: &[Vec<f64>], contrast: [f64; 2], n: usize, icn_labels: &[String]) -> Result<GlmResult> {
    contrast_test_at(betas, contrast, n, icn_labels, FWE_LEVEL)
}

/// As [`contrast_test`] with a custom family-wise significance level.
pub fn contrast_test_at(
    betas: &[Vec<f64>],
    contrast: [f64; 2],
    n: usize,
    icn_labels: &[String],
    fwe_level: f64,
) -> Result<GlmResult> {
    let s = betas.len();
    if s < 2 {
        return Err(AnalysisError::TooFewSubjects(s));
    }
    if betas.iter().any(|b| b.len() != 2 * n) || icn_labels.len() != n {
        return Err(AnalysisError::ShapeMismatch(format!(
            "expected {} coefficients and {n} network labels per subject",
            2 * n
        )));
    }
    let dist = StudentsT::new(0.0, 1.0, (s - 1) as f64).expect("dof > 0");
    let mut t_values = Vec::with_capacity(n);
    let mut p_raw = Vec::with_capacity(n);
    for i in 0..n {
        let c: Vec<f64> = betas.iter().map(|b| contrast[0] * b[i] + contrast[1] * b[n + i]).collect();
        let mean = c.iter().sum::<f64>() / s as f64;
        let sd = (c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (s - 1) as f64).sqrt();
        let t = if sd > 0.0 {
            mean / (sd / (s as f64).sqrt())
        } else if mean == 0.0 {
            0.0
        } else {
            mean.signum() * f64::INFINITY
        };
        t_values.push(t);
        p_raw.push(dist.sf(t));
    }
    let p_fwe: Vec<f64> = p_raw.iter().map(|p| (p * n as f64).min(1.0)).collect();
    let significant: Vec<usize> = (0..n).filter(|&i| p_fwe[i] < fwe_level).collect();
    let icn = icn_proportion(&significant, icn_labels)?;
    Ok(GlmResult {
        contrast,
        t_values,
        p_raw,
        p_fwe,
        significant,
        icn,
    })
}

/// Time average of `z_space` (`[K, T, N]`), giving `[K, N]`.
pub fn mean_spatial_attention(z_space: &[f64], k: usize, t: usize, n: usize) -> Result<Vec<f64>> {
    if z_space.len() != k * t * n || t == 0 {
        return Err(AnalysisError::ShapeMismatch(format!(
            "{} values for K = {k}, T = {t}, N = {n}",
            z_space.len()
        )));
    }
    let mut out = vec![0.0; k * n];
    for layer in 0..k {
        for step in z_space[layer * t * n..(layer + 1) * t * n].chunks(n) {
            out[layer * n..(layer + 1) * n].iter_mut().zip(step).for_each(|(o, v)| *o += v);
        }
    }
    out.iter_mut().for_each(|o| *o /= t as f64);
    Ok(out)
}

/// Indices of the `ceil(len * percent / 100)` largest values, largest first.
pub fn top_percentile(values: &[f64], percent: f64) -> Vec<usize> {
    let count = ((values.len() as f64 * percent / 100.0).ceil() as usize).min(values.len());
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(count);
    order
}

/// Vectorized upper triangle (diagonal excluded) of a dense `n × n` matrix.
pub fn upper_triangle(dense: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            out.push(dense[i * n + j]);
        }
    }
    out
}

/// Task/rest design `[T, 2]` from a task indicator.
pub fn task_design(task: &[bool]) -> Vec<f64> {
    task.iter().flat_map(|&on| if on { [1.0, 0.0] } else { [0.0, 1.0] }).collect()
}

/// Per-window indicator: set when more than half of the window's columns are task columns.
pub fn window_indicator(task: &[bool], windows: &[(usize, usize)]) -> Vec<bool> {
    windows
        .iter()
        .map(|&(start, end)| 2 * task[start..end].iter().filter(|&&b| b).count() > end - start)
        .collect()
}

/// Pearson correlation of a continuous series with a binary indicator.
pub fn point_biserial(values: &[f64], indicator: &[bool]) -> Option<f64> {
    if values.len() != indicator.len() || values.len() < 2 {
        return None;
    }
    let n = values.len() as f64;
    let x: Vec<f64> = indicator.iter().map(|&b| f64::from(u8::from(b))).collect();
    let mx = x.iter().sum::<f64>() / n;
    let my = values.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(values).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = values.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}
