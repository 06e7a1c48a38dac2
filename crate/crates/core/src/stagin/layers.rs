//! Building blocks of the model, expressed directly on a [`Tape`].
//!
//! Graph tensors are node-major: a batch of `G` graphs with `N` nodes and `D` features is
//! `[G, N, D]`, so a single graph's feature matrix is the transpose of the usual `D × N` layout.

use rand::Rng;

use crate::autodiff::{AutodiffError, BatchStats, Mode, RunningStats, Tape, Tensor, Var};

use super::params::Bound;

/// `x · w (+ b)`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: Var,
    pub b: Option<Var>,
}

impl Linear {
    pub fn bind(bound: &Bound, name: &str, bias: bool) -> Self {
        Self {
            w: bound.var(&format!("{name}.w")),
            b: bias.then(|| bound.var(&format!("{name}.b"))),
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var, AutodiffError> {
        let y = tape.matmul(x, self.w)?;
        match self.b {
            Some(b) => tape.add_bias(y, b),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: Var,
    pub beta: Var,
}

impl Norm {
    pub fn bind(bound: &Bound, name: &str) -> Self {
        Self {
            gamma: bound.var(&format!("{name}.gamma")),
            beta: bound.var(&format!("{name}.beta")),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GruWeights {
    pub w_input: Var,
    pub w_hidden: Var,
    pub b_input: Var,
    pub b_hidden: Var,
}

impl GruWeights {
    pub fn bind(bound: &Bound) -> Self {
        Self {
            w_input: bound.var("gru.w_input"),
            w_hidden: bound.var("gru.w_hidden"),
            b_input: bound.var("gru.b_input"),
            b_hidden: bound.var("gru.b_hidden"),
        }
    }
}

/// Runs a GRU over the columns of each series and returns the hidden state after column
/// `window_ends[t] - 1` for every `t`, as `[B, T, D]`.
///
/// `columns[c]` is the `[B, N]` input at column `c`. Gate blocks are ordered reset, update,
/// candidate, matching the usual `r, z, n` convention.
pub fn encode_timestamps(
    tape: &mut Tape,
    columns: &[Tensor],
    window_ends: &[usize],
    gru: &GruWeights,
) -> Result<Var, AutodiffError> {
    let d = tape.shape(gru.w_hidden)[0];
    let b = columns[0].shape()[0];
    let last = window_ends.iter().copied().max().unwrap_or(0);
    let mut h = tape.constant(Tensor::zeros(&[b, d]));
    let mut states = Vec::with_capacity(last);
    for col in &columns[..last] {
        let x = tape.constant(col.clone());
        let gi = tape.matmul(x, gru.w_input)?;
        let gi = tape.add_bias(gi, gru.b_input)?;
        let gh = tape.matmul(h, gru.w_hidden)?;
        let gh = tape.add_bias(gh, gru.b_hidden)?;
        let gi_rz = tape.slice_last(gi, 0, 2 * d)?;
        let gh_rz = tape.slice_last(gh, 0, 2 * d)?;
        let rz = tape.add(gi_rz, gh_rz)?;
        let rz = tape.sigmoid(rz);
        let r = tape.slice_last(rz, 0, d)?;
        let z = tape.slice_last(rz, d, d)?;
        let gi_n = tape.slice_last(gi, 2 * d, d)?;
        let gh_n = tape.slice_last(gh, 2 * d, d)?;
        let gated = tape.hadamard(r, gh_n)?;
        let n = tape.add(gi_n, gated)?;
        let n = tape.tanh(n);
        // h' = (1 - z) n + z h = n + z (h - n)
        let diff = tape.sub(h, n)?;
        let kept = tape.hadamard(z, diff)?;
        h = tape.add(n, kept)?;
        states.push(h);
    }
    let picked: Vec<Var> = window_ends.iter().map(|&e| states[e - 1]).collect();
    tape.stack(&picked, 1)
}

/// Node features `[B*T, N, D]`: the one-hot block of the feature map plus, when a timestamp
/// encoding `[B, T, D]` is given, its projection broadcast to every node.
pub fn node_features(
    tape: &mut Tape,
    eta: Option<Var>,
    w_onehot: Var,
    w_time: Var,
    batch: usize,
    steps: usize,
) -> Result<Var, AutodiffError> {
    let (n, d) = (tape.shape(w_onehot)[0], tape.shape(w_onehot)[1]);
    let base = match eta {
        Some(eta) => {
            let u = tape.matmul(eta, w_time)?;
            let u = tape.reshape(u, &[batch * steps, d])?;
            tape.repeat(u, 1, n)?
        }
        None => tape.constant(Tensor::zeros(&[batch * steps, n, d])),
    };
    tape.add_bias(base, w_onehot)
}

/// `((1 + eps) I + A) H` for a batch of graphs.
pub fn gin_aggregate(tape: &mut Tape, h: Var, adjacency: Var, eps: Var) -> Result<Var, AutodiffError> {
    let neighbours = tape.bmm(adjacency, h)?;
    let self_weight = tape.add_scalar(eps, 1.0);
    let own = tape.scale_by(h, self_weight)?;
    tape.add(neighbours, own)
}

#[derive(Clone, Copy, Debug)]
pub struct GinWeights {
    pub eps: Var,
    pub lin1: Linear,
    pub bn1: Norm,
    pub lin2: Linear,
    pub bn2: Norm,
}

impl GinWeights {
    pub fn bind(bound: &Bound, layer: usize) -> Self {
        let p = format!("gin.{layer}");
        Self {
            eps: bound.var(&format!("{p}.eps")),
            lin1: Linear::bind(bound, &format!("{p}.lin1"), true),
            bn1: Norm::bind(bound, &format!("{p}.bn1")),
            lin2: Linear::bind(bound, &format!("{p}.lin2"), true),
            bn2: Norm::bind(bound, &format!("{p}.bn2")),
        }
    }
}

/// GIN layer: sum aggregation with a weighted self term, then
/// `Linear -> BatchNorm -> GELU -> Linear -> BatchNorm -> GELU` applied to every node.
pub fn gin_layer(
    tape: &mut Tape,
    h: Var,
    adjacency: Var,
    w: &GinWeights,
    mode: Mode,
    running: [&RunningStats; 2],
) -> Result<(Var, [Option<BatchStats>; 2]), AutodiffError> {
    let shape = tape.shape(h).to_vec();
    let x = gin_aggregate(tape, h, adjacency, w.eps)?;
    let x = tape.reshape(x, &[shape[0] * shape[1], shape[2]])?;
    let x = w.lin1.apply(tape, x)?;
    let (x, s1) = tape.batchnorm(x, w.bn1.gamma, w.bn1.beta, mode, running[0])?;
    let x = tape.gelu(x);
    let x = w.lin2.apply(tape, x)?;
    let (x, s2) = tape.batchnorm(x, w.bn2.gamma, w.bn2.beta, mode, running[1])?;
    let x = tape.gelu(x);
    let d = tape.shape(x)[1];
    Ok((tape.reshape(x, &[shape[0], shape[1], d])?, [s1, s2]))
}

/// Mean over nodes: `[G, N, D] -> [G, D]`.
pub fn readout_mean(tape: &mut Tape, h: Var) -> Result<Var, AutodiffError> {
    tape.reduce_mean(h, 1)
}

/// Sum over nodes: `[G, N, D] -> [G, D]`. Not used by the model.
pub fn readout_sum(tape: &mut Tape, h: Var) -> Result<Var, AutodiffError> {
    tape.reduce_sum(h, 1)
}

/// Attention-weighted sum of node features, `[G, N] x [G, N, D] -> [G, D]`.
pub fn attend_nodes(tape: &mut Tape, z: Var, h: Var) -> Result<Var, AutodiffError> {
    let s = tape.shape(h).to_vec();
    let z = tape.reshape(z, &[s[0], 1, s[1]])?;
    let out = tape.bmm(z, h)?;
    tape.reshape(out, &[s[0], s[2]])
}

/// Node attention from key-query similarity with the mean-pooled graph vector as the query.
/// Returns the `[G, N]` attention logits passed through a sigmoid.
pub fn garo_attention(tape: &mut Tape, h: Var, key: Var, query: Var) -> Result<Var, AutodiffError> {
    let s = tape.shape(h).to_vec();
    let (g, n, d) = (s[0], s[1], s[2]);
    let keys = tape.matmul(h, key)?;
    let pooled = readout_mean(tape, h)?;
    let q = tape.matmul(pooled, query)?;
    let q = tape.reshape(q, &[g, d, 1])?;
    let logits = tape.bmm(keys, q)?;
    let logits = tape.reshape(logits, &[g, n])?;
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
    Ok(tape.sigmoid(logits))
}

/// Node attention from an excitation MLP over the mean-pooled graph vector: `[G, N]`.
#[allow(clippy::too_many_arguments)]
pub fn sero_attention(
    tape: &mut Tape,
    h: Var,
    embed: Var,
    norm: &Norm,
    attend: Var,
    mode: Mode,
    running: &RunningStats,
) -> Result<(Var, Option<BatchStats>), AutodiffError> {
    let pooled = readout_mean(tape, h)?;
    let e = tape.matmul(pooled, embed)?;
    let (e, stats) = tape.batchnorm(e, norm.gamma, norm.beta, mode, running)?;
    let e = tape.gelu(e);
    let logits = tape.matmul(e, attend)?;
    Ok((tape.sigmoid(logits), stats))
}

/// Per-graph orthogonality penalty `|| G / max(G) - I ||_F` with `G` the node Gram matrix.
///
/// Returns `[G]` losses, or `None` when some Gram matrix has no positive entry.
pub fn ortho_loss(tape: &mut Tape, h: Var) -> Result<Option<Var>, AutodiffError> {
    let s = tape.shape(h).to_vec();
    let (g, n) = (s[0], s[1]);
    let ht = tape.transpose(h)?;
    let gram = tape.bmm(h, ht)?;
    let m = tape.max_reduce(gram);
    if tape.value(m).data().iter().any(|&x| x <= 1e-12) {
        return Ok(None);
    }
    let scaled = tape.div_leading(gram, m)?;
    let mut eye = vec![0.0; g * n * n];
    for b in 0..g {
        for i in 0..n {
            eye[b * n * n + i * n + i] = 1.0;
        }
    }
    let eye = tape.constant(Tensor::new(&[g, n, n], eye)?);
    let diff = tape.sub(scaled, eye)?;
    Ok(Some(tape.frobenius_norm(diff)))
}

#[derive(Clone, Copy, Debug)]
pub struct TemporalWeights {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln1: Norm,
    pub ln2: Norm,
}

impl TemporalWeights {
    pub fn bind(bound: &Bound, layer: usize) -> Self {
        let p = format!("temporal.{layer}");
        let lin = |s: &str| Linear::bind(bound, &format!("{p}.{s}"), true);
        Self {
            q: lin("q"),
            k: lin("k"),
            v: lin("v"),
            o: lin("o"),
            ff1: lin("ff1"),
            ff2: lin("ff2"),
            ln1: Norm::bind(bound, &format!("{p}.ln1")),
            ln2: Norm::bind(bound, &format!("{p}.ln2")),
        }
    }
}

/// Single-head post-norm Transformer encoder block over `[B, T, D]`.
///
/// Returns the block output and the `[B, T, T]` attention matrix (before dropout).
pub fn transformer_encoder<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Var,
    w: &TemporalWeights,
    attn_dropout: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Var, Var), AutodiffError> {
    let d = tape.shape(x)[2];
    let q = w.q.apply(tape, x)?;
    let k = w.k.apply(tape, x)?;
    let v = w.v.apply(tape, x)?;
    let kt = tape.transpose(k)?;
    let logits = tape.bmm(q, kt)?;
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let attn = tape.softmax_last(logits);
    let dropped = tape.dropout(attn, attn_dropout, mode, rng);
    let mixed = tape.bmm(dropped, v)?;
    let o = w.o.apply(tape, mixed)?;
    let res = tape.add(x, o)?;
    let x1 = tape.layernorm(res, w.ln1.gamma, w.ln1.beta)?;
    let f = w.ff1.apply(tape, x1)?;
    let f = tape.gelu(f);
    let f = w.ff2.apply(tape, f)?;
    let res = tape.add(x1, f)?;
    let out = tape.layernorm(res, w.ln2.gamma, w.ln2.beta)?;
    Ok((out, attn))
}
