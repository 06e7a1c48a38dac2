use rand::Rng;

use super::tensor::{gemm, Tensor};
use super::AutodiffError;

const NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Train/eval switch for stochastic and statistics-dependent primitives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel batch statistics observed by a training-mode batchnorm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<f64>,
}

/// Exponential running estimates used by batchnorm in eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn update(&mut self, stats: &BatchStats) {
        let m = Self::MOMENTUM;
        for (r, b) in self.mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.var.iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddBias(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleByVar(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Stack { inputs: Vec<Var>, axis: usize },
    Repeat { input: Var, axis: usize },
    SliceLast { input: Var, start: usize },
    ReduceSum { input: Var, axis: usize, mean: bool },
    SumAll { input: Var, mean: bool },
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    SoftmaxLast(Var),
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        kind: NormKind,
    },
    Dropout { input: Var, mask: Vec<f64> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    FrobeniusInner(Var),
    MaxInner { input: Var, argmax: Vec<usize> },
    DivInner(Var, Var),
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum NormKind {
    /// Statistics over rows, per channel, from the current batch.
    BatchTrain,
    /// Frozen running statistics; an affine map of the input.
    BatchEval,
    /// Statistics over the last axis, per row.
    Layer,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of primitive applications, differentiated in reverse order.
///
/// Nodes are appended in evaluation order, so the node list is already a topological order of the
/// computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros when `var` does not influence the loss.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn get_ref(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Splits `shape` around `axis` into (outer, axis size, inner) element counts.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf (a parameter or an input under test).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// `a[.., k] · b[k, n]`, treating all leading axes of `a` as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() != 2 || sa.last() != Some(&sb[0]) {
            return Err(mismatch("matmul", sa, sb));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.value(a).len() / k;
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched `[B, m, k] · [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(mismatch("bmm", sa, sb));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &va[i * m * k..(i + 1) * m * k],
                false,
                &vb[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        Ok(self.push(Tensor::new(&[batch, m, n], out)?, Op::BatchMatMul(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("hadamard", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Hadamard(a, b), &[a, b]))
    }

    /// Adds `bias` to every trailing block of `a`; `bias.shape` must equal the trailing axes of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(mismatch("add_bias", sa, sb));
        }
        let block = self.value(bias).len();
        let bv = self.value(bias).data().to_vec();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(block) {
            for (o, b) in chunk.iter_mut().zip(&bv) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddBias(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    /// `a * s` for a single-element `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var, AutodiffError> {
        if self.value(s).len() != 1 {
            return Err(mismatch("scale_by", self.shape(a), self.shape(s)));
        }
        let c = self.value(s).item();
        let out = self.value(a).map(|x| x * c);
        Ok(self.push(out, Op::ScaleByVar(a, s), &[a, s]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(mismatch("transpose", &shape, &[]));
        }
        let out = transpose_last2(self.value(a));
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let out = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Concatenates along the last axis; all leading axes must agree.
    pub fn concat_last(&mut self, inputs: &[Var]) -> Result<Var, AutodiffError> {
        let first = self.shape(inputs[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let mut width = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(mismatch("concat_last", &first, s));
            }
            width += s[s.len() - 1];
        }
        let rows = self.value(inputs[0]).rows();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &v in inputs {
                let t = self.value(v);
                let w = t.last_dim();
                out.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = first.clone();
        *shape.last_mut().unwrap() = width;
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat(inputs.to_vec()), inputs))
    }

    /// Stacks equally shaped tensors along a new axis inserted at `axis`.
    pub fn stack(&mut self, inputs: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let base = self.shape(inputs[0]).to_vec();
        if axis > base.len() {
            return Err(mismatch("stack", &base, &[axis]));
        }
        for &v in inputs {
            if self.shape(v) != base.as_slice() {
                return Err(mismatch("stack", &base, self.shape(v)));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis..].iter().product();
        let n = inputs.len();
        let mut out = vec![0.0; outer * n * inner];
        for (i, &v) in inputs.iter().enumerate() {
            let d = self.value(v).data();
            for p in 0..outer {
                out[(p * n + i) * inner..(p * n + i + 1) * inner]
                    .copy_from_slice(&d[p * inner..(p + 1) * inner]);
            }
        }
        let mut shape = base;
        shape.insert(axis, n);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Stack { inputs: inputs.to_vec(), axis }, inputs))
    }

    /// Inserts a new axis at `axis` holding `times` copies of the input.
    pub fn repeat(&mut self, a: Var, axis: usize, times: usize) -> Result<Var, AutodiffError> {
        let base = self.shape(a).to_vec();
        if axis > base.len() || times == 0 {
            return Err(mismatch("repeat", &base, &[axis, times]));
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis..].iter().product();
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(outer * times * inner);
        for p in 0..outer {
            for _ in 0..times {
                out.extend_from_slice(&d[p * inner..(p + 1) * inner]);
            }
        }
        let mut shape = base;
        shape.insert(axis, times);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Repeat { input: a, axis }, &[a]))
    }

    /// Columns `[start, start + len)` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        let w = t.last_dim();
        if len == 0 || start + len > w {
            return Err(mismatch("slice_last", t.shape(), &[start, len]));
        }
        let mut out = Vec::with_capacity(t.rows() * len);
        for row in t.data().chunks(w) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        Ok(self.push(Tensor::new(&shape, out)?, Op::SliceLast { input: a, start }, &[a]))
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var, AutodiffError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(mismatch("reduce", &shape, &[axis]));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let d = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for p in 0..outer {
            for i in 0..n {
                let src = &d[(p * n + i) * inner..(p * n + i + 1) * inner];
                for (o, s) in out[p * inner..(p + 1) * inner].iter_mut().zip(src) {
                    *o += s;
                }
            }
        }
        if mean {
            let inv = 1.0 / n as f64;
            out.iter_mut().for_each(|x| *x *= inv);
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        Ok(self.push(
            Tensor::new(&new_shape, out)?,
            Op::ReduceSum { input: a, axis, mean },
            &[a],
        ))
    }

    /// Sum over one axis (the axis is removed).
    pub fn reduce_sum(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        self.reduce_axis(a, axis, false)
    }

    /// Mean over one axis (the axis is removed).
    pub fn reduce_mean(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        self.reduce_axis(a, axis, true)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::SumAll { input: a, mean: false }, &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::SumAll { input: a, mean: true }, &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a), &[a])
    }

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let w = t.last_dim();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(w) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            row.iter_mut().for_each(|x| *x /= z);
        }
        let out = Tensor::new(t.shape(), out).expect("same shape");
        self.push(out, Op::SoftmaxLast(a), &[a])
    }

    fn check_channels(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<usize, AutodiffError> {
        let c = self.value(x).last_dim();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch(op, self.shape(x), self.shape(gamma)));
        }
        Ok(c)
    }

    /// Batch normalization over all leading axes, per channel of the last axis.
    ///
    /// In `Mode::Train` the batch statistics are used and returned so the caller can fold them
    /// into `running`; in `Mode::Eval` the running statistics are used and nothing is returned.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: Mode,
        running: &RunningStats,
    ) -> Result<(Var, Option<BatchStats>), AutodiffError> {
        let c = self.check_channels("batchnorm", x, gamma, beta)?;
        let xt = self.value(x);
        let rows = xt.rows();
        let (mean, var_biased, stats) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                for row in xt.data().chunks(c) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; c];
                for row in xt.data().chunks(c) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                let unbiased = var
                    .iter()
                    .map(|s| if rows > 1 { s / (rows - 1) as f64 } else { 0.0 })
                    .collect();
                var.iter_mut().for_each(|s| *s /= rows as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            Mode::Eval => (running.mean.clone(), running.var.clone(), None),
        };
        let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = xt.data().to_vec();
        let mut out = vec![0.0; xhat.len()];
        for (row, orow) in xhat.chunks_mut(c).zip(out.chunks_mut(c)) {
            for j in 0..c {
                row[j] = (row[j] - mean[j]) * inv_std[j];
                orow[j] = g[j] * row[j] + b[j];
            }
        }
        let out = Tensor::new(xt.shape(), out)?;
        let kind = match mode {
            Mode::Train => NormKind::BatchTrain,
            Mode::Eval => NormKind::BatchEval,
        };
        let v = self.push(
            out,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                kind,
            },
            &[x, gamma, beta],
        );
        Ok((v, stats))
    }

    /// Layer normalization over the last axis.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, AutodiffError> {
        let c = self.check_channels("layernorm", x, gamma, beta)?;
        let xt = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = xt.data().to_vec();
        let mut out = vec![0.0; xhat.len()];
        let mut inv_std = Vec::with_capacity(xt.rows());
        for (row, orow) in xhat.chunks_mut(c).zip(out.chunks_mut(c)) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std.push(is);
            for j in 0..c {
                row[j] = (row[j] - mean) * is;
                orow[j] = g[j] * row[j] + b[j];
            }
        }
        let out = Tensor::new(xt.shape(), out)?;
        Ok(self.push(
            out,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                kind: NormKind::Layer,
            },
            &[x, gamma, beta],
        ))
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - p)` so eval mode is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, mode: Mode, rng: &mut R) -> Var {
        if mode == Mode::Eval || p <= 0.0 {
            return a;
        }
        let keep = 1.0 - p;
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out = Tensor::new(
            self.shape(a),
            self.value(a).data().iter().zip(&mask).map(|(x, m)| x * m).collect(),
        )
        .expect("same shape");
        self.push(out, Op::Dropout { input: a, mask }, &[a])
    }

    /// Mean softmax cross-entropy of `[B, C]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, AutodiffError> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&l| l >= s[1]) {
            return Err(mismatch("cross_entropy", &s, &[labels.len()]));
        }
        let c = s[1];
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_mut(c).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        loss /= labels.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Frobenius norm of every slice along the leading axis: `[B, ...] -> [B]`.
    pub fn frobenius_norm(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let b = t.shape()[0];
        let inner = t.len() / b;
        let out: Vec<f64> = t
            .data()
            .chunks(inner)
            .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        self.push(Tensor::new(&[b], out).expect("b > 0"), Op::FrobeniusInner(a), &[a])
    }

    /// Maximum entry of every slice along the leading axis: `[B, ...] -> [B]`.
    pub fn max_reduce(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let b = t.shape()[0];
        let inner = t.len() / b;
        let mut out = Vec::with_capacity(b);
        let mut argmax = Vec::with_capacity(b);
        for chunk in t.data().chunks(inner) {
            let (idx, &m) = chunk
                .iter()
                .enumerate()
                .fold((0, &f64::NEG_INFINITY), |acc, (i, x)| if *x > *acc.1 { (i, x) } else { acc });
            out.push(m);
            argmax.push(idx);
        }
        self.push(
            Tensor::new(&[b], out).expect("b > 0"),
            Op::MaxInner { input: a, argmax },
            &[a],
        )
    }

    /// Divides every slice `a[i, ...]` by `s[i]`.
    pub fn div_leading(&mut self, a: Var, s: Var) -> Result<Var, AutodiffError> {
        let (ta, ts) = (self.value(a), self.value(s));
        if ts.shape() != [ta.shape()[0]] {
            return Err(mismatch("div_leading", ta.shape(), ts.shape()));
        }
        let inner = ta.len() / ts.len();
        let mut out = ta.data().to_vec();
        for (chunk, d) in out.chunks_mut(inner).zip(ts.data()) {
            chunk.iter_mut().for_each(|x| *x /= d);
        }
        let out = Tensor::new(ta.shape(), out)?;
        Ok(self.push(out, Op::DivInner(a, s), &[a, s]))
    }

    /// Reverse-mode sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::NotScalar(self.shape(loss).to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.shape(loss), 1.0));
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn with_shape(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor::new(self.shape(v), data).expect("gradient shape matches value")
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (k, n) = (self.shape(b)[0], self.shape(b)[1]);
                let m = self.value(a).len() / k;
                if self.needs(a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, self.value(b).data(), true, &mut ga, false);
                    self.accumulate(grads, a, self.with_shape(a, ga));
                }
                if self.needs(b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, self.value(a).data(), true, g.data(), false, &mut gb, false);
                    self.accumulate(grads, b, self.with_shape(b, gb));
                }
            }
            &Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (va, vb, gd) = (self.value(a).data(), self.value(b).data(), g.data());
                if self.needs(a) {
                    let mut ga = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &gd[i * m * n..(i + 1) * m * n],
                            false,
                            &vb[i * k * n..(i + 1) * k * n],
                            true,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    self.accumulate(grads, a, self.with_shape(a, ga));
                }
                if self.needs(b) {
                    let mut gb = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        gemm(
                            k,
                            m,
                            n,
                            &va[i * m * k..(i + 1) * m * k],
                            true,
                            &gd[i * m * n..(i + 1) * m * n],
                            false,
                            &mut gb[i * k * n..(i + 1) * k * n],
                            false,
                        );
                    }
                    self.accumulate(grads, b, self.with_shape(b, gb));
                }
            }
            &Op::Add(a, b) => {
                if self.needs(a) {
                    self.accumulate(grads, a, g.clone());
                }
                if self.needs(b) {
                    self.accumulate(grads, b, g.clone());
                }
            }
            &Op::Sub(a, b) => {
                if self.needs(a) {
                    self.accumulate(grads, a, g.clone());
                }
                if self.needs(b) {
                    self.accumulate(grads, b, g.map(|x| -x));
                }
            }
            &Op::AddBias(a, bias) => {
                if self.needs(a) {
                    self.accumulate(grads, a, g.clone());
                }
                if self.needs(bias) {
                    let block = self.value(bias).len();
                    let mut gb = vec![0.0; block];
                    for chunk in g.data().chunks(block) {
                        for (s, x) in gb.iter_mut().zip(chunk) {
                            *s += x;
                        }
                    }
                    self.accumulate(grads, bias, self.with_shape(bias, gb));
                }
            }
            &Op::Hadamard(a, b) => {
                if self.needs(a) {
                    self.accumulate(grads, a, g.zip_map(self.value(b), |x, y| x * y));
                }
                if self.needs(b) {
                    self.accumulate(grads, b, g.zip_map(self.value(a), |x, y| x * y));
                }
            }
            &Op::Scale(a, c) => self.accumulate(grads, a, g.map(|x| x * c)),
            &Op::AddScalar(a) => self.accumulate(grads, a, g.clone()),
            &Op::ScaleByVar(a, s) => {
                let c = self.value(s).item();
                if self.needs(a) {
                    self.accumulate(grads, a, g.map(|x| x * c));
                }
                if self.needs(s) {
                    let d: f64 = g.data().iter().zip(self.value(a).data()).map(|(x, y)| x * y).sum();
                    self.accumulate(grads, s, self.with_shape(s, vec![d]));
                }
            }
            &Op::Transpose(a) => {
                let gt = transpose_last2(g);
                self.accumulate(grads, a, gt);
            }
            &Op::Reshape(a) => {
                let gr = g.clone().reshaped(self.shape(a)).expect("same length");
                self.accumulate(grads, a, gr);
            }
            Op::Concat(inputs) => {
                let width = g.last_dim();
                let rows = g.rows();
                let mut offset = 0;
                for &v in inputs {
                    let w = self.value(v).last_dim();
                    if self.needs(v) {
                        let mut gv = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gv.extend_from_slice(&g.data()[r * width + offset..r * width + offset + w]);
                        }
                        self.accumulate(grads, v, self.with_shape(v, gv));
                    }
                    offset += w;
                }
            }
            Op::Stack { inputs, axis } => {
                let base = self.shape(inputs[0]);
                let outer: usize = base[..*axis].iter().product();
                let inner: usize = base[*axis..].iter().product();
                let n = inputs.len();
                for (i, &v) in inputs.iter().enumerate() {
                    if !self.needs(v) {
                        continue;
                    }
                    let mut gv = Vec::with_capacity(outer * inner);
                    for p in 0..outer {
                        gv.extend_from_slice(&g.data()[(p * n + i) * inner..(p * n + i + 1) * inner]);
                    }
                    self.accumulate(grads, v, self.with_shape(v, gv));
                }
            }
            &Op::Repeat { input, axis } => {
                let (outer, times, inner) = split_axis(out.shape(), axis);
                let mut gv = vec![0.0; outer * inner];
                for p in 0..outer {
                    for i in 0..times {
                        let src = &g.data()[(p * times + i) * inner..(p * times + i + 1) * inner];
                        for (s, x) in gv[p * inner..(p + 1) * inner].iter_mut().zip(src) {
                            *s += x;
                        }
                    }
                }
                self.accumulate(grads, input, self.with_shape(input, gv));
            }
            &Op::SliceLast { input, start } => {
                let w = self.value(input).last_dim();
                let len = g.last_dim();
                let mut gv = vec![0.0; self.value(input).len()];
                for (dst, src) in gv.chunks_mut(w).zip(g.data().chunks(len)) {
                    dst[start..start + len].copy_from_slice(src);
                }
                self.accumulate(grads, input, self.with_shape(input, gv));
            }
            &Op::ReduceSum { input, axis, mean } => {
                let (outer, n, inner) = split_axis(self.shape(input), axis);
                let scale = if mean { 1.0 / n as f64 } else { 1.0 };
                let mut gv = Vec::with_capacity(outer * n * inner);
                for p in 0..outer {
                    let src = &g.data()[p * inner..(p + 1) * inner];
                    for _ in 0..n {
                        gv.extend(src.iter().map(|x| x * scale));
                    }
                }
                self.accumulate(grads, input, self.with_shape(input, gv));
            }
            &Op::SumAll { input, mean } => {
                let len = self.value(input).len();
                let v = g.item() * if mean { 1.0 / len as f64 } else { 1.0 };
                self.accumulate(grads, input, Tensor::filled(self.shape(input), v));
            }
            &Op::Gelu(a) => {
                let ga = g.zip_map(self.value(a), |gy, x| gy * gelu_grad(x));
                self.accumulate(grads, a, ga);
            }
            &Op::Sigmoid(a) => {
                let ga = g.zip_map(out, |gy, y| gy * y * (1.0 - y));
                self.accumulate(grads, a, ga);
            }
            &Op::Tanh(a) => {
                let ga = g.zip_map(out, |gy, y| gy * (1.0 - y * y));
                self.accumulate(grads, a, ga);
            }
            &Op::SoftmaxLast(a) => {
                let w = out.last_dim();
                let mut ga = vec![0.0; out.len()];
                for ((dst, y), gy) in ga.chunks_mut(w).zip(out.data().chunks(w)).zip(g.data().chunks(w)) {
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..w {
                        dst[j] = y[j] * (gy[j] - dot);
                    }
                }
                self.accumulate(grads, a, self.with_shape(a, ga));
            }
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                kind,
            } => self.backprop_norm(*x, *gamma, *beta, xhat, inv_std, *kind, g, grads),
            Op::Dropout { input, mask } => {
                let ga = g.data().iter().zip(mask).map(|(x, m)| x * m).collect();
                self.accumulate(grads, *input, self.with_shape(*input, ga));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.shape(*logits)[1];
                let scale = g.item() / labels.len() as f64;
                let mut gl = probs.clone();
                for (row, &label) in gl.chunks_mut(c).zip(labels) {
                    row[label] -= 1.0;
                    row.iter_mut().for_each(|x| *x *= scale);
                }
                self.accumulate(grads, *logits, self.with_shape(*logits, gl));
            }
            &Op::FrobeniusInner(a) => {
                let t = self.value(a);
                let inner = t.len() / out.len();
                let mut ga = vec![0.0; t.len()];
                for (i, (dst, src)) in ga.chunks_mut(inner).zip(t.data().chunks(inner)).enumerate() {
                    let norm = out.data()[i];
                    // The norm is not differentiable at zero; use the zero subgradient there.
                    if norm > 0.0 {
                        let s = g.data()[i] / norm;
                        for (d, x) in dst.iter_mut().zip(src) {
                            *d = s * x;
                        }
                    }
                }
                self.accumulate(grads, a, self.with_shape(a, ga));
            }
            Op::MaxInner { input, argmax } => {
                let len = self.value(*input).len();
                let inner = len / argmax.len();
                let mut ga = vec![0.0; len];
                for (i, &j) in argmax.iter().enumerate() {
                    ga[i * inner + j] = g.data()[i];
                }
                self.accumulate(grads, *input, self.with_shape(*input, ga));
            }
            &Op::DivInner(a, s) => {
                let sv = self.value(s).data();
                let inner = out.len() / sv.len();
                if self.needs(a) {
                    let mut ga = g.data().to_vec();
                    for (chunk, d) in ga.chunks_mut(inner).zip(sv) {
                        chunk.iter_mut().for_each(|x| *x /= d);
                    }
                    self.accumulate(grads, a, self.with_shape(a, ga));
                }
                if self.needs(s) {
                    // d(a/s)/ds = -(a/s)/s = -out/s
                    let gs = g
                        .data()
                        .chunks(inner)
                        .zip(out.data().chunks(inner))
                        .zip(sv)
                        .map(|((gc, oc), d)| -gc.iter().zip(oc).map(|(x, y)| x * y).sum::<f64>() / d)
                        .collect();
                    self.accumulate(grads, s, self.with_shape(s, gs));
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: &[f64],
        inv_std: &[f64],
        kind: NormKind,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let c = self.value(gamma).len();
        let gam = self.value(gamma).data();
        if self.needs(gamma) || self.needs(beta) {
            let mut gg = vec![0.0; c];
            let mut gb = vec![0.0; c];
            for (gy, xh) in g.data().chunks(c).zip(xhat.chunks(c)) {
                for j in 0..c {
                    gg[j] += gy[j] * xh[j];
                    gb[j] += gy[j];
                }
            }
            if self.needs(gamma) {
                self.accumulate(grads, gamma, self.with_shape(gamma, gg));
            }
            if self.needs(beta) {
                self.accumulate(grads, beta, self.with_shape(beta, gb));
            }
        }
        if !self.needs(x) {
            return;
        }
        let rows = xhat.len() / c;
        let mut gx = vec![0.0; xhat.len()];
        match kind {
            NormKind::BatchEval => {
                for (dst, gy) in gx.chunks_mut(c).zip(g.data().chunks(c)) {
                    for j in 0..c {
                        dst[j] = gy[j] * gam[j] * inv_std[j];
                    }
                }
            }
            NormKind::BatchTrain => {
                let mut sum_d = vec![0.0; c];
                let mut sum_dx = vec![0.0; c];
                for (gy, xh) in g.data().chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        let d = gy[j] * gam[j];
                        sum_d[j] += d;
                        sum_dx[j] += d * xh[j];
                    }
                }
                let r = rows as f64;
                for ((dst, gy), xh) in gx.chunks_mut(c).zip(g.data().chunks(c)).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        let d = gy[j] * gam[j];
                        dst[j] = inv_std[j] / r * (r * d - sum_d[j] - xh[j] * sum_dx[j]);
                    }
                }
            }
            NormKind::Layer => {
                let n = c as f64;
                for (i, ((dst, gy), xh)) in gx
                    .chunks_mut(c)
                    .zip(g.data().chunks(c))
                    .zip(xhat.chunks(c))
                    .enumerate()
                {
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..c {
                        let d = gy[j] * gam[j];
                        sum_d += d;
                        sum_dx += d * xh[j];
                    }
                    for j in 0..c {
                        let d = gy[j] * gam[j];
                        dst[j] = inv_std[i] / n * (n * d - sum_d - xh[j] * sum_dx);
                    }
                }
            }
        }
        self.accumulate(grads, x, self.with_shape(x, gx));
    }
}

fn transpose_last2(t: &Tensor) -> Tensor {
    let shape = t.shape();
    let nd = shape.len();
    let (m, n) = (shape[nd - 2], shape[nd - 1]);
    let batch = t.len() / (m * n);
    let src = t.data();
    let mut out = vec![0.0; t.len()];
    for b in 0..batch {
        let off = b * m * n;
        for i in 0..m {
            for j in 0..n {
                out[off + j * m + i] = src[off + i * n + j];
            }
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape.swap(nd - 2, nd - 1);
    Tensor::new(&new_shape, out).expect("same length")
}
