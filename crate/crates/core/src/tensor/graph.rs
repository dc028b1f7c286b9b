//! Tape-based reverse-mode automatic differentiation.
//!
//! Every primitive evaluates eagerly and appends a node to the tape. Because a
//! node can only reference earlier nodes, the tape order is a topological
//! order and `backward` is a single reverse sweep.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::kernels::{self, ConvGeom, PoolGeom};
use super::{Float, Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        ConvSpec { stride, padding, groups }
    }
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec { stride: 1, padding: 0, groups: 1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
    pub ceil_mode: bool,
}

/// Batch-norm normalisation source.
#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a, T> {
    /// Normalise by batch statistics; the op reports them for running-stat updates.
    Train,
    /// Normalise by stored running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-channel statistics of a training-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n-1) variance, the form tracked by running statistics.
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Option<Var>, geo: ConvGeom },
    BatchNorm { input: Var, gamma: Var, beta: Var, x_hat: Vec<T>, inv_std: Vec<T>, train: bool },
    Relu { input: Var },
    MaxPool { input: Var, argmax: Vec<usize> },
    Reshape { input: Var },
    Permute { input: Var, axes: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Softmax { input: Var, axis: usize },
    SmoothL1 { pred: Var, target: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    GatherRows { input: Var, rows: Vec<usize> },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { input: Var, factor: T },
    Sum { input: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// An autodiff tape. Values are immutable once recorded.
pub struct Graph<T: Float = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    branch_trace: Option<DefaultHasher>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), branch_trace: None }
    }

    /// A graph that hashes every discrete decision taken in the forward pass
    /// (relu masks, pooling winners, and anything passed to [`Graph::note_branch`]).
    /// Two evaluations with equal traces took the same piecewise-smooth branch.
    pub fn with_branch_trace() -> Self {
        Graph { branch_trace: Some(DefaultHasher::new()), ..Self::new() }
    }

    pub fn note_branch<H: Hash>(&mut self, decision: &H) {
        if let Some(h) = self.branch_trace.as_mut() {
            decision.hash(h);
        }
    }

    pub fn branch_trace(&self) -> Option<u64> {
        self.branch_trace.as_ref().map(|h| h.finish())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf without a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient accumulated by the last [`Graph::backward`] call. Only leaves
    /// keep their gradients; `None` if `v` was not reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    ) -> Result<Var> {
        const OP: &str = "conv2d";
        let [n, c, h, w] = self.value(input).dims4(OP)?;
        let [f, cg, kh, kw] = self.value(kernel).dims4(OP)?;
        let ConvSpec { stride, padding, groups } = spec;
        if groups == 0 || stride == 0 {
            return Err(TensorError::Config {
                op: OP,
                detail: format!("stride {stride} and groups {groups} must be positive"),
            });
        }
        if c % groups != 0 || f % groups != 0 {
            return Err(TensorError::Config {
                op: OP,
                detail: format!(
                    "input channels {c} and filters {f} must both be divisible by groups {groups}"
                ),
            });
        }
        if cg != c / groups {
            return Err(shape_err(
                OP,
                format!("kernel expects {cg} channels per group, input has {} ({c}/{groups})", c / groups),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [f] {
                return Err(shape_err(OP, format!("bias shape {:?}, expected [{f}]", self.shape(b))));
            }
        }
        let extent = |size: usize, k: usize, dim: &str| -> Result<usize> {
            let span = size + 2 * padding;
            if span < k {
                return Err(TensorError::Config {
                    op: OP,
                    detail: format!(
                        "{dim}: kernel {k} does not fit in {size} + 2*{padding} padded extent"
                    ),
                });
            }
            Ok((span - k) / stride + 1)
        };
        let ho = extent(h, kh, "height")?;
        let wo = extent(w, kw, "width")?;
        let geo = ConvGeom { n, c, h, w, f, kh, kw, ho, wo, stride, pad: padding, groups };
        let y = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            &geo,
        );
        let rg = self.rg(input) || self.rg(kernel) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(&[n, f, ho, wo], y)?, Op::Conv2d { input, kernel, bias, geo }, rg))
    }

    /// Per-channel batch normalisation of an `[N, C, H, W]` tensor.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, T>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        const OP: &str = "batch_norm";
        let [n, c, h, w] = self.value(input).dims4(OP)?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(
                OP,
                format!(
                    "gamma {:?} / beta {:?} must be [{c}]",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let l = h * w;
        let x = self.value(input).data();
        let (mean, var, stats) = match mode {
            BatchNormMode::Train => {
                if n * l < 2 {
                    return Err(TensorError::SingleElementBatch(n * l));
                }
                let (mean, var) = kernels::channel_moments(x, n, c, l);
                let m = T::from_usize(n * l).unwrap();
                let unbiased = var.iter().map(|&v| v * m / (m - T::one())).collect();
                let stats = BatchStats { mean: mean.clone(), var: unbiased };
                (mean, var, Some(stats))
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err(OP, format!("running stats must have {c} channels")));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut x_hat = vec![T::zero(); x.len()];
        let mut y = vec![T::zero(); x.len()];
        for i in 0..n {
            for ch in 0..c {
                let r = (i * c + ch) * l..(i * c + ch + 1) * l;
                for j in r {
                    let xh = (x[j] - mean[ch]) * inv_std[ch];
                    x_hat[j] = xh;
                    y[j] = g[ch] * xh + b[ch];
                }
            }
        }
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        let train = stats.is_some();
        let op = Op::BatchNorm { input, gamma, beta, x_hat, inv_std, train };
        Ok((self.push(Tensor::new(&[n, c, h, w], y)?, op, rg), stats))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let y: Vec<T> = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let shape = x.shape().to_vec();
        if self.branch_trace.is_some() {
            let mask: Vec<bool> = y.iter().map(|&v| v > T::zero()).collect();
            self.note_branch(&mask);
        }
        let rg = self.rg(input);
        self.push(Tensor { shape, data: y }, Op::Relu { input }, rg)
    }

    pub fn max_pool2d(&mut self, input: Var, spec: PoolSpec) -> Result<Var> {
        const OP: &str = "max_pool2d";
        let [n, c, h, w] = self.value(input).dims4(OP)?;
        let PoolSpec { kernel, stride, ceil_mode } = spec;
        if kernel == 0 || stride == 0 || h < kernel || w < kernel {
            return Err(TensorError::Config {
                op: OP,
                detail: format!("kernel {kernel} / stride {stride} invalid for {h}x{w} input"),
            });
        }
        let extent = |size: usize| {
            let span = size - kernel;
            let mut out = if ceil_mode { span.div_ceil(stride) + 1 } else { span / stride + 1 };
            // The last window must start inside the input.
            if ceil_mode && (out - 1) * stride >= size {
                out -= 1;
            }
            out
        };
        let geo = PoolGeom { nc: n * c, h, w, kernel, stride, ho: extent(h), wo: extent(w) };
        let (y, argmax) = kernels::max_pool_forward(self.value(input).data(), &geo);
        self.note_branch(&argmax);
        let rg = self.rg(input);
        Ok(self.push(Tensor::new(&[n, c, geo.ho, geo.wo], y)?, Op::MaxPool { input, argmax }, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::Reshape { input }, rg))
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, input: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err("permute", format!("axes {axes:?} invalid for shape {shape:?}")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let y = kernels::permute(self.value(input).data(), &shape, axes);
        let rg = self.rg(input);
        Ok(self.push(Tensor::new(&out_shape, y)?, Op::Permute { input, axes: axes.to_vec() }, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        const OP: &str = "concat";
        let first = self.shape(*inputs.first().ok_or_else(|| shape_err(OP, "no inputs".into()))?).to_vec();
        if axis >= first.len() {
            return Err(shape_err(OP, format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(shape_err(OP, format!("{s:?} incompatible with {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::axis_split(&first, axis);
        let mut y = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let ext = self.shape(v)[axis];
                y.extend_from_slice(&self.value(v).data()[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::new(&shape, y)?, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let y = kernels::softmax_along(self.value(input).data(), outer, len, inner);
        let rg = self.rg(input);
        Ok(self.push(Tensor::new(&shape, y)?, Op::Softmax { input, axis }, rg))
    }

    /// Elementwise smooth-L1 (Huber with unit threshold) of `pred - target`.
    pub fn smooth_l1(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(shape_err(
                "smooth_l1",
                format!("{:?} vs {:?}", self.shape(pred), self.shape(target)),
            ));
        }
        let half = T::from_f64_lossy(0.5);
        let y = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(&p, &t)| {
                let d = p - t;
                if d.abs() < T::one() {
                    half * d * d
                } else {
                    d.abs() - half
                }
            })
            .collect();
        let shape = self.shape(pred).to_vec();
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Tensor::new(&shape, y)?, Op::SmoothL1 { pred, target }, rg))
    }

    /// Per-row `-log softmax(logits)[label]` of `[M, K]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        const OP: &str = "softmax_cross_entropy";
        let (m, k) = match self.shape(logits) {
            &[m, k] => (m, k),
            s => return Err(shape_err(OP, format!("expected [M, K] logits, got {s:?}"))),
        };
        if labels.len() != m {
            return Err(shape_err(OP, format!("{} labels for {m} rows", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::LabelOutOfRange { label, classes: k });
        }
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); m * k];
        let mut loss = Vec::with_capacity(m);
        for (r, &label) in labels.iter().enumerate() {
            let row = &x[r * k..(r + 1) * k];
            let lse = kernels::log_sum_exp(row);
            for (p, &v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
            loss.push(lse - row[label]);
        }
        let rg = self.rg(logits);
        let op = Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs };
        Ok(self.push(Tensor::new(&[m], loss)?, op, rg))
    }

    /// Selects rows of a rank-2 tensor; rows may repeat.
    pub fn gather_rows(&mut self, input: Var, rows: &[usize]) -> Result<Var> {
        const OP: &str = "gather_rows";
        let (m, k) = match self.shape(input) {
            &[m, k] => (m, k),
            s => return Err(shape_err(OP, format!("expected rank 2, got {s:?}"))),
        };
        if rows.is_empty() {
            return Err(shape_err(OP, "empty row selection".into()));
        }
        if let Some(r) = rows.iter().find(|&&r| r >= m) {
            return Err(shape_err(OP, format!("row {r} out of range for {m} rows")));
        }
        let x = self.value(input).data();
        let mut y = Vec::with_capacity(rows.len() * k);
        for &r in rows {
            y.extend_from_slice(&x[r * k..(r + 1) * k]);
        }
        let rg = self.rg(input);
        Ok(self.push(Tensor::new(&[rows.len(), k], y)?, Op::GatherRows { input, rows: rows.to_vec() }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let y = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.shape(a), y)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let x = self.value(input);
        let y = Tensor { shape: x.shape().to_vec(), data: x.data().iter().map(|&v| v * factor).collect() };
        let rg = self.rg(input);
        self.push(y, Op::Scale { input, factor }, rg)
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).sum();
        let rg = self.rg(input);
        self.push(Tensor::scalar(s), Op::Sum { input }, rg)
    }

    /// Reverse sweep from a scalar `loss`; gradients land in [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor { shape: self.shape(loss).to_vec(), data: vec![T::one()] });
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            for (target, g) in self.node_backward(i, &gy)? {
                assert!(target.0 < i, "autodiff tape is not topologically ordered");
                accumulate(&mut grads[target.0], g);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn node_backward(&self, i: usize, gy: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let dy = gy.data();
        let mut out = Vec::new();
        let like = |v: Var, data: Vec<T>| Tensor::new(self.shape(v), data);
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, geo } => {
                let need = (self.rg(*input), self.rg(*kernel), bias.is_some_and(|b| self.rg(b)));
                let g = kernels::conv2d_backward(
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    dy,
                    geo,
                    need,
                );
                if let Some(dx) = g.dx {
                    out.push((*input, like(*input, dx)?));
                }
                if let Some(dw) = g.dw {
                    out.push((*kernel, like(*kernel, dw)?));
                }
                if let (Some(b), Some(db)) = (bias, g.db) {
                    out.push((*b, like(*b, db)?));
                }
            }
            Op::BatchNorm { input, gamma, beta, x_hat, inv_std, train } => {
                let [n, c, h, w] = self.value(*input).dims4("batch_norm")?;
                let l = h * w;
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xh = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        for j in (s * c + ch) * l..(s * c + ch + 1) * l {
                            sum_dy[ch] += dy[j];
                            sum_dy_xh[ch] += dy[j] * x_hat[j];
                        }
                    }
                }
                if self.rg(*input) {
                    let g = self.value(*gamma).data();
                    let m = T::from_usize(n * l).unwrap();
                    let mut dx = vec![T::zero(); dy.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let k = g[ch] * inv_std[ch];
                            for j in (s * c + ch) * l..(s * c + ch + 1) * l {
                                dx[j] = if *train {
                                    k * (dy[j] - (sum_dy[ch] + x_hat[j] * sum_dy_xh[ch]) / m)
                                } else {
                                    k * dy[j]
                                };
                            }
                        }
                    }
                    out.push((*input, like(*input, dx)?));
                }
                if self.rg(*gamma) {
                    out.push((*gamma, like(*gamma, sum_dy_xh)?));
                }
                if self.rg(*beta) {
                    out.push((*beta, like(*beta, sum_dy)?));
                }
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                let dx = x.iter().zip(dy).map(|(&v, &d)| if v > T::zero() { d } else { T::zero() }).collect();
                out.push((*input, like(*input, dx)?));
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = vec![T::zero(); self.value(*input).len()];
                for (&src, &d) in argmax.iter().zip(dy) {
                    dx[src] += d;
                }
                out.push((*input, like(*input, dx)?));
            }
            Op::Reshape { input } => {
                out.push((*input, like(*input, dy.to_vec())?));
            }
            Op::Permute { input, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let dx = kernels::permute(dy, gy.shape(), &inverse);
                out.push((*input, like(*input, dx)?));
            }
            Op::Concat { inputs, axis } => {
                let shape = gy.shape();
                let (outer, total, inner) = kernels::axis_split(shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let ext = self.shape(v)[*axis];
                    if self.rg(v) {
                        let mut dx = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            dx.extend_from_slice(&dy[start..start + ext * inner]);
                        }
                        out.push((v, like(v, dx)?));
                    }
                    offset += ext;
                }
            }
            Op::Softmax { input, axis } => {
                let y = self.nodes[i].value.data();
                let (outer, len, inner) = kernels::axis_split(gy.shape(), *axis);
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + k;
                        let dot: T = (0..len).map(|j| dy[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] = y[at(j)] * (dy[at(j)] - dot);
                        }
                    }
                }
                out.push((*input, like(*input, dx)?));
            }
            Op::SmoothL1 { pred, target } => {
                let p = self.value(*pred).data();
                let t = self.value(*target).data();
                let d: Vec<T> = p
                    .iter()
                    .zip(t)
                    .zip(dy)
                    .map(|((&p, &t), &g)| {
                        let diff = p - t;
                        g * if diff.abs() < T::one() { diff } else { diff.signum() }
                    })
                    .collect();
                if self.rg(*target) {
                    out.push((*target, like(*target, d.iter().map(|&v| -v).collect())?));
                }
                if self.rg(*pred) {
                    out.push((*pred, like(*pred, d)?));
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let mut dx = probs.clone();
                for (r, &label) in labels.iter().enumerate() {
                    dx[r * k + label] -= T::one();
                    for v in &mut dx[r * k..(r + 1) * k] {
                        *v *= dy[r];
                    }
                }
                out.push((*logits, like(*logits, dx)?));
            }
            Op::GatherRows { input, rows } => {
                let k = self.shape(*input)[1];
                let mut dx = vec![T::zero(); self.value(*input).len()];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..k {
                        dx[r * k + j] += dy[i * k + j];
                    }
                }
                out.push((*input, like(*input, dx)?));
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        out.push((v, like(v, dy.to_vec())?));
                    }
                }
            }
            Op::Mul { a, b } => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if self.rg(v) {
                        let o = self.value(other).data();
                        out.push((v, like(v, dy.iter().zip(o).map(|(&g, &x)| g * x).collect())?));
                    }
                }
            }
            Op::Scale { input, factor } => {
                out.push((*input, like(*input, dy.iter().map(|&g| g * *factor).collect())?));
            }
            Op::Sum { input } => {
                out.push((*input, Tensor::full(self.shape(*input), dy[0])?));
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Float>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}
