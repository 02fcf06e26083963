//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every op of one forward pass as a node holding its
//! output value. [`Tape::backward`] walks the nodes in reverse creation order
//! (a valid reverse topological order, since inputs always precede outputs)
//! and accumulates vector-Jacobian products into a [`Gradients`] table.

pub mod kernels;

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;
use kernels::{BnCache, ConvGeom, PoolGeom};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product for ops defined outside this module: maps the
/// upstream gradient to one gradient per input, in input order.
pub type VjpFn = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

enum Op {
    Leaf,
    Dense { x: Var, w: Var, b: Var },
    Conv2d { x: Var, k: Var, b: Var, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, layout: (usize, usize, usize), cache: BnCache, beta: Var },
    Relu { x: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var, geom: PoolGeom },
    /// Same data, new shape; also used for additive shifts with unit Jacobian.
    PassThrough { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Sum { x: Var },
    WeightedSum { terms: Vec<(Var, f64)> },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<f64>, probs: Vec<f64>, classes: usize },
    Custom { inputs: Vec<Var>, vjp: VjpFn },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Dense { x, w, b } => vec![*x, *w, *b],
            Op::Conv2d { x, k, b, .. } => vec![*x, *k, *b],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Relu { x } | Op::MaxPool { x, .. } | Op::AvgPool { x, .. } | Op::PassThrough { x } => vec![*x],
            Op::Scale { x, .. } | Op::Sum { x } => vec![*x],
            Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::WeightedSum { terms } => terms.iter().map(|t| t.0).collect(),
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch-norm statistics mode for one forward call.
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a> {
    /// Normalize by the statistics of the current batch.
    Batch,
    /// Normalize by fixed (running) mean and variance.
    Fixed { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(
            matches!(op, Op::Leaf) || value.all_finite() || op.inputs().iter().any(|v| !self.nodes[v.0].value.all_finite()),
            "non-finite output from finite inputs"
        );
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf; `requires_grad` decides whether gradients reach it.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let mut value = value;
        value.set_requires_grad(false);
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records a copy of a parameter tensor as a gradient-tracking leaf.
    pub fn param(&mut self, p: &Tensor) -> Var {
        let value = Tensor::new(p.shape().to_vec(), p.data().to_vec()).expect("consistent tensor");
        self.push(value, Op::Leaf, p.requires_grad())
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if xs.len() != 2 || ws.len() != 2 {
            return Err(dim_err(format!("dense expects 2-D input and weights, got input {xs:?}, weights {ws:?}")));
        }
        let (batch, inp, outp) = (xs[0], xs[1], ws[1]);
        if ws[0] != inp {
            return Err(dim_err(format!(
                "dense input axis 1 has {inp} features but weights axis 0 has {}",
                ws[0]
            )));
        }
        if bs != [outp] {
            return Err(dim_err(format!("dense bias shape {bs:?} does not match weights axis 1 ({outp})")));
        }
        let out = kernels::dense_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            batch,
            inp,
            outp,
        );
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(Tensor::new(vec![batch, outp], out)?, Op::Dense { x, w, b }, rg))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ks) = (self.value(x).shape().to_vec(), self.value(k).shape().to_vec());
        if xs.len() != 4 || ks.len() != 4 {
            return Err(dim_err(format!("conv2d expects 4-D input and kernels, got {xs:?} and {ks:?}")));
        }
        if ks[1] != xs[1] {
            return Err(dim_err(format!("conv2d kernel channels {} != input channels {}", ks[1], xs[1])));
        }
        if self.value(b).shape() != [ks[0]] {
            return Err(dim_err(format!("conv2d bias shape {:?} != [{}]", self.value(b).shape(), ks[0])));
        }
        let oh = ConvGeom::out_extent(xs[2], ks[2], stride, padding).ok_or_else(|| {
            Error::Config(format!(
                "conv2d height: kernel {} stride {stride} padding {padding} does not tile input height {}",
                ks[2], xs[2]
            ))
        })?;
        let ow = ConvGeom::out_extent(xs[3], ks[3], stride, padding).ok_or_else(|| {
            Error::Config(format!(
                "conv2d width: kernel {} stride {stride} padding {padding} does not tile input width {}",
                ks[3], xs[3]
            ))
        })?;
        let geom = ConvGeom {
            batch: xs[0],
            in_channels: xs[1],
            in_h: xs[2],
            in_w: xs[3],
            filters: ks[0],
            kernel_h: ks[2],
            kernel_w: ks[3],
            stride,
            padding,
            out_h: oh,
            out_w: ow,
        };
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(k).data(), self.value(b).data(), &geom);
        let rg = self.any_grad(&[x, k, b]);
        Ok(self.push(Tensor::new(vec![xs[0], ks[0], oh, ow], out)?, Op::Conv2d { x, k, b, geom }, rg))
    }

    /// Per-channel batch normalization. Returns the output and, in batch mode,
    /// the batch mean and biased variance for running-stat updates.
    #[allow(clippy::type_complexity)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        stats: NormStats<'_>,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() < 2 {
            return Err(dim_err(format!("batch norm expects [B, C, ...], got {xs:?}")));
        }
        let layout = (xs[0], xs[1], xs[2..].iter().product::<usize>());
        if self.value(gamma).shape() != [xs[1]] || self.value(beta).shape() != [xs[1]] {
            return Err(dim_err(format!("batch norm affine parameters must have shape [{}]", xs[1])));
        }
        let fixed = match stats {
            NormStats::Batch => {
                if xs[0] < 2 {
                    return Err(Error::BatchSize(format!(
                        "batch norm in train mode needs at least 2 examples, got {}",
                        xs[0]
                    )));
                }
                None
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != xs[1] || var.len() != xs[1] {
                    return Err(dim_err("running statistics length does not match channels"));
                }
                Some((mean, var))
            }
        };
        let (out, cache, batch_stats) = kernels::batch_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            layout,
            eps,
            fixed,
        );
        let rg = self.any_grad(&[x, gamma, beta]);
        let v = self.push(Tensor::new(xs, out)?, Op::BatchNorm { x, gamma, beta, layout, cache }, rg);
        Ok((v, batch_stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = t.shape().to_vec();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::new(shape, out).expect("same shape"), Op::Relu { x }, rg)
    }

    fn pool_geom(&self, x: Var, size: usize, stride: usize) -> Result<PoolGeom> {
        let xs = self.value(x).shape();
        if xs.len() != 4 {
            return Err(dim_err(format!("pooling expects [B, C, H, W], got {xs:?}")));
        }
        let extent = |n: usize| ConvGeom::out_extent(n, size, stride, 0);
        let (Some(oh), Some(ow)) = (extent(xs[2]), extent(xs[3])) else {
            return Err(Error::Config(format!(
                "pool window {size} stride {stride} does not tile input {}x{}",
                xs[2], xs[3]
            )));
        };
        Ok(PoolGeom { planes: xs[0] * xs[1], in_h: xs[2], in_w: xs[3], size, stride, out_h: oh, out_w: ow })
    }

    pub fn max_pool(&mut self, x: Var, size: usize, stride: usize) -> Result<Var> {
        let g = self.pool_geom(x, size, stride)?;
        let xs = self.value(x).shape().to_vec();
        let (out, argmax) = kernels::max_pool_forward(self.value(x).data(), &g);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![xs[0], xs[1], g.out_h, g.out_w], out)?, Op::MaxPool { x, argmax }, rg))
    }

    pub fn avg_pool(&mut self, x: Var, size: usize, stride: usize) -> Result<Var> {
        let g = self.pool_geom(x, size, stride)?;
        let xs = self.value(x).shape().to_vec();
        let out = kernels::avg_pool_forward(self.value(x).data(), &g);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![xs[0], xs[1], g.out_h, g.out_w], out)?, Op::AvgPool { x, geom: g }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::PassThrough { x }, rg))
    }

    /// Collapses all non-batch axes: [B, ...] -> [B, prod(...)].
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let shape = vec![t.batch(), t.row_len()];
        self.reshape(x, shape)
    }

    /// `x + shift` where `shift` is a constant; the Jacobian w.r.t. `x` is the identity.
    pub fn shift(&mut self, x: Var, shift: &[f64]) -> Result<Var> {
        let t = self.value(x);
        if shift.len() != t.numel() {
            return Err(dim_err(format!("shift of length {} for tensor {:?}", shift.len(), t.shape())));
        }
        let data: Vec<f64> = t.data().iter().zip(shift).map(|(a, b)| a + b).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::PassThrough { x }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(format!("elementwise op on shapes {:?} and {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale { x, factor }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            let t = self.value(v);
            if t.numel() != 1 {
                return Err(dim_err(format!("weighted sum term has shape {:?}, expected a scalar", t.shape())));
            }
            total += w * t.data()[0];
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.any_grad(&vars);
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum { terms: terms.to_vec() }, rg))
    }

    /// Mean cross-entropy between row-wise softmax of `logits` [B, K] and
    /// one-hot or soft `labels` [B, K] whose rows each sum to 1.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &Tensor) -> Result<Var> {
        let lt = self.value(logits);
        if lt.rank() != 2 || lt.shape() != labels.shape() {
            return Err(dim_err(format!(
                "cross entropy logits {:?} vs labels {:?}",
                lt.shape(),
                labels.shape()
            )));
        }
        let (batch, classes) = (lt.shape()[0], lt.shape()[1]);
        for (b, row) in labels.data().chunks(classes).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 || row.iter().any(|v| *v < 0.0) {
                return Err(Error::Validation(format!("label row {b} sums to {s}, expected a distribution")));
            }
        }
        let logp = kernels::log_softmax_rows(lt.data(), classes);
        let loss = -logp.iter().zip(labels.data()).map(|(l, y)| if *y == 0.0 { 0.0 } else { y * l }).sum::<f64>()
            / batch as f64;
        let probs = logp.iter().map(|l| l.exp()).collect();
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy { logits, labels: labels.data().to_vec(), probs, classes },
            rg,
        ))
    }

    /// Records an op whose value was computed by the caller, with its
    /// vector-Jacobian product supplied as a closure.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, vjp: VjpFn) -> Var {
        let rg = self.any_grad(inputs);
        self.push(value, Op::Custom { inputs: inputs.to_vec(), vjp }, rg)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Usage(format!("backward called on non-scalar node of shape {:?}", lt.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, op: &Op, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                slot @ None => *slot = Some(delta),
            }
        };
        match op {
            Op::Leaf => {}
            Op::Dense { x, w, b } => {
                let (xs, ws) = (self.value(*x).shape(), self.value(*w).shape());
                let (dx, dw, db) = kernels::dense_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    xs[0],
                    xs[1],
                    ws[1],
                );
                acc(*x, dx);
                acc(*w, dw);
                acc(*b, db);
            }
            Op::Conv2d { x, k, b, geom } => {
                let need_x = self.nodes[x.0].requires_grad;
                let (dx, dk, db) =
                    kernels::conv2d_backward(self.value(*x).data(), self.value(*k).data(), g, geom, need_x);
                if need_x {
                    acc(*x, dx);
                }
                acc(*k, dk);
                acc(*b, db);
            }
            Op::BatchNorm { x, gamma, beta, layout, cache } => {
                let (dx, dg, db) = kernels::batch_norm_backward(g, self.value(*gamma).data(), cache, *layout);
                acc(*x, dx);
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::Relu { x } => {
                let d = self.value(*x).data().iter().zip(g).map(|(v, gv)| if *v > 0.0 { *gv } else { 0.0 }).collect();
                acc(*x, d);
            }
            Op::MaxPool { x, argmax } => {
                let mut d = vec![0.0; self.value(*x).numel()];
                for (gv, &idx) in g.iter().zip(argmax) {
                    d[idx] += gv;
                }
                acc(*x, d);
            }
            Op::AvgPool { x, geom } => acc(*x, kernels::avg_pool_backward(g, geom)),
            Op::PassThrough { x } => acc(*x, g.to_vec()),
            Op::Add { a, b } => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, g.iter().zip(tb).map(|(gv, y)| gv * y).collect());
                acc(*b, g.iter().zip(ta).map(|(gv, y)| gv * y).collect());
            }
            Op::Scale { x, factor } => acc(*x, g.iter().map(|v| v * factor).collect()),
            Op::Sum { x } => acc(*x, vec![g[0]; self.value(*x).numel()]),
            Op::WeightedSum { terms } => {
                for &(v, w) in terms {
                    acc(v, vec![g[0] * w]);
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs, classes } => {
                let batch = probs.len() / classes;
                let scale = g[0] / batch as f64;
                let mut d = Vec::with_capacity(probs.len());
                for (prow, yrow) in probs.chunks(*classes).zip(labels.chunks(*classes)) {
                    let ysum: f64 = yrow.iter().sum();
                    d.extend(prow.iter().zip(yrow).map(|(p, y)| scale * (p * ysum - y)));
                }
                acc(*logits, d);
            }
            Op::Custom { inputs, vjp } => {
                for (v, d) in inputs.iter().zip(vjp(g)) {
                    acc(*v, d);
                }
            }
        }
    }
}

/// Gradient table produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` if `v` does not influence
    /// the loss or does not require gradients.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`] but returns zeros of length `len` when absent.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}
