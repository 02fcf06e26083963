//! Classifier split at a latent site into pre-latent and post-latent stages.

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{config_err, Error, Result};
use crate::nn::layers::{Layer, LayerKind, LayerSpec};
use crate::tensor::Tensor;

/// One `conv -> batch norm -> relu -> max pool` block.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub filters: usize,
    pub kernel: usize,
    pub padding: usize,
    /// Max-pool window (and stride); 1 disables pooling.
    pub pool: usize,
}

/// Sequential CNN: conv blocks followed by a dense head.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchSpec {
    /// Per-example input shape [C, H, W].
    pub input_shape: Vec<usize>,
    pub blocks: Vec<ConvBlock>,
    pub num_classes: usize,
    /// Conv block whose batch-norm output is the latent site.
    pub latent_block: usize,
}

impl ArchSpec {
    /// Three conv blocks and a dense head over 1x40x64 patches.
    pub fn default_cnn(num_classes: usize) -> Self {
        ArchSpec {
            input_shape: vec![1, 40, 64],
            blocks: vec![
                ConvBlock { filters: 4, kernel: 3, padding: 1, pool: 2 },
                ConvBlock { filters: 8, kernel: 3, padding: 1, pool: 2 },
                ConvBlock { filters: 8, kernel: 3, padding: 1, pool: 2 },
            ],
            num_classes,
            latent_block: 2,
        }
    }

    /// Flat layer list plus the number of layers before the latent site.
    pub fn layers(&self) -> Result<(Vec<LayerSpec>, usize)> {
        if self.latent_block >= self.blocks.len() {
            return Err(config_err(format!(
                "latent block {} out of range for {} conv blocks",
                self.latent_block,
                self.blocks.len()
            )));
        }
        let mut specs = Vec::new();
        let mut split = 0;
        for (i, b) in self.blocks.iter().enumerate() {
            specs.push(LayerSpec::Conv2d { filters: b.filters, kernel: b.kernel, stride: 1, padding: b.padding });
            specs.push(LayerSpec::batch_norm());
            if i == self.latent_block {
                split = specs.len();
            }
            specs.push(LayerSpec::Relu);
            if b.pool > 1 {
                specs.push(LayerSpec::MaxPool { size: b.pool, stride: b.pool });
            }
        }
        specs.push(LayerSpec::Flatten);
        specs.push(LayerSpec::Dense { units: self.num_classes });
        Ok((specs, split))
    }
}

/// Forward mode: training uses batch statistics (and, at the latent site,
/// sampled noise); evaluation uses running statistics and `z = mu`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Parameter handles and batch statistics gathered during one forward pass.
#[derive(Default)]
pub struct Trace {
    /// (flat parameter index, tape handle)
    params: Vec<(usize, Var)>,
    /// (flat layer index, batch mean, batch biased variance, count)
    stats: Vec<(usize, Vec<f64>, Vec<f64>, usize)>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Handles aligned with [`SplitModel::params`]; `None` for parameters
    /// that were not recorded.
    pub fn param_vars(&self, count: usize) -> Vec<Option<Var>> {
        let mut out = vec![None; count];
        for &(i, v) in &self.params {
            out[i] = Some(v);
        }
        out
    }
}

/// A classifier `x -> pre_latent -> mu (latent site) -> post_latent -> logits`.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitModel {
    input_shape: Vec<usize>,
    pre_latent: Vec<Layer>,
    post_latent: Vec<Layer>,
    latent_shape: Vec<usize>,
    num_classes: usize,
    latent_layer_index: usize,
    frozen: bool,
}

impl SplitModel {
    pub fn new(arch: &ArchSpec, seed: u64) -> Result<Self> {
        let (specs, split) = arch.layers()?;
        Self::from_specs(&arch.input_shape, &specs, split, arch.latent_block, seed)
    }

    /// Builds a model from a flat layer list; the latent site sits after
    /// the first `split` layers, which must end in a batch-norm layer.
    pub fn from_specs(
        input_shape: &[usize],
        specs: &[LayerSpec],
        split: usize,
        latent_layer_index: usize,
        seed: u64,
    ) -> Result<Self> {
        if split == 0 || split >= specs.len() {
            return Err(config_err(format!("latent split {split} must fall strictly inside {} layers", specs.len())));
        }
        if specs[split - 1].kind() != LayerKind::BatchNorm {
            return Err(config_err("the latent site must follow a batch-norm layer"));
        }
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        let mut latent_shape = Vec::new();
        for (i, spec) in specs.iter().enumerate() {
            let (layer, out) = Layer::build(spec, &shape, seed, i)?;
            layers.push(layer);
            shape = out;
            if i + 1 == split {
                latent_shape = shape.clone();
            }
        }
        if shape.len() != 1 {
            return Err(config_err(format!("model output must be flat logits, got per-example shape {shape:?}")));
        }
        let post_latent = layers.split_off(split);
        Ok(SplitModel {
            input_shape: input_shape.to_vec(),
            pre_latent: layers,
            post_latent,
            latent_shape,
            num_classes: shape[0],
            latent_layer_index,
            frozen: false,
        })
    }

    pub(crate) fn from_parts(
        input_shape: Vec<usize>,
        pre_latent: Vec<Layer>,
        post_latent: Vec<Layer>,
        latent_layer_index: usize,
    ) -> Result<Self> {
        let specs: Vec<LayerSpec> = pre_latent.iter().chain(&post_latent).map(Layer::spec).collect();
        let split = pre_latent.len();
        // Validate shapes by rebuilding the geometry.
        let template = Self::from_specs(&input_shape, &specs, split, latent_layer_index, 0)?;
        for (a, b) in template.pre_latent.iter().chain(&template.post_latent).zip(pre_latent.iter().chain(&post_latent)) {
            for (pa, pb) in a.params().iter().zip(b.params()) {
                if pa.shape() != pb.shape() {
                    return Err(Error::Format(format!("parameter shape {:?} != expected {:?}", pb.shape(), pa.shape())));
                }
            }
        }
        Ok(SplitModel { pre_latent, post_latent, ..template })
    }

    fn specs(&self) -> Vec<LayerSpec> {
        self.layers().map(Layer::spec).collect()
    }

    /// Same architecture and latent site with freshly initialized weights.
    pub fn reinitialized(&self, seed: u64) -> Result<Self> {
        Self::from_specs(&self.input_shape, &self.specs(), self.pre_latent.len(), self.latent_layer_index, seed)
    }

    /// The same weights with the latent site moved to the output of the
    /// `block`-th batch-norm layer (counting from 0).
    pub fn resplit(&self, block: usize) -> Result<Self> {
        let specs = self.specs();
        let split = specs
            .iter()
            .enumerate()
            .filter(|(_, s)| s.kind() == LayerKind::BatchNorm)
            .nth(block)
            .map(|(i, _)| i + 1)
            .ok_or_else(|| config_err(format!("no batch-norm layer for latent block {block}")))?;
        let template = Self::from_specs(&self.input_shape, &specs, split, block, 0)?;
        let mut layers: Vec<Layer> = self.layers().cloned().collect();
        let post = layers.split_off(split);
        Ok(SplitModel { pre_latent: layers, post_latent: post, frozen: self.frozen, ..template })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Per-example shape of the latent mean.
    pub fn latent_shape(&self) -> &[usize] {
        &self.latent_shape
    }

    /// Latent dimensionality M.
    pub fn latent_dim(&self) -> usize {
        self.latent_shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn latent_layer_index(&self) -> usize {
        self.latent_layer_index
    }

    pub fn pre_latent(&self) -> &[Layer] {
        &self.pre_latent
    }

    pub fn post_latent(&self) -> &[Layer] {
        &self.post_latent
    }

    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.pre_latent.iter().chain(&self.post_latent)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks the model as a frozen (eval-only) source model.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// An unfrozen copy with identical parameters and statistics.
    pub fn thawed(&self) -> Self {
        SplitModel { frozen: false, ..self.clone() }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.pre_latent.iter_mut().chain(self.post_latent.iter_mut()).flat_map(Layer::params_mut).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    fn check_mode(&self, mode: Mode) -> Result<()> {
        if self.frozen && mode == Mode::Train {
            return Err(Error::Usage("frozen model cannot run in train mode".into()));
        }
        Ok(())
    }

    fn run_stage(
        &self,
        tape: &mut Tape,
        x: Var,
        mode: Mode,
        trace: &mut Trace,
        post: bool,
    ) -> Result<Var> {
        self.check_mode(mode)?;
        let (layers, mut layer_idx) = if post {
            (&self.post_latent, self.pre_latent.len())
        } else {
            (&self.pre_latent, 0)
        };
        let mut param_idx: usize = if post { self.pre_latent.iter().map(|l| l.params().len()).sum() } else { 0 };
        let mut h = x;
        for layer in layers {
            let out = layer.forward(tape, h, mode == Mode::Train)?;
            for v in out.params {
                trace.params.push((param_idx, v));
                param_idx += 1;
            }
            if let Some((m, v, n)) = out.batch_stats {
                trace.stats.push((layer_idx, m, v, n));
            }
            h = out.out;
            layer_idx += 1;
        }
        Ok(h)
    }

    /// Pre-latent stage: `x [B, C, H, W] -> mu [B, latent_shape...]`.
    pub fn encode(&self, tape: &mut Tape, x: Var, mode: Mode, trace: &mut Trace) -> Result<Var> {
        let xs = tape.value(x).shape();
        if xs.len() != self.input_shape.len() + 1 || xs[1..] != self.input_shape[..] {
            return Err(Error::Dimension(format!(
                "model expects input [B, {:?}], got {:?}",
                self.input_shape, xs
            )));
        }
        self.run_stage(tape, x, mode, trace, false)
    }

    /// Post-latent stage: `z -> logits [B, K]`.
    pub fn decode(&self, tape: &mut Tape, z: Var, mode: Mode, trace: &mut Trace) -> Result<Var> {
        let zs = tape.value(z).shape();
        if zs.get(1..) != Some(&self.latent_shape[..]) {
            return Err(Error::Dimension(format!(
                "post-latent stage expects [B, {:?}], got {:?}",
                self.latent_shape, zs
            )));
        }
        self.run_stage(tape, z, mode, trace, true)
    }

    /// Folds the batch statistics recorded in `trace` into running statistics.
    pub fn commit_stats(&mut self, trace: &Trace) -> Result<()> {
        if self.frozen {
            return Err(Error::Usage("cannot update statistics of a frozen model".into()));
        }
        let pre = self.pre_latent.len();
        for (idx, m, v, n) in &trace.stats {
            let layer = if *idx < pre { &mut self.pre_latent[*idx] } else { &mut self.post_latent[*idx - pre] };
            layer.update_running_stats(m, v, *n);
        }
        Ok(())
    }

    /// Adds the gradients of every recorded parameter into its grad buffer.
    pub fn accumulate_grads(&mut self, trace: &Trace, grads: &Gradients) -> Result<()> {
        if self.frozen {
            return Err(Error::Usage("frozen model parameters cannot receive gradients".into()));
        }
        let count = self.params().len();
        let vars = trace.param_vars(count);
        for (p, v) in self.params_mut().into_iter().zip(vars) {
            if let Some(g) = v.and_then(|v| grads.get(v)) {
                p.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Evaluation-mode forward without gradient tracking; returns `(mu, logits)`.
    pub fn infer(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let mut trace = Trace::new();
        let xv = tape.constant(x.clone());
        let mu = self.run_eval(&mut tape, xv, &mut trace, false)?;
        let logits = self.run_eval(&mut tape, mu, &mut trace, true)?;
        Ok((tape.value(mu).clone(), tape.value(logits).clone()))
    }

    fn run_eval(&self, tape: &mut Tape, x: Var, trace: &mut Trace, post: bool) -> Result<Var> {
        // Frozen models may always evaluate.
        if post {
            self.run_stage(tape, x, Mode::Eval, trace, true)
        } else {
            self.encode(tape, x, Mode::Eval, trace)
        }
    }

    /// Evaluation-mode logits for a large sample set, in chunks of `chunk`.
    pub fn infer_batched(&self, x: &Tensor, chunk: usize) -> Result<(Tensor, Tensor)> {
        let n = x.batch();
        let mut mus = Vec::new();
        let mut logits = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let (m, l) = self.infer(&x.select_rows(&idx))?;
            mus.extend_from_slice(m.data());
            logits.extend_from_slice(l.data());
            start = end;
        }
        let mut ms = vec![n];
        ms.extend_from_slice(&self.latent_shape);
        Ok((Tensor::new(ms, mus)?, Tensor::new(vec![n, self.num_classes], logits)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch() -> ArchSpec {
        ArchSpec {
            input_shape: vec![1, 4, 4],
            blocks: vec![
                ConvBlock { filters: 2, kernel: 3, padding: 1, pool: 2 },
                ConvBlock { filters: 3, kernel: 3, padding: 1, pool: 1 },
            ],
            num_classes: 3,
            latent_block: 1,
        }
    }

    #[test]
    fn split_dimensions_agree() {
        let m = SplitModel::new(&tiny_arch(), 1).unwrap();
        assert_eq!(m.latent_shape(), &[3, 2, 2]);
        assert_eq!(m.latent_dim(), 12);
        assert_eq!(m.num_classes(), 3);
        assert_eq!(m.pre_latent().last().unwrap().kind(), LayerKind::BatchNorm);
        assert_eq!(m.post_latent().first().unwrap().kind(), LayerKind::Relu);

        let mut shallow = tiny_arch();
        shallow.latent_block = 0;
        let m0 = SplitModel::new(&shallow, 1).unwrap();
        assert_eq!(m0.latent_shape(), &[2, 4, 4]);
        // Same seed, same parameters regardless of split position.
        assert_eq!(m.params(), m0.params());
        assert_eq!(m.resplit(0).unwrap(), m0);
        assert_eq!(m0.resplit(1).unwrap(), m);
        assert!(m.resplit(2).is_err());
        assert_eq!(m.reinitialized(1).unwrap(), m);
        assert_ne!(m.reinitialized(2).unwrap().params(), m.params());
    }

    #[test]
    fn invalid_latent_block_is_config_error() {
        let mut arch = tiny_arch();
        arch.latent_block = 2;
        assert!(matches!(SplitModel::new(&arch, 0), Err(Error::Config(_))));
    }

    #[test]
    fn frozen_model_rejects_training() {
        let mut m = SplitModel::new(&tiny_arch(), 1).unwrap();
        m.freeze();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 1, 4, 4]));
        assert!(matches!(m.encode(&mut tape, x, Mode::Train, &mut Trace::new()), Err(Error::Usage(_))));
        assert!(m.infer(&Tensor::zeros(&[2, 1, 4, 4])).is_ok());
    }

    #[test]
    fn batched_inference_matches_single_pass() {
        let m = SplitModel::new(&tiny_arch(), 5).unwrap();
        let data: Vec<f64> = (0..5 * 16).map(|i| ((i * 7) % 11) as f64 / 11.0).collect();
        let x = Tensor::new(vec![5, 1, 4, 4], data).unwrap();
        let (mu, logits) = m.infer(&x).unwrap();
        let (mu2, logits2) = m.infer_batched(&x, 2).unwrap();
        assert_eq!(mu, mu2);
        assert_eq!(logits, logits2);
    }
}
