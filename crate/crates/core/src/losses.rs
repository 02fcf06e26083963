//! Transfer objectives: the latent-variable objective, teacher-student
//! learning and three hidden-feature baselines.
//!
//! Every loss is recorded on a [`Tape`] as a fused op with a hand-derived
//! vector-Jacobian product. Teacher-side tensors are always detached.

use std::fmt;
use std::str::FromStr;

use log::warn;

use crate::autodiff::kernels::log_softmax_rows;
use crate::autodiff::{Tape, Var};
use crate::data::PairedBatch;
use crate::error::{config_err, dim_err, Error, Result};
use crate::latent::{latent_kl, sample_latent, LatentGaussian, NoiseDraw, DEFAULT_SIGMA};
use crate::nn::{Mode, SplitModel, Trace};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TransferMethod {
    /// Train on target data from scratch with hard labels.
    None,
    /// Fine-tune the source checkpoint on target data with hard labels.
    OnehotFinetune,
    Tsl,
    Fitnet,
    At,
    Sp,
    Vbkt,
}

impl TransferMethod {
    pub const ALL: [TransferMethod; 7] = [
        TransferMethod::None,
        TransferMethod::OnehotFinetune,
        TransferMethod::Tsl,
        TransferMethod::Fitnet,
        TransferMethod::At,
        TransferMethod::Sp,
        TransferMethod::Vbkt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransferMethod::None => "none",
            TransferMethod::OnehotFinetune => "onehot_finetune",
            TransferMethod::Tsl => "tsl",
            TransferMethod::Fitnet => "fitnet",
            TransferMethod::At => "at",
            TransferMethod::Sp => "sp",
            TransferMethod::Vbkt => "vbkt",
        }
    }

    /// Whether the method reads the frozen source model during training.
    pub fn needs_source(self) -> bool {
        !matches!(self, TransferMethod::None | TransferMethod::OnehotFinetune)
    }

    fn uses_aux(self) -> bool {
        matches!(self, TransferMethod::Fitnet | TransferMethod::At | TransferMethod::Sp)
    }
}

impl fmt::Display for TransferMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransferMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TransferMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| config_err(format!("unknown transfer method '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferConfig {
    pub method: TransferMethod,
    /// Latent standard deviation; sets the KL weight `1/(2 sigma^2)`.
    pub sigma: f64,
    /// Standard deviation of the reparameterized draw; `None` ties it to `sigma`.
    pub noise_sigma: Option<f64>,
    pub temperature: f64,
    /// Replace the hard-label likelihood by `tsl_weight * TSL + ce_weight * CE`.
    pub combine_with_tsl: bool,
    pub tsl_weight: f64,
    pub ce_weight: f64,
    /// Weight of the Fitnet / AT / SP term.
    pub aux_weight: f64,
    /// Compute teacher soft labels on the target input instead of the paired source input.
    pub teacher_on_target: bool,
    /// Start the target model from the source checkpoint (ignored by `none`).
    pub init_from_source: bool,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            method: TransferMethod::Vbkt,
            sigma: DEFAULT_SIGMA,
            noise_sigma: None,
            temperature: 1.0,
            combine_with_tsl: false,
            tsl_weight: 0.9,
            ce_weight: 0.1,
            aux_weight: 1.0,
            teacher_on_target: false,
            init_from_source: true,
        }
    }
}

impl TransferConfig {
    pub fn with_method(method: TransferMethod) -> Self {
        TransferConfig { method, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(config_err(format!("transfer.sigma must be > 0, got {}", self.sigma)));
        }
        if let Some(n) = self.noise_sigma {
            if !(n >= 0.0) || !n.is_finite() {
                return Err(config_err(format!("transfer.noise_sigma must be >= 0, got {n}")));
            }
        }
        if !(self.temperature > 0.0) {
            return Err(config_err(format!("transfer.temperature must be > 0, got {}", self.temperature)));
        }
        if (self.tsl_weight + self.ce_weight - 1.0).abs() > 1e-12 || self.tsl_weight < 0.0 || self.ce_weight < 0.0 {
            return Err(config_err(format!(
                "transfer.tsl_weight + transfer.ce_weight must equal 1, got {} + {}",
                self.tsl_weight, self.ce_weight
            )));
        }
        if !(self.aux_weight >= 0.0) {
            return Err(config_err("transfer.aux_weight must be >= 0"));
        }
        Ok(())
    }

    pub fn noise_scale(&self) -> f64 {
        self.noise_sigma.unwrap_or(self.sigma)
    }

    /// Whether the likelihood uses the teacher-student mixture.
    pub fn tsl_active(&self) -> bool {
        self.method == TransferMethod::Tsl || (self.combine_with_tsl && self.method.needs_source())
    }
}

/// Scalar components of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    /// Likelihood term: CE, or `tsl_weight * tsl_term + ce_weight * ce` under TSL.
    pub likelihood: f64,
    /// Hard/soft-label cross entropy of the student.
    pub ce: f64,
    pub kl_latent: f64,
    pub tsl_term: f64,
    /// Unweighted Fitnet / AT / SP term.
    pub aux_term: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.likelihood, self.ce, self.kl_latent, self.tsl_term, self.aux_term, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Replaces the likelihood by `tsl_weight * tsl_term + ce_weight * ce`,
/// leaving the transfer-specific terms unchanged.
pub fn combine_with_tsl(task: LossBreakdown, tsl_term: f64, cfg: &TransferConfig) -> LossBreakdown {
    let likelihood = cfg.tsl_weight * tsl_term + cfg.ce_weight * task.ce;
    LossBreakdown { likelihood, tsl_term, total: task.total - task.likelihood + likelihood, ..task }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err(format!("{what}: student {:?} vs teacher {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `T^2 * (1/B) * sum_b KL(softmax(teacher/T) || softmax(student/T))`.
pub fn tsl_loss_value(student: &Tensor, teacher: &Tensor, temperature: f64) -> Result<f64> {
    Ok(tsl_parts(student, teacher, temperature)?.0)
}

fn tsl_parts(student: &Tensor, teacher: &Tensor, temperature: f64) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if !(temperature > 0.0) {
        return Err(config_err(format!("temperature must be > 0, got {temperature}")));
    }
    same_shape(student, teacher, "tsl")?;
    if student.rank() != 2 {
        return Err(dim_err(format!("tsl expects [B, K] logits, got {:?}", student.shape())));
    }
    let k = student.shape()[1];
    let scaled = |t: &Tensor| t.data().iter().map(|v| v / temperature).collect::<Vec<_>>();
    let log_s = log_softmax_rows(&scaled(student), k);
    let log_t = log_softmax_rows(&scaled(teacher), k);
    let p_t: Vec<f64> = log_t.iter().map(|l| l.exp()).collect();
    let kl: f64 = p_t.iter().zip(&log_t).zip(&log_s).map(|((p, lt), ls)| if *p == 0.0 { 0.0 } else { p * (lt - ls) }).sum();
    let value = temperature * temperature * kl / student.batch() as f64;
    let p_s = log_s.iter().map(|l| l.exp()).collect();
    Ok((value, p_s, p_t))
}

pub fn tsl_loss(tape: &mut Tape, student: Var, teacher: &Tensor, temperature: f64) -> Result<Var> {
    let (value, p_s, p_t) = tsl_parts(tape.value(student), teacher, temperature)?;
    let coef = temperature / tape.value(student).batch() as f64;
    Ok(tape.custom(
        &[student],
        Tensor::scalar(value),
        Box::new(move |g| vec![p_s.iter().zip(&p_t).map(|(s, t)| g[0] * coef * (s - t)).collect()]),
    ))
}

/// `(1/B) * sum_b ||h_s[b] - h_t[b]||^2`.
pub fn fitnet_loss_value(student: &Tensor, teacher: &Tensor) -> Result<f64> {
    same_shape(student, teacher, "fitnet")?;
    let sq: f64 = student.data().iter().zip(teacher.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sq / student.batch() as f64)
}

pub fn fitnet_loss(tape: &mut Tape, student: Var, teacher: &Tensor) -> Result<Var> {
    let value = fitnet_loss_value(tape.value(student), teacher)?;
    let coef = 2.0 / tape.value(student).batch() as f64;
    let diff: Vec<f64> = tape.value(student).data().iter().zip(teacher.data()).map(|(a, b)| a - b).collect();
    Ok(tape.custom(&[student], Tensor::scalar(value), Box::new(move |g| vec![diff.iter().map(|d| g[0] * coef * d).collect()])))
}

/// Per-example spatial attention `sum_c f[c]^2`, L2-normalized, with its norm.
/// A zero map yields `None`.
fn attention_maps(fmap: &Tensor) -> Result<Vec<Option<(Vec<f64>, f64)>>> {
    if fmap.rank() < 3 {
        return Err(dim_err(format!("attention transfer expects [B, C, ...] feature maps, got {:?}", fmap.shape())));
    }
    let (b, c) = (fmap.shape()[0], fmap.shape()[1]);
    let sp: usize = fmap.shape()[2..].iter().product();
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let row = fmap.row(i);
        let mut a = vec![0.0; sp];
        for ch in 0..c {
            for (s, v) in row[ch * sp..(ch + 1) * sp].iter().enumerate() {
                a[s] += v * v;
            }
        }
        let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        out.push((norm > 0.0).then(|| (a.iter().map(|v| v / norm).collect(), norm)));
    }
    Ok(out)
}

struct AtParts {
    value: f64,
    /// Per example: (normalized student map, teacher map, student norm) when both are non-zero.
    terms: Vec<Option<(Vec<f64>, Vec<f64>, f64)>>,
}

fn at_parts(student: &Tensor, teacher: &Tensor) -> Result<AtParts> {
    same_shape(student, teacher, "attention transfer")?;
    let (s_maps, t_maps) = (attention_maps(student)?, attention_maps(teacher)?);
    let b = student.batch();
    let mut value = 0.0;
    let mut terms = Vec::with_capacity(b);
    for (i, (s, t)) in s_maps.into_iter().zip(t_maps).enumerate() {
        match (s, t) {
            (Some((ns, norm)), Some((nt, _))) => {
                value += ns.iter().zip(&nt).map(|(a, c)| (a - c) * (a - c)).sum::<f64>();
                terms.push(Some((ns, nt, norm)));
            }
            _ => {
                warn!("attention transfer: all-zero attention map for example {i}; contribution set to zero");
                terms.push(None);
            }
        }
    }
    Ok(AtParts { value: value / b as f64, terms })
}

/// `(1/B) * sum_b || A_s/|A_s| - A_t/|A_t| ||^2` with `A = sum_c fmap[c]^2`.
pub fn at_loss_value(student: &Tensor, teacher: &Tensor) -> Result<f64> {
    Ok(at_parts(student, teacher)?.value)
}

pub fn at_loss(tape: &mut Tape, student: Var, teacher: &Tensor) -> Result<Var> {
    let parts = at_parts(tape.value(student), teacher)?;
    let fmap = tape.value(student).clone();
    let (b, c) = (fmap.shape()[0], fmap.shape()[1]);
    let sp = fmap.row_len() / c;
    let terms = parts.terms;
    Ok(tape.custom(
        &[student],
        Tensor::scalar(parts.value),
        Box::new(move |g| {
            let mut d = vec![0.0; fmap.numel()];
            for (i, term) in terms.iter().enumerate() {
                let Some((ns, nt, norm)) = term else { continue };
                // dL/dn = 2 (n_s - n_t) / B ; dL/da = (I - n n^T) dL/dn / |a| ; da/df = 2 f
                let u: Vec<f64> = ns.iter().zip(nt).map(|(a, c)| 2.0 * (a - c) / b as f64).collect();
                let proj: f64 = ns.iter().zip(&u).map(|(n, uv)| n * uv).sum();
                let da: Vec<f64> = u.iter().zip(ns).map(|(uv, n)| (uv - n * proj) / norm).collect();
                let row = fmap.row(i);
                for ch in 0..c {
                    for s in 0..sp {
                        let idx = ch * sp + s;
                        d[i * c * sp + idx] = g[0] * da[s] * 2.0 * row[idx];
                    }
                }
            }
            vec![d]
        }),
    ))
}

/// Row-L2-normalized Gram matrix `H H^T` of a `[B, M]` batch, plus the row norms.
fn normalized_gram(h: &Tensor) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let b = h.batch();
    let mut gram = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            gram[i * b + j] = h.row(i).iter().zip(h.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    let mut norms = vec![0.0; b];
    let mut normed = vec![0.0; b * b];
    for i in 0..b {
        let n = gram[i * b..(i + 1) * b].iter().map(|v| v * v).sum::<f64>().sqrt();
        norms[i] = n;
        if n > 0.0 {
            for j in 0..b {
                normed[i * b + j] = gram[i * b + j] / n;
            }
        }
    }
    (gram, normed, norms)
}

fn sp_check(student: &Tensor, teacher: &Tensor) -> Result<()> {
    if student.batch() < 2 {
        return Err(Error::BatchSize(format!("similarity-preserving loss needs B >= 2, got {}", student.batch())));
    }
    if student.batch() != teacher.batch() {
        return Err(dim_err(format!("sp batch sizes {} vs {}", student.batch(), teacher.batch())));
    }
    Ok(())
}

/// `(1/B^2) * ||G_s - G_t||_F^2` with `G = H H^T` row-normalized. Hidden
/// tensors are flattened per example; student and teacher widths may differ.
pub fn sp_loss_value(student: &Tensor, teacher: &Tensor) -> Result<f64> {
    sp_check(student, teacher)?;
    let (_, gs, _) = normalized_gram(student);
    let (_, gt, _) = normalized_gram(teacher);
    let b = student.batch() as f64;
    Ok(gs.iter().zip(&gt).map(|(a, c)| (a - c) * (a - c)).sum::<f64>() / (b * b))
}

pub fn sp_loss(tape: &mut Tape, student: Var, teacher: &Tensor) -> Result<Var> {
    let value = sp_loss_value(tape.value(student), teacher)?;
    let h = tape.value(student).clone();
    let (_, gs, norms) = normalized_gram(&h);
    let (_, gt, _) = normalized_gram(teacher);
    Ok(tape.custom(
        &[student],
        Tensor::scalar(value),
        Box::new(move |g| {
            let b = h.batch();
            let m = h.row_len();
            let scale = 2.0 * g[0] / (b * b) as f64;
            // dL/dG (before row normalization)
            let mut dgram = vec![0.0; b * b];
            for i in 0..b {
                if norms[i] == 0.0 {
                    continue;
                }
                let row = i * b..(i + 1) * b;
                let u: Vec<f64> = gs[row.clone()].iter().zip(&gt[row.clone()]).map(|(a, c)| scale * (a - c)).collect();
                let proj: f64 = gs[row].iter().zip(&u).map(|(n, uv)| n * uv).sum();
                for j in 0..b {
                    dgram[i * b + j] = (u[j] - gs[i * b + j] * proj) / norms[i];
                }
            }
            // G = H H^T  =>  dH = (dG + dG^T) H
            let mut d = vec![0.0; b * m];
            for i in 0..b {
                for j in 0..b {
                    let w = dgram[i * b + j] + dgram[j * b + i];
                    if w == 0.0 {
                        continue;
                    }
                    for (dv, hv) in d[i * m..(i + 1) * m].iter_mut().zip(h.row(j)) {
                        *dv += w * hv;
                    }
                }
            }
            vec![d]
        }),
    ))
}

/// A recorded training-step objective.
pub struct StepGraph {
    pub tape: Tape,
    pub total: Var,
    /// Student latent mean `mu_T`.
    pub mu: Var,
    /// Student logits.
    pub logits: Var,
    pub trace: Trace,
    pub breakdown: LossBreakdown,
}

/// Records the objective of `cfg.method` for one batch.
///
/// The student runs in train mode on `batch.target`; the frozen source model
/// supplies `mu_S` (on `batch.source`) and soft labels. Under `vbkt` the
/// student's latent is sampled with `noise`; every other method uses `z = mu`.
pub fn transfer_step(
    target: &SplitModel,
    source: Option<&SplitModel>,
    batch: &PairedBatch,
    cfg: &TransferConfig,
    noise: Option<&NoiseDraw>,
) -> Result<StepGraph> {
    cfg.validate()?;
    let source = if cfg.method.needs_source() {
        let s = source.ok_or_else(|| {
            Error::Usage(format!("method '{}' requires a frozen source model", cfg.method))
        })?;
        if !s.is_frozen() {
            return Err(Error::Usage("source model must be frozen (eval mode) during transfer".into()));
        }
        Some(s)
    } else {
        None
    };
    let paired_source = match (source, batch.source()) {
        (Some(_), None) => {
            return Err(Error::Pairing(format!("method '{}' needs paired source inputs", cfg.method)));
        }
        (Some(s), Some(xs)) => Some(s.infer(xs)?),
        (None, _) => None,
    };

    let mut tape = Tape::new();
    let mut trace = Trace::new();
    let x = tape.constant(batch.target().clone());
    let mu = target.encode(&mut tape, x, Mode::Train, &mut trace)?;
    let z = if cfg.method == TransferMethod::Vbkt {
        let noise = noise.ok_or_else(|| Error::Usage("vbkt needs a noise draw".into()))?;
        let latent = LatentGaussian::new(mu, cfg.noise_scale())?;
        sample_latent(&mut tape, &latent, noise)?
    } else {
        mu
    };
    let logits = target.decode(&mut tape, z, Mode::Train, &mut trace)?;
    let ce = tape.softmax_cross_entropy(logits, batch.labels())?;

    let mut bd = LossBreakdown::default();
    bd.ce = tape.value(ce).data()[0];
    bd.likelihood = bd.ce;
    let mut terms = vec![(ce, 1.0)];

    if cfg.tsl_active() {
        let (_, src_logits) = paired_source.as_ref().expect("source present");
        let teacher = if cfg.teacher_on_target {
            source.expect("source present").infer(batch.target())?.1
        } else {
            src_logits.clone()
        };
        let tsl = tsl_loss(&mut tape, logits, &teacher, cfg.temperature)?;
        terms = vec![(ce, cfg.ce_weight), (tsl, cfg.tsl_weight)];
        bd = combine_with_tsl(bd, tape.value(tsl).data()[0], cfg);
    }
    bd.total = bd.likelihood;

    if cfg.method.uses_aux() {
        let (src_mu, _) = paired_source.as_ref().expect("source present");
        let aux = match cfg.method {
            TransferMethod::Fitnet => fitnet_loss(&mut tape, mu, src_mu)?,
            TransferMethod::At => at_loss(&mut tape, mu, src_mu)?,
            TransferMethod::Sp => {
                let flat = tape.flatten(mu)?;
                let src_flat = src_mu.clone().reshape(vec![src_mu.batch(), src_mu.row_len()])?;
                sp_loss(&mut tape, flat, &src_flat)?
            }
            _ => unreachable!("aux methods enumerated above"),
        };
        bd.aux_term = tape.value(aux).data()[0];
        bd.total += cfg.aux_weight * bd.aux_term;
        terms.push((aux, cfg.aux_weight));
    }

    if cfg.method == TransferMethod::Vbkt {
        let (src_mu, _) = paired_source.as_ref().expect("source present");
        let kl = latent_kl(&mut tape, mu, src_mu, cfg.sigma)?;
        bd.kl_latent = tape.value(kl).data()[0];
        bd.total += bd.kl_latent;
        terms.push((kl, 1.0));
    }

    let total = tape.weighted_sum(&terms)?;
    bd.total = tape.value(total).data()[0];
    Ok(StepGraph { tape, total, mu, logits, trace, breakdown: bd })
}

/// The latent-variable transfer objective:
/// `CE(post_latent(mu_T + sigma*eps), y) + ||mu_T - mu_S||^2 / (2 sigma^2 B)`.
pub fn vbkt_loss(
    target: &SplitModel,
    source: &SplitModel,
    batch: &PairedBatch,
    cfg: &TransferConfig,
    noise: &NoiseDraw,
) -> Result<LossBreakdown> {
    let cfg = TransferConfig { method: TransferMethod::Vbkt, ..cfg.clone() };
    Ok(transfer_step(target, Some(source), batch, &cfg, Some(noise))?.breakdown)
}
