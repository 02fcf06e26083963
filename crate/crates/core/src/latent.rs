//! Gaussian latent site.
//!
//! The hidden embedding at the latent site is the mean `mu` of an isotropic
//! Gaussian with a fixed, shared standard deviation `sigma`. Training draws
//! `z = mu + sigma * eps`; inference uses `z = mu`. Two such Gaussians with
//! equal variance have the closed-form divergence
//! `||mu_t - mu_s||^2 / (2 sigma^2)`.

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::error::{config_err, dim_err, Result};
use crate::seed::rng_for;
use crate::tensor::Tensor;

/// Default latent standard deviation.
pub const DEFAULT_SIGMA: f64 = 0.2;

/// Latent posterior (or prior) parameters for one batch.
#[derive(Clone, Copy, Debug)]
pub struct LatentGaussian {
    /// Handle to the mean tensor `[B, ...]`; carries gradient.
    pub mean: Var,
    /// Fixed standard deviation; never trained.
    pub sigma: f64,
}

impl LatentGaussian {
    /// `sigma` must be non-negative; zero is a degenerate (test-only) setting.
    pub fn new(mean: Var, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(config_err(format!("latent sigma must be finite and non-negative, got {sigma}")));
        }
        Ok(LatentGaussian { mean, sigma })
    }
}

/// Where a noise draw came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseSeed {
    pub global: u64,
    pub epoch: u64,
    pub batch: u64,
}

/// Standard-normal draws `eps` for the reparameterized sample.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    epsilon: Tensor,
    seed: Option<NoiseSeed>,
}

impl NoiseDraw {
    /// Draws `[rows, row_shape...]` standard normals; row `b` uses its own
    /// stream keyed by `(global, epoch, batch, b)`.
    pub fn generate(seed: NoiseSeed, rows: usize, row_shape: &[usize]) -> Self {
        let n: usize = row_shape.iter().product();
        let mut data = Vec::with_capacity(rows * n);
        for b in 0..rows {
            let mut rng = rng_for(seed.global, &[0x0e15, seed.epoch, seed.batch, b as u64]);
            data.extend((0..n).map(|_| -> f64 { StandardNormal.sample(&mut rng) }));
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(row_shape);
        NoiseDraw { epsilon: Tensor::new(shape, data).expect("consistent shape"), seed: Some(seed) }
    }

    /// Pinned noise, e.g. for gradient checks.
    pub fn fixed(epsilon: Tensor) -> Self {
        NoiseDraw { epsilon, seed: None }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        NoiseDraw::fixed(Tensor::zeros(shape))
    }

    pub fn epsilon(&self) -> &Tensor {
        &self.epsilon
    }

    pub fn seed(&self) -> Option<NoiseSeed> {
        self.seed
    }

    /// Re-draws from the recorded seed; `None` for pinned noise.
    pub fn regenerate(&self) -> Option<Self> {
        let seed = self.seed?;
        let shape = self.epsilon.shape();
        Some(NoiseDraw::generate(seed, shape[0], &shape[1..]))
    }
}

/// Reparameterized draw `z = mu + sigma * eps`; the Jacobian w.r.t. `mu` is the identity.
pub fn sample_latent(tape: &mut Tape, latent: &LatentGaussian, noise: &NoiseDraw) -> Result<Var> {
    let mean_shape = tape.value(latent.mean).shape();
    if mean_shape != noise.epsilon.shape() {
        return Err(dim_err(format!(
            "noise shape {:?} does not match latent mean {:?}",
            noise.epsilon.shape(),
            mean_shape
        )));
    }
    let shift: Vec<f64> = noise.epsilon.data().iter().map(|e| latent.sigma * e).collect();
    tape.shift(latent.mean, &shift)
}

/// Inference-time latent: the mean itself, no sampling.
pub fn inference_pass(latent: &LatentGaussian) -> Var {
    latent.mean
}

/// Weight `1 / (2 sigma^2)` of the squared mean distance.
pub fn kl_weight(sigma: f64) -> f64 {
    1.0 / (2.0 * sigma * sigma)
}

fn check_pair(mu_t: &Tensor, mu_s: &Tensor, sigma: f64) -> Result<()> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(config_err(format!("latent KL needs sigma > 0, got {sigma}")));
    }
    if mu_t.shape() != mu_s.shape() {
        return Err(dim_err(format!("latent means {:?} vs {:?}", mu_t.shape(), mu_s.shape())));
    }
    Ok(())
}

/// `(1 / (2 sigma^2)) * (1/B) * sum_b ||mu_t[b] - mu_s[b]||^2`.
pub fn latent_kl_value(mu_t: &Tensor, mu_s: &Tensor, sigma: f64) -> Result<f64> {
    check_pair(mu_t, mu_s, sigma)?;
    let sq: f64 = mu_t.data().iter().zip(mu_s.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(kl_weight(sigma) * sq / mu_t.batch() as f64)
}

/// Records the latent KL on the tape. `mu_s` is a detached prior mean, so
/// gradient flows only to `mu_t`: `(mu_t - mu_s) / (B sigma^2)`.
pub fn latent_kl(tape: &mut Tape, mu_t: Var, mu_s: &Tensor, sigma: f64) -> Result<Var> {
    let value = latent_kl_value(tape.value(mu_t), mu_s, sigma)?;
    let batch = tape.value(mu_t).batch() as f64;
    let coef = 1.0 / (batch * sigma * sigma);
    let diff: Vec<f64> = tape.value(mu_t).data().iter().zip(mu_s.data()).map(|(a, b)| a - b).collect();
    Ok(tape.custom(
        &[mu_t],
        Tensor::scalar(value),
        Box::new(move |g| vec![diff.iter().map(|d| g[0] * coef * d).collect()]),
    ))
}
