//! Mixup augmentation for paired batches.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::data::PairedBatch;
use crate::error::{config_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixupConfig {
    pub enabled: bool,
    /// Symmetric Beta parameter for the mixing weight.
    pub alpha: f64,
}

impl Default for MixupConfig {
    fn default() -> Self {
        MixupConfig { enabled: false, alpha: 0.2 }
    }
}

impl MixupConfig {
    pub fn validate(&self) -> Result<()> {
        if self.enabled && !(self.alpha > 0.0) {
            return Err(config_err(format!("mixup.alpha must be > 0 when enabled, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// One mixing weight and partner permutation, shared by both halves of a pair.
#[derive(Clone, Debug, PartialEq)]
pub struct MixupDraw {
    pub lambda: f64,
    pub perm: Vec<usize>,
}

impl MixupDraw {
    pub fn sample<R: Rng>(alpha: f64, rows: usize, rng: &mut R) -> Result<Self> {
        let beta = Beta::new(alpha, alpha).map_err(|e| config_err(format!("mixup.alpha: {e}")))?;
        let lambda = beta.sample(rng);
        let mut perm: Vec<usize> = (0..rows).collect();
        perm.shuffle(rng);
        Ok(MixupDraw { lambda, perm })
    }
}

fn mix(t: &Tensor, lambda: f64, perm: &[usize]) -> Tensor {
    let partner = t.select_rows(perm);
    let data = t.data().iter().zip(partner.data()).map(|(a, b)| lambda * a + (1.0 - lambda) * b).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

/// `x' = lambda x + (1 - lambda) x[perm]`, likewise for labels and the
/// paired source inputs.
pub fn mixup_batch(batch: &PairedBatch, draw: &MixupDraw) -> Result<PairedBatch> {
    if !(0.0..=1.0).contains(&draw.lambda) {
        return Err(config_err(format!("mixup lambda must be in [0, 1], got {}", draw.lambda)));
    }
    if draw.perm.len() != batch.len() {
        return Err(config_err(format!("permutation of {} rows for a batch of {}", draw.perm.len(), batch.len())));
    }
    let (l, p) = (draw.lambda, draw.perm.as_slice());
    PairedBatch::new(
        batch.source().map(|s| mix(s, l, p)),
        mix(batch.target(), l, p),
        mix(batch.labels(), l, p),
        batch.ids().to_vec(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::one_hot;
    use crate::seed::rng_for;

    fn batch() -> PairedBatch {
        PairedBatch::new(
            Some(Tensor::new(vec![2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()),
            Tensor::new(vec![2, 1, 1, 2], vec![0.5, 0.0, 0.0, 0.5]).unwrap(),
            one_hot(&[0, 1], 2),
            vec![10, 11],
        )
        .unwrap()
    }

    #[test]
    fn lambda_one_is_identity() {
        let b = batch();
        assert_eq!(mixup_batch(&b, &MixupDraw { lambda: 1.0, perm: vec![1, 0] }).unwrap(), b);
    }

    #[test]
    fn half_swap_makes_rows_equal() {
        let m = mixup_batch(&batch(), &MixupDraw { lambda: 0.5, perm: vec![1, 0] }).unwrap();
        for t in [m.source().unwrap(), m.target(), m.labels()] {
            assert_eq!(t.row(0), t.row(1));
        }
        assert_eq!(m.labels().row(0), &[0.5, 0.5]);
    }

    #[test]
    fn beta_mean() {
        let mut rng = rng_for(4, &[]);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| MixupDraw::sample(0.2, 1, &mut rng).unwrap().lambda).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.005, "mean {mean}");
    }
}
