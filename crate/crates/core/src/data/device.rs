//! Recording-device channel simulation.

use rand_distr::{Distribution, Normal};

use crate::data::scene::SceneSample;
use crate::error::{config_err, Result};
use crate::seed::rng_for;
use crate::tensor::Tensor;

/// Channel response of one recording device, applied to scaled features:
/// `x' = clip01((gain[band] * x)^compression + noise)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeviceProfile {
    pub name: String,
    /// Per-band multiplicative response, all entries > 0.
    pub band_gain: Vec<f64>,
    pub noise_std: f64,
    /// Compression exponent; 1 is linear.
    pub compression: f64,
    pub seed: u64,
}

impl DeviceProfile {
    pub fn identity(name: &str, bands: usize) -> Self {
        DeviceProfile { name: name.to_string(), band_gain: vec![1.0; bands], noise_std: 0.0, compression: 1.0, seed: 0 }
    }

    /// Smooth response: `exp(tilt * (r - 0.5) + ripple * sin(2 pi * cycles * r))`
    /// with `r = band / (bands - 1)`.
    pub fn shaped(name: &str, bands: usize, tilt: f64, ripple: f64, cycles: f64, compression: f64, noise_std: f64, seed: u64) -> Self {
        let band_gain = (0..bands)
            .map(|b| {
                let r = b as f64 / (bands.max(2) - 1) as f64;
                (tilt * (r - 0.5) + ripple * (std::f64::consts::TAU * cycles * r).sin()).exp()
            })
            .collect();
        DeviceProfile { name: name.to_string(), band_gain, noise_std, compression, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.band_gain.iter().any(|g| !(*g > 0.0) || !g.is_finite()) {
            return Err(config_err(format!("device '{}' has a non-positive band gain", self.name)));
        }
        if !(self.noise_std >= 0.0) || !(self.compression > 0.0) {
            return Err(config_err(format!("device '{}' noise/compression out of range", self.name)));
        }
        Ok(())
    }
}

/// Names of the eight default target devices.
pub const DEFAULT_DEVICES: [&str; 8] = ["b", "c", "s1", "s2", "s3", "s4", "s5", "s6"];

/// Versioned built-in target-device profiles (v1). Severity grows with the
/// index: stronger spectral tilt and ripple, stronger compression or
/// expansion, more noise.
pub fn default_profiles(bands: usize) -> Vec<DeviceProfile> {
    DEFAULT_DEVICES
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let step = i as f64;
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            DeviceProfile::shaped(
                name,
                bands,
                sign * (1.6 + 0.15 * step),
                0.25 + 0.03 * step,
                1.0 + 0.25 * step,
                if i % 2 == 0 { 0.6 - 0.02 * step } else { 1.5 + 0.05 * step },
                0.03 + 0.005 * step,
                0xde71_ce00 + i as u64,
            )
        })
        .collect()
}

pub fn find_profile<'a>(profiles: &'a [DeviceProfile], name: &str) -> Result<&'a DeviceProfile> {
    profiles.iter().find(|p| p.name == name).ok_or_else(|| config_err(format!("unknown device '{name}'")))
}

/// Re-records a scaled sample through `profile`. Label and id are kept; the
/// noise stream is keyed by `(profile.seed, sample_id)`.
pub fn apply_device(sample: &SceneSample, profile: &DeviceProfile) -> Result<SceneSample> {
    let shape = sample.features.shape();
    let (chans, bands, frames) = (shape[0], shape[1], shape[2]);
    if profile.band_gain.len() != bands {
        return Err(config_err(format!(
            "device '{}' has {} band gains for {} bands",
            profile.name,
            profile.band_gain.len(),
            bands
        )));
    }
    let mut rng = rng_for(profile.seed, &[0xd1ce, sample.sample_id]);
    let noise = Normal::new(0.0, profile.noise_std).map_err(|e| config_err(e.to_string()))?;
    let x = sample.features.data();
    let mut out = Vec::with_capacity(x.len());
    for c in 0..chans {
        for b in 0..bands {
            let g = profile.band_gain[b];
            for f in 0..frames {
                let v = x[(c * bands + b) * frames + f];
                let mut y = (g * v).max(0.0).powf(profile.compression);
                if profile.noise_std > 0.0 {
                    y += noise.sample(&mut rng);
                }
                out.push(y.clamp(0.0, 1.0));
            }
        }
    }
    Ok(SceneSample {
        features: Tensor::new(shape.to_vec(), out)?,
        label: sample.label,
        sample_id: sample.sample_id,
        device: profile.name.clone(),
    })
}
