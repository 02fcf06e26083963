//! Global min-max feature scaling.

use crate::data::scene::SceneSample;
use crate::error::{config_err, Result};

/// Affine map `x -> (x - min) / (max - min)` fitted on the source training split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scaler {
    pub min: f64,
    pub max: f64,
}

impl Scaler {
    pub fn fit(samples: &[SceneSample]) -> Result<Self> {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for s in samples {
            for &v in s.features.data() {
                min = min.min(v);
                max = max.max(v);
            }
        }
        if !(max > min) || !min.is_finite() || !max.is_finite() {
            return Err(config_err(format!("degenerate feature range [{min}, {max}]; cannot scale")));
        }
        Ok(Scaler { min, max })
    }

    pub fn scale_value(&self, v: f64) -> f64 {
        (v - self.min) / (self.max - self.min)
    }

    pub fn unscale_value(&self, v: f64) -> f64 {
        v * (self.max - self.min) + self.min
    }

    /// Scales and clips to [0, 1] in place.
    pub fn apply(&self, samples: &mut [SceneSample]) {
        for s in samples {
            for v in s.features.data_mut() {
                *v = self.scale_value(*v).clamp(0.0, 1.0);
            }
        }
    }
}

/// Fits on `fit_on`, then scales and clips every split in `apply_to`.
pub fn scale_features(fit_on: &[SceneSample], apply_to: &mut [&mut Vec<SceneSample>]) -> Result<Scaler> {
    let scaler = Scaler::fit(fit_on)?;
    for split in apply_to.iter_mut() {
        scaler.apply(split);
    }
    Ok(scaler)
}
