//! Class-structured spectrogram-like scenes.
//!
//! A scene patch is `bands x frames` of log-energy. Each class owns a seeded
//! template: a spectral envelope made of a few Gaussian bumps plus a
//! periodic temporal modulation in one band region. Every sample perturbs
//! its class template with a random strength, gain and tilt, adds
//! class-independent transient events, and adds white noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{config_err, Result};
use crate::seed::rng_for;
use crate::tensor::Tensor;

/// Device tag of the source recordings.
pub const SOURCE_DEVICE: &str = "a";

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// `[C, H, W]` features (H = bands, W = frames).
    pub features: Tensor,
    pub label: usize,
    pub sample_id: u64,
    pub device: String,
}

/// Generation knobs for the scene corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub num_classes: usize,
    /// Per-example shape `[C, bands, frames]`.
    pub shape: Vec<usize>,
    /// Standard deviation of the additive white noise.
    pub noise_std: f64,
    /// Mean number of class-independent transient events per patch.
    pub events: f64,
    /// Range of the per-sample template strength.
    pub strength: (f64, f64),
}

impl SceneConfig {
    pub fn new(num_classes: usize) -> Self {
        SceneConfig { num_classes, shape: vec![1, 40, 64], noise_std: 0.25, events: 2.0, strength: (0.5, 1.1) }
    }
}

/// Spectro-temporal signature of one class.
#[derive(Clone, Debug)]
struct ClassTemplate {
    /// (center band, width, height)
    bumps: Vec<(f64, f64, f64)>,
    mod_band: f64,
    mod_width: f64,
    mod_period: f64,
    mod_depth: f64,
}

impl ClassTemplate {
    fn draw(seed: u64, class: usize, bands: usize) -> Self {
        let mut rng = rng_for(seed, &[0x7e3a, class as u64]);
        let b = bands as f64;
        let bumps = (0..3)
            .map(|_| (rng.gen_range(0.0..b), rng.gen_range(0.05 * b..0.15 * b), rng.gen_range(0.4..1.0)))
            .collect();
        ClassTemplate {
            bumps,
            mod_band: rng.gen_range(0.0..b),
            mod_width: rng.gen_range(0.05 * b..0.12 * b),
            mod_period: rng.gen_range(4.0..16.0),
            mod_depth: rng.gen_range(0.2..0.6),
        }
    }

    fn envelope(&self, band: f64) -> f64 {
        self.bumps.iter().map(|(c, w, h)| h * (-(band - c).powi(2) / (2.0 * w * w)).exp()).sum()
    }

    fn modulation(&self, band: f64, frame: f64, phase: f64) -> f64 {
        let spread = (-(band - self.mod_band).powi(2) / (2.0 * self.mod_width * self.mod_width)).exp();
        self.mod_depth * spread * (2.0 * std::f64::consts::PI * frame / self.mod_period + phase).sin()
    }
}

/// Renders one raw (unscaled) scene patch for `class`, fully determined by
/// `(seed, sample_id)`.
fn render(cfg: &SceneConfig, template: &ClassTemplate, seed: u64, sample_id: u64) -> Vec<f64> {
    let (chans, bands, frames) = (cfg.shape[0], cfg.shape[1], cfg.shape[2]);
    let mut rng = rng_for(seed, &[0x5a3e, sample_id]);
    let strength = rng.gen_range(cfg.strength.0..cfg.strength.1);
    let gain: f64 = Normal::new(0.0, 0.2).expect("valid").sample(&mut rng);
    let tilt: f64 = Normal::new(0.0, 0.3).expect("valid").sample(&mut rng);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let n_events = {
        // Poisson draw by inversion; small means only.
        let u: f64 = rng.gen();
        let (mut k, mut p, mut cdf) = (0usize, (-cfg.events).exp(), (-cfg.events).exp());
        while u > cdf && k < 16 {
            k += 1;
            p *= cfg.events / k as f64;
            cdf += p;
        }
        k
    };
    let events: Vec<(f64, f64, f64, f64, f64)> = (0..n_events)
        .map(|_| {
            (
                rng.gen_range(0.0..bands as f64),
                rng.gen_range(0.0..frames as f64),
                rng.gen_range(1.5..4.0),
                rng.gen_range(2.0..8.0),
                rng.gen_range(0.3..0.9),
            )
        })
        .collect();
    let noise = Normal::new(0.0, cfg.noise_std).expect("noise std >= 0");
    let mut out = Vec::with_capacity(chans * bands * frames);
    for _ in 0..chans {
        for band in 0..bands {
            let bf = band as f64;
            let rel = bf / (bands.max(2) - 1) as f64 - 0.5;
            let base = strength * template.envelope(bf) + gain + tilt * rel + 0.5 * (1.0 - rel);
            for frame in 0..frames {
                let ff = frame as f64;
                let mut v = base + strength * template.modulation(bf, ff, phase);
                for (eb, ef, wb, wf, amp) in &events {
                    let d = (bf - eb).powi(2) / (2.0 * wb * wb) + (ff - ef).powi(2) / (2.0 * wf * wf);
                    v += amp * (-d).exp();
                }
                v += noise.sample(&mut rng);
                out.push(v);
            }
        }
    }
    out
}

/// `n_per_class` samples per class, class-major, ids `id_offset..`. Raw
/// features (not yet scaled).
pub fn generate_scene_dataset(
    cfg: &SceneConfig,
    n_per_class: usize,
    seed: u64,
    id_offset: u64,
) -> Result<Vec<SceneSample>> {
    if cfg.num_classes < 2 {
        return Err(config_err(format!("need at least 2 classes, got {}", cfg.num_classes)));
    }
    if cfg.shape.len() != 3 || cfg.shape.iter().any(|d| *d == 0) {
        return Err(config_err(format!("scene shape must be [C, H, W], got {:?}", cfg.shape)));
    }
    if !(cfg.noise_std >= 0.0) || !(cfg.events >= 0.0) || !(cfg.strength.0 < cfg.strength.1) {
        return Err(config_err("scene noise, event rate or strength range out of bounds"));
    }
    let templates: Vec<ClassTemplate> =
        (0..cfg.num_classes).map(|k| ClassTemplate::draw(seed, k, cfg.shape[1])).collect();
    let mut out = Vec::with_capacity(cfg.num_classes * n_per_class);
    for (k, template) in templates.iter().enumerate() {
        for i in 0..n_per_class {
            let sample_id = id_offset + (k * n_per_class + i) as u64;
            let data = render(cfg, template, seed, sample_id);
            out.push(SceneSample {
                features: Tensor::new(cfg.shape.clone(), data)?,
                label: k,
                sample_id,
                device: SOURCE_DEVICE.to_string(),
            });
        }
    }
    Ok(out)
}
