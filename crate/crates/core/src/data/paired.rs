//! Paired source/target corpora and batching.

use std::collections::HashMap;

use rand::seq::SliceRandom;

use crate::data::device::{apply_device, default_profiles, find_profile, DeviceProfile};
use crate::data::scaling::{scale_features, Scaler};
use crate::data::scene::{generate_scene_dataset, SceneConfig, SceneSample};
use crate::error::{config_err, dim_err, Error, Result};
use crate::seed::rng_for;
use crate::tensor::Tensor;

/// Aligned source inputs, student inputs and labels.
///
/// `target` is whatever the student trains on (target-device recordings
/// during transfer, source recordings during pretraining); `source`, when
/// present, holds the paired source recordings row for row.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedBatch {
    source: Option<Tensor>,
    target: Tensor,
    labels: Tensor,
    ids: Vec<u64>,
}

impl PairedBatch {
    pub fn new(source: Option<Tensor>, target: Tensor, labels: Tensor, ids: Vec<u64>) -> Result<Self> {
        let b = target.batch();
        if labels.batch() != b || labels.rank() != 2 || ids.len() != b {
            return Err(dim_err(format!(
                "batch of {b} inputs with labels {:?} and {} ids",
                labels.shape(),
                ids.len()
            )));
        }
        if let Some(s) = &source {
            if s.shape() != target.shape() {
                return Err(Error::Pairing(format!(
                    "source inputs {:?} are not aligned with target inputs {:?}",
                    s.shape(),
                    target.shape()
                )));
            }
        }
        Ok(PairedBatch { source, target, labels, ids })
    }

    pub fn source(&self) -> Option<&Tensor> {
        self.source.as_ref()
    }

    pub fn target(&self) -> &Tensor {
        &self.target
    }

    /// `[B, K]` one-hot or soft labels.
    pub fn labels(&self) -> &Tensor {
        &self.labels
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.target.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data).expect("consistent shape")
}

/// Stacks sample features into one `[N, C, H, W]` tensor.
pub fn stack_features(samples: &[&SceneSample]) -> Result<Tensor> {
    let shape = samples.first().map(|s| s.features.shape().to_vec()).ok_or_else(|| dim_err("no samples"))?;
    let rows: Vec<&[f64]> = samples.iter().map(|s| s.features.data()).collect();
    Tensor::stack(&rows, &shape)
}

/// Recordings of one target device.
#[derive(Clone, Debug, PartialEq)]
pub struct DeviceData {
    pub profile: DeviceProfile,
    /// Adaptation recordings; each is paired with a source training sample.
    pub train: Vec<SceneSample>,
    /// Held-out recordings of the source test split.
    pub test: Vec<SceneSample>,
    /// `(source_id, target_id)` for every training recording.
    pub pairs: Vec<(u64, u64)>,
}

impl DeviceData {
    pub fn name(&self) -> &str {
        &self.profile.name
    }
}

/// Corpus sizes and the device list.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub scene: SceneConfig,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Paired adaptation recordings per target device.
    pub target_per_device: usize,
    pub devices: Vec<String>,
    pub seed: u64,
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        self.validate_with(&default_profiles(self.scene.shape[1]))
    }

    pub fn validate_with(&self, profiles: &[DeviceProfile]) -> Result<()> {
        let n_train = self.train_per_class * self.scene.num_classes;
        if self.target_per_device == 0 || self.target_per_device > n_train {
            return Err(config_err(format!(
                "target_per_device {} must be in 1..={n_train}",
                self.target_per_device
            )));
        }
        if self.test_per_class == 0 || self.train_per_class == 0 {
            return Err(config_err("train_per_class and test_per_class must be positive"));
        }
        if self.devices.is_empty() {
            return Err(config_err("at least one target device is required"));
        }
        for d in &self.devices {
            find_profile(profiles, d)?.validate()?;
        }
        Ok(())
    }
}

/// Source corpus plus per-device paired recordings.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    pub num_classes: usize,
    pub item_shape: Vec<usize>,
    pub source_train: Vec<SceneSample>,
    pub source_test: Vec<SceneSample>,
    pub devices: Vec<DeviceData>,
    pub scaler: Scaler,
}

/// Rounds to f32 precision so the on-disk f32 format reproduces features exactly.
fn quantize(samples: &mut [SceneSample]) {
    for s in samples {
        for v in s.features.data_mut() {
            *v = *v as f32 as f64;
        }
    }
}

/// Picks `n` training samples for a device, as balanced over classes as possible.
fn pick_paired(source: &[SceneSample], n: usize, classes: usize, seed: u64, device_index: usize) -> Vec<usize> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, s) in source.iter().enumerate() {
        by_class[s.label].push(i);
    }
    let mut rng = rng_for(seed, &[0x9a17, device_index as u64]);
    for v in &mut by_class {
        v.shuffle(&mut rng);
    }
    let mut picked = Vec::with_capacity(n);
    let mut round = 0;
    while picked.len() < n {
        for v in &by_class {
            if picked.len() < n && round < v.len() {
                picked.push(v[round]);
            }
        }
        round += 1;
    }
    picked.sort_unstable();
    picked
}

impl PairedDataset {
    /// Generates the corpus with the built-in device profiles.
    pub fn generate(cfg: &DataConfig) -> Result<Self> {
        Self::generate_with(cfg, &default_profiles(cfg.scene.shape[1]))
    }

    /// Generates the corpus, resolving device names against `profiles`.
    pub fn generate_with(cfg: &DataConfig, profiles: &[DeviceProfile]) -> Result<Self> {
        cfg.validate_with(profiles)?;
        let k = cfg.scene.num_classes;
        let mut source_train = generate_scene_dataset(&cfg.scene, cfg.train_per_class, cfg.seed, 0)?;
        let test_offset = (k * cfg.train_per_class) as u64;
        let mut source_test = generate_scene_dataset(&cfg.scene, cfg.test_per_class, cfg.seed, test_offset)?;
        let fit = source_train.clone();
        let scaler = scale_features(&fit, &mut [&mut source_train, &mut source_test])?;
        quantize(&mut source_train);
        quantize(&mut source_test);

        let mut devices = Vec::with_capacity(cfg.devices.len());
        for name in &cfg.devices {
            let index = profiles.iter().position(|p| &p.name == name).expect("validated");
            let profile = profiles[index].clone();
            let chosen = pick_paired(&source_train, cfg.target_per_device, k, cfg.seed, index);
            let mut train = chosen
                .iter()
                .map(|&i| apply_device(&source_train[i], &profile))
                .collect::<Result<Vec<_>>>()?;
            let mut test = source_test.iter().map(|s| apply_device(s, &profile)).collect::<Result<Vec<_>>>()?;
            quantize(&mut train);
            quantize(&mut test);
            let pairs = train.iter().map(|t| (t.sample_id, t.sample_id)).collect();
            devices.push(DeviceData { profile, train, test, pairs });
        }
        Ok(PairedDataset {
            num_classes: k,
            item_shape: cfg.scene.shape.clone(),
            source_train,
            source_test,
            devices,
            scaler,
        })
    }

    pub fn device(&self, name: &str) -> Result<&DeviceData> {
        self.devices
            .iter()
            .find(|d| d.name() == name)
            .ok_or_else(|| config_err(format!("device '{name}' is not in the dataset")))
    }

    pub fn n_source(&self) -> usize {
        self.source_train.len()
    }

    pub fn n_target(&self, device: &str) -> Result<usize> {
        Ok(self.device(device)?.train.len())
    }
}

fn shuffled(n: usize, epoch_seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(epoch_seed, &[0xba7c]));
    order
}

/// Splits a shuffled order into batches; a trailing single example is
/// dropped because batch norm needs two.
fn chunk_order(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    order.chunks(batch_size.max(1)).filter(|c| c.len() >= 2).collect()
}

/// Shuffled paired batches `(x_S, x_T, y)` for one device and epoch.
pub fn pair_batches(
    dataset: &PairedDataset,
    device: &str,
    batch_size: usize,
    epoch_seed: u64,
) -> Result<Vec<PairedBatch>> {
    let dev = dataset.device(device)?;
    let by_id: HashMap<u64, usize> =
        dataset.source_train.iter().enumerate().map(|(i, s)| (s.sample_id, i)).collect();
    let partner_of: HashMap<u64, u64> = dev.pairs.iter().map(|&(s, t)| (t, s)).collect();
    let mut partners = Vec::with_capacity(dev.train.len());
    for t in &dev.train {
        let sid = partner_of
            .get(&t.sample_id)
            .ok_or_else(|| Error::Pairing(format!("target sample {} on device '{device}' has no source partner", t.sample_id)))?;
        let &si = by_id
            .get(sid)
            .ok_or_else(|| Error::Pairing(format!("source sample {sid} paired with target {} is missing", t.sample_id)))?;
        let s = &dataset.source_train[si];
        if s.label != t.label {
            return Err(Error::Pairing(format!("pair ({sid}, {}) has mismatched labels", t.sample_id)));
        }
        partners.push(si);
    }
    let order = shuffled(dev.train.len(), epoch_seed);
    chunk_order(&order, batch_size)
        .into_iter()
        .map(|chunk| {
            let tgt: Vec<&SceneSample> = chunk.iter().map(|&i| &dev.train[i]).collect();
            let src: Vec<&SceneSample> = chunk.iter().map(|&i| &dataset.source_train[partners[i]]).collect();
            let labels: Vec<usize> = tgt.iter().map(|s| s.label).collect();
            PairedBatch::new(
                Some(stack_features(&src)?),
                stack_features(&tgt)?,
                one_hot(&labels, dataset.num_classes),
                tgt.iter().map(|s| s.sample_id).collect(),
            )
        })
        .collect()
}

/// Shuffled unpaired batches over `samples` (source pretraining).
pub fn sample_batches(
    samples: &[SceneSample],
    num_classes: usize,
    batch_size: usize,
    epoch_seed: u64,
) -> Result<Vec<PairedBatch>> {
    let order = shuffled(samples.len(), epoch_seed);
    chunk_order(&order, batch_size)
        .into_iter()
        .map(|chunk| {
            let xs: Vec<&SceneSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let labels: Vec<usize> = xs.iter().map(|s| s.label).collect();
            PairedBatch::new(
                None,
                stack_features(&xs)?,
                one_hot(&labels, num_classes),
                xs.iter().map(|s| s.sample_id).collect(),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> DataConfig {
        DataConfig {
            scene: SceneConfig { shape: vec![1, 8, 8], ..SceneConfig::new(3) },
            train_per_class: 8,
            test_per_class: 2,
            target_per_device: 12,
            devices: vec!["b".into(), "s1".into()],
            seed: 5,
        }
    }

    #[test]
    fn pairs_are_label_preserving_bijection() {
        let d = PairedDataset::generate(&tiny_config()).unwrap();
        for dev in &d.devices {
            assert_eq!(dev.train.len(), 12);
            let mut targets: Vec<u64> = dev.pairs.iter().map(|p| p.1).collect();
            targets.sort_unstable();
            targets.dedup();
            assert_eq!(targets.len(), dev.pairs.len());
            for t in &dev.train {
                let s = d.source_train.iter().find(|s| s.sample_id == t.sample_id).unwrap();
                assert_eq!(s.label, t.label);
            }
            for k in 0..3 {
                assert_eq!(dev.train.iter().filter(|s| s.label == k).count(), 4);
            }
        }
    }

    #[test]
    fn batches_cover_epoch_once_and_repeat_with_seed() {
        let d = PairedDataset::generate(&tiny_config()).unwrap();
        let batches = pair_batches(&d, "b", 4, 99).unwrap();
        assert_eq!(batches.len(), 3);
        assert!(batches.iter().all(|b| b.len() == 4));
        let mut ids: Vec<u64> = batches.iter().flat_map(|b| b.ids().to_vec()).collect();
        ids.sort_unstable();
        let mut want: Vec<u64> = d.device("b").unwrap().train.iter().map(|s| s.sample_id).collect();
        want.sort_unstable();
        assert_eq!(ids, want);
        assert_eq!(batches, pair_batches(&d, "b", 4, 99).unwrap());
        assert_ne!(batches, pair_batches(&d, "b", 4, 100).unwrap());
    }

    #[test]
    fn missing_partner_names_sample() {
        let mut d = PairedDataset::generate(&tiny_config()).unwrap();
        let gone = d.devices[0].pairs.remove(3).1;
        let err = pair_batches(&d, "b", 4, 0).unwrap_err();
        assert!(matches!(err, Error::Pairing(ref m) if m.contains(&gone.to_string())), "{err}");
    }

    #[test]
    fn features_are_scaled() {
        let d = PairedDataset::generate(&tiny_config()).unwrap();
        let all = d.source_train.iter().chain(&d.source_test).chain(d.devices.iter().flat_map(|x| x.train.iter().chain(&x.test)));
        for s in all {
            assert!(s.features.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn unaligned_batch_is_pairing_error() {
        let err = PairedBatch::new(
            Some(Tensor::zeros(&[2, 1, 2, 2])),
            Tensor::zeros(&[3, 1, 2, 2]),
            one_hot(&[0, 1, 0], 2),
            vec![0, 1, 2],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Pairing(_)));
    }
}
