//! Line-oriented experiment configuration.
//!
//! Each non-blank line is `section.key = value`; `#` starts a comment.
//! Keys not given keep the value of the base preset. Lists are comma
//! separated, shapes are written `1x40x64` and conv blocks
//! `filters:kernel:padding:pool`.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::data::{DataConfig, SceneConfig};
use crate::error::{config_err, Error, Result};
use crate::losses::{TransferConfig, TransferMethod};
use crate::nn::{ArchSpec, ConvBlock};
use crate::seed::derive_seed;
use crate::train::{MixupConfig, TrainSchedule};

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// `data.seed` is not read from files; it follows `seed`.
    pub data: DataConfig,
    pub arch: ArchSpec,
    pub pretrain: TrainSchedule,
    pub pretrain_mixup: MixupConfig,
    pub train: TrainSchedule,
    pub train_mixup: MixupConfig,
    /// Shared transfer settings; `method` is replaced by each entry of `methods`.
    pub transfer: TransferConfig,
    pub methods: Vec<TransferMethod>,
    pub trials: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Load the source model from here instead of pretraining it.
    pub checkpoint: Option<PathBuf>,
    /// Latent placements visited by the depth ablation.
    pub depths: Vec<usize>,
    /// Class whose test samples feed the discrepancy heatmaps.
    pub heatmap_class: usize,
}

impl ExperimentConfig {
    /// Full desk-scale benchmark: 10 classes, 8 devices, 4 trials.
    pub fn default_preset() -> Self {
        let num_classes = 10;
        let arch = ArchSpec::default_cnn(num_classes);
        let depths = (0..arch.blocks.len()).collect();
        ExperimentConfig {
            data: DataConfig {
                scene: SceneConfig { noise_std: 0.5, ..SceneConfig::new(num_classes) },
                train_per_class: 1000,
                test_per_class: 100,
                target_per_device: 750,
                devices: crate::data::DEFAULT_DEVICES.iter().map(|d| d.to_string()).collect(),
                seed: 0,
            },
            arch,
            pretrain: TrainSchedule { max_lr: 0.02, total_epochs: 40, cycle_length_epochs: 40, ..Default::default() },
            pretrain_mixup: MixupConfig { enabled: true, alpha: 0.2 },
            train: TrainSchedule { max_lr: 0.02, batch_size: 16, ..Default::default() },
            train_mixup: MixupConfig { enabled: true, alpha: 0.2 },
            transfer: TransferConfig { sigma: 4.0, noise_sigma: Some(0.2), ..Default::default() },
            methods: vec![TransferMethod::None, TransferMethod::OnehotFinetune, TransferMethod::Tsl, TransferMethod::Vbkt],
            trials: 4,
            seed: 1,
            output_dir: PathBuf::from("out"),
            checkpoint: None,
            depths,
            heatmap_class: 0,
        }
        .reseeded(1)
    }

    /// Scale used by the acceptance suite: default device `b`, few paired targets.
    pub fn acceptance_preset() -> Self {
        let mut c = Self::default_preset();
        c.data.train_per_class = 100;
        c.data.test_per_class = 60;
        c.data.target_per_device = 40;
        c.data.devices = vec!["b".into()];
        c.trials = 3;
        c
    }

    /// CI scale: 3 classes, 200 source samples per class, 2 devices x 2 trials, no mixup.
    pub fn small_preset() -> Self {
        let mut c = Self::default_preset();
        c.data.scene = SceneConfig { noise_std: 0.5, ..SceneConfig::new(3) };
        c.data.train_per_class = 200;
        c.data.test_per_class = 30;
        c.data.target_per_device = 30;
        c.data.devices = vec!["b".into(), "c".into()];
        c.arch.num_classes = 3;
        c.pretrain.total_epochs = 8;
        c.pretrain.cycle_length_epochs = 8;
        c.train.total_epochs = 8;
        c.train.cycle_length_epochs = 8;
        c.pretrain_mixup.enabled = false;
        c.train_mixup.enabled = false;
        c.trials = 2;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default_preset()),
            "acceptance" => Ok(Self::acceptance_preset()),
            "small" => Ok(Self::small_preset()),
            _ => Err(config_err(format!("unknown preset '{name}' (expected default, acceptance or small)"))),
        }
    }

    /// Sets the master seed and every seed derived from it.
    pub fn reseeded(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.data.seed = derive_seed(seed, &[0xda7a]);
        self.pretrain.seed = derive_seed(seed, &[0x97e]);
        self
    }

    pub fn model_seed(&self) -> u64 {
        derive_seed(self.seed, &[0x40de1])
    }

    /// Transfer schedule of one trial.
    pub fn trial_schedule(&self, trial: usize) -> TrainSchedule {
        TrainSchedule { seed: derive_seed(self.seed, &[0x7a1, trial as u64]), ..self.train.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.pretrain.validate()?;
        self.train.validate()?;
        self.pretrain_mixup.validate()?;
        self.train_mixup.validate()?;
        self.arch.layers()?;
        if self.trials == 0 {
            return Err(config_err("experiment.trials must be at least 1"));
        }
        if self.methods.is_empty() {
            return Err(config_err("transfer.methods must name at least one method"));
        }
        for &m in &self.methods {
            TransferConfig { method: m, ..self.transfer.clone() }.validate()?;
        }
        if self.arch.num_classes != self.data.scene.num_classes {
            return Err(config_err(format!(
                "model has {} classes but data has {}",
                self.arch.num_classes, self.data.scene.num_classes
            )));
        }
        if self.arch.input_shape != self.data.scene.shape {
            return Err(config_err(format!(
                "model input {:?} differs from data shape {:?}",
                self.arch.input_shape, self.data.scene.shape
            )));
        }
        if let Some(&d) = self.depths.iter().find(|&&d| d >= self.arch.blocks.len()) {
            return Err(config_err(format!("latent depth {d} out of range for {} conv blocks", self.arch.blocks.len())));
        }
        if self.heatmap_class >= self.data.scene.num_classes {
            return Err(config_err(format!("heatmap class {} out of range", self.heatmap_class)));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_base(text, Self::default_preset())
    }

    pub fn parse_with_base(text: &str, base: Self) -> Result<Self> {
        let mut cfg = base;
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse { line: i + 1, message };
            let (key, value) =
                line.split_once('=').ok_or_else(|| err(format!("expected 'section.key = value', got '{line}'")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key '{key}'")));
            }
            cfg.set(key, value).map_err(|m| err(format!("{key}: {m}")))?;
        }
        let seed = cfg.seed;
        Ok(cfg.reseeded(seed))
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let d = &mut self.data;
        match key {
            "data.num_classes" => {
                d.scene.num_classes = num(v)?;
                self.arch.num_classes = d.scene.num_classes;
            }
            "data.shape" => {
                d.scene.shape = shape(v)?;
                self.arch.input_shape = d.scene.shape.clone();
            }
            "data.noise_std" => d.scene.noise_std = num(v)?,
            "data.events" => d.scene.events = num(v)?,
            "data.strength_min" => d.scene.strength.0 = num(v)?,
            "data.strength_max" => d.scene.strength.1 = num(v)?,
            "data.train_per_class" => d.train_per_class = num(v)?,
            "data.test_per_class" => d.test_per_class = num(v)?,
            "data.target_per_device" => d.target_per_device = num(v)?,
            "data.devices" => d.devices = list(v).into_iter().map(String::from).collect(),
            "model.blocks" => self.arch.blocks = list(v).into_iter().map(block).collect::<std::result::Result<_, _>>()?,
            "model.latent_block" => self.arch.latent_block = num(v)?,
            "transfer.methods" => {
                self.methods = list(v).into_iter().map(|m| m.parse().map_err(|e: Error| e.to_string())).collect::<std::result::Result<_, _>>()?
            }
            "transfer.sigma" => self.transfer.sigma = num(v)?,
            "transfer.noise_sigma" => self.transfer.noise_sigma = if v == "tied" { None } else { Some(num(v)?) },
            "transfer.temperature" => self.transfer.temperature = num(v)?,
            "transfer.combine_with_tsl" => self.transfer.combine_with_tsl = flag(v)?,
            "transfer.tsl_weight" => self.transfer.tsl_weight = num(v)?,
            "transfer.ce_weight" => self.transfer.ce_weight = num(v)?,
            "transfer.aux_weight" => self.transfer.aux_weight = num(v)?,
            "transfer.teacher_on_target" => self.transfer.teacher_on_target = flag(v)?,
            "transfer.init_from_source" => self.transfer.init_from_source = flag(v)?,
            "experiment.trials" => self.trials = num(v)?,
            "experiment.seed" => self.seed = num(v)?,
            "experiment.output_dir" => self.output_dir = PathBuf::from(v),
            "experiment.checkpoint" => self.checkpoint = (!v.is_empty()).then(|| PathBuf::from(v)),
            "experiment.depths" => self.depths = list(v).into_iter().map(num).collect::<std::result::Result<_, _>>()?,
            "experiment.heatmap_class" => self.heatmap_class = num(v)?,
            _ => {
                let (section, field) = key.split_once('.').ok_or("unknown key")?;
                let (schedule, mixup) = match section {
                    "pretrain" => (&mut self.pretrain, &mut self.pretrain_mixup),
                    "train" => (&mut self.train, &mut self.train_mixup),
                    _ => return Err("unknown key".into()),
                };
                match field {
                    "epochs" => schedule.total_epochs = num(v)?,
                    "cycle_epochs" => schedule.cycle_length_epochs = num(v)?,
                    "cycle_mult" => schedule.cycle_mult = num(v)?,
                    "max_lr" => schedule.max_lr = num(v)?,
                    "min_lr" => schedule.min_lr = num(v)?,
                    "batch_size" => schedule.batch_size = num(v)?,
                    "momentum" => schedule.momentum = num(v)?,
                    "weight_decay" => schedule.weight_decay = num(v)?,
                    "mixup" => mixup.enabled = flag(v)?,
                    "mixup_alpha" => mixup.alpha = num(v)?,
                    _ => return Err("unknown key".into()),
                }
            }
        }
        Ok(())
    }

    /// Complete textual form; parsing it yields `self` again.
    pub fn to_text(&self) -> String {
        let d = &self.data;
        let join = |items: Vec<String>| items.join(", ");
        let mut o = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(o, "{k} = {v}");
        };
        kv("experiment.seed", self.seed.to_string());
        kv("experiment.trials", self.trials.to_string());
        kv("experiment.output_dir", self.output_dir.display().to_string());
        kv("experiment.checkpoint", self.checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        kv("experiment.depths", join(self.depths.iter().map(|x| x.to_string()).collect()));
        kv("experiment.heatmap_class", self.heatmap_class.to_string());
        kv("data.num_classes", d.scene.num_classes.to_string());
        kv("data.shape", d.scene.shape.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("x"));
        kv("data.noise_std", d.scene.noise_std.to_string());
        kv("data.events", d.scene.events.to_string());
        kv("data.strength_min", d.scene.strength.0.to_string());
        kv("data.strength_max", d.scene.strength.1.to_string());
        kv("data.train_per_class", d.train_per_class.to_string());
        kv("data.test_per_class", d.test_per_class.to_string());
        kv("data.target_per_device", d.target_per_device.to_string());
        kv("data.devices", join(d.devices.clone()));
        kv(
            "model.blocks",
            join(self.arch.blocks.iter().map(|b| format!("{}:{}:{}:{}", b.filters, b.kernel, b.padding, b.pool)).collect()),
        );
        kv("model.latent_block", self.arch.latent_block.to_string());
        for (name, s, m) in [("pretrain", &self.pretrain, &self.pretrain_mixup), ("train", &self.train, &self.train_mixup)] {
            kv(&format!("{name}.epochs"), s.total_epochs.to_string());
            kv(&format!("{name}.cycle_epochs"), s.cycle_length_epochs.to_string());
            kv(&format!("{name}.cycle_mult"), s.cycle_mult.to_string());
            kv(&format!("{name}.max_lr"), s.max_lr.to_string());
            kv(&format!("{name}.min_lr"), s.min_lr.to_string());
            kv(&format!("{name}.batch_size"), s.batch_size.to_string());
            kv(&format!("{name}.momentum"), s.momentum.to_string());
            kv(&format!("{name}.weight_decay"), s.weight_decay.to_string());
            kv(&format!("{name}.mixup"), m.enabled.to_string());
            kv(&format!("{name}.mixup_alpha"), m.alpha.to_string());
        }
        let t = &self.transfer;
        kv("transfer.methods", join(self.methods.iter().map(|m| m.name().to_string()).collect()));
        kv("transfer.sigma", t.sigma.to_string());
        kv("transfer.noise_sigma", t.noise_sigma.map_or("tied".into(), |s| s.to_string()));
        kv("transfer.temperature", t.temperature.to_string());
        kv("transfer.combine_with_tsl", t.combine_with_tsl.to_string());
        kv("transfer.tsl_weight", t.tsl_weight.to_string());
        kv("transfer.ce_weight", t.ce_weight.to_string());
        kv("transfer.aux_weight", t.aux_weight.to_string());
        kv("transfer.teacher_on_target", t.teacher_on_target.to_string());
        kv("transfer.init_from_source", t.init_from_source.to_string());
        o
    }
}

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("invalid number '{v}'"))
}

fn flag(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got '{v}'")),
    }
}

fn list(v: &str) -> Vec<&str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
}

fn shape(v: &str) -> std::result::Result<Vec<usize>, String> {
    let dims = v.split('x').map(|d| num(d.trim())).collect::<std::result::Result<Vec<usize>, _>>()?;
    if dims.len() != 3 {
        return Err(format!("expected CxHxW, got '{v}'"));
    }
    Ok(dims)
}

fn block(v: &str) -> std::result::Result<ConvBlock, String> {
    let p = v.split(':').map(num).collect::<std::result::Result<Vec<usize>, _>>()?;
    match p[..] {
        [filters, kernel, padding, pool] => Ok(ConvBlock { filters, kernel, padding, pool }),
        _ => Err(format!("expected filters:kernel:padding:pool, got '{v}'")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_form_round_trips() {
        for name in ["default", "acceptance", "small"] {
            let c = ExperimentConfig::preset(name).unwrap();
            c.validate().unwrap();
            assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c, "{name}");
        }
    }

    #[test]
    fn overrides_apply_on_base() {
        let text = "# comment\n\ntrain.epochs = 3   # trailing\ntransfer.methods = tsl, vbkt\nexperiment.seed = 9\n";
        let c = ExperimentConfig::parse_with_base(text, ExperimentConfig::small_preset()).unwrap();
        assert_eq!(c.train.total_epochs, 3);
        assert_eq!(c.methods, vec![TransferMethod::Tsl, TransferMethod::Vbkt]);
        assert_eq!(c.data.scene.num_classes, 3);
        let mut expected = ExperimentConfig::small_preset().reseeded(9);
        expected.train.total_epochs = 3;
        expected.methods = vec![TransferMethod::Tsl, TransferMethod::Vbkt];
        assert_eq!(c, expected);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let bad = |text: &str| match ExperimentConfig::parse(text) {
            Err(Error::Parse { line, message }) => (line, message),
            other => panic!("{other:?}"),
        };
        assert_eq!(bad("train.epochs = 2\nbogus.key = 1").0, 2);
        let (line, msg) = bad("\ntrain.epochs = many");
        assert_eq!(line, 2);
        assert!(msg.contains("train.epochs"));
        assert_eq!(bad("data.devices = b\ndata.devices = c").0, 2);
        assert_eq!(bad("no equals sign").0, 1);
        assert_eq!(bad("transfer.methods = vbkt, magic").0, 1);
    }

    #[test]
    fn validation_rejects_inconsistent_configs() {
        let mut c = ExperimentConfig::small_preset();
        c.trials = 0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ExperimentConfig::small_preset();
        c.data.devices.push("zz".into());
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::small_preset();
        c.depths = vec![0, 5];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
