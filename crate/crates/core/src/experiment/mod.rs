//! Experiment orchestration: pretraining, per-cell transfer runs and artifacts.

pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use sha2::{Digest, Sha256};

use crate::data::{PairedDataset, SceneSample};
use crate::error::{config_err, Error, Result};
use crate::eval::{evaluate_accuracy, export_heatmap, intra_class_discrepancy, mean_off_diagonal, ResultRow, ResultTable};
use crate::losses::TransferConfig;
use crate::nn::{checkpoint, SplitModel};
use crate::train::{initial_target, log_csv, pretrain_source, train_transfer};

pub use config::ExperimentConfig;

/// Samples per discrepancy matrix.
pub const DISCREPANCY_SAMPLES: usize = 30;

/// Hex digest of the config's text form.
pub fn fingerprint(cfg: &ExperimentConfig) -> String {
    Sha256::digest(cfg.to_text().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Manifest text: the full config preceded by `#` provenance lines, so it
/// parses back into the same config.
pub fn manifest(cfg: &ExperimentConfig) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# ltk {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(out, "# config-sha256 {}", fingerprint(cfg));
    let _ = writeln!(out, "# seeds data={} pretrain={} model={}", cfg.data.seed, cfg.pretrain.seed, cfg.model_seed());
    for t in 0..cfg.trials {
        let _ = writeln!(out, "# seeds trial{t}={}", cfg.trial_schedule(t).seed);
    }
    out.push_str(&cfg.to_text());
    out
}

/// Source model, its source-domain accuracy and its accuracy on each device.
#[derive(Clone, Debug)]
pub struct SourceReport {
    pub model: SplitModel,
    pub source_accuracy: f64,
    pub device_accuracy: Vec<(String, f64)>,
}

impl SourceReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("device,accuracy\nsource,{:.6}\n", self.source_accuracy);
        for (d, a) in &self.device_accuracy {
            let _ = writeln!(out, "{d},{a:.6}");
        }
        out
    }
}

/// One trained (method, device, trial) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub row: ResultRow,
    /// Mean off-diagonal intra-class discrepancy on the device test set.
    pub discrepancy: f64,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub table: ResultTable,
    pub cells: Vec<CellResult>,
    pub source: SourceReport,
}

impl ExperimentOutput {
    /// Mean discrepancy of one method over all cells.
    pub fn mean_discrepancy(&self, method: &str) -> Option<f64> {
        let v: Vec<f64> = self.cells.iter().filter(|c| c.row.method == method).map(|c| c.discrepancy).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

pub fn load_config(path: &Path, base: ExperimentConfig) -> Result<ExperimentConfig> {
    ExperimentConfig::parse_with_base(&read_named(path)?, base)
}

fn with_path(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn read_named(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| with_path(path, e))
}

/// Loads the configured checkpoint or pretrains a fresh source model.
pub fn prepare_source(cfg: &ExperimentConfig, data: &PairedDataset, out_dir: Option<&Path>) -> Result<SourceReport> {
    let model = match &cfg.checkpoint {
        Some(path) => {
            let mut m = checkpoint::load(path)
                .map_err(|e| match e {
                    Error::Io(io) => with_path(path, io),
                    e => e,
                })?
                .resplit(cfg.arch.latent_block)?;
            if m.num_classes() != cfg.arch.num_classes {
                return Err(config_err(format!("checkpoint has {} classes, config {}", m.num_classes(), cfg.arch.num_classes)));
            }
            m.freeze();
            m
        }
        None => {
            info!("pretraining source model on {} samples", data.source_train.len());
            let init = SplitModel::new(&cfg.arch, cfg.model_seed())?;
            let out = pretrain_source(init, &data.source_train, &data.source_test, &cfg.pretrain, &cfg.pretrain_mixup)?;
            if let Some(dir) = out_dir {
                checkpoint::save(&out.model, &dir.join("source.ltk"))?;
                fs::write(dir.join("pretrain_log.csv"), log_csv(&out.history))?;
            }
            out.model
        }
    };
    let source_accuracy = evaluate_accuracy(&model, &data.source_test)?;
    let device_accuracy = data
        .devices
        .iter()
        .map(|d| Ok((d.name().to_string(), evaluate_accuracy(&model, &d.test)?)))
        .collect::<Result<_>>()?;
    info!("source accuracy {source_accuracy:.4}");
    Ok(SourceReport { model, source_accuracy, device_accuracy })
}

fn class_samples(samples: &[SceneSample], class: usize) -> Vec<SceneSample> {
    samples.iter().filter(|s| s.label == class).take(DISCREPANCY_SAMPLES).cloned().collect()
}

/// Trains every (method, device, trial) cell against a prepared source model.
pub fn run_cells(
    cfg: &ExperimentConfig,
    data: &PairedDataset,
    source: &SplitModel,
    out_dir: Option<&Path>,
) -> Result<Vec<CellResult>> {
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir.join("logs"))?;
        fs::create_dir_all(dir.join("heatmaps"))?;
    }
    let mut cells = Vec::new();
    for &method in &cfg.methods {
        let tc = TransferConfig { method, ..cfg.transfer.clone() };
        for device in &cfg.data.devices {
            let test = &data.device(device)?.test;
            let probe = class_samples(test, cfg.heatmap_class);
            for trial in 0..cfg.trials {
                let schedule = cfg.trial_schedule(trial);
                let init = initial_target(source, &tc, schedule.seed)?;
                let out = train_transfer(init, Some(source), data, device, &tc, &schedule, &cfg.train_mixup)?;
                let accuracy = evaluate_accuracy(&out.model, test)?;
                let matrix = intra_class_discrepancy(&out.model, &probe)?;
                info!("{method} {device} trial {trial}: accuracy {accuracy:.4}");
                if let Some(dir) = out_dir {
                    let stem = format!("{method}_{device}_{trial}");
                    fs::write(dir.join("logs").join(format!("{stem}.csv")), log_csv(&out.history))?;
                    export_heatmap(&matrix, &dir.join("heatmaps").join(format!("{stem}.pgm")))?;
                }
                cells.push(CellResult {
                    row: ResultRow { method: method.name().into(), device: device.clone(), trial, accuracy },
                    discrepancy: mean_off_diagonal(&matrix),
                });
            }
        }
    }
    Ok(cells)
}

fn discrepancy_csv(cells: &[CellResult]) -> String {
    let mut out = String::from("method,device,trial,discrepancy\n");
    for c in cells {
        let _ = writeln!(out, "{},{},{},{:.6}", c.row.method, c.row.device, c.row.trial, c.discrepancy);
    }
    out
}

fn table_of(cells: &[CellResult]) -> ResultTable {
    let mut table = ResultTable::new();
    for c in cells {
        table.push(c.row.clone());
    }
    table
}

/// Runs the whole pipeline and writes results.csv, results.md, source.csv,
/// discrepancy.csv, manifest.cfg, per-run logs and heatmaps into the output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let dir = cfg.output_dir.as_path();
    fs::create_dir_all(dir)?;
    fs::write(dir.join("manifest.cfg"), manifest(cfg))?;
    let data = PairedDataset::generate(&cfg.data)?;
    let source = prepare_source(cfg, &data, Some(dir))?;
    fs::write(dir.join("source.csv"), source.to_csv())?;
    let cells = run_cells(cfg, &data, &source.model, Some(dir))?;
    let table = table_of(&cells);
    fs::write(dir.join("results.csv"), table.to_csv())?;
    fs::write(dir.join("results.md"), table.to_markdown())?;
    fs::write(dir.join("discrepancy.csv"), discrepancy_csv(&cells))?;
    Ok(ExperimentOutput { table, cells, source })
}

#[derive(Clone, Debug)]
pub struct DepthResult {
    pub depth: usize,
    pub table: ResultTable,
    /// Fingerprint of the base configuration shared by all depths.
    pub fingerprint: String,
}

/// Repeats the transfer runs with the latent site after each listed conv block.
/// The source model is pretrained once; only the split point moves.
pub fn ablate_latent_depth(cfg: &ExperimentConfig, depths: &[usize]) -> Result<Vec<DepthResult>> {
    cfg.validate()?;
    let blocks = cfg.arch.blocks.len();
    if depths.is_empty() {
        return Err(config_err("depth ablation needs at least one latent depth"));
    }
    if let Some(&d) = depths.iter().find(|&&d| d >= blocks) {
        return Err(config_err(format!("latent depth {d} out of range for {blocks} conv blocks")));
    }
    let dir = cfg.output_dir.as_path();
    fs::create_dir_all(dir)?;
    fs::write(dir.join("manifest.cfg"), manifest(cfg))?;
    let data = PairedDataset::generate(&cfg.data)?;
    let source = prepare_source(cfg, &data, Some(dir))?;
    let fp = fingerprint(cfg);
    let mut results = Vec::new();
    let mut summary = String::from("depth,method,mean_accuracy,fingerprint\n");
    for &depth in depths {
        let src = source.model.resplit(depth)?;
        let sub: PathBuf = dir.join(format!("depth{depth}"));
        let cells = run_cells(cfg, &data, &src, Some(&sub))?;
        let table = table_of(&cells);
        fs::write(sub.join("results.csv"), table.to_csv())?;
        for m in table.methods() {
            let _ = writeln!(summary, "{depth},{m},{:.6},{fp}", table.grand_mean(&m).unwrap_or(f64::NAN));
        }
        results.push(DepthResult { depth, table, fingerprint: fp.clone() });
    }
    fs::write(dir.join("ablation.csv"), summary)?;
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SceneConfig;
    use crate::losses::TransferMethod;
    use crate::nn::{ArchSpec, ConvBlock};

    fn tiny(dir: &Path) -> ExperimentConfig {
        let mut c = ExperimentConfig::small_preset();
        c.data.scene = SceneConfig { shape: vec![1, 8, 8], ..c.data.scene };
        c.data.train_per_class = 10;
        c.data.test_per_class = 4;
        c.data.target_per_device = 9;
        c.arch = ArchSpec {
            input_shape: vec![1, 8, 8],
            blocks: vec![
                ConvBlock { filters: 2, kernel: 3, padding: 1, pool: 2 },
                ConvBlock { filters: 2, kernel: 3, padding: 1, pool: 2 },
            ],
            num_classes: 3,
            latent_block: 1,
        };
        c.depths = vec![0, 1];
        c.pretrain.total_epochs = 1;
        c.train.total_epochs = 1;
        c.train.batch_size = 4;
        c.methods = vec![TransferMethod::OnehotFinetune, TransferMethod::Vbkt];
        c.output_dir = dir.to_path_buf();
        c
    }

    #[test]
    fn run_writes_artifacts_and_is_reproducible_from_manifest() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny(&tmp.path().join("a"));
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.table.rows().len(), 2 * 2 * 2);
        let a = tmp.path().join("a");
        let results = fs::read_to_string(a.join("results.csv")).unwrap();
        assert!(results.starts_with("method,device,trial,accuracy\n"));
        assert!(a.join("logs/vbkt_c_1.csv").exists());
        assert!(a.join("heatmaps/onehot_finetune_b_0.pgm").exists());
        let mut again = load_config(&a.join("manifest.cfg"), ExperimentConfig::default_preset()).unwrap();
        assert_eq!(again, cfg);
        again.output_dir = tmp.path().join("b");
        run_experiment(&again).unwrap();
        assert_eq!(fs::read(tmp.path().join("b/results.csv")).unwrap(), results.as_bytes());
    }

    #[test]
    fn missing_checkpoint_is_a_file_error() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = tiny(tmp.path());
        cfg.checkpoint = Some(tmp.path().join("nope.ltk"));
        let err = run_experiment(&cfg).unwrap_err();
        assert!(matches!(err, Error::Io(_)));
        assert!(err.to_string().contains("nope.ltk"));
    }

    #[test]
    fn ablation_emits_one_table_per_depth() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny(tmp.path());
        let res = ablate_latent_depth(&cfg, &[0, 1]).unwrap();
        assert_eq!(res.len(), 2);
        assert!(res.iter().all(|r| r.fingerprint == fingerprint(&cfg)));
        let direct = run_experiment(&cfg).unwrap();
        assert_eq!(res[1].table, direct.table);
        assert!(matches!(ablate_latent_depth(&cfg, &[2]), Err(Error::Config(_))));
    }
}
