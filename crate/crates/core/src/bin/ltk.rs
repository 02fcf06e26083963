use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ltk::data::io::write_dataset;
use ltk::data::PairedDataset;
use ltk::eval::ResultTable;
use ltk::experiment::{ablate_latent_depth, load_config, prepare_source, run_experiment, ExperimentConfig};
use ltk::{gradsuite, Error, Result};

#[derive(Parser)]
#[command(name = "ltk", version, about = "Latent-variable knowledge transfer for device-mismatched scene classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (`section.key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Start from the CI-scale preset instead of the default one.
    #[arg(long, conflicts_with = "preset")]
    small: bool,
    /// Base preset: default, acceptance or small.
    #[arg(long)]
    preset: Option<String>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let base = match (&self.preset, self.small) {
            (Some(name), _) => ExperimentConfig::preset(name)?,
            (None, true) => ExperimentConfig::small_preset(),
            (None, false) => ExperimentConfig::default_preset(),
        };
        let mut cfg = match &self.config {
            Some(path) => load_config(path, base)?,
            None => base,
        };
        if let Some(seed) = self.seed {
            cfg = cfg.reseeded(seed);
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the paired synthetic dataset and its pairing manifest.
    GenData(Common),
    /// Train and save the source model.
    Pretrain(Common),
    /// Transfer from a saved source model to every configured device.
    Transfer {
        #[command(flatten)]
        common: Common,
        /// Source checkpoint; overrides `experiment.checkpoint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Pretrain (unless a checkpoint is configured) and run all transfer cells.
    Run(Common),
    /// Repeat the transfer runs for several latent placements.
    AblateDepth {
        #[command(flatten)]
        common: Common,
        /// Comma-separated conv block indices; defaults to `experiment.depths`.
        #[arg(long, value_delimiter = ',')]
        depths: Option<Vec<usize>>,
    },
    /// Render a results CSV as a per-device table.
    Report {
        /// Results file; defaults to `<out>/results.csv`.
        #[arg(long)]
        results: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every layer, the latent and every loss.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData(common) => {
            let cfg = common.resolve()?;
            let data = PairedDataset::generate(&cfg.data)?;
            fs::create_dir_all(&cfg.output_dir)?;
            let (d, m) = (cfg.output_dir.join("dataset.ltkd"), cfg.output_dir.join("pairs.tsv"));
            write_dataset(&data, &d, &m)?;
            println!("source: {} train, {} test", data.source_train.len(), data.source_test.len());
            for dev in &data.devices {
                println!("device {}: {} paired train, {} test", dev.name(), dev.train.len(), dev.test.len());
            }
            println!("wrote {} and {}", d.display(), m.display());
        }
        Command::Pretrain(common) => {
            let mut cfg = common.resolve()?;
            cfg.checkpoint = None;
            fs::create_dir_all(&cfg.output_dir)?;
            let data = PairedDataset::generate(&cfg.data)?;
            let report = prepare_source(&cfg, &data, Some(&cfg.output_dir))?;
            fs::write(cfg.output_dir.join("source.csv"), report.to_csv())?;
            print!("{}", report.to_csv());
            println!("wrote {}", cfg.output_dir.join("source.ltk").display());
        }
        Command::Transfer { common, checkpoint } => {
            let mut cfg = common.resolve()?;
            if checkpoint.is_some() {
                cfg.checkpoint = checkpoint;
            }
            if cfg.checkpoint.is_none() {
                return Err(Error::Usage("transfer needs a source checkpoint (--checkpoint or experiment.checkpoint)".into()));
            }
            let out = run_experiment(&cfg)?;
            print!("{}", out.table.to_markdown());
        }
        Command::Run(common) => {
            let cfg = common.resolve()?;
            let out = run_experiment(&cfg)?;
            print!("{}", out.source.to_csv());
            print!("{}", out.table.to_markdown());
        }
        Command::AblateDepth { common, depths } => {
            let cfg = common.resolve()?;
            let depths = depths.unwrap_or_else(|| cfg.depths.clone());
            println!("depth,method,mean_accuracy");
            for r in ablate_latent_depth(&cfg, &depths)? {
                for m in r.table.methods() {
                    println!("{},{m},{:.4}", r.depth, r.table.grand_mean(&m).unwrap_or(f64::NAN));
                }
            }
        }
        Command::Report { results, common } => {
            let path = match results {
                Some(p) => p,
                None => common.resolve()?.output_dir.join("results.csv"),
            };
            let table = ResultTable::from_csv(&fs::read_to_string(&path)?)?;
            print!("{}", table.to_markdown());
        }
        Command::Gradcheck { seeds, tolerance } => {
            let report = gradsuite::run_suite(0..seeds, tolerance)?;
            for (name, err) in report.worst_by_case() {
                println!("{name:16} max rel error {err:.2e}");
            }
            if !report.passed() {
                return Err(Error::Validation(format!("gradient check above tolerance {tolerance:e}")));
            }
            println!("all {} checks below {tolerance:e}", report.cases.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
