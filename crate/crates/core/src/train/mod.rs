//! Source pretraining and transfer training loops.

pub mod mixup;
pub mod schedule;
pub mod sgd;

use std::fmt::Write as _;

use crate::data::{pair_batches, sample_batches, PairedBatch, PairedDataset, SceneSample};
use crate::error::{Error, Result};
use crate::eval::evaluate_accuracy;
use crate::latent::{NoiseDraw, NoiseSeed};
use crate::losses::{transfer_step, LossBreakdown, TransferConfig, TransferMethod};
use crate::nn::SplitModel;
use crate::seed::{derive_seed, rng_for};

pub use mixup::{mixup_batch, MixupConfig, MixupDraw};
pub use schedule::{cosine_lr, cosine_restart_lr, TrainSchedule};
pub use sgd::Sgd;

pub const LOG_HEADER: &str = "step,epoch,lr,likelihood,kl_latent,tsl_term,aux_term,total";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

/// Training log as CSV, one row per optimizer step.
pub fn log_csv(history: &[StepRecord]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for r in history {
        let l = &r.loss;
        let _ = writeln!(
            out,
            "{},{},{:e},{:e},{:e},{:e},{:e},{:e}",
            r.step, r.epoch, r.lr, l.likelihood, l.kl_latent, l.tsl_term, l.aux_term, l.total
        );
    }
    out
}

pub struct TrainOutcome {
    pub model: SplitModel,
    pub history: Vec<StepRecord>,
}

pub struct PretrainOutcome {
    /// Frozen source model.
    pub model: SplitModel,
    /// Source-domain test accuracy.
    pub accuracy: f64,
    pub history: Vec<StepRecord>,
}

/// Runs `schedule.total_epochs` epochs of SGD on `model` with the objective of `cfg`.
fn fit<F>(
    model: &mut SplitModel,
    source: Option<&SplitModel>,
    cfg: &TransferConfig,
    schedule: &TrainSchedule,
    mixup: &MixupConfig,
    mut batches_for_epoch: F,
) -> Result<Vec<StepRecord>>
where
    F: FnMut(u64) -> Result<Vec<PairedBatch>>,
{
    schedule.validate()?;
    mixup.validate()?;
    cfg.validate()?;
    let mut opt = Sgd::new(schedule.momentum, schedule.weight_decay);
    let noise_base = derive_seed(schedule.seed, &[0x7015e]);
    let mut history = Vec::new();
    let mut step = 0;
    let mut steps_per_epoch = None;
    for epoch in 0..schedule.total_epochs {
        let batches = batches_for_epoch(derive_seed(schedule.seed, &[0xe90c, epoch as u64]))?;
        if batches.is_empty() {
            return Err(Error::Usage("training set yields no batches of at least two examples".into()));
        }
        let per_epoch = *steps_per_epoch.get_or_insert(batches.len());
        for (bi, batch) in batches.iter().enumerate() {
            let lr = cosine_restart_lr(step, schedule, per_epoch);
            let mixed;
            let batch = if mixup.enabled {
                let mut rng = rng_for(schedule.seed, &[0x313, epoch as u64, bi as u64]);
                mixed = mixup_batch(batch, &MixupDraw::sample(mixup.alpha, batch.len(), &mut rng)?)?;
                &mixed
            } else {
                batch
            };
            let noise = (cfg.method == TransferMethod::Vbkt).then(|| {
                NoiseDraw::generate(
                    NoiseSeed { global: noise_base, epoch: epoch as u64, batch: bi as u64 },
                    batch.len(),
                    model.latent_shape(),
                )
            });
            let graph = transfer_step(model, source, batch, cfg, noise.as_ref())?;
            if !graph.breakdown.is_finite() {
                return Err(Error::Training { step, reason: format!("non-finite loss {:?}", graph.breakdown) });
            }
            let grads = graph.tape.backward(graph.total)?;
            model.zero_grads();
            model.accumulate_grads(&graph.trace, &grads)?;
            opt.step(model.params_mut(), lr);
            model.commit_stats(&graph.trace)?;
            if model.params().iter().any(|p| !p.all_finite()) {
                return Err(Error::Training { step, reason: "parameters diverged to non-finite values".into() });
            }
            history.push(StepRecord { step, epoch, lr, loss: graph.breakdown });
            step += 1;
        }
    }
    Ok(history)
}

/// Trains `model` on source-device data with hard labels and freezes it.
pub fn pretrain_source(
    mut model: SplitModel,
    train: &[SceneSample],
    test: &[SceneSample],
    schedule: &TrainSchedule,
    mixup: &MixupConfig,
) -> Result<PretrainOutcome> {
    if model.is_frozen() {
        return Err(Error::Usage("cannot pretrain a frozen model".into()));
    }
    let k = model.num_classes();
    let cfg = TransferConfig::with_method(TransferMethod::None);
    let history = fit(&mut model, None, &cfg, schedule, mixup, |seed| {
        sample_batches(train, k, schedule.batch_size, seed)
    })?;
    let accuracy = evaluate_accuracy(&model, test)?;
    model.freeze();
    Ok(PretrainOutcome { model, accuracy, history })
}

/// Starting point of the target model: a thawed copy of the source
/// checkpoint, or a fresh initialization for `none` (or when
/// `init_from_source` is off).
pub fn initial_target(source: &SplitModel, cfg: &TransferConfig, seed: u64) -> Result<SplitModel> {
    if cfg.method == TransferMethod::None || !cfg.init_from_source {
        source.reinitialized(derive_seed(seed, &[0x1717]))
    } else {
        Ok(source.thawed())
    }
}

/// Trains a target model on one device's paired data with the objective of `cfg`.
pub fn train_transfer(
    init: SplitModel,
    source: Option<&SplitModel>,
    data: &PairedDataset,
    device: &str,
    cfg: &TransferConfig,
    schedule: &TrainSchedule,
    mixup: &MixupConfig,
) -> Result<TrainOutcome> {
    if cfg.method.needs_source() {
        match source {
            None => return Err(Error::Usage(format!("method '{}' requires a frozen source model", cfg.method))),
            Some(s) if !s.is_frozen() => {
                return Err(Error::Usage("source model must be frozen during transfer".into()));
            }
            _ => {}
        }
    }
    let mut model = init;
    if model.is_frozen() {
        return Err(Error::Usage("target model must not be frozen".into()));
    }
    data.device(device)?;
    let history = fit(&mut model, source, cfg, schedule, mixup, |seed| {
        pair_batches(data, device, schedule.batch_size, seed)
    })?;
    Ok(TrainOutcome { model, history })
}
