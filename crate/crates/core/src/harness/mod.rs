//! Config-driven experiments: dataset generation, training, sweeps,
//! theory checks and result export.

pub mod config;
pub mod container;
pub mod dataset;
pub mod sweep;
pub mod verify;

pub use config::{ExperimentConfig, PsiKind, SweepAxis};
pub use dataset::{build_dataset, sample_seed, stream_seed, DatasetSplits, Sample, Stream};
pub use sweep::{export_results, read_results, run_sweep, Method, ResultRow, RESULT_HEADER};
pub use verify::{verify_theory, CheckResult, TheoryReport};

use std::path::Path;
use std::time::Instant;

use crate::error::Result;
use crate::network::{
    batch_nmse, gain_report, train_stage, Dataset, GainReport, LossRecord, MbaModel, Stage, TrainConfig,
};
use crate::tensor::LrSchedule;

/// Per-stage training settings implied by the config.
pub fn train_configs(config: &ExperimentConfig, index: u64) -> Result<[TrainConfig; 2]> {
    let seed = stream_seed(config.seed, Stream::Training, index);
    let can = TrainConfig {
        epochs: config.epochs_can,
        batch_size: config.batch_size,
        schedule: LrSchedule::stepped(config.can_lr, config.can_decay, config.can_decay_every)?,
        ..TrainConfig::can_default(0, seed)
    };
    let cmn = TrainConfig {
        epochs: config.epochs_cmn,
        batch_size: config.batch_size,
        schedule: LrSchedule::constant(config.cmn_lr)?,
        ..TrainConfig::cmn_default(0, seed.wrapping_add(1))
    };
    Ok([can, cmn])
}

/// Fresh model trained CAN-then-CMN; returns it with the concatenated trace.
pub fn train_model(
    config: &ExperimentConfig,
    train: &Dataset,
    val: &Dataset,
    index: u64,
) -> Result<(MbaModel, Vec<LossRecord>)> {
    let mut model = MbaModel::new(config.net_config(), stream_seed(config.seed, Stream::Init, index))?;
    let [can, cmn] = train_configs(config, index)?;
    let (train, val) = (prepare(config, train)?, prepare(config, val)?);
    let mut trace = train_stage(&mut model, Stage::Can, &train, &val, &can)?;
    trace.extend(train_stage(&mut model, Stage::Cmn, &train, &val, &cmn)?);
    Ok((model, trace))
}

/// The data as the network sees it: normalized per sample if configured.
/// Every reported NMSE is per sample, so it is unaffected.
pub fn prepare(config: &ExperimentConfig, data: &Dataset) -> Result<Dataset> {
    if config.normalize {
        data.normalized()
    } else {
        Ok(data.clone())
    }
}

/// Augmented-LS, CAN and full-model NMSE on `test`.
pub fn evaluate(config: &ExperimentConfig, model: &MbaModel, test: &Dataset) -> Result<GainReport> {
    Ok(evaluate_timed(config, model, test)?.0)
}

/// [`evaluate`] plus the CAN and full-model inference times in ms.
pub fn evaluate_timed(config: &ExperimentConfig, model: &MbaModel, test: &Dataset) -> Result<(GainReport, [f64; 2])> {
    let test = prepare(config, test)?;
    let start = Instant::now();
    let can = model.predict_can(&test.inputs)?;
    let can_ms = start.elapsed().as_secs_f64() * 1e3;
    let mba = model.predict_cmn(&can)?;
    let mba_ms = start.elapsed().as_secs_f64() * 1e3;
    let report = gain_report(
        batch_nmse(&test.targets, &test.inputs)?,
        batch_nmse(&test.targets, &can)?,
        batch_nmse(&test.targets, &mba)?,
    )?;
    Ok((report, [can_ms, mba_ms]))
}

/// Writes the loss trace as CSV `epoch,stage,train_loss,val_nmse`.
pub fn write_loss_trace(trace: &[LossRecord], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,stage,train_loss,val_nmse\n");
    for r in trace {
        out.push_str(&format!(
            "{},{},{:e},{:e}\n",
            r.epoch, r.stage, r.train_loss, r.val_nmse
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}
