//! Stage-wise training: CAN first, then CMN on top of the frozen CAN.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{batch_nmse, check_batch, MbaModel, Stage};
use crate::error::{Error, Result};
use crate::tensor::{AdamState, BnMode, Graph, LrSchedule, Tensor};

/// Paired network inputs (augmented LS estimates) and targets (true channels).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub targets: Tensor,
}

impl Dataset {
    pub fn new(inputs: Tensor, targets: Tensor) -> Result<Self> {
        check_batch(&inputs)?;
        check_batch(&targets)?;
        if inputs.dims() != targets.dims() {
            return Err(Error::Dimension(format!(
                "inputs {:?} and targets {:?} differ",
                inputs.dims(),
                targets.dims()
            )));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Divides every input/target pair by the Frobenius norm of its input.
    ///
    /// Per-sample NMSE is invariant under this scaling, while the squared
    /// error loss on scaled pairs weights every sample by its own power, as
    /// the metric does. Samples with an all-zero input are left unscaled.
    pub fn normalized(&self) -> Result<Dataset> {
        let scales = sample_norms(&self.inputs);
        Dataset::new(
            scale_samples(&self.inputs, &scales)?,
            scale_samples(&self.targets, &scales)?,
        )
    }
}

/// Frobenius norm of every sample of a `[n, ...]` batch (1 for all-zero ones).
pub fn sample_norms(batch: &Tensor) -> Vec<f64> {
    let n = batch.dims()[0];
    let per = batch.numel().checked_div(n).unwrap_or(0);
    batch
        .data()
        .chunks(per.max(1))
        .take(n)
        .map(|s| {
            let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                norm
            } else {
                1.0
            }
        })
        .collect()
}

/// Divides sample `i` of `batch` by `scales[i]`.
pub fn scale_samples(batch: &Tensor, scales: &[f64]) -> Result<Tensor> {
    let n = batch.dims()[0];
    if scales.len() != n {
        return Err(Error::Dimension(format!("{} scales for {n} samples", scales.len())));
    }
    let per = batch.numel().checked_div(n).unwrap_or(0);
    let mut data = batch.data().to_vec();
    for (chunk, s) in data.chunks_mut(per.max(1)).zip(scales) {
        chunk.iter_mut().for_each(|v| *v /= s);
    }
    Tensor::new(batch.dims(), data)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Batch 64, learning rate 2e-4 decayed by 0.6 every 150 epochs.
    pub fn can_default(epochs: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size: 64,
            schedule: LrSchedule::stepped(2e-4, 0.6, 150).expect("valid schedule"),
            beta1: 0.9,
            beta2: 0.999,
            seed,
        }
    }

    /// Batch 64, constant learning rate 1e-4.
    pub fn cmn_default(epochs: usize, seed: u64) -> Self {
        Self {
            schedule: LrSchedule::constant(1e-4).expect("valid schedule"),
            ..Self::can_default(epochs, seed)
        }
    }

    pub fn for_stage(stage: Stage, epochs: usize, seed: u64) -> Self {
        match stage {
            Stage::Can => Self::can_default(epochs, seed),
            Stage::Cmn => Self::cmn_default(epochs, seed),
        }
    }
}

/// One row of the per-epoch loss trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub stage: Stage,
    /// Mean over the epoch of `||target - output||_F^2 / 2` per sample.
    pub train_loss: f64,
    pub val_nmse: f64,
}

/// Trains one stage in place and returns its loss trace.
///
/// The CMN stage requires a trained CAN, freezes it and trains on its
/// (fixed) outputs; CAN parameters are never modified by it.
pub fn train_stage(
    model: &mut MbaModel,
    stage: Stage,
    train: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
) -> Result<Vec<LossRecord>> {
    config.schedule.validate()?;
    if config.batch_size == 0 {
        return Err(Error::Training("batch size must be positive".into()));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::Training("training and validation sets must be non-empty".into()));
    }
    if train.inputs.dims()[1..] != val.inputs.dims()[1..] {
        return Err(Error::Dimension("training and validation sample shapes differ".into()));
    }
    let (train_inputs, val_inputs) = match stage {
        Stage::Can => {
            model.set_frozen(Stage::Can, false);
            (train.inputs.clone(), val.inputs.clone())
        }
        Stage::Cmn => {
            if !model.can_trained() {
                return Err(Error::Training("the CMN stage needs a trained CAN stage first".into()));
            }
            model.set_frozen(Stage::Can, true);
            (model.predict_can(&train.inputs)?, model.predict_can(&val.inputs)?)
        }
    };
    let other = match stage {
        Stage::Can => Stage::Cmn,
        Stage::Cmn => Stage::Can,
    };
    let previously_frozen: Vec<bool> = model
        .stage_ids(other)
        .iter()
        .map(|&id| model.store.get(id).frozen)
        .collect();
    model.set_frozen(other, true);
    model.set_frozen(stage, false);

    let result = run_epochs(
        model,
        stage,
        &train_inputs,
        &train.targets,
        &val_inputs,
        &val.targets,
        config,
    );

    if stage == Stage::Can {
        for (id, frozen) in model.stage_ids(other).into_iter().zip(previously_frozen) {
            model.store.get_mut(id).frozen = frozen;
        }
    }
    let trace = result?;
    model.mark_trained(stage);
    Ok(trace)
}

fn run_epochs(
    model: &mut MbaModel,
    stage: Stage,
    inputs: &Tensor,
    targets: &Tensor,
    val_inputs: &Tensor,
    val_targets: &Tensor,
    config: &TrainConfig,
) -> Result<Vec<LossRecord>> {
    let n = inputs.dims()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::with_betas(config.schedule.initial_rate, config.beta1, config.beta2, 1e-8)?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    let momentum = model.config.bn_momentum;
    for epoch in 0..config.epochs {
        adam.learning_rate = config.schedule.rate_at(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, idx) in order.chunks(config.batch_size).enumerate() {
            let diag = |e: Error| match e {
                Error::NonFinite { op } => Error::Training(format!(
                    "{stage} stage: non-finite value in {op} at epoch {epoch}, step {step}"
                )),
                Error::NonFiniteGradient { name, index, value } => Error::Training(format!(
                    "{stage} stage: gradient of {name}[{index}] is {value} at epoch {epoch}, step {step}"
                )),
                other => other,
            };
            let x = inputs.gather_leading(idx)?;
            let t = targets.gather_leading(idx)?;
            let mut g = Graph::new();
            let xn = g.constant(x)?;
            let tn = g.constant(t)?;
            let out = match stage {
                Stage::Can => model.can_forward(&mut g, xn),
                Stage::Cmn => model.cmn_forward(&mut g, xn, BnMode::Train),
            }
            .map_err(diag)?;
            let loss = g.half_mse(out, tn).map_err(diag)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(diag(Error::NonFinite { op: "loss".into() }));
            }
            total += value * idx.len() as f64;
            g.backward(loss).map_err(diag)?;
            model.store.zero_grads();
            g.accumulate_param_grads(&mut model.store)?;
            adam.step_store(&mut model.store).map_err(diag)?;
            g.commit_running_stats(&mut model.store, momentum);
        }
        model.store.zero_grads();
        let val_out = match stage {
            Stage::Can => model.predict_can(val_inputs)?,
            Stage::Cmn => model.predict_cmn(val_inputs)?,
        };
        trace.push(LossRecord {
            epoch,
            stage,
            train_loss: total / n as f64,
            val_nmse: batch_nmse(val_targets, &val_out)?,
        });
    }
    Ok(trace)
}
