//! Span-denoising pretraining loop with gradient accumulation, linear LR
//! decay and resumable checkpoints.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::codec::PretrainExample;
use crate::error::{Error, Result};
use crate::model::{Checkpoint, GradSum, Model, ModelConfig};
use crate::rng::{derived_rng, Rng};
use crate::tensor::Float;

use super::adafactor::{Adafactor, AdafactorConfig};
use super::schedule::{linear_decay_lr, PretrainSchedule};

/// Token-weighted gradient over `micro_batches`, which must all hold the
/// same number of examples. Equals the gradient of the whole batch's
/// mean loss.
pub fn accumulate_gradients<T: Float>(
    model: &Model<T>,
    micro_batches: &[&[PretrainExample]],
    mut dropout: Option<&mut Rng>,
) -> Result<GradSum<T>> {
    let first = micro_batches
        .first()
        .ok_or_else(|| Error::Empty("no micro-batches to accumulate".into()))?;
    if let Some(bad) = micro_batches.iter().find(|m| m.len() != first.len()) {
        return Err(Error::Shape {
            op: "accumulate_and_step",
            lhs: vec![first.len()],
            rhs: vec![bad.len()],
        });
    }
    let mut total = GradSum::zeros(model);
    for mb in micro_batches {
        total.merge(&model.batch_grad(mb, dropout.as_deref_mut())?)?;
    }
    Ok(total)
}

/// Accumulates over the micro-batches and applies one optimizer step.
/// Returns the mean loss of the batch before the update.
pub fn accumulate_and_step<T: Float>(
    model: &mut Model<T>,
    micro_batches: &[&[PretrainExample]],
    optimizer: &mut Adafactor<T>,
    lr: f64,
    dropout: Option<&mut Rng>,
) -> Result<f64> {
    let g = accumulate_gradients(model, micro_batches, dropout)?;
    let loss = g.mean_loss();
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("batch loss {loss}")));
    }
    optimizer.update(model.params_mut(), &g.mean_grads(), lr)?;
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Optimizer steps completed, counting this one.
    pub step: u64,
    /// Mean target loss of this step's batch before the update.
    pub loss: f64,
    pub lr: f64,
}

#[derive(Serialize, Deserialize)]
struct PretrainState {
    kind: String,
    model_seed: u64,
    schedule: PretrainSchedule,
    optimizer: AdafactorConfig,
}

/// Pretraining state machine. The batch for step `s` is a pure function
/// of `(schedule.seed, s)`, so a run resumed from a checkpoint replays the
/// uninterrupted run exactly.
pub struct Pretrainer {
    model: Model<f32>,
    optimizer: Adafactor<f32>,
    schedule: PretrainSchedule,
    model_seed: u64,
    step: u64,
    epoch_order: Option<(u64, Vec<usize>)>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Pretrainer {
    pub fn new(config: ModelConfig, schedule: PretrainSchedule, model_seed: u64, optimizer: AdafactorConfig) -> Result<Self> {
        schedule.validate()?;
        let model = Model::init(config, model_seed)?;
        let optimizer = Adafactor::new(optimizer, model.params());
        Ok(Self {
            model,
            optimizer,
            schedule,
            model_seed,
            step: 0,
            epoch_order: None,
            checkpoint_dir: None,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let state: PretrainState =
            serde_json::from_value(ckpt.state.clone()).map_err(|e| Error::data(format!("checkpoint has no pretraining state: {e}")))?;
        state.schedule.validate()?;
        let model = ckpt.model()?;
        let optimizer = Adafactor::restore(state.optimizer, model.params(), model.names(), ckpt.step, &ckpt.optimizer)?;
        Ok(Self {
            model,
            optimizer,
            schedule: state.schedule,
            model_seed: state.model_seed,
            step: ckpt.step,
            epoch_order: None,
            checkpoint_dir: None,
        })
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn schedule(&self) -> &PretrainSchedule {
        &self.schedule
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let state = PretrainState {
            kind: "pretrain".into(),
            model_seed: self.model_seed,
            schedule: self.schedule.clone(),
            optimizer: self.optimizer.config.clone(),
        };
        Checkpoint::from_model(
            &self.model,
            self.step,
            serde_json::to_value(state).expect("serializable state"),
            self.optimizer.state_tensors(self.model.names()),
        )
    }

    fn example_index(&mut self, position: u64, n: usize) -> usize {
        let epoch = position / n as u64;
        if self.epoch_order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut derived_rng(self.schedule.seed, epoch));
            self.epoch_order = Some((epoch, order));
        }
        self.epoch_order.as_ref().expect("set above").1[(position % n as u64) as usize]
    }

    /// Examples of step `s`, cycling through reshuffled epochs.
    fn batch_for(&mut self, s: u64, examples: &[PretrainExample]) -> Vec<PretrainExample> {
        let per_step = self.schedule.examples_per_step() as u64;
        (0..per_step)
            .map(|i| examples[self.example_index(s * per_step + i, examples.len())].clone())
            .collect()
    }

    /// One optimizer step.
    pub fn train_step(&mut self, examples: &[PretrainExample]) -> Result<StepRecord> {
        if examples.is_empty() {
            return Err(Error::Empty("no pretraining examples".into()));
        }
        let s = self.step;
        let lr = linear_decay_lr(s, &self.schedule)?;
        let batch = self.batch_for(s, examples);
        let micro: Vec<&[PretrainExample]> = batch.chunks(self.schedule.micro_batch_size()).collect();
        let loss = accumulate_and_step(&mut self.model, &micro, &mut self.optimizer, lr, None).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("step {}: {m}", s + 1)),
            other => other,
        })?;
        self.step += 1;
        let record = StepRecord { step: self.step, loss, lr };
        if self.step.is_multiple_of(self.schedule.log_every.max(1)) {
            log::info!("step {} loss {:.4} lr {:.3e}", record.step, record.loss, record.lr);
        }
        if let Some(dir) = &self.checkpoint_dir {
            let every = self.schedule.checkpoint_every;
            if every > 0 && self.step.is_multiple_of(every) {
                self.checkpoint().save(dir.join(format!("step-{:08}.ckpt", self.step)))?;
            }
        }
        Ok(record)
    }

    /// Trains until `total_steps`, or `until` if smaller, or until the
    /// observer returns `false`.
    pub fn run(
        &mut self,
        examples: &[PretrainExample],
        until: Option<u64>,
        mut observer: impl FnMut(&StepRecord) -> bool,
    ) -> Result<Vec<StepRecord>> {
        let end = until.unwrap_or(u64::MAX).min(self.schedule.total_steps);
        let mut curve = Vec::new();
        while self.step < end {
            let r = self.train_step(examples)?;
            let go_on = observer(&r);
            curve.push(r);
            if !go_on {
                break;
            }
        }
        Ok(curve)
    }
}

pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub curve: Vec<StepRecord>,
}

/// Full run from a fresh model. `total_steps = 0` returns the initial
/// checkpoint.
pub fn pretrain(
    examples: &[PretrainExample],
    config: ModelConfig,
    schedule: &PretrainSchedule,
    model_seed: u64,
) -> Result<PretrainOutcome> {
    let mut t = Pretrainer::new(config, schedule.clone(), model_seed, AdafactorConfig::default())?;
    let curve = t.run(examples, None, |_| true)?;
    Ok(PretrainOutcome {
        checkpoint: t.checkpoint(),
        curve,
    })
}

/// Trailing moving average with window `w`.
pub fn smoothed(values: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (i, &v) in values.iter().enumerate() {
        acc += v;
        if i >= w {
            acc -= values[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}
