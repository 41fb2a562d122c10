//! Supervised finetuning with periodic validation, early stopping and
//! multi-seed test reporting.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate_task, MetricReport, Task, TaskDataset};
use crate::model::{Checkpoint, Model};
use crate::rng::{derive_seed, derived_rng};

use super::adafactor::{Adafactor, AdafactorConfig};
use super::pretrain::accumulate_and_step;
use super::schedule::{EarlyStopDecision, EarlyStopState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    /// Examples per micro-batch.
    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Validation cadence as a fraction of an epoch.
    pub eval_every_epochs: f64,
    pub patience: usize,
    pub seeds: Vec<u64>,
    pub optimizer: AdafactorConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self::nli()
    }
}

impl FinetuneConfig {
    pub fn nli() -> Self {
        Self {
            batch_size: 16,
            accumulation_steps: 4,
            lr: 1e-4,
            epochs: 10,
            eval_every_epochs: 0.2,
            patience: 5,
            seeds: vec![0, 1, 2],
            optimizer: AdafactorConfig::default(),
        }
    }

    pub fn qa() -> Self {
        Self {
            batch_size: 6,
            eval_every_epochs: 1.0,
            patience: 3,
            ..Self::nli()
        }
    }

    pub fn for_task(task: &Task) -> Self {
        match task.name() {
            "qa" => Self::qa(),
            _ => Self::nli(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.accumulation_steps == 0 {
            return Err(Error::config("batch_size and accumulation_steps must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be positive"));
        }
        if !(self.eval_every_epochs > 0.0 && self.eval_every_epochs.is_finite()) {
            return Err(Error::config("eval_every_epochs must be positive"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        Ok(())
    }

    pub fn examples_per_step(&self) -> usize {
        self.batch_size * self.accumulation_steps
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSplits {
    pub train: TaskDataset,
    pub validation: TaskDataset,
    pub test: TaskDataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub steps: u64,
    pub evals: Vec<EvalRecord>,
    pub best_step: u64,
    pub best_validation: f64,
    pub stopped_early: bool,
    /// Test metric of the best-validation parameters.
    pub test: MetricReport,
}

pub struct FinetuneOutcome {
    pub runs: Vec<SeedRun>,
    /// Mean test metric over seeds.
    pub report: MetricReport,
    /// Best-validation model of each seed, in seed order.
    pub best: Vec<Checkpoint>,
}

/// Optimizer steps per epoch and the validation interval in steps.
pub fn step_plan(train_len: usize, cfg: &FinetuneConfig) -> (u64, u64) {
    let per_epoch = train_len.div_ceil(cfg.examples_per_step()).max(1) as u64;
    let every = ((cfg.eval_every_epochs * per_epoch as f64).ceil() as u64).max(1);
    (per_epoch, every)
}

/// Finetunes one copy of `start` for a single seed. The seed fixes data
/// order and dropout masks.
pub fn finetune_seed(
    start: &Model<f32>,
    splits: &TaskSplits,
    task: &Task,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<(SeedRun, Model<f32>)> {
    cfg.validate()?;
    let train = splits.train.training_examples(task)?;
    if train.is_empty() {
        return Err(Error::Empty("finetuning train split is empty".into()));
    }
    let mut model = start.clone();
    let mut opt = Adafactor::new(cfg.optimizer.clone(), model.params());
    let (per_epoch, every) = step_plan(train.len(), cfg);
    let total = per_epoch * cfg.epochs as u64;
    let per_step = cfg.examples_per_step();
    let order_seed = derive_seed(seed, 1);
    let dropout_seed = derive_seed(seed, 2);

    let mut early = EarlyStopState::new(cfg.patience, true)?;
    let mut evals = Vec::new();
    let mut best: Option<(u64, f64, Model<f32>)> = None;
    let mut stopped_early = false;
    let mut order: Vec<usize> = Vec::new();
    let mut step = 0u64;
    while step < total {
        let within = (step % per_epoch) as usize;
        if within == 0 {
            order = (0..train.len()).collect();
            order.shuffle(&mut derived_rng(order_seed, step / per_epoch));
        }
        let idx = &order[within * per_step..((within + 1) * per_step).min(train.len())];
        let batch: Vec<_> = idx.iter().map(|&i| train[i].clone()).collect();
        let micro: Vec<&[_]> = batch.chunks(cfg.batch_size).collect();
        let mut rng = derived_rng(dropout_seed, step);
        accumulate_and_step(&mut model, &micro, &mut opt, cfg.lr, Some(&mut rng))?;
        step += 1;

        if step.is_multiple_of(every) || step == total {
            let metric = evaluate_task(&model, &splits.validation, task)?.value;
            log::info!("seed {seed} step {step} validation {} {metric:.4}", task.metric());
            evals.push(EvalRecord { step, metric });
            let decision = early.update(metric)?;
            if matches!(decision, EarlyStopDecision::Continue { improved: true }) || best.is_none() {
                best = Some((step, metric, model.clone()));
            }
            if decision == EarlyStopDecision::Stop {
                stopped_early = true;
                break;
            }
        }
    }
    let (best_step, best_validation, best_model) = match best {
        Some(b) => b,
        None => {
            let metric = evaluate_task(&model, &splits.validation, task)?.value;
            evals.push(EvalRecord { step: 0, metric });
            (0, metric, model)
        }
    };
    let test = evaluate_task(&best_model, &splits.test, task)?;
    let run = SeedRun {
        seed,
        steps: step,
        evals,
        best_step,
        best_validation,
        stopped_early,
        test,
    };
    Ok((run, best_model))
}

/// Runs every seed in `cfg.seeds` from the same starting checkpoint.
pub fn finetune(start: &Checkpoint, splits: &TaskSplits, task: &Task, cfg: &FinetuneConfig) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let model = start.model()?;
    let mut runs = Vec::new();
    let mut best = Vec::new();
    for &seed in &cfg.seeds {
        let (run, m) = finetune_seed(&model, splits, task, cfg, seed)?;
        let state = serde_json::json!({
            "kind": "finetune",
            "task": task,
            "seed": seed,
            "best_step": run.best_step,
            "best_validation": run.best_validation,
        });
        best.push(Checkpoint::from_model(&m, run.best_step, state, Vec::new()));
        runs.push(run);
    }
    let report = MetricReport::from_seeds(task, runs.iter().map(|r| r.test.value).collect(), splits.test.len());
    Ok(FinetuneOutcome { runs, report, best })
}
