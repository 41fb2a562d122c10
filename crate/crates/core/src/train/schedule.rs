//! Pretraining schedule, learning-rate decay and early stopping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSchedule {
    pub total_steps: u64,
    pub base_lr: f64,
    /// Micro-batches per optimizer step.
    pub accumulation_steps: usize,
    /// Bytes of packed sequence per optimizer step.
    pub batch_bytes: usize,
    pub sequence_length: usize,
    pub log_every: u64,
    /// Write a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for PretrainSchedule {
    fn default() -> Self {
        Self::desk()
    }
}

impl PretrainSchedule {
    /// 2k steps of 4 x 1024-byte sequences, one per micro-batch.
    pub fn desk() -> Self {
        Self {
            total_steps: 2_000,
            base_lr: 1e-3,
            accumulation_steps: 4,
            batch_bytes: 4 * 1024,
            sequence_length: 1024,
            log_every: 10,
            checkpoint_every: 0,
            seed: 0,
        }
    }

    /// Full-scale shape: 1M steps of 2^16 bytes. The step is split into 64
    /// single-sequence micro-batches, the finest split 64 sequences allow.
    pub fn full_scale() -> Self {
        Self {
            total_steps: 1_000_000,
            base_lr: 1e-3,
            accumulation_steps: 64,
            batch_bytes: 1 << 16,
            sequence_length: 1024,
            log_every: 100,
            checkpoint_every: 10_000,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sequence_length == 0 || self.batch_bytes == 0 || !self.batch_bytes.is_multiple_of(self.sequence_length) {
            return Err(Error::config(format!(
                "batch_bytes ({}) must be a positive multiple of sequence_length ({})",
                self.batch_bytes, self.sequence_length
            )));
        }
        if self.accumulation_steps == 0 || !self.examples_per_step().is_multiple_of(self.accumulation_steps) {
            return Err(Error::config(format!(
                "{} sequences per step cannot be split into {} equal micro-batches",
                self.examples_per_step(),
                self.accumulation_steps
            )));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("base_lr must be positive"));
        }
        Ok(())
    }

    pub fn examples_per_step(&self) -> usize {
        self.batch_bytes / self.sequence_length.max(1)
    }

    pub fn micro_batch_size(&self) -> usize {
        self.examples_per_step() / self.accumulation_steps.max(1)
    }
}

/// `base_lr * (1 - step / total_steps)`.
///
/// The second half of the schedule is computed as `base_lr - lr(T - step)`;
/// that subtraction is exact, so `lr(a) + lr(T - a) == base_lr` holds
/// bit for bit.
pub fn linear_decay_lr(step: u64, schedule: &PretrainSchedule) -> Result<f64> {
    let t = schedule.total_steps;
    if t == 0 || step > t {
        return Err(Error::config(format!("step {step} outside the schedule [0, {t}]")));
    }
    let first_half = |a: u64| (t - a) as f64 / t as f64 * schedule.base_lr;
    if 2 * step <= t {
        Ok(first_half(step))
    } else {
        Ok(schedule.base_lr - first_half(t - step))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EarlyStopDecision {
    Continue { improved: bool },
    Stop,
}

/// Patience counter over validation evaluations. Only a strict improvement
/// resets it; training stops once `patience` evaluations in a row fail to
/// improve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopState {
    pub patience: usize,
    pub higher_is_better: bool,
    pub best_metric: Option<f64>,
    /// Evaluation index (0-based) of the best metric.
    pub best_eval: Option<usize>,
    pub evals_since_improvement: usize,
    pub evals: usize,
}

impl EarlyStopState {
    pub fn new(patience: usize, higher_is_better: bool) -> Result<Self> {
        if patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        Ok(Self {
            patience,
            higher_is_better,
            best_metric: None,
            best_eval: None,
            evals_since_improvement: 0,
            evals: 0,
        })
    }

    pub fn update(&mut self, metric: f64) -> Result<EarlyStopDecision> {
        if !metric.is_finite() {
            return Err(Error::NonFinite(format!("validation metric {metric}")));
        }
        let improved = match self.best_metric {
            None => true,
            Some(b) if self.higher_is_better => metric > b,
            Some(b) => metric < b,
        };
        if improved {
            self.best_metric = Some(metric);
            self.best_eval = Some(self.evals);
            self.evals_since_improvement = 0;
        } else {
            self.evals_since_improvement += 1;
        }
        self.evals += 1;
        if self.evals_since_improvement >= self.patience {
            Ok(EarlyStopDecision::Stop)
        } else {
            Ok(EarlyStopDecision::Continue { improved })
        }
    }
}

/// 1-based index of the evaluation at which training stops, if it does.
pub fn stop_point(metrics: &[f64], patience: usize, higher_is_better: bool) -> Result<Option<usize>> {
    let mut s = EarlyStopState::new(patience, higher_is_better)?;
    for (i, &m) in metrics.iter().enumerate() {
        if s.update(m)? == EarlyStopDecision::Stop {
            return Ok(Some(i + 1));
        }
    }
    Ok(None)
}
