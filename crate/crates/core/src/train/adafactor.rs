//! Adafactor without first moment: factored second-moment estimates for
//! matrices, a full estimate for vectors, and RMS update clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::NamedTensor;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdafactorConfig {
    /// Second-moment decay is `1 - t^(-decay_rate)`.
    pub decay_rate: f64,
    /// Added to squared gradients.
    pub eps1: f64,
    /// Floor on the parameter RMS when `scale_parameter` is set.
    pub eps2: f64,
    pub clip_threshold: f64,
    /// Scale the step by `max(eps2, rms(param))`.
    pub scale_parameter: bool,
}

impl Default for AdafactorConfig {
    fn default() -> Self {
        Self {
            decay_rate: 0.8,
            eps1: 1e-30,
            eps2: 1e-3,
            clip_threshold: 1.0,
            scale_parameter: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Moment<T> {
    /// Exponential averages of row and column means of `g^2 + eps1`.
    Factored {
        row: Vec<T>,
        col: Vec<T>,
    },
    Full(Vec<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adafactor<T> {
    pub config: AdafactorConfig,
    step: u64,
    moments: Vec<Moment<T>>,
}

impl<T: Float> Adafactor<T> {
    /// Zero state shaped after `params`; rank-2 tensors are factored.
    pub fn new(config: AdafactorConfig, params: &[Tensor<T>]) -> Self {
        let moments = params
            .iter()
            .map(|p| match p.shape() {
                [r, c] => Moment::Factored {
                    row: vec![T::zero(); *r],
                    col: vec![T::zero(); *c],
                },
                _ => Moment::Full(vec![T::zero(); p.numel()]),
            })
            .collect();
        Self { config, step: 0, moments }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Decay for the step about to be taken (`t` is 1-based).
    pub fn beta2(&self, t: u64) -> f64 {
        1.0 - (t as f64).powf(-self.config.decay_rate)
    }

    /// One update `p -= lr * clip(g / sqrt(v_hat))`.
    pub fn update(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != self.moments.len() || grads.len() != params.len() {
            return Err(Error::Shape {
                op: "adafactor",
                lhs: vec![params.len(), self.moments.len()],
                rhs: vec![grads.len()],
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adafactor",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {i}")));
            }
        }
        self.step += 1;
        let beta = self.beta2(self.step);
        let cfg = self.config.clone();
        for ((p, g), m) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            let gd: Vec<f64> = g.data().iter().map(|v| v.as_f64()).collect();
            let mut u = vec![0.0f64; gd.len()];
            match m {
                Moment::Factored { row, col } => {
                    let (r, c) = (row.len(), col.len());
                    for (i, rv) in row.iter_mut().enumerate() {
                        let mean = gd[i * c..(i + 1) * c].iter().map(|x| x * x + cfg.eps1).sum::<f64>() / c as f64;
                        *rv = T::of(beta * rv.as_f64() + (1.0 - beta) * mean);
                    }
                    for (j, cv) in col.iter_mut().enumerate() {
                        let mean = (0..r).map(|i| gd[i * c + j] * gd[i * c + j] + cfg.eps1).sum::<f64>() / r as f64;
                        *cv = T::of(beta * cv.as_f64() + (1.0 - beta) * mean);
                    }
                    // outer(row, col) / mean(row), the rank-1 reconstruction
                    let row_mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / r as f64;
                    for i in 0..r {
                        for j in 0..c {
                            let v = row[i].as_f64() * col[j].as_f64() / row_mean;
                            u[i * c + j] = gd[i * c + j] / v.sqrt();
                        }
                    }
                }
                Moment::Full(v) => {
                    for ((vv, &x), uu) in v.iter_mut().zip(&gd).zip(u.iter_mut()) {
                        let nv = beta * vv.as_f64() + (1.0 - beta) * (x * x + cfg.eps1);
                        *vv = T::of(nv);
                        *uu = x / vv.as_f64().sqrt();
                    }
                }
            }
            let rms = (u.iter().map(|x| x * x).sum::<f64>() / u.len().max(1) as f64).sqrt();
            let denom = (rms / cfg.clip_threshold).max(1.0);
            let scale = if cfg.scale_parameter { lr * p.rms().max(cfg.eps2) } else { lr };
            for (pv, &uu) in p.data_mut().iter_mut().zip(&u) {
                *pv = T::of(pv.as_f64() - scale * (uu / denom));
            }
        }
        Ok(())
    }

    /// State as named f32 tensors: `{name}.adafactor_row` / `_col` for
    /// factored parameters, `{name}.adafactor_v` otherwise.
    pub fn state_tensors(&self, names: &[String]) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for (name, m) in names.iter().zip(&self.moments) {
            let vec = |v: &[T]| Tensor::new(vec![v.len()], v.iter().map(|x| x.as_f64() as f32).collect()).unwrap();
            match m {
                Moment::Factored { row, col } => {
                    out.push(NamedTensor {
                        name: format!("{name}.adafactor_row"),
                        tensor: vec(row),
                    });
                    out.push(NamedTensor {
                        name: format!("{name}.adafactor_col"),
                        tensor: vec(col),
                    });
                }
                Moment::Full(v) => out.push(NamedTensor {
                    name: format!("{name}.adafactor_v"),
                    tensor: vec(v),
                }),
            }
        }
        out
    }

    /// Rebuilds the optimizer from [`Adafactor::state_tensors`] output.
    pub fn restore(config: AdafactorConfig, params: &[Tensor<T>], names: &[String], step: u64, state: &[NamedTensor]) -> Result<Self> {
        let mut opt = Self::new(config, params);
        opt.step = step;
        let find = |n: String, len: usize| -> Result<Vec<T>> {
            let t = state
                .iter()
                .find(|s| s.name == n)
                .ok_or_else(|| Error::data(format!("optimizer state `{n}` missing")))?;
            if t.tensor.numel() != len {
                return Err(Error::data(format!("optimizer state `{n}` has the wrong size")));
            }
            Ok(t.tensor.data().iter().map(|&x| T::of(x as f64)).collect())
        };
        for (name, m) in names.iter().zip(&mut opt.moments) {
            match m {
                Moment::Factored { row, col } => {
                    *row = find(format!("{name}.adafactor_row"), row.len())?;
                    *col = find(format!("{name}.adafactor_col"), col.len())?;
                }
                Moment::Full(v) => *v = find(format!("{name}.adafactor_v"), v.len())?,
            }
        }
        Ok(opt)
    }
}
