//! Finite-difference gradient checking against the tape.

use rand::seq::index::sample;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::Result;
use crate::rng::{derived_rng, Rng};

use super::kernels::AttnMask;
use super::scalar::{DType, Float};
use super::tape::{Reduction, Tape, Var};
use super::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum allowed element-wise relative error.
    pub tolerance: f64,
    /// Denominator floor: relative error is `|a - n| / max(|a|, |n|, abs_floor)`.
    pub abs_floor: f64,
    /// Check at most this many coordinates per input (sampled), all if `None`.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl GradCheckConfig {
    pub fn for_dtype(dtype: DType) -> Self {
        match dtype {
            DType::F32 => Self {
                step: 1e-3,
                tolerance: 1e-3,
                abs_floor: 1e-3,
                max_coords_per_input: None,
                seed: 0,
            },
            DType::F64 => Self {
                step: 1e-6,
                tolerance: 1e-4,
                abs_floor: 1e-4,
                max_coords_per_input: None,
                seed: 0,
            },
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub dtype: DType,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` with central
/// differences of `f` itself, element by element.
pub fn grad_check<T, F>(name: &str, f: F, inputs: &[Tensor<T>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    T: Float,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(&f, inputs)?;
    let eval = |point: &[Tensor<T>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = point.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar_f64(out))
    };
    compare(name, T::DTYPE, &analytic, inputs.to_vec(), eval, cfg)
}

/// Like [`grad_check`], but the central differences come from `reference`,
/// the same function built on a 64-bit tape at the inputs widened to f64.
/// Used for 32-bit checks so that f32 round-off in the two perturbed
/// forward passes does not swamp the difference quotient.
pub fn grad_check_with_reference<T, F, G>(
    name: &str,
    f: F,
    reference: G,
    inputs: &[Tensor<T>],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    T: Float,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(&f, inputs)?;
    let eval = |point: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = point.iter().map(|t| tape.constant(t.clone())).collect();
        let out = reference(&mut tape, &vars)?;
        Ok(tape.scalar_f64(out))
    };
    let point: Vec<Tensor<f64>> = inputs.iter().map(|t| t.cast()).collect();
    compare(name, T::DTYPE, &analytic, point, eval, cfg)
}

fn analytic_grads<T, F>(f: &F, inputs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>>
where
    T: Float,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    Ok(vars.iter().map(|&v| grads.wrt(v)).collect())
}

fn compare<T, P, E>(
    name: &str,
    dtype: DType,
    analytic: &[Tensor<T>],
    mut point: Vec<Tensor<P>>,
    eval: E,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    T: Float,
    P: Float,
    E: Fn(&[Tensor<P>]) -> Result<f64>,
{
    let mut rng = derived_rng(cfg.seed, 0x6772_6164);
    let (mut max_rel, mut max_abs, mut checked) = (0.0f64, 0.0f64, 0usize);
    for i in 0..point.len() {
        let numel = point[i].numel();
        let coords: Vec<usize> = match cfg.max_coords_per_input {
            Some(limit) if limit < numel => sample(&mut rng, numel, limit).into_vec(),
            _ => (0..numel).collect(),
        };
        for c in coords {
            let orig = point[i].data()[c];
            point[i].data_mut()[c] = P::of(orig.as_f64() + cfg.step);
            let plus = eval(&point)?;
            point[i].data_mut()[c] = P::of(orig.as_f64() - cfg.step);
            let minus = eval(&point)?;
            point[i].data_mut()[c] = orig;
            // the effective step is what the element type could represent
            let h_plus = P::of(orig.as_f64() + cfg.step).as_f64() - orig.as_f64();
            let h_minus = orig.as_f64() - P::of(orig.as_f64() - cfg.step).as_f64();
            let numeric = (plus - minus) / (h_plus + h_minus);
            let a = analytic[i].data()[c].as_f64();
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(cfg.abs_floor);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        dtype,
        checked,
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        tolerance: cfg.tolerance,
        passed: max_rel <= cfg.tolerance,
    })
}

type CheckFn<T> = Box<dyn Fn(&mut Tape<T>, &[Var]) -> Result<Var>>;

/// One registered op check: inputs plus a scalar-valued closure.
pub struct OpCheck<T> {
    pub name: &'static str,
    pub inputs: Vec<Tensor<T>>,
    pub f: CheckFn<T>,
}

fn normal<T: Float>(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::of(z * std)
    })
}

/// `sum(out * weights)` with fixed pseudo-random weights, so every output
/// element gets a distinct upstream gradient.
fn project<T: Float>(tape: &mut Tape<T>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let numel: usize = shape.iter().product();
    let mut rng = derived_rng(seed, 0x7072_6f6a);
    let w = normal::<T>(&mut rng, &shape, 1.0 / (numel as f64).sqrt());
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Every differentiable tape op on small randomized shapes.
pub fn op_checks<T: Float>(seed: u64) -> Vec<OpCheck<T>> {
    let mut rng = derived_rng(seed, 0x6f70_7321);
    let mut checks: Vec<OpCheck<T>> = Vec::new();
    let s = seed;

    checks.push(OpCheck {
        name: "matmul",
        inputs: vec![normal(&mut rng, &[5, 4], 1.0), normal(&mut rng, &[4, 3], 1.0)],
        f: Box::new(move |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, s)
        }),
    });
    checks.push(OpCheck {
        name: "matmul_chain",
        inputs: vec![
            normal(&mut rng, &[5, 4], 1.0),
            normal(&mut rng, &[4, 4], 0.5),
            normal(&mut rng, &[4, 2], 0.5),
        ],
        f: Box::new(move |t, v| {
            let y = t.matmul(v[0], v[1])?;
            let y = t.matmul(y, v[2])?;
            project(t, y, s)
        }),
    });
    checks.push(OpCheck {
        name: "bmm",
        inputs: vec![normal(&mut rng, &[2, 3, 4], 1.0), normal(&mut rng, &[2, 4, 5], 1.0)],
        f: Box::new(move |t, v| {
            let y = t.bmm(v[0], v[1], false)?;
            project(t, y, s)
        }),
    });
    checks.push(OpCheck {
        name: "bmm_transposed",
        inputs: vec![normal(&mut rng, &[2, 3, 4], 1.0), normal(&mut rng, &[2, 5, 4], 1.0)],
        f: Box::new(move |t, v| {
            let y = t.bmm(v[0], v[1], true)?;
            project(t, y, s)
        }),
    });
    checks.push(OpCheck {
        name: "add",
        inputs: vec![normal(&mut rng, &[3, 4], 1.0), normal(&mut rng, &[3, 4], 1.0)],
        f: Box::new(move |t, v| {
            let y = t.add(v[0], v[1])?;
            let y = t.mul(y, v[0])?;
            project(t, y, s)
        }),
    });
    checks.push(OpCheck {
        name: "mul",
        inputs: vec![normal(&mut rng, &[3, 4], 1.0), normal(&mut rng, &[3, 4], 1.0)],
        f: Box::new(move |t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y, s)
        }),
    });
    checks.push(OpCheck {
        name: "scale",
        inputs: vec![normal(&mut rng, &[6], 1.0)],
        f: Box::new(move |t, v| {
            let y = t.scale(v[0], -0.75);
            let y = t.mul(y, v[0])?;
            project(t, y, s)
        }),
    });
    checks.push(OpCheck {
        name: "embed_lookup",
        inputs: vec![normal(&mut rng, &[7, 4], 1.0)],
        f: Box::new(move |t, v| {
            let y = t.embed(v[0], &[3, 0, 3, 6, 1])?;
            project(t, y, s)
        }),
    });
    checks.push(OpCheck {
        name: "rms_norm",
        inputs: vec![normal(&mut rng, &[3, 5], 1.0), normal(&mut rng, &[5], 1.0)],
        f: Box::new(move |t, v| {
            let y = t.rms_norm(v[0], v[1], 1e-6)?;
            project(t, y, s)
        }),
    });
    checks.push(OpCheck {
        name: "softmax",
        inputs: vec![normal(&mut rng, &[2, 3, 4], 1.0)],
        f: Box::new(move |t, v| {
            let y = t.softmax(v[0], &AttnMask::none())?;
            project(t, y, s)
        }),
    });
    checks.push(OpCheck {
        name: "softmax_causal",
        inputs: vec![normal(&mut rng, &[2, 4, 4], 1.0)],
        f: Box::new(move |t, v| {
            let y = t.softmax(v[0], &AttnMask::causal())?;
            project(t, y, s)
        }),
    });
    checks.push(OpCheck {
        name: "softmax_key_mask",
        inputs: vec![normal(&mut rng, &[2, 3, 4], 1.0)],
        f: Box::new(move |t, v| {
            let y = t.softmax(v[0], &AttnMask::keys(vec![true, false, true, true]))?;
            project(t, y, s)
        }),
    });
    checks.push(OpCheck {
        name: "relative_position_bias",
        inputs: vec![normal(&mut rng, &[8, 2], 1.0)],
        f: Box::new(move |t, v| {
            let y = t.relative_position_bias(v[0], 5, 6, 0, true, 16)?;
            let y = t.mul(y, y)?;
            project(t, y, s)
        }),
    });
    checks.push(OpCheck {
        name: "gated_activation",
        inputs: vec![normal(&mut rng, &[3, 4], 1.0), normal(&mut rng, &[3, 4], 1.0)],
        f: Box::new(move |t, v| {
            let y = t.gated_gelu(v[0], v[1])?;
            project(t, y, s)
        }),
    });
    checks.push(OpCheck {
        name: "dropout",
        inputs: vec![normal(&mut rng, &[2, 5], 1.0)],
        f: Box::new(move |t, v| {
            let mask: Vec<T> = (0..10).map(|i| if i % 3 == 0 { T::zero() } else { T::of(1.25) }).collect();
            let y = t.dropout_with_mask(v[0], mask);
            let y = t.mul(y, v[0])?;
            project(t, y, s)
        }),
    });
    checks.push(OpCheck {
        name: "split_merge_heads",
        inputs: vec![normal(&mut rng, &[3, 6], 1.0)],
        f: Box::new(move |t, v| {
            let h = t.split_heads(v[0], 2)?;
            let h2 = t.mul(h, h)?;
            let y = t.merge_heads(h2)?;
            project(t, y, s)
        }),
    });
    checks.push(OpCheck {
        name: "cross_entropy",
        inputs: vec![normal(&mut rng, &[3, 4], 1.0)],
        f: Box::new(|t, v| t.cross_entropy(v[0], &[2, 0, 1], Some(0), Reduction::Mean)),
    });
    checks.push(OpCheck {
        name: "attention_bias_causal",
        inputs: vec![
            normal(&mut rng, &[4, 6], 1.0),
            normal(&mut rng, &[4, 6], 1.0),
            normal(&mut rng, &[4, 6], 1.0),
            normal(&mut rng, &[8, 2], 1.0),
        ],
        f: Box::new(move |t, v| {
            let b = t.relative_position_bias(v[3], 4, 4, 0, false, 16)?;
            let y = t.attention(v[0], v[1], v[2], Some(b), 2, &AttnMask::causal())?;
            project(t, y, s)
        }),
    });
    checks.push(OpCheck {
        name: "attention_key_mask",
        inputs: vec![
            normal(&mut rng, &[3, 4], 1.0),
            normal(&mut rng, &[5, 4], 1.0),
            normal(&mut rng, &[5, 4], 1.0),
        ],
        f: Box::new(move |t, v| {
            let mask = AttnMask::keys(vec![true, true, false, true, false]);
            let y = t.attention(v[0], v[1], v[2], None, 2, &mask)?;
            project(t, y, s)
        }),
    });
    checks.push(OpCheck {
        name: "sum_of_softmax",
        inputs: vec![normal(&mut rng, &[2, 5], 1.0)],
        f: Box::new(|t, v| {
            let y = t.softmax(v[0], &AttnMask::none())?;
            Ok(t.sum(y))
        }),
    });
    checks
}

/// Runs every registered op check at the precision's default settings.
pub fn check_all_ops<T: Float>(seed: u64) -> Result<Vec<GradCheckReport>> {
    let cfg = GradCheckConfig {
        seed,
        ..GradCheckConfig::for_dtype(T::DTYPE)
    };
    let checks = op_checks::<T>(seed);
    if T::DTYPE == DType::F64 {
        return checks.iter().map(|c| grad_check(c.name, &c.f, &c.inputs, &cfg)).collect();
    }
    checks
        .iter()
        .zip(op_checks::<f64>(seed))
        .map(|(c, r)| grad_check_with_reference(c.name, &c.f, &r.f, &c.inputs, &cfg))
        .collect()
}
