//! Byte-level encoder-decoder transformer: configuration, parameter
//! layout, training forward pass and greedy decoding.

mod checkpoint;
mod decode;
mod forward;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::{PretrainExample, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::rng::{derived_rng, Rng};
use crate::tensor::gradcheck::{grad_check, grad_check_with_reference, GradCheckConfig, GradCheckReport};
use crate::tensor::{DType, Float, Tape, Tensor, Var};

pub use checkpoint::{Checkpoint, NamedTensor, CHECKPOINT_VERSION};

pub const RMS_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub vocab_size: usize,
    pub dropout_rate: f64,
    pub max_sequence_length: usize,
    pub relative_attention_buckets: usize,
    pub relative_attention_max_distance: usize,
}

impl Default for ModelConfig {
    /// Desk-scale model, about 1.2M parameters.
    fn default() -> Self {
        Self {
            d_model: 128,
            num_heads: 4,
            d_ff: 256,
            encoder_layers: 4,
            decoder_layers: 2,
            vocab_size: VOCAB_SIZE,
            dropout_rate: 0.1,
            max_sequence_length: 2048,
            relative_attention_buckets: 32,
            relative_attention_max_distance: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "d_model ({}) must be a positive multiple of num_heads ({})",
                self.d_model, self.num_heads
            )));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return Err(Error::config("encoder and decoder need at least one layer each"));
        }
        if self.d_ff == 0 {
            return Err(Error::config("d_ff must be positive"));
        }
        if self.vocab_size != VOCAB_SIZE {
            return Err(Error::config(format!("vocab_size must be {VOCAB_SIZE}, got {}", self.vocab_size)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate must lie in [0, 1)"));
        }
        if self.relative_attention_buckets < 4 || self.relative_attention_max_distance <= self.relative_attention_buckets / 2 {
            return Err(Error::config(
                "need at least 4 relative buckets and max_distance above half the bucket count",
            ));
        }
        if self.max_sequence_length == 0 {
            return Err(Error::config("max_sequence_length must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }
}

/// Trainable scalar counts by group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    pub embedding: usize,
    pub lm_head: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub relative_bias: usize,
    pub final_norms: usize,
    pub total: usize,
}

/// Closed-form parameter count.
pub fn param_breakdown(cfg: &ModelConfig) -> ParamBreakdown {
    let (v, d, ff) = (cfg.vocab_size, cfg.d_model, cfg.d_ff);
    let embedding = v * d;
    let lm_head = v * d;
    let encoder_layers = cfg.encoder_layers * (4 * d * d + 3 * d * ff + 2 * d);
    let decoder_layers = cfg.decoder_layers * (8 * d * d + 3 * d * ff + 3 * d);
    let relative_bias = 2 * cfg.relative_attention_buckets * cfg.num_heads;
    let final_norms = 2 * d;
    ParamBreakdown {
        embedding,
        lm_head,
        encoder_layers,
        decoder_layers,
        relative_bias,
        final_norms,
        total: embedding + lm_head + encoder_layers + decoder_layers + relative_bias + final_norms,
    }
}

pub fn count_params(cfg: &ModelConfig) -> usize {
    param_breakdown(cfg).total
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal(f64),
    Ones,
}

#[derive(Clone, Debug)]
pub(crate) struct Attn {
    pub q: usize,
    pub k: usize,
    pub v: usize,
    pub o: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct Ffn {
    pub norm: usize,
    pub gate: usize,
    pub linear: usize,
    pub out: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct EncoderLayer {
    pub attn_norm: usize,
    pub attn: Attn,
    pub ffn: Ffn,
}

#[derive(Clone, Debug)]
pub(crate) struct DecoderLayer {
    pub self_norm: usize,
    pub self_attn: Attn,
    pub cross_norm: usize,
    pub cross_attn: Attn,
    pub ffn: Ffn,
}

/// Indices of every parameter in the flat parameter list.
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub embedding: usize,
    pub encoder_bias: usize,
    pub encoder: Vec<EncoderLayer>,
    pub encoder_norm: usize,
    pub decoder_bias: usize,
    pub decoder: Vec<DecoderLayer>,
    pub decoder_norm: usize,
    pub lm_head: usize,
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

struct Builder {
    specs: Vec<Spec>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(Spec { name, shape, init });
        self.specs.len() - 1
    }

    fn attn(&mut self, prefix: &str, d: usize) -> Attn {
        let s = Init::Normal(1.0 / (d as f64).sqrt());
        Attn {
            q: self.add(format!("{prefix}.q"), vec![d, d], s),
            k: self.add(format!("{prefix}.k"), vec![d, d], s),
            v: self.add(format!("{prefix}.v"), vec![d, d], s),
            o: self.add(format!("{prefix}.o"), vec![d, d], s),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, ff: usize) -> Ffn {
        Ffn {
            norm: self.add(format!("{prefix}.ffn_norm"), vec![d], Init::Ones),
            gate: self.add(format!("{prefix}.ffn.wi_gate"), vec![d, ff], Init::Normal(1.0 / (d as f64).sqrt())),
            linear: self.add(
                format!("{prefix}.ffn.wi_linear"),
                vec![d, ff],
                Init::Normal(1.0 / (d as f64).sqrt()),
            ),
            out: self.add(format!("{prefix}.ffn.wo"), vec![ff, d], Init::Normal(1.0 / (ff as f64).sqrt())),
        }
    }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, Vec<Spec>) {
    let (v, d, ff, h) = (cfg.vocab_size, cfg.d_model, cfg.d_ff, cfg.num_heads);
    let nb = cfg.relative_attention_buckets;
    let proj = Init::Normal(1.0 / (d as f64).sqrt());
    let mut b = Builder { specs: Vec::new() };
    let embedding = b.add("shared.embedding".into(), vec![v, d], Init::Normal(1.0));
    let encoder_bias = b.add("encoder.relative_bias".into(), vec![nb, h], proj);
    let encoder = (0..cfg.encoder_layers)
        .map(|i| {
            let p = format!("encoder.layers.{i}");
            EncoderLayer {
                attn_norm: b.add(format!("{p}.attn_norm"), vec![d], Init::Ones),
                attn: b.attn(&format!("{p}.attn"), d),
                ffn: b.ffn(&p, d, ff),
            }
        })
        .collect();
    let encoder_norm = b.add("encoder.final_norm".into(), vec![d], Init::Ones);
    let decoder_bias = b.add("decoder.relative_bias".into(), vec![nb, h], proj);
    let decoder = (0..cfg.decoder_layers)
        .map(|i| {
            let p = format!("decoder.layers.{i}");
            DecoderLayer {
                self_norm: b.add(format!("{p}.self_norm"), vec![d], Init::Ones),
                self_attn: b.attn(&format!("{p}.self_attn"), d),
                cross_norm: b.add(format!("{p}.cross_norm"), vec![d], Init::Ones),
                cross_attn: b.attn(&format!("{p}.cross_attn"), d),
                ffn: b.ffn(&p, d, ff),
            }
        })
        .collect();
    let decoder_norm = b.add("decoder.final_norm".into(), vec![d], Init::Ones);
    // small output projection so the untrained model starts near uniform
    let lm_head = b.add("lm_head".into(), vec![d, v], Init::Normal(1.0 / d as f64));
    let layout = Layout {
        embedding,
        encoder_bias,
        encoder,
        encoder_norm,
        decoder_bias,
        decoder,
        decoder_norm,
        lm_head,
    };
    (layout, b.specs)
}

/// Model parameters in a fixed, named order.
#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    layout: Layout,
}

/// Summed (not averaged) loss and gradients over a set of examples.
#[derive(Clone, Debug)]
pub struct GradSum<T> {
    pub loss_sum: f64,
    pub tokens: usize,
    pub grads: Vec<Tensor<T>>,
}

impl<T: Float> GradSum<T> {
    pub fn zeros(model: &Model<T>) -> Self {
        Self {
            loss_sum: 0.0,
            tokens: 0,
            grads: model.params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn merge(&mut self, other: &GradSum<T>) -> Result<()> {
        self.loss_sum += other.loss_sum;
        self.tokens += other.tokens;
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn mean_loss(&self) -> f64 {
        self.loss_sum / self.tokens.max(1) as f64
    }

    /// Token-weighted mean gradient.
    pub fn mean_grads(&self) -> Vec<Tensor<T>> {
        let s = T::of(1.0 / self.tokens.max(1) as f64);
        self.grads
            .iter()
            .map(|g| {
                let mut g = g.clone();
                g.scale_in_place(s);
                g
            })
            .collect()
    }
}

impl<T: Float> Model<T> {
    /// Deterministic initialisation: parameter `i` draws from the stream
    /// `(seed, i)`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(&config);
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for (i, s) in specs.into_iter().enumerate() {
            let mut rng = derived_rng(seed, i as u64);
            let t = match s.init {
                Init::Ones => Tensor::full(&s.shape, T::one()),
                Init::Normal(std) => Tensor::from_fn(&s.shape, |_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    T::of(z * std)
                }),
            };
            names.push(s.name);
            params.push(t);
        }
        Ok(Self {
            config,
            names,
            params,
            layout,
        })
    }

    /// Rebuilds a model from named tensors, checking names and shapes
    /// against the config.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(&config);
        if named.len() != specs.len() {
            return Err(Error::data(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for (spec, (name, t)) in specs.into_iter().zip(named) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(Error::data(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    spec.name,
                    spec.shape,
                    name,
                    t.shape()
                )));
            }
            names.push(name);
            params.push(t);
        }
        Ok(Self {
            config,
            names,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Float>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            layout: self.layout.clone(),
        }
    }

    /// Places every parameter on `tape`, as leaves when `trainable`.
    pub fn place(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    /// Builds the summed target cross-entropy of one example on `tape`,
    /// using `vars` as the parameters (in [`Model::names`] order).
    pub fn example_loss(&self, tape: &mut Tape<T>, vars: &[Var], example: &PretrainExample, dropout: Option<&mut Rng>) -> Result<Var> {
        forward::example_loss(self, tape, vars, example, dropout)
    }

    /// Decoder logits `[target_len, vocab]` for teacher-forced targets.
    pub fn logits(&self, input_ids: &[u32], target_ids: &[u32]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.place(&mut tape, false);
        let dec_in = forward::shift_right(target_ids);
        let out = forward::logits(self, &mut tape, &vars, input_ids, &dec_in, None)?;
        Ok(tape.value(out).clone())
    }

    /// Summed loss and gradients of one example.
    pub fn example_grad(&self, example: &PretrainExample, dropout: Option<&mut Rng>) -> Result<GradSum<T>> {
        let mut tape = Tape::new();
        let vars = self.place(&mut tape, true);
        let loss = self.example_loss(&mut tape, &vars, example, dropout)?;
        let loss_sum = tape.scalar_f64(loss);
        if !loss_sum.is_finite() {
            return Err(Error::NonFinite(format!("loss is {loss_sum}")));
        }
        let mut g = tape.backward(loss)?;
        Ok(GradSum {
            loss_sum,
            tokens: forward::counted_tokens(&example.target_ids),
            grads: vars.iter().map(|&v| g.take(v)).collect(),
        })
    }

    /// Summed loss and gradients over a batch, one tape per example.
    pub fn batch_grad(&self, batch: &[PretrainExample], mut dropout: Option<&mut Rng>) -> Result<GradSum<T>> {
        if batch.is_empty() {
            return Err(Error::Empty("batch has no examples".into()));
        }
        let mut total = GradSum::zeros(self);
        for ex in batch {
            let g = self.example_grad(ex, dropout.as_deref_mut())?;
            total.merge(&g)?;
        }
        Ok(total)
    }

    /// Mean cross-entropy over all non-padding target positions of the
    /// batch (no dropout).
    pub fn loss_on_batch(&self, batch: &[PretrainExample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Empty("batch has no examples".into()));
        }
        let (mut sum, mut tokens) = (0.0, 0usize);
        for ex in batch {
            let mut tape = Tape::new();
            let vars = self.place(&mut tape, false);
            let loss = self.example_loss(&mut tape, &vars, ex, None)?;
            sum += tape.scalar_f64(loss);
            tokens += forward::counted_tokens(&ex.target_ids);
        }
        let loss = sum / tokens as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss is {loss}")));
        }
        Ok(loss)
    }

    /// Greedy decoding with cached decoder keys and values. Emits at most
    /// `max_output` ids and stops after EOS; ties go to the lowest id.
    pub fn greedy_decode(&self, input_ids: &[u32], max_output: usize) -> Result<Vec<u32>> {
        decode::greedy(self, input_ids, max_output)
    }

    /// Logits produced step by step by the cached decoder while
    /// teacher-forcing `target_ids`; matches [`Model::logits`].
    pub fn incremental_logits(&self, input_ids: &[u32], target_ids: &[u32]) -> Result<Tensor<T>> {
        decode::teacher_forced(self, input_ids, target_ids)
    }

    /// Finite-difference check of the mean target loss of `batch` at
    /// `coords_per_tensor` sampled coordinates of every parameter. 32-bit
    /// models are compared with differences of the same loss on a 64-bit
    /// copy.
    pub fn grad_check(&self, batch: &[PretrainExample], coords_per_tensor: usize, seed: u64) -> Result<GradCheckReport> {
        if batch.is_empty() {
            return Err(Error::Empty("batch has no examples".into()));
        }
        let tokens: usize = batch.iter().map(|e| forward::counted_tokens(&e.target_ids)).sum();
        let cfg = GradCheckConfig {
            max_coords_per_input: Some(coords_per_tensor),
            seed,
            ..GradCheckConfig::for_dtype(T::DTYPE)
        };
        let name = format!("model(d={}, {} params)", self.config.d_model, self.num_params());
        let f = |tape: &mut Tape<T>, vars: &[Var]| mean_loss(self, tape, vars, batch, tokens);
        if T::DTYPE == DType::F64 {
            return grad_check(&name, f, &self.params, &cfg);
        }
        let wide = self.cast::<f64>();
        let reference = |tape: &mut Tape<f64>, vars: &[Var]| mean_loss(&wide, tape, vars, batch, tokens);
        grad_check_with_reference(&name, f, reference, &self.params, &cfg)
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }
}

fn mean_loss<T: Float>(model: &Model<T>, tape: &mut Tape<T>, vars: &[Var], batch: &[PretrainExample], tokens: usize) -> Result<Var> {
    let mut total = model.example_loss(tape, vars, &batch[0], None)?;
    for ex in &batch[1..] {
        let l = model.example_loss(tape, vars, ex, None)?;
        total = tape.add(total, l)?;
    }
    Ok(tape.scale(total, 1.0 / tokens as f64))
}
