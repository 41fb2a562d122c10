//! Teacher-forced forward pass on the tape.

use crate::codec::{PretrainExample, PAD};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{AttnMask, Float, Reduction, Tape, Var};

use super::{Attn, Ffn, Model, RMS_EPS};

/// Decoder inputs: targets shifted right behind a PAD start token.
pub(crate) fn shift_right(target: &[u32]) -> Vec<u32> {
    let mut out = Vec::with_capacity(target.len());
    out.push(PAD);
    out.extend_from_slice(&target[..target.len().saturating_sub(1)]);
    out
}

pub(crate) fn counted_tokens(target: &[u32]) -> usize {
    target.iter().filter(|&&t| t != PAD).count()
}

pub(crate) fn encoder_mask(input: &[u32]) -> AttnMask {
    if input.contains(&PAD) {
        AttnMask::keys(input.iter().map(|&t| t != PAD).collect())
    } else {
        AttnMask::none()
    }
}

struct Dropper<'a> {
    rate: f64,
    rng: Option<&'a mut Rng>,
}

impl Dropper<'_> {
    fn apply<T: Float>(&mut self, tape: &mut Tape<T>, x: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => tape.dropout(x, self.rate, rng),
            _ => x,
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention<T: Float>(
    tape: &mut Tape<T>,
    p: &[Var],
    a: &Attn,
    x: Var,
    kv: Var,
    bias: Option<Var>,
    heads: usize,
    mask: &AttnMask,
) -> Result<Var> {
    let q = tape.matmul(x, p[a.q])?;
    let k = tape.matmul(kv, p[a.k])?;
    let v = tape.matmul(kv, p[a.v])?;
    let ctx = tape.attention(q, k, v, bias, heads, mask)?;
    tape.matmul(ctx, p[a.o])
}

fn feed_forward<T: Float>(tape: &mut Tape<T>, p: &[Var], f: &Ffn, h: Var, drop: &mut Dropper<'_>) -> Result<Var> {
    let n = tape.rms_norm(h, p[f.norm], RMS_EPS)?;
    let gate = tape.matmul(n, p[f.gate])?;
    let lin = tape.matmul(n, p[f.linear])?;
    let act = tape.gated_gelu(gate, lin)?;
    let act = drop.apply(tape, act);
    let out = tape.matmul(act, p[f.out])?;
    let out = drop.apply(tape, out);
    tape.add(h, out)
}

/// Final encoder states `[input_len, d_model]` without dropout.
pub(crate) fn encode<T: Float>(model: &Model<T>, tape: &mut Tape<T>, p: &[Var], input: &[u32]) -> Result<Var> {
    let mut drop = Dropper { rate: 0.0, rng: None };
    encode_with(model, tape, p, input, &mut drop)
}

fn encode_with<T: Float>(model: &Model<T>, tape: &mut Tape<T>, p: &[Var], input: &[u32], drop: &mut Dropper<'_>) -> Result<Var> {
    if input.is_empty() {
        return Err(Error::Empty("encoder input is empty".into()));
    }
    let cfg = model.config();
    let lay = model.layout();
    let enc_mask = encoder_mask(input);
    let mut h = tape.embed(p[lay.embedding], input)?;
    h = drop.apply(tape, h);
    let bias = tape.relative_position_bias(
        p[lay.encoder_bias],
        input.len(),
        input.len(),
        0,
        true,
        cfg.relative_attention_max_distance,
    )?;
    for layer in &lay.encoder {
        let n = tape.rms_norm(h, p[layer.attn_norm], RMS_EPS)?;
        let a = attention(tape, p, &layer.attn, n, n, Some(bias), cfg.num_heads, &enc_mask)?;
        let a = drop.apply(tape, a);
        h = tape.add(h, a)?;
        h = feed_forward(tape, p, &layer.ffn, h, drop)?;
    }
    let enc = tape.rms_norm(h, p[lay.encoder_norm], RMS_EPS)?;
    Ok(drop.apply(tape, enc))
}

pub(crate) fn logits<T: Float>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    p: &[Var],
    input: &[u32],
    dec_in: &[u32],
    dropout: Option<&mut Rng>,
) -> Result<Var> {
    if dec_in.is_empty() {
        return Err(Error::Empty("decoder input is empty".into()));
    }
    let cfg = model.config();
    let lay = model.layout();
    let mut drop = Dropper {
        rate: cfg.dropout_rate,
        rng: dropout,
    };
    let enc = encode_with(model, tape, p, input, &mut drop)?;
    let enc_mask = encoder_mask(input);

    let mut h = tape.embed(p[lay.embedding], dec_in)?;
    h = drop.apply(tape, h);
    let bias = tape.relative_position_bias(
        p[lay.decoder_bias],
        dec_in.len(),
        dec_in.len(),
        0,
        false,
        cfg.relative_attention_max_distance,
    )?;
    let causal = AttnMask::causal();
    for layer in &lay.decoder {
        let n = tape.rms_norm(h, p[layer.self_norm], RMS_EPS)?;
        let a = attention(tape, p, &layer.self_attn, n, n, Some(bias), cfg.num_heads, &causal)?;
        let a = drop.apply(tape, a);
        h = tape.add(h, a)?;
        let n = tape.rms_norm(h, p[layer.cross_norm], RMS_EPS)?;
        let a = attention(tape, p, &layer.cross_attn, n, enc, None, cfg.num_heads, &enc_mask)?;
        let a = drop.apply(tape, a);
        h = tape.add(h, a)?;
        h = feed_forward(tape, p, &layer.ffn, h, &mut drop)?;
    }
    let out = tape.rms_norm(h, p[lay.decoder_norm], RMS_EPS)?;
    let out = drop.apply(tape, out);
    tape.matmul(out, p[lay.lm_head])
}

pub(crate) fn example_loss<T: Float>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    p: &[Var],
    example: &PretrainExample,
    dropout: Option<&mut Rng>,
) -> Result<Var> {
    let dec_in = shift_right(&example.target_ids);
    let logits = logits(model, tape, p, &example.input_ids, &dec_in, dropout)?;
    tape.cross_entropy(logits, &example.target_ids, Some(PAD), Reduction::Sum)
}
