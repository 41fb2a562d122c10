//! Step-by-step decoder with cached self-attention keys and values.

use crate::codec::{EOS, PAD};
use crate::error::{Error, Result};
use crate::tensor::kernels::{self, AttnMask};
use crate::tensor::{Float, Tape, Tensor};

use super::forward::encoder_mask;
use super::{Attn, Model, RMS_EPS};

fn vec_mat<T: Float>(x: &[T], w: &Tensor<T>) -> Vec<T> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![T::zero(); n];
    kernels::gemm(1, k, n, x, false, w.data(), false, &mut out, false);
    out
}

fn rms<T: Float>(x: &[T], gain: &Tensor<T>) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    kernels::rms_norm_rows(x, gain.data(), T::of(RMS_EPS), &mut out);
    out
}

fn add_into<T: Float>(h: &mut [T], x: &[T]) {
    for (a, &b) in h.iter_mut().zip(x) {
        *a += b;
    }
}

/// One query row against `len` cached key/value rows of width `heads * dh`.
fn attend<T: Float>(
    q: &[T],
    keys: &[T],
    values: &[T],
    len: usize,
    heads: usize,
    bias: Option<&dyn Fn(usize, usize) -> T>,
    mask: &AttnMask,
) -> Vec<T> {
    let width = q.len();
    let dh = width / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut out = vec![T::zero(); width];
    let mut scores = vec![T::zero(); len];
    let mut probs = vec![T::zero(); len];
    for h in 0..heads {
        let qh = &q[h * dh..(h + 1) * dh];
        for (j, s) in scores.iter_mut().enumerate() {
            let kh = &keys[j * width + h * dh..j * width + (h + 1) * dh];
            let dot: T = qh.iter().zip(kh).map(|(&a, &b)| a * b).sum();
            *s = dot * scale + bias.map_or(T::zero(), |b| b(h, j));
        }
        kernels::softmax_rows(&scores, &mut probs, 1, len, mask);
        let oh = &mut out[h * dh..(h + 1) * dh];
        for (j, &p) in probs.iter().enumerate() {
            let vh = &values[j * width + h * dh..j * width + (h + 1) * dh];
            for (o, &v) in oh.iter_mut().zip(vh) {
                *o += p * v;
            }
        }
    }
    out
}

struct Cache<T> {
    keys: Vec<T>,
    values: Vec<T>,
}

struct Decoder<'m, T> {
    model: &'m Model<T>,
    enc_len: usize,
    enc_mask: AttnMask,
    cross: Vec<Cache<T>>,
    selfs: Vec<Cache<T>>,
    pos: usize,
}

impl<'m, T: Float> Decoder<'m, T> {
    fn new(model: &'m Model<T>, input: &[u32]) -> Result<Self> {
        if input.is_empty() {
            return Err(Error::Empty("encoder input is empty".into()));
        }
        let lay = model.layout();
        let p = model.params();
        let mut tape = Tape::new();
        let vars = model.place(&mut tape, false);
        let enc = super::forward::encode(model, &mut tape, &vars, input)?;
        let enc = tape.value(enc).data();
        let d = model.config().d_model;
        let cross = lay
            .decoder
            .iter()
            .map(|l| {
                let project = |w: usize| {
                    let mut out = vec![T::zero(); input.len() * d];
                    kernels::gemm(input.len(), d, d, enc, false, p[w].data(), false, &mut out, false);
                    out
                };
                Cache {
                    keys: project(l.cross_attn.k),
                    values: project(l.cross_attn.v),
                }
            })
            .collect();
        let selfs = lay
            .decoder
            .iter()
            .map(|_| Cache {
                keys: Vec::new(),
                values: Vec::new(),
            })
            .collect();
        Ok(Self {
            model,
            enc_len: input.len(),
            enc_mask: encoder_mask(input),
            cross,
            selfs,
            pos: 0,
        })
    }

    fn self_attn(&mut self, layer: usize, a: &Attn, n: &[T]) -> Vec<T> {
        let p = self.model.params();
        let cfg = self.model.config();
        let q = vec_mat(n, &p[a.q]);
        let cache = &mut self.selfs[layer];
        cache.keys.extend(vec_mat(n, &p[a.k]));
        cache.values.extend(vec_mat(n, &p[a.v]));
        let table = p[self.model.layout().decoder_bias].data();
        let (pos, heads) = (self.pos, cfg.num_heads);
        let (nb, maxd) = (cfg.relative_attention_buckets, cfg.relative_attention_max_distance);
        let bias = move |h: usize, j: usize| {
            let b = kernels::relative_position_bucket(j as i64 - pos as i64, false, nb, maxd);
            table[b * heads + h]
        };
        let ctx = attend(&q, &cache.keys, &cache.values, pos + 1, heads, Some(&bias), &AttnMask::none());
        vec_mat(&ctx, &p[a.o])
    }

    /// Feeds one decoder input id and returns the next-token logits.
    fn step(&mut self, id: u32) -> Result<Vec<T>> {
        let cfg = self.model.config();
        if id as usize >= cfg.vocab_size {
            return Err(Error::IdOutOfRange {
                id,
                limit: cfg.vocab_size as u32,
            });
        }
        let lay = self.model.layout().clone();
        let p = self.model.params();
        let d = cfg.d_model;
        let emb = p[lay.embedding].data();
        let mut h = emb[id as usize * d..(id as usize + 1) * d].to_vec();
        for (i, layer) in lay.decoder.iter().enumerate() {
            let n = rms(&h, &p[layer.self_norm]);
            let a = self.self_attn(i, &layer.self_attn, &n);
            add_into(&mut h, &a);

            let n = rms(&h, &p[layer.cross_norm]);
            let q = vec_mat(&n, &p[layer.cross_attn.q]);
            let c = &self.cross[i];
            let ctx = attend(&q, &c.keys, &c.values, self.enc_len, cfg.num_heads, None, &self.enc_mask);
            add_into(&mut h, &vec_mat(&ctx, &p[layer.cross_attn.o]));

            let f = &layer.ffn;
            let n = rms(&h, &p[f.norm]);
            let gate = vec_mat(&n, &p[f.gate]);
            let lin = vec_mat(&n, &p[f.linear]);
            let act: Vec<T> = gate.iter().zip(&lin).map(|(&g, &l)| kernels::gelu(g) * l).collect();
            add_into(&mut h, &vec_mat(&act, &p[f.out]));
        }
        self.pos += 1;
        let n = rms(&h, &p[lay.decoder_norm]);
        Ok(vec_mat(&n, &p[lay.lm_head]))
    }
}

/// Index of the largest logit; the lowest index wins ties.
pub(crate) fn argmax<T: Float>(logits: &[T]) -> u32 {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

pub(crate) fn greedy<T: Float>(model: &Model<T>, input: &[u32], max_output: usize) -> Result<Vec<u32>> {
    let mut dec = Decoder::new(model, input)?;
    let mut out = Vec::new();
    let mut prev = PAD;
    while out.len() < max_output {
        let logits = dec.step(prev)?;
        let next = argmax(&logits);
        out.push(next);
        if next == EOS {
            break;
        }
        prev = next;
    }
    Ok(out)
}

pub(crate) fn teacher_forced<T: Float>(model: &Model<T>, input: &[u32], target: &[u32]) -> Result<Tensor<T>> {
    let mut dec = Decoder::new(model, input)?;
    let dec_in = super::forward::shift_right(target);
    let mut data = Vec::with_capacity(dec_in.len() * model.config().vocab_size);
    for &id in &dec_in {
        data.extend(dec.step(id)?);
    }
    Tensor::new(vec![dec_in.len(), model.config().vocab_size], data)
}
