//! Reverse-mode tape. Every op appends a node holding its output and what
//! it needs for the backward pass; `backward` walks the nodes in exact
//! reverse construction order.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

use super::kernels::{self, AttnMask, Strided};
use super::scalar::Float;
use super::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        transpose_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        s: T,
    },
    Embed {
        table: Var,
        ids: Vec<u32>,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    Softmax {
        x: Var,
        cols: usize,
    },
    RelPosBias {
        table: Var,
        buckets: Vec<usize>,
        heads: usize,
    },
    GatedGelu {
        gate: Var,
        linear: Var,
    },
    Dropout {
        x: Var,
        keep_scale: Vec<T>,
    },
    SplitHeads {
        x: Var,
        heads: usize,
    },
    MergeHeads {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<u32>,
        ignore: Option<u32>,
        probs: Vec<T>,
        scale: T,
    },
    Sum {
        x: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        probs: Vec<T>,
        heads: usize,
        scale: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Full-precision result of scalar reductions.
    wide: Option<f64>,
}

/// Gradients of a scalar with respect to the tape's leaves.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of the loss w.r.t. leaf `v`; zero when `v` does not
    /// influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            wide: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_scalar(&mut self, value: f64, op: Op<T>, requires_grad: bool) -> Var {
        let v = self.push(Tensor::scalar(T::of(value)), op, requires_grad);
        self.nodes[v.0].wide = Some(value);
        v
    }

    /// Scalar value in f64. Reductions (`sum`, `cross_entropy`) keep their
    /// f64 accumulator, so this is not rounded to the element type.
    pub fn scalar_f64(&self, v: Var) -> f64 {
        let node = &self.nodes[v.0];
        node.wide.unwrap_or_else(|| node.value.item().as_f64())
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// `[m, k] @ [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// Batched `[B, m, k] @ [B, k, n]`, or `[B, m, k] @ [B, n, k]^T` with
    /// `transpose_b`.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("bmm", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if transpose_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(shape_err("bmm", sa, sb));
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                kernels::gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    false,
                    &bd[i * k * n..(i + 1) * k * n],
                    transpose_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![batch, m, n], out)?,
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                transpose_b,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("add", sa, sb));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = sa.to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("mul", sa, sb));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = sa.to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let mut value = self.value(a).clone();
        value.scale_in_place(s);
        let rg = self.rg(a);
        self.push(value, Op::Scale { a, s }, rg)
    }

    /// Rows of `table` (`[vocab, width]`) selected by `ids`.
    pub fn embed(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(shape_err("embed", st, &[ids.len()]));
        }
        let (vocab, width) = (st[0], st[1]);
        let mut out = Vec::with_capacity(ids.len() * width);
        let td = self.value(table).data();
        for &id in ids {
            if id as usize >= vocab {
                return Err(Error::IdOutOfRange { id, limit: vocab as u32 });
            }
            out.extend_from_slice(&td[id as usize * width..(id as usize + 1) * width]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), width], out)?,
            Op::Embed { table, ids: ids.to_vec() },
            rg,
        ))
    }

    /// Scale-only RMS normalisation over the last axis with a learned gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (sx, sg) = (self.shape(x), self.shape(gain));
        if sg.len() != 1 || sx.last() != Some(&sg[0]) {
            return Err(shape_err("rms_norm", sx, sg));
        }
        let shape = sx.to_vec();
        let mut out = vec![T::zero(); self.value(x).numel()];
        let inv_rms = kernels::rms_norm_rows(self.value(x).data(), self.value(gain).data(), T::of(eps), &mut out);
        let rg = self.rg(x) || self.rg(gain);
        Ok(self.push(Tensor::new(shape, out)?, Op::RmsNorm { x, gain, inv_rms }, rg))
    }

    /// Softmax over the last axis. `x` is viewed as `[.., q_len, k_len]`
    /// for masking purposes.
    pub fn softmax(&mut self, x: Var, mask: &AttnMask) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let cols = *sx.last().ok_or_else(|| shape_err("softmax", &sx, &[]))?;
        let q_len = if sx.len() >= 2 { sx[sx.len() - 2] } else { 1 };
        if let Some(keys) = &mask.keys {
            if keys.len() != cols {
                return Err(shape_err("softmax", &sx, &[keys.len()]));
            }
        }
        let mut out = vec![T::zero(); self.value(x).numel()];
        kernels::softmax_rows(self.value(x).data(), &mut out, q_len, cols, mask);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(sx, out)?, Op::Softmax { x, cols }, rg))
    }

    /// Expands a `[num_buckets, heads]` bias table into a
    /// `[heads, q_len, k_len]` additive attention bias. Query `i` sits at
    /// absolute position `q_offset + i`.
    pub fn relative_position_bias(
        &mut self,
        table: Var,
        q_len: usize,
        k_len: usize,
        q_offset: usize,
        bidirectional: bool,
        max_distance: usize,
    ) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(shape_err("relative_position_bias", &st, &[q_len, k_len]));
        }
        let (num_buckets, heads) = (st[0], st[1]);
        let mut buckets = Vec::with_capacity(q_len * k_len);
        for q in 0..q_len {
            for k in 0..k_len {
                let rel = k as i64 - (q + q_offset) as i64;
                buckets.push(kernels::relative_position_bucket(rel, bidirectional, num_buckets, max_distance));
            }
        }
        let td = self.value(table).data();
        let mut out = vec![T::zero(); heads * q_len * k_len];
        for h in 0..heads {
            for (i, &b) in buckets.iter().enumerate() {
                out[h * q_len * k_len + i] = td[b * heads + h];
            }
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![heads, q_len, k_len], out)?,
            Op::RelPosBias { table, buckets, heads },
            rg,
        ))
    }

    /// `gelu(gate) * linear`.
    pub fn gated_gelu(&mut self, gate: Var, linear: Var) -> Result<Var> {
        let (sg, sl) = (self.shape(gate), self.shape(linear));
        if sg != sl {
            return Err(shape_err("gated_gelu", sg, sl));
        }
        let shape = sg.to_vec();
        let out: Vec<T> = self
            .value(gate)
            .data()
            .iter()
            .zip(self.value(linear).data())
            .map(|(&g, &l)| kernels::gelu(g) * l)
            .collect();
        let rg = self.rg(gate) || self.rg(linear);
        Ok(self.push(Tensor::new(shape, out)?, Op::GatedGelu { gate, linear }, rg))
    }

    /// Inverted dropout; identity when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut Rng) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let keep_scale: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        self.dropout_with_mask(x, keep_scale)
    }

    /// Dropout with an explicit per-element multiplier (0 or 1/(1-p)).
    pub fn dropout_with_mask(&mut self, x: Var, keep_scale: Vec<T>) -> Var {
        let value = self.value(x);
        assert_eq!(value.numel(), keep_scale.len(), "dropout mask length");
        let out: Vec<T> = value.data().iter().zip(&keep_scale).map(|(&v, &m)| v * m).collect();
        let shape = value.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out).unwrap(), Op::Dropout { x, keep_scale }, rg)
    }

    /// `[T, heads * d] -> [heads, T, d]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || heads == 0 || !sx[1].is_multiple_of(heads) {
            return Err(shape_err("split_heads", &sx, &[heads]));
        }
        let (t, d) = (sx[0], sx[1] / heads);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for i in 0..t {
            for h in 0..heads {
                out[(h * t + i) * d..(h * t + i + 1) * d].copy_from_slice(&xd[i * heads * d + h * d..i * heads * d + (h + 1) * d]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![heads, t, d], out)?, Op::SplitHeads { x, heads }, rg))
    }

    /// `[heads, T, d] -> [T, heads * d]`.
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(shape_err("merge_heads", &sx, &[]));
        }
        let (heads, t, d) = (sx[0], sx[1], sx[2]);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for h in 0..heads {
            for i in 0..t {
                out[i * heads * d + h * d..i * heads * d + (h + 1) * d].copy_from_slice(&xd[(h * t + i) * d..(h * t + i + 1) * d]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![t, heads * d], out)?, Op::MergeHeads { x }, rg))
    }

    /// Multi-head attention on `[T, heads * d]` projections:
    /// `softmax(q k^T / sqrt(d) + bias) v` per head, merged back to
    /// `[q_len, heads * d]`. `bias` is `[heads, q_len, k_len]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, bias: Option<Var>, heads: usize, mask: &AttnMask) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if sq.len() != 2 || sk.len() != 2 || sk != sv || sq[1] != sk[1] || heads == 0 || sq[1] % heads != 0 {
            return Err(shape_err("attention", &sq, &sk));
        }
        let (q_len, k_len, width) = (sq[0], sk[0], sq[1]);
        let dh = width / heads;
        if let Some(b) = bias {
            let sb = self.shape(b);
            if sb != [heads, q_len, k_len] {
                return Err(shape_err("attention", sb, &[heads, q_len, k_len]));
            }
        }
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut scores = vec![T::zero(); heads * q_len * k_len];
        let mut probs = vec![T::zero(); heads * q_len * k_len];
        let mut out = vec![T::zero(); q_len * width];
        let plane = q_len * k_len;
        for h in 0..heads {
            let s = &mut scores[h * plane..(h + 1) * plane];
            if let Some(b) = bias {
                s.copy_from_slice(&self.value(b).data()[h * plane..(h + 1) * plane]);
            }
            let beta = if bias.is_some() { T::one() } else { T::zero() };
            kernels::gemm_strided(
                q_len,
                dh,
                k_len,
                scale,
                qd,
                Strided::rows(h * dh, width),
                kd,
                Strided::rows(h * dh, width).t(),
                beta,
                s,
                Strided::rows(0, k_len),
            );
            kernels::softmax_rows(s, &mut probs[h * plane..(h + 1) * plane], q_len, k_len, mask);
            kernels::gemm_strided(
                q_len,
                k_len,
                dh,
                T::one(),
                &probs,
                Strided::rows(h * plane, k_len),
                vd,
                Strided::rows(h * dh, width),
                T::zero(),
                &mut out,
                Strided::rows(h * dh, width),
            );
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(vec![q_len, width], out)?,
            Op::Attention {
                q,
                k,
                v,
                bias,
                probs,
                heads,
                scale,
            },
            rg,
        ))
    }

    /// Token cross-entropy of `[T, V]` logits. Positions labelled `ignore`
    /// do not contribute; `Mean` divides by the number of counted positions.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u32], ignore: Option<u32>, reduction: Reduction) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != labels.len() {
            return Err(shape_err("cross_entropy", &sl, &[labels.len()]));
        }
        let vocab = sl[1];
        let counted = labels.iter().filter(|&&l| Some(l) != ignore).count();
        if counted == 0 {
            return Err(Error::Empty("cross-entropy target has no non-padding positions".into()));
        }
        let scale = match reduction {
            Reduction::Mean => 1.0 / counted as f64,
            Reduction::Sum => 1.0,
        };
        let ld = self.value(logits).data();
        let mut probs = vec![T::zero(); ld.len()];
        let mut total = 0.0f64;
        for (t, &label) in labels.iter().enumerate() {
            if Some(label) == ignore {
                continue;
            }
            if label as usize >= vocab {
                return Err(Error::IdOutOfRange {
                    id: label,
                    limit: vocab as u32,
                });
            }
            let row = &ld[t * vocab..(t + 1) * vocab];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut sum = T::zero();
            let p = &mut probs[t * vocab..(t + 1) * vocab];
            for (pv, &v) in p.iter_mut().zip(row) {
                let e = (v - max).exp();
                *pv = e;
                sum += e;
            }
            for pv in p.iter_mut() {
                *pv /= sum;
            }
            let lse = max.as_f64() + sum.as_f64().ln();
            total += lse - row[label as usize].as_f64();
        }
        let rg = self.rg(logits);
        Ok(self.push_scalar(
            total * scale,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                ignore,
                probs,
                scale: T::of(scale),
            },
            rg,
        ))
    }

    /// Sum of all elements, accumulated in f64.
    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        let rg = self.rg(x);
        self.push_scalar(total, Op::Sum { x }, rg)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(shape_err("backward", ls, &[]));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| matches!(self.nodes[i].op, Op::Leaf))
                    .map(|g| Tensor::new(self.nodes[i].value.shape().to_vec(), g).unwrap())
            })
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let acc = |v: Var, grads: &mut [Option<Vec<T>>], f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let bd = self.value(*b).data();
                acc(*a, grads, &mut |ga| kernels::gemm(m, n, k, g, false, bd, true, ga, true));
                let ad = self.value(*a).data();
                acc(*b, grads, &mut |gb| kernels::gemm(k, m, n, ad, true, g, false, gb, true));
            }
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                transpose_b,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, grads, &mut |ga| {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bd[i * k * n..(i + 1) * k * n];
                        // dA = dC @ B^T, or dC @ B when B was used transposed
                        kernels::gemm(m, n, k, gi, false, bi, !*transpose_b, &mut ga[i * m * k..(i + 1) * m * k], true);
                    }
                });
                acc(*b, grads, &mut |gb| {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &ad[i * m * k..(i + 1) * m * k];
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if *transpose_b {
                            // B is [n, k]: dB = dC^T @ A
                            kernels::gemm(n, m, k, gi, true, ai, false, dst, true);
                        } else {
                            kernels::gemm(k, m, n, ai, true, gi, false, dst, true);
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    acc(v, grads, &mut |ga| {
                        for (x, &y) in ga.iter_mut().zip(g) {
                            *x += y;
                        }
                    });
                }
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, grads, &mut |ga| {
                    for ((x, &y), &o) in ga.iter_mut().zip(g).zip(bd) {
                        *x += y * o;
                    }
                });
                acc(*b, grads, &mut |gb| {
                    for ((x, &y), &o) in gb.iter_mut().zip(g).zip(ad) {
                        *x += y * o;
                    }
                });
            }
            Op::Scale { a, s } => {
                acc(*a, grads, &mut |ga| {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y * *s;
                    }
                });
            }
            Op::Embed { table, ids } => {
                let width = self.shape(*table)[1];
                acc(*table, grads, &mut |gt| {
                    for (row, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id as usize * width..(id as usize + 1) * width];
                        for (x, &y) in dst.iter_mut().zip(&g[row * width..(row + 1) * width]) {
                            *x += y;
                        }
                    }
                });
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xd = self.value(*x).data();
                let gd = self.value(*gain).data();
                let width = gd.len();
                let nf = T::of(width as f64);
                acc(*x, grads, &mut |gx| {
                    for (r, &ir) in inv_rms.iter().enumerate() {
                        let xr = &xd[r * width..(r + 1) * width];
                        let gr = &g[r * width..(r + 1) * width];
                        let dot: T = xr.iter().zip(gr).zip(gd).map(|((&xv, &dy), &gv)| xv * dy * gv).sum();
                        let coef = ir * ir * ir * dot / nf;
                        for j in 0..width {
                            gx[r * width + j] += ir * gd[j] * gr[j] - xr[j] * coef;
                        }
                    }
                });
                acc(*gain, grads, &mut |gg| {
                    for (r, &ir) in inv_rms.iter().enumerate() {
                        for j in 0..width {
                            gg[j] += g[r * width + j] * xd[r * width + j] * ir;
                        }
                    }
                });
            }
            Op::Softmax { x, cols } => {
                let y = node.value.data();
                let cols = *cols;
                acc(*x, grads, &mut |gx| {
                    for r in 0..y.len() / cols.max(1) {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..cols {
                            gx[r * cols + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::RelPosBias { table, buckets, heads } => {
                let heads = *heads;
                let plane = buckets.len();
                acc(*table, grads, &mut |gt| {
                    for h in 0..heads {
                        for (i, &b) in buckets.iter().enumerate() {
                            gt[b * heads + h] += g[h * plane + i];
                        }
                    }
                });
            }
            Op::GatedGelu { gate, linear } => {
                let (gd, ld) = (self.value(*gate).data(), self.value(*linear).data());
                acc(*gate, grads, &mut |gg| {
                    for i in 0..gg.len() {
                        gg[i] += g[i] * kernels::gelu_grad(gd[i]) * ld[i];
                    }
                });
                acc(*linear, grads, &mut |gl| {
                    for i in 0..gl.len() {
                        gl[i] += g[i] * kernels::gelu(gd[i]);
                    }
                });
            }
            Op::Dropout { x, keep_scale } => {
                acc(*x, grads, &mut |gx| {
                    for ((a, &b), &m) in gx.iter_mut().zip(g).zip(keep_scale) {
                        *a += b * m;
                    }
                });
            }
            Op::SplitHeads { x, heads } => {
                let heads = *heads;
                let s = self.shape(*x);
                let (t, d) = (s[0], s[1] / heads);
                acc(*x, grads, &mut |gx| {
                    for i in 0..t {
                        for h in 0..heads {
                            for j in 0..d {
                                gx[i * heads * d + h * d + j] += g[(h * t + i) * d + j];
                            }
                        }
                    }
                });
            }
            Op::MergeHeads { x } => {
                let s = self.shape(*x);
                let (heads, t, d) = (s[0], s[1], s[2]);
                acc(*x, grads, &mut |gx| {
                    for h in 0..heads {
                        for i in 0..t {
                            for j in 0..d {
                                gx[(h * t + i) * d + j] += g[i * heads * d + h * d + j];
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                ignore,
                probs,
                scale,
            } => {
                let vocab = self.shape(*logits)[1];
                let up = g[0] * *scale;
                acc(*logits, grads, &mut |gl| {
                    for (t, &label) in labels.iter().enumerate() {
                        if Some(label) == *ignore {
                            continue;
                        }
                        for j in 0..vocab {
                            gl[t * vocab + j] += up * probs[t * vocab + j];
                        }
                        gl[t * vocab + label as usize] -= up;
                    }
                });
            }
            Op::Sum { x } => {
                acc(*x, grads, &mut |gx| {
                    for v in gx.iter_mut() {
                        *v += g[0];
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                bias,
                probs,
                heads,
                scale,
            } => {
                let (q_len, width) = (self.shape(*q)[0], self.shape(*q)[1]);
                let k_len = self.shape(*k)[0];
                let (heads, scale) = (*heads, *scale);
                let dh = width / heads;
                let plane = q_len * k_len;
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                // dS = P * (dP - rowsum(dP * P)), with dP = dO v^T
                let mut ds = vec![T::zero(); heads * plane];
                for h in 0..heads {
                    let dp = &mut ds[h * plane..(h + 1) * plane];
                    kernels::gemm_strided(
                        q_len,
                        dh,
                        k_len,
                        T::one(),
                        g,
                        Strided::rows(h * dh, width),
                        vd,
                        Strided::rows(h * dh, width).t(),
                        T::zero(),
                        dp,
                        Strided::rows(0, k_len),
                    );
                    let p = &probs[h * plane..(h + 1) * plane];
                    for r in 0..q_len {
                        let row = r * k_len..(r + 1) * k_len;
                        let dot: T = dp[row.clone()].iter().zip(&p[row.clone()]).map(|(&a, &b)| a * b).sum();
                        for (d, &pv) in dp[row.clone()].iter_mut().zip(&p[row]) {
                            *d = pv * (*d - dot);
                        }
                    }
                }
                acc(*v, grads, &mut |gv| {
                    for h in 0..heads {
                        kernels::gemm_strided(
                            k_len,
                            q_len,
                            dh,
                            T::one(),
                            probs,
                            Strided::rows(h * plane, k_len).t(),
                            g,
                            Strided::rows(h * dh, width),
                            T::one(),
                            gv,
                            Strided::rows(h * dh, width),
                        );
                    }
                });
                if let Some(b) = bias {
                    acc(*b, grads, &mut |gb| {
                        for (x, &y) in gb.iter_mut().zip(&ds) {
                            *x += y;
                        }
                    });
                }
                acc(*q, grads, &mut |gq| {
                    for h in 0..heads {
                        kernels::gemm_strided(
                            q_len,
                            k_len,
                            dh,
                            scale,
                            &ds,
                            Strided::rows(h * plane, k_len),
                            kd,
                            Strided::rows(h * dh, width),
                            T::one(),
                            gq,
                            Strided::rows(h * dh, width),
                        );
                    }
                });
                acc(*k, grads, &mut |gk| {
                    for h in 0..heads {
                        kernels::gemm_strided(
                            k_len,
                            q_len,
                            dh,
                            scale,
                            &ds,
                            Strided::rows(h * plane, k_len).t(),
                            qd,
                            Strided::rows(h * dh, width),
                            T::one(),
                            gk,
                            Strided::rows(h * dh, width),
                        );
                    }
                });
            }
        }
    }
}
