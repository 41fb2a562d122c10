//! Byte-level vocabulary and span corruption.
//!
//! Id layout: `PAD = 0`, `EOS = 1`, byte `b` is `b + 2` (ids 2..=257), and
//! 100 sentinels occupy ids 258..=357. This layout is our own and is not
//! compatible with published byte-level checkpoints.

use std::io::{Read, Write};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::rng::{derived_rng, rng_from, Rng};

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
pub const BYTE_OFFSET: u32 = 2;
pub const SENTINEL_BASE: u32 = 258;
pub const NUM_SENTINELS: usize = 100;
pub const VOCAB_SIZE: usize = 358;

pub fn sentinel(index: usize) -> u32 {
    debug_assert!(index < NUM_SENTINELS);
    SENTINEL_BASE + index as u32
}

pub fn sentinel_index(id: u32) -> Option<usize> {
    (SENTINEL_BASE..SENTINEL_BASE + NUM_SENTINELS as u32)
        .contains(&id)
        .then(|| (id - SENTINEL_BASE) as usize)
}

pub fn is_byte_id(id: u32) -> bool {
    (BYTE_OFFSET..SENTINEL_BASE).contains(&id)
}

/// Maps every byte to its id. No EOS is appended.
pub fn encode_bytes(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| b as u32 + BYTE_OFFSET).collect()
}

/// Maps byte ids back to bytes, dropping PAD, EOS and sentinels.
pub fn decode_ids(ids: &[u32]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        if id as usize >= VOCAB_SIZE {
            return Err(Error::IdOutOfRange {
                id,
                limit: VOCAB_SIZE as u32,
            });
        }
        if is_byte_id(id) {
            out.push((id - BYTE_OFFSET) as u8);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpanCorruptionConfig {
    pub corruption_rate: f64,
    pub mean_span_length: f64,
    pub sequence_length: usize,
    pub seed: u64,
}

impl Default for SpanCorruptionConfig {
    fn default() -> Self {
        Self {
            corruption_rate: 0.15,
            mean_span_length: 20.0,
            sequence_length: 1024,
            seed: 0,
        }
    }
}

impl SpanCorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.corruption_rate > 0.0 && self.corruption_rate < 1.0) {
            return Err(Error::config(format!(
                "corruption_rate must lie in (0, 1), got {}",
                self.corruption_rate
            )));
        }
        if self.mean_span_length.is_nan() || self.mean_span_length < 1.0 {
            return Err(Error::config(format!(
                "mean_span_length must be >= 1, got {}",
                self.mean_span_length
            )));
        }
        if self.sequence_length < 2 {
            return Err(Error::config(format!("sequence_length must be >= 2, got {}", self.sequence_length)));
        }
        Ok(())
    }

    /// `(corrupted positions, span count)` for a sequence of `len` bytes.
    pub fn span_counts(&self, len: usize) -> Result<(usize, usize)> {
        if len < 2 {
            return Err(Error::SequenceTooShort(len));
        }
        let expected = len as f64 * self.corruption_rate;
        let noise = (expected.round() as usize).clamp(1, len - 1);
        let spans = ((expected / self.mean_span_length).round() as usize).max(1);
        let spans = spans.min(noise).min(len - noise + 1).min(NUM_SENTINELS);
        Ok((noise, spans))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PretrainExample {
    pub input_ids: Vec<u32>,
    pub target_ids: Vec<u32>,
}

/// Random composition of `total` into `parts` positive integers.
fn positive_composition(total: usize, parts: usize, rng: &mut Rng) -> Vec<usize> {
    let mut cuts = if parts > 1 {
        sample(rng, total - 1, parts - 1).into_vec()
    } else {
        Vec::new()
    };
    cuts.iter_mut().for_each(|c| *c += 1);
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(parts);
    let mut prev = 0;
    for c in cuts {
        out.push(c - prev);
        prev = c;
    }
    out.push(total - prev);
    out
}

/// Random composition of `total` into `parts` non-negative integers.
fn nonnegative_composition(total: usize, parts: usize, rng: &mut Rng) -> Vec<usize> {
    // stars and bars: choose the bar slots among total + parts - 1
    let slots = total + parts - 1;
    let mut bars = sample(rng, slots, parts - 1).into_vec();
    bars.sort_unstable();
    let mut out = Vec::with_capacity(parts);
    let mut prev: isize = -1;
    for b in bars {
        out.push((b as isize - prev - 1) as usize);
        prev = b as isize;
    }
    out.push((slots as isize - prev - 1) as usize);
    out
}

/// Noise mask for a sequence of `len` bytes: `n` corrupted spans separated
/// by at least one clean byte, with clean runs allowed to be empty only at
/// the two ends.
pub fn random_noise_mask(len: usize, cfg: &SpanCorruptionConfig, rng: &mut Rng) -> Result<Vec<bool>> {
    let (noise, spans) = cfg.span_counts(len)?;
    let clean = len - noise;
    let noise_lengths = positive_composition(noise, spans, rng);
    let mut clean_lengths = nonnegative_composition(clean - (spans - 1), spans + 1, rng);
    for c in clean_lengths.iter_mut().take(spans).skip(1) {
        *c += 1;
    }
    let mut mask = Vec::with_capacity(len);
    for i in 0..spans {
        mask.extend(std::iter::repeat_n(false, clean_lengths[i]));
        mask.extend(std::iter::repeat_n(true, noise_lengths[i]));
    }
    mask.extend(std::iter::repeat_n(false, clean_lengths[spans]));
    debug_assert_eq!(mask.len(), len);
    Ok(mask)
}

/// Splices out every maximal run of `true` in `mask`, replacing it with the
/// next sentinel in the input and moving it to the target.
pub fn corrupt_with_mask(ids: &[u32], mask: &[bool]) -> Result<PretrainExample> {
    if ids.len() != mask.len() {
        return Err(Error::Shape {
            op: "corrupt_with_mask",
            lhs: vec![ids.len()],
            rhs: vec![mask.len()],
        });
    }
    let mut input = Vec::with_capacity(ids.len());
    let mut target = Vec::new();
    let mut spans = 0usize;
    for (i, (&id, &noisy)) in ids.iter().zip(mask).enumerate() {
        if !is_byte_id(id) {
            return Err(Error::data(format!("id {id} at position {i} is not a byte id")));
        }
        if noisy {
            if i == 0 || !mask[i - 1] {
                if spans == NUM_SENTINELS {
                    return Err(Error::data("more spans than sentinels"));
                }
                input.push(sentinel(spans));
                target.push(sentinel(spans));
                spans += 1;
            }
            target.push(id);
        } else {
            input.push(id);
        }
    }
    target.push(EOS);
    Ok(PretrainExample {
        input_ids: input,
        target_ids: target,
    })
}

/// Span corruption with the stream seeded by `cfg.seed`.
pub fn corrupt_spans(ids: &[u32], cfg: &SpanCorruptionConfig) -> Result<PretrainExample> {
    corrupt_spans_with(ids, cfg, &mut rng_from(cfg.seed))
}

pub fn corrupt_spans_with(ids: &[u32], cfg: &SpanCorruptionConfig, rng: &mut Rng) -> Result<PretrainExample> {
    cfg.validate()?;
    let mask = random_noise_mask(ids.len(), cfg, rng)?;
    corrupt_with_mask(ids, &mask)
}

/// Inverse of span corruption: splices each target span back in place of
/// its sentinel.
pub fn reconstruct(example: &PretrainExample) -> Result<Vec<u32>> {
    let mut segments: Vec<Vec<u32>> = Vec::new();
    let mut ended = false;
    for (pos, &id) in example.target_ids.iter().enumerate() {
        if ended {
            return Err(Error::SentinelMismatch(format!("target continues after EOS at {pos}")));
        }
        if id == EOS {
            ended = true;
        } else if let Some(k) = sentinel_index(id) {
            if k != segments.len() {
                return Err(Error::SentinelMismatch(format!(
                    "target sentinel {k} where {} was expected",
                    segments.len()
                )));
            }
            segments.push(Vec::new());
        } else {
            match segments.last_mut() {
                Some(seg) => seg.push(id),
                None => return Err(Error::SentinelMismatch("target bytes before the first sentinel".into())),
            }
        }
    }
    let mut out = Vec::with_capacity(example.input_ids.len() + example.target_ids.len());
    let mut next = 0usize;
    for &id in &example.input_ids {
        match sentinel_index(id) {
            Some(k) => {
                if k != next || k >= segments.len() {
                    return Err(Error::SentinelMismatch(format!(
                        "input sentinel {k} has no matching target span (expected {next}, target has {})",
                        segments.len()
                    )));
                }
                out.extend_from_slice(&segments[k]);
                next += 1;
            }
            None => out.push(id),
        }
    }
    if next != segments.len() {
        return Err(Error::SentinelMismatch(format!(
            "input has {next} sentinels but target has {} spans",
            segments.len()
        )));
    }
    Ok(out)
}

/// Concatenates the corpus, cuts `sequence_length` windows, and corrupts
/// each window with a seed derived from `(cfg.seed, window index)`. A
/// trailing window shorter than `2 * mean_span_length` is dropped.
pub fn pack_corpus(docs: &[Document], cfg: &SpanCorruptionConfig) -> Result<Vec<PretrainExample>> {
    cfg.validate()?;
    let bytes: Vec<u8> = docs.iter().flat_map(|d| d.text.as_bytes().iter().copied()).collect();
    pack_bytes(&bytes, cfg)
}

pub fn pack_bytes(bytes: &[u8], cfg: &SpanCorruptionConfig) -> Result<Vec<PretrainExample>> {
    cfg.validate()?;
    let min_tail = (2.0 * cfg.mean_span_length).ceil() as usize;
    bytes
        .chunks(cfg.sequence_length)
        .filter(|w| w.len() == cfg.sequence_length || (w.len() >= min_tail && w.len() >= 2))
        .enumerate()
        .map(|(i, window)| corrupt_spans_with(&encode_bytes(window), cfg, &mut derived_rng(cfg.seed, i as u64)))
        .collect()
}

fn write_ids(w: &mut impl Write, ids: &[u32]) -> Result<()> {
    w.write_all(&(ids.len() as u32).to_le_bytes())?;
    for &id in ids {
        let id16 = u16::try_from(id).map_err(|_| Error::IdOutOfRange { id, limit: 1 << 16 })?;
        w.write_all(&id16.to_le_bytes())?;
    }
    Ok(())
}

/// Length-prefixed little-endian records: `u32` input length, `u16` input
/// ids, `u32` target length, `u16` target ids.
pub fn write_examples(w: &mut impl Write, examples: &[PretrainExample]) -> Result<()> {
    for ex in examples {
        write_ids(w, &ex.input_ids)?;
        write_ids(w, &ex.target_ids)?;
    }
    Ok(())
}

fn read_ids(bytes: &[u8], pos: &mut usize) -> Result<Vec<u32>> {
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let end = pos.checked_add(n).filter(|&e| e <= bytes.len());
        let end = end.ok_or_else(|| Error::data(format!("truncated example record at byte {pos}")))?;
        let out = &bytes[*pos..end];
        *pos = end;
        Ok(out)
    };
    let len = u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()) as usize;
    let raw = take(pos, len.checked_mul(2).ok_or_else(|| Error::data("record length overflow"))?)?;
    Ok(raw.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as u32).collect())
}

pub fn read_examples(r: &mut impl Read) -> Result<Vec<PretrainExample>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut pos = 0;
    let mut out = Vec::new();
    while pos < bytes.len() {
        let input_ids = read_ids(&bytes, &mut pos)?;
        let target_ids = read_ids(&bytes, &mut pos)?;
        out.push(PretrainExample { input_ids, target_ids });
    }
    Ok(out)
}
