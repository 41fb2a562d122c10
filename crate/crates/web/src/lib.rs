//! Browser bindings: span-corruption view, nested synthetic documents and
//! answer scoring. Every export returns a JSON string.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use bytelm::codec::{corrupt_with_mask, encode_bytes, random_noise_mask, reconstruct, SpanCorruptionConfig};
use bytelm::corpus::Document;
use bytelm::eval::{exact_match, normalize_answer, qa_f1};
use bytelm::rng::rng_from;
use bytelm::synth::{build_zipf_vocab, check_balanced, generate_hierarchical, HierarchicalGenConfig};
use bytelm::{Error, Result};

#[derive(Debug, Serialize)]
pub struct Segment {
    /// Lossy text of the run; a multi-byte character cut by a span
    /// boundary shows as a replacement character.
    pub text: String,
    pub bytes: usize,
    /// Sentinel index when the run was masked out.
    pub sentinel: Option<usize>,
}

#[derive(Debug, Serialize)]
pub struct CorruptionView {
    pub segments: Vec<Segment>,
    pub input_ids: usize,
    pub target_ids: usize,
    pub corrupted_bytes: usize,
    pub spans: usize,
    pub reconstructs: bool,
}

/// Masks `text` the way pretraining examples are built and groups the
/// bytes into clean and masked runs.
pub fn corruption_view(text: &str, rate: f64, mean_span: f64, seed: u64) -> Result<CorruptionView> {
    let cfg = SpanCorruptionConfig {
        corruption_rate: rate,
        mean_span_length: mean_span,
        sequence_length: text.len().max(2),
        seed,
    };
    cfg.validate()?;
    let bytes = text.as_bytes();
    let mask = random_noise_mask(bytes.len(), &cfg, &mut rng_from(seed))?;
    let ids = encode_bytes(bytes);
    let example = corrupt_with_mask(&ids, &mask)?;
    let mut segments = Vec::new();
    let mut start = 0;
    let mut spans = 0;
    for i in 1..=bytes.len() {
        if i == bytes.len() || mask[i] != mask[start] {
            let sentinel = mask[start].then(|| {
                spans += 1;
                spans - 1
            });
            segments.push(Segment {
                text: String::from_utf8_lossy(&bytes[start..i]).into_owned(),
                bytes: i - start,
                sentinel,
            });
            start = i;
        }
    }
    Ok(CorruptionView {
        segments,
        input_ids: example.input_ids.len(),
        target_ids: example.target_ids.len(),
        corrupted_bytes: mask.iter().filter(|&&m| m).count(),
        spans,
        reconstructs: reconstruct(&example)? == ids,
    })
}

#[derive(Debug, Serialize)]
pub struct NestedToken {
    pub word: String,
    pub open: bool,
    pub depth: usize,
}

#[derive(Debug, Serialize)]
pub struct NestedView {
    pub text: String,
    pub tokens: Vec<NestedToken>,
    pub max_depth: usize,
    pub balanced: bool,
    pub vocabulary: usize,
}

/// Nested document over the `top_k` most frequent words of `source`.
pub fn nested_view(
    source: &str,
    top_k: usize,
    open_probability: f64,
    max_depth: usize,
    target_bytes: usize,
    seed: u64,
) -> Result<NestedView> {
    let cfg = HierarchicalGenConfig {
        open_probability,
        max_depth,
        target_doc_bytes: target_bytes,
        seed,
    };
    cfg.validate()?;
    let docs = [Document::new("0", "en", source)];
    let vocab = build_zipf_vocab(&docs, top_k.max(1), 1)?;
    let doc = generate_hierarchical(&vocab, &cfg, &mut rng_from(seed));
    let mut depth = 0;
    let tokens = doc
        .tokens
        .iter()
        .zip(&doc.opens)
        .map(|(&t, &open)| {
            if open {
                depth += 1;
            }
            let tok = NestedToken {
                word: vocab.word(t).to_string(),
                open,
                depth,
            };
            if !open {
                depth -= 1;
            }
            tok
        })
        .collect();
    let text = doc.render(&vocab);
    Ok(NestedView {
        balanced: check_balanced(&text).balanced,
        text,
        tokens,
        max_depth: doc.max_depth,
        vocabulary: vocab.len(),
    })
}

#[derive(Debug, Serialize)]
pub struct AnswerScore {
    pub f1: f64,
    pub exact: f64,
    pub normalized: String,
}

/// Token F1 and exact match against one gold answer per line.
pub fn answer_score(prediction: &str, golds: &str, language: &str) -> Result<AnswerScore> {
    let golds: Vec<String> = golds.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    if golds.is_empty() {
        return Err(Error::Empty("no gold answers".into()));
    }
    Ok(AnswerScore {
        f1: qa_f1(prediction, &golds, language),
        exact: exact_match(prediction, &golds, language),
        normalized: normalize_answer(prediction, language),
    })
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = corruptText)]
pub fn corrupt_text(text: &str, rate: f64, mean_span: f64, seed: u32) -> std::result::Result<String, JsError> {
    to_js(corruption_view(text, rate, mean_span, seed.into()))
}

#[wasm_bindgen(js_name = nestedDocument)]
pub fn nested_document(
    source: &str,
    top_k: usize,
    open_probability: f64,
    max_depth: usize,
    target_bytes: usize,
    seed: u32,
) -> std::result::Result<String, JsError> {
    to_js(nested_view(source, top_k, open_probability, max_depth, target_bytes, seed.into()))
}

#[wasm_bindgen(js_name = scoreAnswer)]
pub fn score_answer(prediction: &str, golds: &str, language: &str) -> std::result::Result<String, JsError> {
    to_js(answer_score(prediction, golds, language))
}
