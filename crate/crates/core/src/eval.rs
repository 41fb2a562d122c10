//! Downstream task formatting and metrics: class-id NLI scored by accuracy
//! and extractive QA scored by SQuAD-style token F1.

use std::collections::HashMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::codec::{encode_bytes, is_byte_id, PretrainExample, BYTE_OFFSET, EOS};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Float;

pub const NLI_MAX_INPUT_BYTES: usize = 1024;
pub const QA_MAX_INPUT_BYTES: usize = 2048;
pub const QA_MAX_ANSWER_BYTES: usize = 768;
/// Decode budget for class ids: a few digits plus EOS.
pub const NLI_MAX_OUTPUT_IDS: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NliExample {
    pub premise: String,
    pub hypothesis: String,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaExample {
    pub question: String,
    pub context: String,
    #[serde(rename = "answers")]
    pub gold_answers: Vec<String>,
}

/// Longest prefix of `bytes` no longer than `cap`.
pub fn truncate_bytes(mut bytes: Vec<u8>, cap: usize) -> Vec<u8> {
    bytes.truncate(cap);
    bytes
}

pub fn format_nli_input(ex: &NliExample) -> Vec<u8> {
    format_nli_input_capped(ex, NLI_MAX_INPUT_BYTES)
}

pub fn format_nli_input_capped(ex: &NliExample, cap: usize) -> Vec<u8> {
    truncate_bytes(format!("premise: {} hypothesis: {}", ex.premise, ex.hypothesis).into_bytes(), cap)
}

pub fn nli_target(label: usize) -> String {
    label.to_string()
}

pub fn format_qa_input(ex: &QaExample) -> Vec<u8> {
    format_qa_input_capped(ex, QA_MAX_INPUT_BYTES)
}

/// The fixed `question: ` prefix always survives truncation; caps shorter
/// than the prefix are raised to it.
pub fn format_qa_input_capped(ex: &QaExample, cap: usize) -> Vec<u8> {
    const PREFIX: &str = "question: ";
    truncate_bytes(
        format!("{PREFIX}{} context: {}", ex.question, ex.context).into_bytes(),
        cap.max(PREFIX.len()),
    )
}

/// Trimmed bare decimal integer below `num_classes`; anything else is
/// `None` and scores as wrong.
pub fn parse_class_output(decoded: &str, num_classes: usize) -> Option<usize> {
    let t = decoded.trim();
    if t.is_empty() || !t.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    t.parse::<usize>().ok().filter(|&l| l < num_classes)
}

pub fn accuracy(predictions: &[Option<usize>], golds: &[usize]) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::data(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            golds.len()
        )));
    }
    if golds.is_empty() {
        return Err(Error::Empty("no examples to score".into()));
    }
    let correct = predictions.iter().zip(golds).filter(|(p, g)| **p == Some(**g)).count();
    Ok(correct as f64 / golds.len() as f64)
}

/// SQuAD answer normalisation: lowercase, drop ASCII punctuation, drop the
/// English articles (only for `en`), collapse whitespace.
pub fn normalize_answer(text: &str, language: &str) -> String {
    let lower = text.to_lowercase();
    let no_punct: String = lower.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    let english = language == "en";
    no_punct
        .split_whitespace()
        .filter(|w| !(english && matches!(*w, "a" | "an" | "the")))
        .collect::<Vec<_>>()
        .join(" ")
}

fn f1_single(prediction: &str, gold: &str, language: &str) -> f64 {
    let p = normalize_answer(prediction, language);
    let g = normalize_answer(gold, language);
    let pt: Vec<&str> = p.split_whitespace().collect();
    let gt: Vec<&str> = g.split_whitespace().collect();
    if pt.is_empty() || gt.is_empty() {
        return if pt.is_empty() && gt.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gt {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &pt {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pt.len() as f64;
    let recall = overlap as f64 / gt.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Token F1 against the best-matching gold answer. An empty gold list
/// scores 0.
pub fn qa_f1(prediction: &str, gold_answers: &[String], language: &str) -> f64 {
    gold_answers.iter().map(|g| f1_single(prediction, g, language)).fold(0.0, f64::max)
}

pub fn exact_match(prediction: &str, gold_answers: &[String], language: &str) -> f64 {
    let p = normalize_answer(prediction, language);
    f64::from(u8::from(gold_answers.iter().any(|g| normalize_answer(g, language) == p)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TaskKind {
    Nli { num_classes: usize },
    Qa { language: String },
}

/// A task with its input cap and decode budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    #[serde(flatten)]
    pub kind: TaskKind,
    pub max_input_bytes: usize,
    pub max_output_ids: usize,
}

impl Task {
    pub fn nli(num_classes: usize) -> Self {
        Self {
            kind: TaskKind::Nli { num_classes },
            max_input_bytes: NLI_MAX_INPUT_BYTES,
            max_output_ids: NLI_MAX_OUTPUT_IDS,
        }
    }

    pub fn qa(language: &str) -> Self {
        Self {
            kind: TaskKind::Qa {
                language: language.to_string(),
            },
            max_input_bytes: QA_MAX_INPUT_BYTES,
            max_output_ids: QA_MAX_ANSWER_BYTES,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            TaskKind::Nli { .. } => "nli",
            TaskKind::Qa { .. } => "qa",
        }
    }

    pub fn metric(&self) -> &'static str {
        match self.kind {
            TaskKind::Nli { .. } => "accuracy",
            TaskKind::Qa { .. } => "f1",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TaskDataset {
    Nli(Vec<NliExample>),
    Qa(Vec<QaExample>),
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        match self {
            TaskDataset::Nli(v) => v.len(),
            TaskDataset::Qa(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check_task(&self, task: &Task) -> Result<()> {
        match (self, &task.kind) {
            (TaskDataset::Nli(v), TaskKind::Nli { num_classes }) => {
                if let Some(ex) = v.iter().find(|e| e.label >= *num_classes) {
                    return Err(Error::data(format!("label {} outside {num_classes} classes", ex.label)));
                }
                Ok(())
            }
            (TaskDataset::Qa(v), TaskKind::Qa { .. }) => {
                if v.iter().any(|e| e.gold_answers.is_empty()) {
                    return Err(Error::data("QA example without gold answers"));
                }
                Ok(())
            }
            _ => Err(Error::config("dataset does not match the task kind")),
        }
    }

    /// Encoder inputs after formatting and capping.
    pub fn inputs(&self, task: &Task) -> Vec<Vec<u32>> {
        match self {
            TaskDataset::Nli(v) => v
                .iter()
                .map(|e| encode_bytes(&format_nli_input_capped(e, task.max_input_bytes)))
                .collect(),
            TaskDataset::Qa(v) => v
                .iter()
                .map(|e| encode_bytes(&format_qa_input_capped(e, task.max_input_bytes)))
                .collect(),
        }
    }

    /// Teacher-forcing pairs: the label digits, or the first gold answer,
    /// followed by EOS.
    pub fn training_examples(&self, task: &Task) -> Result<Vec<PretrainExample>> {
        self.check_task(task)?;
        let targets: Vec<String> = match self {
            TaskDataset::Nli(v) => v.iter().map(|e| nli_target(e.label)).collect(),
            TaskDataset::Qa(v) => v.iter().map(|e| e.gold_answers[0].clone()).collect(),
        };
        Ok(self
            .inputs(task)
            .into_iter()
            .zip(targets)
            .map(|(input_ids, t)| {
                let mut bytes = t.into_bytes();
                bytes.truncate(task.max_output_ids.saturating_sub(1));
                let mut target_ids = encode_bytes(&bytes);
                target_ids.push(EOS);
                PretrainExample { input_ids, target_ids }
            })
            .collect())
    }

    /// Ordered subset by index.
    pub fn select(&self, idx: &[usize]) -> TaskDataset {
        match self {
            TaskDataset::Nli(v) => TaskDataset::Nli(idx.iter().map(|&i| v[i].clone()).collect()),
            TaskDataset::Qa(v) => TaskDataset::Qa(idx.iter().map(|&i| v[i].clone()).collect()),
        }
    }
}

/// Bytes of a decoded id sequence up to EOS; non-byte ids are skipped.
pub fn ids_to_text(ids: &[u32]) -> String {
    let bytes: Vec<u8> = ids
        .iter()
        .take_while(|&&id| id != EOS)
        .filter(|&&id| is_byte_id(id))
        .map(|&id| (id - BYTE_OFFSET) as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Anything that maps encoder ids to output ids.
pub trait Predictor {
    fn predict(&self, input_ids: &[u32], max_output: usize) -> Result<Vec<u32>>;
}

impl<T: Float> Predictor for Model<T> {
    fn predict(&self, input_ids: &[u32], max_output: usize) -> Result<Vec<u32>> {
        self.greedy_decode(input_ids, max_output)
    }
}

/// Per-example scores (1/0 for NLI, F1 for QA), in dataset order.
pub fn score_examples(predictor: &dyn Predictor, dataset: &TaskDataset, task: &Task) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation dataset is empty".into()));
    }
    dataset.check_task(task)?;
    let inputs = dataset.inputs(task);
    let mut scores = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let out = predictor.predict(input, task.max_output_ids)?;
        let text = ids_to_text(&out);
        let s = match (dataset, &task.kind) {
            (TaskDataset::Nli(v), TaskKind::Nli { num_classes }) => {
                f64::from(u8::from(parse_class_output(&text, *num_classes) == Some(v[i].label)))
            }
            (TaskDataset::Qa(v), TaskKind::Qa { language }) => qa_f1(&text, &v[i].gold_answers, language),
            _ => unreachable!("checked above"),
        };
        scores.push(s);
    }
    Ok(scores)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub metric: String,
    /// Fraction in [0, 1]; tables show it multiplied by 100.
    pub value: f64,
    pub per_seed: Vec<f64>,
    pub n: usize,
}

impl MetricReport {
    pub fn percent(&self) -> f64 {
        self.value * 100.0
    }

    /// Mean over seed-level values.
    pub fn from_seeds(task: &Task, per_seed: Vec<f64>, n: usize) -> Self {
        let value = per_seed.iter().sum::<f64>() / per_seed.len().max(1) as f64;
        Self {
            task: task.name().into(),
            metric: task.metric().into(),
            value,
            per_seed,
            n,
        }
    }
}

/// Formats, decodes and scores every example; the value is the mean
/// per-example score.
pub fn evaluate_task(predictor: &dyn Predictor, dataset: &TaskDataset, task: &Task) -> Result<MetricReport> {
    let scores = score_examples(predictor, dataset, task)?;
    let value = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok(MetricReport {
        task: task.name().into(),
        metric: task.metric().into(),
        value,
        per_seed: Vec::new(),
        n: scores.len(),
    })
}

fn load_jsonl<T: serde::de::DeserializeOwned>(source: impl BufRead) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::data(format!("line {}: {e}", i + 1)))?;
        out.push(item);
    }
    Ok(out)
}

pub fn load_nli_jsonl(source: impl BufRead) -> Result<Vec<NliExample>> {
    load_jsonl(source)
}

pub fn load_qa_jsonl(source: impl BufRead) -> Result<Vec<QaExample>> {
    load_jsonl(source)
}
