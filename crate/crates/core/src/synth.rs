//! Synthetic baseline corpora: Zipf-weighted nested ("hierarchical") word
//! sequences and uniform random-word ("nonsense") text.

use std::collections::HashMap;

use rand::{Rng as _, RngCore};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Document};
use crate::error::{Error, Result};
use crate::rng::{derived_rng, Rng};

pub const DEFAULT_TOP_K: usize = 50_000;
pub const DEFAULT_DOC_LIMIT: usize = 1_000_000;

pub const HIERARCHICAL_TAG: &str = "synthetic-hier";
pub const NONSENSE_TAG: &str = "synthetic-nonsense";

/// Ranked word list with sampling weights summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZipfVocabulary {
    entries: Vec<(String, f64)>,
    /// Set when the source had fewer distinct words than requested.
    #[serde(default)]
    pub short: bool,
}

impl ZipfVocabulary {
    /// Builds a vocabulary from raw `(word, weight)` pairs, renormalising
    /// the weights and sorting by descending weight.
    pub fn from_weights(mut entries: Vec<(String, f64)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Empty("vocabulary has no words".into()));
        }
        if entries.iter().any(|(_, w)| !w.is_finite() || *w <= 0.0) {
            return Err(Error::config("vocabulary weights must be positive and finite"));
        }
        let total: f64 = entries.iter().map(|(_, w)| w).sum();
        for e in &mut entries {
            e.1 /= total;
        }
        entries.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self { entries, short: false })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn word(&self, index: usize) -> &str {
        &self.entries[index].0
    }

    pub fn weight(&self, index: usize) -> f64 {
        self.entries[index].1
    }

    pub fn sampler(&self) -> ZipfSampler {
        ZipfSampler::new(self.entries.iter().map(|e| e.1))
    }
}

/// Inverse-CDF sampler over vocabulary ranks.
///
/// Each draw consumes exactly one `f64` from the stream: `u in [0, 1)` is
/// scaled by the total weight and the first rank whose cumulative weight
/// exceeds it is returned.
#[derive(Clone, Debug)]
pub struct ZipfSampler {
    cumulative: Vec<f64>,
}

impl ZipfSampler {
    pub fn new(weights: impl IntoIterator<Item = f64>) -> Self {
        let mut acc = 0.0;
        let cumulative = weights
            .into_iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        Self { cumulative }
    }

    pub fn sample(&self, rng: &mut impl RngCore) -> usize {
        let total = *self.cumulative.last().expect("non-empty sampler");
        let u: f64 = rng.random::<f64>() * total;
        self.cumulative.partition_point(|&c| c <= u).min(self.cumulative.len() - 1)
    }
}

/// Top `top_k` whitespace-delimited words over the first `doc_limit`
/// documents, weighted by renormalised frequency. Ties break
/// lexicographically.
pub fn build_zipf_vocab<'a, I>(docs: I, top_k: usize, doc_limit: usize) -> Result<ZipfVocabulary>
where
    I: IntoIterator<Item = &'a Document>,
{
    if top_k == 0 {
        return Err(Error::config("top_k must be at least 1"));
    }
    let mut counts: HashMap<&str, u64> = HashMap::new();
    let mut seen_docs = 0usize;
    for doc in docs.into_iter().take(doc_limit) {
        seen_docs += 1;
        for w in doc.text.split_whitespace() {
            *counts.entry(w).or_default() += 1;
        }
    }
    if seen_docs == 0 {
        return Err(Error::Empty("no documents to build a vocabulary from".into()));
    }
    if counts.is_empty() {
        return Err(Error::Empty("documents contain no words".into()));
    }
    let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let short = ranked.len() < top_k;
    if short {
        log::warn!("only {} distinct words available, {} requested", ranked.len(), top_k);
    }
    ranked.truncate(top_k);
    let total: u64 = ranked.iter().map(|e| e.1).sum();
    let entries = ranked.into_iter().map(|(w, c)| (w.to_string(), c as f64 / total as f64)).collect();
    Ok(ZipfVocabulary { entries, short })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HierarchicalGenConfig {
    pub open_probability: f64,
    pub max_depth: usize,
    pub target_doc_bytes: usize,
    pub seed: u64,
}

impl Default for HierarchicalGenConfig {
    fn default() -> Self {
        Self {
            open_probability: 0.5,
            max_depth: 64,
            target_doc_bytes: 2048,
            seed: 0,
        }
    }
}

impl HierarchicalGenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.open_probability > 0.0 && self.open_probability < 1.0) {
            return Err(Error::config("open_probability must lie in (0, 1)"));
        }
        if self.max_depth == 0 {
            return Err(Error::config("max_depth must be at least 1"));
        }
        if self.target_doc_bytes == 0 {
            return Err(Error::config("target_doc_bytes must be positive"));
        }
        Ok(())
    }
}

/// A generated nested document: vocabulary ranks plus whether each token
/// opened (`true`) or closed a scope.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HierarchicalDoc {
    pub tokens: Vec<usize>,
    pub opens: Vec<bool>,
    pub max_depth: usize,
}

impl HierarchicalDoc {
    pub fn render(&self, vocab: &ZipfVocabulary) -> String {
        let mut out = String::new();
        for (i, &t) in self.tokens.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(vocab.word(t));
        }
        out
    }
}

/// Stack walk: while the stack is non-empty and the byte target is not yet
/// reached, open with probability `open_probability` (forced close at
/// `max_depth`); an empty stack with budget left always opens; once the
/// target is reached the stack drains. Every open word is closed by the
/// same word.
///
/// Random draws, in order: one `f64` per free open/close decision, then one
/// `f64` per opened word for the Zipf sampler.
pub fn generate_hierarchical(vocab: &ZipfVocabulary, cfg: &HierarchicalGenConfig, rng: &mut Rng) -> HierarchicalDoc {
    let sampler = vocab.sampler();
    let mut stack: Vec<usize> = Vec::new();
    let mut doc = HierarchicalDoc {
        tokens: Vec::new(),
        opens: Vec::new(),
        max_depth: 0,
    };
    let mut bytes = 0usize;
    let emit = |doc: &mut HierarchicalDoc, bytes: &mut usize, word: usize, open: bool| {
        *bytes += vocab.word(word).len() + usize::from(!doc.tokens.is_empty());
        doc.tokens.push(word);
        doc.opens.push(open);
    };
    loop {
        let budget_left = bytes < cfg.target_doc_bytes;
        let open = if stack.is_empty() {
            if !budget_left {
                break;
            }
            true
        } else if stack.len() >= cfg.max_depth || !budget_left {
            false
        } else {
            rng.random::<f64>() < cfg.open_probability
        };
        if open {
            let w = sampler.sample(rng);
            stack.push(w);
            doc.max_depth = doc.max_depth.max(stack.len());
            emit(&mut doc, &mut bytes, w, true);
        } else {
            let w = stack.pop().expect("close with non-empty stack");
            emit(&mut doc, &mut bytes, w, false);
        }
    }
    doc
}

/// Space-joined nested document.
pub fn generate_hierarchical_doc(vocab: &ZipfVocabulary, cfg: &HierarchicalGenConfig, rng: &mut Rng) -> String {
    generate_hierarchical(vocab, cfg, rng).render(vocab)
}

/// Result of scanning a text as a nested word sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct BalanceCheck {
    pub balanced: bool,
    pub max_depth: usize,
}

/// Text-only balance check. A token equal to the top of the stack closes
/// it, anything else opens; the document is balanced when the stack ends
/// empty. This cancels adjacent equal pairs, so it accepts exactly the
/// sequences the generator can produce and reports a depth no larger than
/// the generator's.
pub fn check_balanced(text: &str) -> BalanceCheck {
    let mut stack: Vec<&str> = Vec::new();
    let mut max_depth = 0;
    for tok in text.split_whitespace() {
        if stack.last() == Some(&tok) {
            stack.pop();
        } else {
            stack.push(tok);
            max_depth = max_depth.max(stack.len());
        }
    }
    BalanceCheck {
        balanced: stack.is_empty(),
        max_depth,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NonsenseGenConfig {
    pub vocab_size: usize,
    pub word_length_range: (usize, usize),
    pub sentence_length_range: (usize, usize),
    pub target_doc_bytes: usize,
    pub seed: u64,
}

impl Default for NonsenseGenConfig {
    fn default() -> Self {
        Self {
            vocab_size: 5000,
            word_length_range: (2, 10),
            sentence_length_range: (5, 25),
            target_doc_bytes: 2048,
            seed: 0,
        }
    }
}

impl NonsenseGenConfig {
    pub fn validate(&self) -> Result<()> {
        let (wl, wh) = self.word_length_range;
        let (sl, sh) = self.sentence_length_range;
        if self.vocab_size == 0 || wl == 0 || wl > wh || sl == 0 || sl > sh || self.target_doc_bytes == 0 {
            return Err(Error::config("nonsense config needs positive sizes and non-empty ranges"));
        }
        let capacity: f64 = (wl..=wh).map(|l| 26f64.powi(l as i32)).sum();
        if (self.vocab_size as f64) > capacity / 2.0 {
            return Err(Error::config("vocab_size too large for the word length range"));
        }
        Ok(())
    }

    /// Fixed random vocabulary of unique lowercase words, drawn from the
    /// config seed.
    pub fn random_vocabulary(&self) -> Result<Vec<String>> {
        self.validate()?;
        let mut rng = derived_rng(self.seed, u64::MAX);
        let mut seen = std::collections::HashSet::new();
        let mut words = Vec::with_capacity(self.vocab_size);
        while words.len() < self.vocab_size {
            let len = rng.random_range(self.word_length_range.0..=self.word_length_range.1);
            let w: String = (0..len).map(|_| (b'a' + rng.random_range(0..26u8)) as char).collect();
            if seen.insert(w.clone()) {
                words.push(w);
            }
        }
        Ok(words)
    }
}

/// Period-terminated sentences of i.i.d. uniform words, until the document
/// reaches `target_doc_bytes`.
pub fn generate_nonsense_doc(vocab: &[String], cfg: &NonsenseGenConfig, rng: &mut Rng) -> String {
    let mut out = String::new();
    while out.len() < cfg.target_doc_bytes {
        if !out.is_empty() {
            out.push(' ');
        }
        let len = rng.random_range(cfg.sentence_length_range.0..=cfg.sentence_length_range.1);
        for i in 0..len {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(&vocab[rng.random_range(0..vocab.len())]);
        }
        out.push('.');
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    #[serde(alias = "hier")]
    Hierarchical,
    Nonsense,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hier" | "hierarchical" => Ok(SynthKind::Hierarchical),
            "nonsense" => Ok(SynthKind::Nonsense),
            other => Err(Error::config(format!("unknown synthetic corpus kind `{other}`"))),
        }
    }
}

/// Generator plus its parameters.
pub enum SynthSpec<'a> {
    Hierarchical {
        vocab: &'a ZipfVocabulary,
        cfg: HierarchicalGenConfig,
    },
    Nonsense {
        cfg: NonsenseGenConfig,
    },
}

/// Emits documents (each seeded by `(seed, doc index)`) until at least
/// `total_bytes` have been produced.
pub fn generate_corpus(spec: &SynthSpec<'_>, total_bytes: u64) -> Result<Corpus> {
    if total_bytes == 0 {
        return Err(Error::config("total_bytes must be at least 1"));
    }
    let mut documents = Vec::new();
    let mut bytes = 0u64;
    match spec {
        SynthSpec::Hierarchical { vocab, cfg } => {
            cfg.validate()?;
            if vocab.is_empty() {
                return Err(Error::Empty("vocabulary has no words".into()));
            }
            while bytes < total_bytes {
                let i = documents.len();
                let text = generate_hierarchical_doc(vocab, cfg, &mut derived_rng(cfg.seed, i as u64));
                bytes += text.len() as u64;
                documents.push(Document::new(format!("hier-{i}"), HIERARCHICAL_TAG, text));
            }
        }
        SynthSpec::Nonsense { cfg } => {
            let vocab = cfg.random_vocabulary()?;
            while bytes < total_bytes {
                let i = documents.len();
                let text = generate_nonsense_doc(&vocab, cfg, &mut derived_rng(cfg.seed, i as u64));
                bytes += text.len() as u64;
                documents.push(Document::new(format!("nonsense-{i}"), NONSENSE_TAG, text));
            }
        }
    }
    Ok(Corpus { documents })
}

/// Balance and frequency-fit summary of a generated corpus.
#[derive(Clone, Debug, Serialize)]
pub struct ValidationReport {
    pub kind: String,
    pub documents: usize,
    pub total_bytes: u64,
    pub balanced_fraction: f64,
    pub max_depth_observed: usize,
    /// Total-variation distance between opened-word frequencies and the
    /// vocabulary weights (hierarchical only).
    pub frequency_tv: Option<f64>,
}

pub fn validate_corpus(kind: &SynthKind, corpus: &Corpus, vocab: Option<&ZipfVocabulary>) -> ValidationReport {
    let mut balanced = 0usize;
    let mut max_depth = 0usize;
    let mut open_counts: HashMap<&str, u64> = HashMap::new();
    let mut opens = 0u64;
    for d in &corpus.documents {
        let check = check_balanced(&d.text);
        balanced += usize::from(check.balanced);
        max_depth = max_depth.max(check.max_depth);
        if vocab.is_some() {
            let mut stack: Vec<&str> = Vec::new();
            for tok in d.text.split_whitespace() {
                if stack.last() == Some(&tok) {
                    stack.pop();
                } else {
                    stack.push(tok);
                    *open_counts.entry(tok).or_default() += 1;
                    opens += 1;
                }
            }
        }
    }
    let frequency_tv = match (kind, vocab) {
        (SynthKind::Hierarchical, Some(v)) if opens > 0 => {
            let mut tv = 0.0;
            for (w, p) in v.entries() {
                let q = open_counts.get(w.as_str()).copied().unwrap_or(0) as f64 / opens as f64;
                tv += (p - q).abs();
            }
            let known: std::collections::HashSet<&str> = v.entries().iter().map(|(w, _)| w.as_str()).collect();
            let unknown: u64 = open_counts.iter().filter(|(w, _)| !known.contains(*w)).map(|(_, c)| c).sum();
            Some(0.5 * (tv + unknown as f64 / opens as f64))
        }
        _ => None,
    };
    let n = corpus.documents.len();
    ValidationReport {
        kind: match kind {
            SynthKind::Hierarchical => "hier".into(),
            SynthKind::Nonsense => "nonsense".into(),
        },
        documents: n,
        total_bytes: corpus.total_bytes(),
        balanced_fraction: if n == 0 { 1.0 } else { balanced as f64 / n as f64 },
        max_depth_observed: max_depth,
        frequency_tv,
    }
}
