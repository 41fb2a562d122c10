//! Language-tagged JSON Lines corpora and byte-budget trimming.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One corpus record. On disk: `{"id": .., "lang": .., "text": ..}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    #[serde(rename = "lang")]
    pub language: String,
    pub text: String,
}

impl Document {
    pub fn new(id: impl Into<String>, language: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            language: language.into(),
            text: text.into(),
        }
    }

    pub fn byte_len(&self) -> usize {
        self.text.len()
    }
}

/// Streams documents of one language out of a JSON Lines source.
///
/// Malformed lines (bad JSON, missing fields, invalid UTF-8, empty text) are
/// skipped and tallied in [`DocumentReader::rejects`]. Blank lines are
/// ignored.
pub struct DocumentReader<R> {
    source: R,
    language: Option<String>,
    rejects: usize,
    line_no: usize,
    buf: Vec<u8>,
}

impl<R: BufRead> DocumentReader<R> {
    /// `language = None` keeps every well-formed record.
    pub fn new(source: R, language: Option<&str>) -> Self {
        Self {
            source,
            language: language.map(str::to_string),
            rejects: 0,
            line_no: 0,
            buf: Vec::new(),
        }
    }

    pub fn rejects(&self) -> usize {
        self.rejects
    }

    fn parse(line: &[u8]) -> Option<Document> {
        let text = std::str::from_utf8(line).ok()?;
        let doc: Document = serde_json::from_str(text).ok()?;
        (!doc.text.is_empty()).then_some(doc)
    }
}

impl<R: BufRead> Iterator for DocumentReader<R> {
    type Item = Result<Document>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            match self.source.read_until(b'\n', &mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => return Some(Err(e.into())),
            }
            self.line_no += 1;
            let line = self.buf.trim_ascii();
            if line.is_empty() {
                continue;
            }
            match Self::parse(line) {
                Some(doc) => {
                    if self.language.as_deref().is_none_or(|l| l == doc.language) {
                        return Some(Ok(doc));
                    }
                }
                None => {
                    self.rejects += 1;
                    log::warn!("rejected malformed record on line {}", self.line_no);
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct IngestStats {
    pub accepted: usize,
    pub rejects: usize,
}

/// Reads all documents tagged `language`, in source order.
pub fn ingest_documents(source: impl BufRead, language: &str) -> Result<(Vec<Document>, IngestStats)> {
    let mut reader = DocumentReader::new(source, Some(language));
    let docs = reader.by_ref().collect::<Result<Vec<_>>>()?;
    let stats = IngestStats {
        accepted: docs.len(),
        rejects: reader.rejects(),
    };
    Ok((docs, stats))
}

/// Byte ceiling for a trimmed corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusBudget {
    pub max_bytes: u64,
}

impl CorpusBudget {
    /// Full-scale per-language budget (65 GB of UTF-8).
    pub const FULL_SCALE: CorpusBudget = CorpusBudget { max_bytes: 65_000_000_000 };
    /// Full-scale Bengali budget, its whole available corpus (32 GB).
    pub const FULL_SCALE_BENGALI: CorpusBudget = CorpusBudget { max_bytes: 32_000_000_000 };

    pub fn new(max_bytes: u64) -> Self {
        Self { max_bytes }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    pub documents: Vec<Document>,
}

impl Corpus {
    pub fn total_bytes(&self) -> u64 {
        self.documents.iter().map(|d| d.byte_len() as u64).sum()
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }
}

/// Keeps the longest prefix of whole documents that fits in the budget.
/// The first document that would overflow ends the corpus; it is never
/// split.
pub fn trim_to_budget<I>(docs: I, budget: CorpusBudget) -> Corpus
where
    I: IntoIterator<Item = Document>,
{
    let mut total = 0u64;
    let mut documents = Vec::new();
    for doc in docs {
        let next = total + doc.byte_len() as u64;
        if next > budget.max_bytes {
            break;
        }
        total = next;
        documents.push(doc);
    }
    Corpus { documents }
}

/// Fallible-stream variant of [`trim_to_budget`]; stops reading as soon as
/// the budget is reached.
pub fn trim_stream_to_budget<I>(docs: I, budget: CorpusBudget) -> Result<Corpus>
where
    I: IntoIterator<Item = Result<Document>>,
{
    let mut total = 0u64;
    let mut documents = Vec::new();
    for doc in docs {
        let doc = doc?;
        let next = total + doc.byte_len() as u64;
        if next > budget.max_bytes {
            break;
        }
        total = next;
        documents.push(doc);
    }
    Ok(Corpus { documents })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub doc_count: u64,
    pub total_bytes: u64,
    pub byte_histogram: Vec<u64>,
}

impl Default for CorpusStats {
    fn default() -> Self {
        Self {
            doc_count: 0,
            total_bytes: 0,
            byte_histogram: vec![0; 256],
        }
    }
}

impl CorpusStats {
    pub fn add(&mut self, doc: &Document) {
        self.doc_count += 1;
        self.total_bytes += doc.byte_len() as u64;
        for &b in doc.text.as_bytes() {
            self.byte_histogram[b as usize] += 1;
        }
    }

    /// Associative merge of two shard statistics.
    pub fn merge(mut self, other: &CorpusStats) -> Self {
        self.doc_count += other.doc_count;
        self.total_bytes += other.total_bytes;
        for (a, b) in self.byte_histogram.iter_mut().zip(&other.byte_histogram) {
            *a += b;
        }
        self
    }
}

pub fn compute_stats(docs: &[Document]) -> CorpusStats {
    let mut stats = CorpusStats::default();
    for d in docs {
        stats.add(d);
    }
    stats
}

pub fn write_jsonl(mut out: impl Write, docs: &[Document]) -> Result<()> {
    for d in docs {
        serde_json::to_writer(&mut out, d)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(id: &str, lang: &str, text: &str) -> String {
        serde_json::to_string(&Document::new(id, lang, text)).unwrap()
    }

    #[test]
    fn filters_by_language_in_order() {
        let src = [line("1", "pt", "olá"), line("2", "en", "hi"), line("3", "pt", "tchau")].join("\n");
        let (docs, stats) = ingest_documents(src.as_bytes(), "pt").unwrap();
        assert_eq!(docs.iter().map(|d| d.id.as_str()).collect::<Vec<_>>(), ["1", "3"]);
        assert_eq!(stats.rejects, 0);
    }

    #[test]
    fn empty_stream_has_no_rejects() {
        let (docs, stats) = ingest_documents(&b""[..], "pt").unwrap();
        assert!(docs.is_empty());
        assert_eq!(stats.rejects, 0);
    }

    #[test]
    fn malformed_lines_are_tallied_not_fatal() {
        let mut src: Vec<u8> = Vec::new();
        let mut malformed = 0;
        for i in 0..100 {
            match i % 14 {
                3 => {
                    src.extend_from_slice(b"{\"id\": \"x\", \"lang\": \"en\"");
                    malformed += 1;
                }
                7 => {
                    // invalid UTF-8 inside the text field
                    src.extend_from_slice(b"{\"id\": \"x\", \"lang\": \"en\", \"text\": \"a\xff\"}");
                    malformed += 1;
                }
                _ => src.extend_from_slice(line(&i.to_string(), "en", "text").as_bytes()),
            }
            src.push(b'\n');
        }
        assert_eq!(malformed, 14);
        let (docs, stats) = ingest_documents(src.as_slice(), "en").unwrap();
        assert_eq!(docs.len(), 86);
        assert_eq!(stats.rejects, 14);
    }

    #[test]
    fn empty_text_is_rejected() {
        let src = line("1", "en", "");
        let (docs, stats) = ingest_documents(src.as_bytes(), "en").unwrap();
        assert!(docs.is_empty());
        assert_eq!(stats.rejects, 1);
    }

    #[test]
    fn prefix_trimming() {
        let docs: Vec<Document> = [10, 20, 30]
            .iter()
            .enumerate()
            .map(|(i, &n)| Document::new(i.to_string(), "en", "x".repeat(n)))
            .collect();
        let c = trim_to_budget(docs.clone(), CorpusBudget::new(35));
        assert_eq!(c.len(), 2);
        assert_eq!(c.total_bytes(), 30);
        assert!(trim_to_budget(docs, CorpusBudget::new(0)).is_empty());
    }

    #[test]
    fn full_scale_budgets_are_plain_configuration() {
        assert_eq!(CorpusBudget::FULL_SCALE.max_bytes, 65_000_000_000);
        assert_eq!(CorpusBudget::FULL_SCALE_BENGALI.max_bytes, 32_000_000_000);
        let docs = vec![Document::new("a", "bn", "টেক্সট")];
        assert_eq!(trim_to_budget(docs, CorpusBudget::FULL_SCALE_BENGALI).len(), 1);
    }

    #[test]
    fn stats_of_small_corpora() {
        let empty = compute_stats(&[]);
        assert_eq!(empty.doc_count, 0);
        assert_eq!(empty.total_bytes, 0);
        assert!(empty.byte_histogram.iter().all(|&c| c == 0));

        let s = compute_stats(&[Document::new("1", "en", "ab")]);
        assert_eq!(s.total_bytes, 2);
        assert_eq!(s.byte_histogram[0x61], 1);
        assert_eq!(s.byte_histogram[0x62], 1);
        assert_eq!(s.byte_histogram.iter().sum::<u64>(), 2);
    }

    #[test]
    fn stats_merge_matches_whole() {
        let docs: Vec<Document> = (0..20).map(|i| Document::new(i.to_string(), "en", "é".repeat(i + 1))).collect();
        let whole = compute_stats(&docs);
        let merged = compute_stats(&docs[..7]).merge(&compute_stats(&docs[7..]));
        assert_eq!(whole, merged);
    }
}
