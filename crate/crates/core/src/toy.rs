//! Three-class toy NLI built from natural sentences. The hypothesis is a
//! short word span: copied from the premise (entailment, label 0), taken
//! from an unrelated sentence (neutral, 1), or copied from the premise with
//! one word swapped for a foreign word (contradiction, 2).

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::eval::{NliExample, TaskDataset};
use crate::rng::{derived_rng, rng_from};
use crate::train::TaskSplits;

pub const ENTAILMENT: usize = 0;
pub const NEUTRAL: usize = 1;
pub const CONTRADICTION: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyNliConfig {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    /// Inclusive word-count range of premises.
    pub premise_words: (usize, usize),
    /// Inclusive word-count range of hypotheses.
    pub hypothesis_words: (usize, usize),
    pub seed: u64,
}

impl Default for ToyNliConfig {
    fn default() -> Self {
        Self {
            train: 640,
            validation: 120,
            test: 300,
            premise_words: (8, 24),
            hypothesis_words: (3, 6),
            seed: 0,
        }
    }
}

impl ToyNliConfig {
    pub fn validate(&self) -> Result<()> {
        let (pl, ph) = self.premise_words;
        let (hl, hh) = self.hypothesis_words;
        if hl < 2 || hl > hh || pl > ph || ph == 0 || hh > pl {
            return Err(Error::config("hypothesis span must have at least 2 words and fit in every premise"));
        }
        if self.train == 0 || self.validation == 0 || self.test == 0 {
            return Err(Error::config("every split needs at least one example"));
        }
        Ok(())
    }
}

/// Sentences of printable ASCII words, split on `.`, `?` and `!`.
pub fn sentences(docs: &[Document], words: (usize, usize)) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    for d in docs {
        for s in d.text.split(['.', '?', '!']) {
            let w: Vec<String> = s.split_whitespace().map(str::to_string).collect();
            let clean = w.iter().all(|t| t.bytes().all(|b| b.is_ascii_graphic()));
            if clean && (words.0..=words.1).contains(&w.len()) {
                out.push(w);
            }
        }
    }
    out.sort();
    out.dedup();
    out
}

fn contains_span(hay: &[String], needle: &[String]) -> bool {
    hay.windows(needle.len()).any(|w| w == needle)
}

fn make_example(premise: &[String], other: &[String], label: usize, len: usize, rng: &mut crate::rng::Rng) -> Option<NliExample> {
    let start = rng.random_range(0..=premise.len() - len);
    let mut hyp: Vec<String> = premise[start..start + len].to_vec();
    match label {
        ENTAILMENT => {}
        NEUTRAL => {
            let len = len.min(other.len());
            let s = rng.random_range(0..=other.len() - len);
            hyp = other[s..s + len].to_vec();
            if hyp.iter().filter(|w| premise.contains(w)).count() * 2 > len {
                return None;
            }
        }
        _ => {
            let foreign: Vec<&String> = other.iter().filter(|w| !premise.contains(w)).collect();
            if foreign.is_empty() {
                return None;
            }
            let at = rng.random_range(0..len);
            hyp[at] = foreign[rng.random_range(0..foreign.len())].clone();
            if contains_span(premise, &hyp) {
                return None;
            }
        }
    }
    Some(NliExample {
        premise: premise.join(" "),
        hypothesis: hyp.join(" "),
        label,
    })
}

fn build_split(pool: &[Vec<String>], n: usize, cfg: &ToyNliConfig, split: u64) -> Result<Vec<NliExample>> {
    let mut rng = derived_rng(cfg.seed, split);
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    let mut i = 0usize;
    while out.len() < n {
        attempts += 1;
        if attempts > 50 * n + 100 {
            return Err(Error::Empty("not enough distinct sentences for the toy NLI task".into()));
        }
        let premise = &pool[i % pool.len()];
        i += 1;
        let other = &pool[rng.random_range(0..pool.len())];
        let len = rng.random_range(cfg.hypothesis_words.0..=cfg.hypothesis_words.1.min(premise.len()));
        if let Some(ex) = make_example(premise, other, out.len() % 3, len, &mut rng) {
            out.push(ex);
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}

/// Balanced train, validation and test splits whose premises come from
/// disjoint sentence pools.
pub fn toy_nli(docs: &[Document], cfg: &ToyNliConfig) -> Result<TaskSplits> {
    cfg.validate()?;
    let mut pool = sentences(docs, cfg.premise_words);
    if pool.len() < 3 {
        return Err(Error::Empty("source text has fewer than 3 usable sentences".into()));
    }
    pool.shuffle(&mut rng_from(cfg.seed));
    let total = cfg.train + cfg.validation + cfg.test;
    let share = |n: usize| (pool.len() * n / total).max(1);
    let (a, b) = (share(cfg.train), share(cfg.validation));
    let (train_pool, rest) = pool.split_at(a.min(pool.len() - 2));
    let (val_pool, test_pool) = rest.split_at(b.min(rest.len() - 1));
    Ok(TaskSplits {
        train: TaskDataset::Nli(build_split(train_pool, cfg.train, cfg, 0)?),
        validation: TaskDataset::Nli(build_split(val_pool, cfg.validation, cfg, 1)?),
        test: TaskDataset::Nli(build_split(test_pool, cfg.test, cfg, 2)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn docs() -> Vec<Document> {
        let words = [
            "alpha", "beta", "gamma", "delta", "omega", "sigma", "kappa", "theta", "lambda", "zeta",
        ];
        let text: String = (0..300)
            .map(|i| {
                let n = 8 + i % 9;
                let s: Vec<&str> = (0..n).map(|j| words[(i * 7 + j * (i % 5 + 1)) % words.len()]).collect();
                format!("{} {i}. ", s.join(" "))
            })
            .collect();
        vec![Document::new("d", "en", text)]
    }

    fn splits() -> TaskSplits {
        let cfg = ToyNliConfig {
            train: 90,
            validation: 30,
            test: 30,
            ..Default::default()
        };
        toy_nli(&docs(), &cfg).unwrap()
    }

    fn nli(d: &TaskDataset) -> &[NliExample] {
        match d {
            TaskDataset::Nli(v) => v,
            TaskDataset::Qa(_) => unreachable!(),
        }
    }

    #[test]
    fn labels_are_balanced_and_consistent() {
        let s = splits();
        for d in [&s.train, &s.validation, &s.test] {
            let v = nli(d);
            for c in 0..3 {
                assert_eq!(v.iter().filter(|e| e.label == c).count(), v.len() / 3);
            }
            for e in v {
                let p: Vec<String> = e.premise.split(' ').map(str::to_string).collect();
                let h: Vec<String> = e.hypothesis.split(' ').map(str::to_string).collect();
                let copied = contains_span(&p, &h);
                assert_eq!(copied, e.label == ENTAILMENT, "{e:?}");
                if e.label == CONTRADICTION {
                    assert_eq!(h.iter().filter(|w| !p.contains(w)).count(), 1, "{e:?}");
                }
            }
        }
    }

    #[test]
    fn premise_pools_are_disjoint() {
        let s = splits();
        let train: std::collections::HashSet<&str> = nli(&s.train).iter().map(|e| e.premise.as_str()).collect();
        assert!(nli(&s.test).iter().all(|e| !train.contains(e.premise.as_str())));
        assert!(nli(&s.validation).iter().all(|e| !train.contains(e.premise.as_str())));
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(splits(), splits());
    }

    #[test]
    fn too_little_text_is_an_error() {
        let d = vec![Document::new("d", "en", "one two three four five six seven eight.")];
        assert!(toy_nli(&d, &ToyNliConfig::default()).is_err());
    }
}
