//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test -p bytelm --test acceptance -- A2 A7` runs a subset. The
//! end-to-end reproduction (A11) takes the better part of an hour and runs
//! only when named explicitly or when `BYTELM_ACCEPT_FULL=1` is set.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fs::File;
use std::io::BufReader;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::{Rng as _, RngCore};

use bytelm::codec::{
    corrupt_spans_with, decode_ids, encode_bytes, is_byte_id, pack_corpus, reconstruct, sentinel_index, SpanCorruptionConfig, EOS,
};
use bytelm::corpus::{ingest_documents, trim_to_budget, Corpus, CorpusBudget, Document};
use bytelm::eval::{accuracy, evaluate_task, qa_f1, NliExample, Predictor, Task, TaskDataset};
use bytelm::model::{count_params, Model, ModelConfig};
use bytelm::rng::{derived_rng, rng_from, Rng};
use bytelm::synth::{
    build_zipf_vocab, check_balanced, generate_corpus, generate_hierarchical, HierarchicalGenConfig, NonsenseGenConfig, SynthSpec,
    ZipfVocabulary,
};
use bytelm::tensor::gradcheck::check_all_ops;
use bytelm::tensor::{Tape, Tensor};
use bytelm::toy::{toy_nli, ToyNliConfig};
use bytelm::train::{
    accumulate_gradients, finetune, linear_decay_lr, pretrain, step_plan, stop_point, Adafactor, AdafactorConfig, FinetuneConfig,
    PretrainSchedule, Pretrainer,
};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn natural_docs() -> Vec<Document> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/natural_en.jsonl.gz");
    let f = File::open(path).expect("natural-text fixture");
    let (docs, _) = ingest_documents(BufReader::new(flate2::read::GzDecoder::new(f)), "en").expect("fixture parses");
    docs
}

/// The 1 MB natural-text fixture and the held-out documents after it.
fn natural_split() -> (Corpus, Vec<Document>) {
    let docs = natural_docs();
    let corpus = trim_to_budget(docs.clone(), CorpusBudget::new(1_000_000));
    let rest = docs[corpus.documents.len()..].to_vec();
    (corpus, rest)
}

fn a1() -> Check {
    let mut rng = rng_from(1);
    let mut invalid = 0;
    for i in 0..10_000 {
        let len = rng.random_range(0..256usize);
        let mut bytes = vec![0u8; len];
        rng.fill_bytes(&mut bytes);
        if i % 4 == 0 && len > 0 {
            // a lone continuation byte
            let at = rng.random_range(0..len);
            bytes[at] = 0x80 | (bytes[at] & 0x3f);
        }
        if std::str::from_utf8(&bytes).is_err() {
            invalid += 1;
        }
        let ids = encode_bytes(&bytes);
        ensure(ids.len() == bytes.len(), || {
            format!("case {i}: {} ids for {} bytes", ids.len(), bytes.len())
        })?;
        let back = decode_ids(&ids).map_err(|e| format!("case {i}: {e}"))?;
        ensure(back == bytes, || format!("case {i}: round trip differs"))?;
    }
    ensure(invalid > 5_000, || format!("only {invalid} invalid UTF-8 cases"))?;
    Ok(format!("10000/10000 round trips, {invalid} invalid UTF-8"))
}

fn a2() -> Check {
    let mut rng = rng_from(2);
    for i in 0..10_000 {
        let cfg = SpanCorruptionConfig {
            corruption_rate: rng.random_range(0.01..0.99),
            mean_span_length: rng.random_range(1.0..40.0),
            sequence_length: 1024,
            seed: i,
        };
        let len = rng.random_range(2..600usize);
        let ids: Vec<u32> = (0..len).map(|_| rng.random_range(0..256u32) + 2).collect();
        let ex = corrupt_spans_with(&ids, &cfg, &mut rng).map_err(|e| format!("case {i}: {e}"))?;
        let back = reconstruct(&ex).map_err(|e| format!("case {i}: {e}"))?;
        ensure(back == ids, || format!("case {i}: reconstruction differs ({cfg:?}, len {len})"))?;
    }

    let cfg = SpanCorruptionConfig::default();
    let examples = pack_corpus(&natural_docs(), &cfg).map_err(|e| e.to_string())?;
    let (mut corrupted, mut clean, mut spans) = (0usize, 0usize, 0usize);
    for ex in &examples {
        clean += ex.input_ids.iter().filter(|&&id| is_byte_id(id)).count();
        spans += ex.input_ids.iter().filter(|&&id| sentinel_index(id).is_some()).count();
        corrupted += ex.target_ids.iter().filter(|&&id| is_byte_id(id)).count();
        ensure(ex.target_ids.last() == Some(&EOS), || "target without EOS".into())?;
    }
    let total = corrupted + clean;
    let fraction = corrupted as f64 / total as f64;
    let mean_span = corrupted as f64 / spans as f64;
    ensure(total >= 1_000_000, || format!("only {total} bytes"))?;
    ensure((0.14..=0.16).contains(&fraction), || format!("corrupted fraction {fraction:.4}"))?;
    ensure((19.0..=21.0).contains(&mean_span), || format!("mean span {mean_span:.3}"))?;
    Ok(format!(
        "10000/10000 inverses; {total} bytes: fraction {fraction:.4}, mean span {mean_span:.2}"
    ))
}

/// Independent stack walk over the generator's open/close record.
fn stack_oracle(tokens: &[usize], opens: &[bool]) -> Option<usize> {
    let mut stack = Vec::new();
    let mut depth = 0;
    for (&t, &open) in tokens.iter().zip(opens) {
        if open {
            stack.push(t);
            depth = depth.max(stack.len());
        } else if stack.pop() != Some(t) {
            return None;
        }
    }
    stack.is_empty().then_some(depth)
}

fn a3() -> Check {
    let (corpus, _) = natural_split();
    let vocab: ZipfVocabulary = build_zipf_vocab(&corpus.documents, 100, usize::MAX).map_err(|e| e.to_string())?;
    let cfg = HierarchicalGenConfig::default();
    let mut counts = vec![0u64; vocab.len()];
    let mut draws = 0u64;
    let mut deepest = 0;
    let mut doc_index = 0u64;
    while doc_index < 10_000 || draws < 1_000_000 {
        let doc = generate_hierarchical(&vocab, &cfg, &mut derived_rng(3, doc_index));
        let depth = stack_oracle(&doc.tokens, &doc.opens).ok_or_else(|| format!("doc {doc_index} unbalanced"))?;
        ensure(depth == doc.max_depth && depth <= cfg.max_depth, || {
            format!(
                "doc {doc_index}: depth {depth}, reported {}, limit {}",
                doc.max_depth, cfg.max_depth
            )
        })?;
        let text = check_balanced(&doc.render(&vocab));
        ensure(text.balanced && text.max_depth <= cfg.max_depth, || {
            format!("doc {doc_index}: text check {text:?}")
        })?;
        deepest = deepest.max(depth);
        for (&t, &open) in doc.tokens.iter().zip(&doc.opens) {
            if open && draws < 1_000_000 {
                counts[t] += 1;
                draws += 1;
            }
        }
        doc_index += 1;
    }
    let tv = 0.5
        * counts
            .iter()
            .enumerate()
            .map(|(i, &c)| (c as f64 / draws as f64 - vocab.weight(i)).abs())
            .sum::<f64>();
    ensure(tv <= 0.01, || format!("total variation {tv:.5}"))?;
    Ok(format!(
        "{doc_index} docs balanced, deepest {deepest} <= {}; TV {tv:.5} over {draws} draws",
        cfg.max_depth
    ))
}

fn a4() -> Check {
    let mut ops = 0;
    let mut worst = [0.0f64; 2];
    for (k, reports) in [check_all_ops::<f32>(0), check_all_ops::<f64>(0)].into_iter().enumerate() {
        let limit = [1e-3, 1e-4][k];
        for r in reports.map_err(|e| e.to_string())? {
            ensure(r.passed && r.tolerance <= limit && r.max_rel_error <= limit, || format!("{r:?}"))?;
            worst[k] = worst[k].max(r.max_rel_error);
            ops += 1;
        }
    }
    let cfg = ModelConfig::default();
    let model = Model::<f32>::init(cfg.clone(), 4).map_err(|e| e.to_string())?;
    let text = b"The quick brown fox jumps over the lazy dog while the band plays on, twice.";
    let ex = corrupt_spans_with(&encode_bytes(text), &SpanCorruptionConfig::default(), &mut rng_from(4)).map_err(|e| e.to_string())?;
    let batch = [ex];
    let r32 = model.grad_check(&batch, 4, 0).map_err(|e| e.to_string())?;
    let r64 = model.cast::<f64>().grad_check(&batch, 4, 0).map_err(|e| e.to_string())?;
    ensure(r32.passed && r32.max_rel_error <= 1e-3, || format!("{r32:?}"))?;
    ensure(r64.passed && r64.max_rel_error <= 1e-4, || format!("{r64:?}"))?;
    Ok(format!(
        "{ops} op checks (worst f32 {:.1e}, f64 {:.1e}); model {} params: f32 {:.1e} over {} coords, f64 {:.1e}",
        worst[0],
        worst[1],
        count_params(&cfg),
        r32.max_rel_error,
        r32.checked,
        r64.max_rel_error
    ))
}

fn a5() -> Check {
    let (corpus, _) = natural_split();
    let examples = pack_corpus(&corpus.documents, &SpanCorruptionConfig::default()).map_err(|e| e.to_string())?;
    let schedule = PretrainSchedule::desk();
    let mut trainer =
        Pretrainer::new(ModelConfig::default(), schedule.clone(), 0, AdafactorConfig::default()).map_err(|e| e.to_string())?;
    let window = 20;
    let mut initial = None;
    let mut recent: Vec<f64> = Vec::new();
    let mut reached = None;
    let curve = trainer
        .run(&examples, None, |r| {
            let first = *initial.get_or_insert(r.loss);
            recent.push(r.loss);
            if recent.len() > window {
                recent.remove(0);
            }
            let avg = recent.iter().sum::<f64>() / recent.len() as f64;
            if recent.len() == window && avg <= 0.6 * first {
                reached = Some((r.step, avg));
                return false;
            }
            true
        })
        .map_err(|e| e.to_string())?;
    let initial = initial.ok_or("no steps ran")?;
    let ln_v = (358f64).ln();
    ensure((initial - ln_v).abs() <= 0.5, || {
        format!("initial loss {initial:.3} vs ln 358 = {ln_v:.3}")
    })?;
    let (step, avg) = reached.ok_or_else(|| {
        let tail: Vec<f64> = curve.iter().rev().take(window).map(|r| r.loss).collect();
        format!(
            "smoothed loss {:.3} after {} steps, target {:.3}",
            tail.iter().sum::<f64>() / tail.len() as f64,
            curve.len(),
            0.6 * initial
        )
    })?;
    ensure(step <= schedule.total_steps, || format!("reached at step {step}"))?;
    Ok(format!(
        "{} bytes; initial {initial:.3}; {window}-step mean {avg:.3} <= {:.3} at step {step}",
        corpus.total_bytes(),
        0.6 * initial
    ))
}

fn a6() -> Check {
    let cfg = ModelConfig {
        dropout_rate: 0.1,
        ..ModelConfig::default()
    };
    let model = Model::<f32>::init(cfg, 6).map_err(|e| e.to_string())?;
    let (corpus, _) = natural_split();
    let sc = SpanCorruptionConfig {
        sequence_length: 256,
        ..Default::default()
    };
    let examples: Vec<_> = pack_corpus(&corpus.documents[..40], &sc)
        .map_err(|e| e.to_string())?
        .into_iter()
        .take(8)
        .collect();
    ensure(examples.len() == 8, || "fixture too short".into())?;
    let micro: Vec<&[_]> = examples.chunks(2).collect();
    let acc = accumulate_gradients(&model, &micro, None).map_err(|e| e.to_string())?;
    let grads = acc.mean_grads();

    // full batch on one tape, mean over every target token
    let mut tape = Tape::new();
    let vars = model.place(&mut tape, true);
    let mut total = None;
    let mut tokens = 0usize;
    for ex in &examples {
        let l = model.example_loss(&mut tape, &vars, ex, None).map_err(|e| e.to_string())?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l).map_err(|e| e.to_string())?,
        });
        tokens += ex.target_ids.iter().filter(|&&id| id != 0).count();
    }
    let mean = tape.scale(total.unwrap(), 1.0 / tokens as f64);
    let full_loss = tape.scalar_f64(mean);
    let g = tape.backward(mean).map_err(|e| e.to_string())?;

    let loss_rel = (acc.mean_loss() - full_loss).abs() / full_loss.abs();
    ensure(loss_rel <= 1e-5, || format!("loss {} vs {full_loss}", acc.mean_loss()))?;
    let (mut num, mut den) = (0.0f64, 0.0f64);
    let mut worst: f64 = 0.0;
    for (a, &v) in grads.iter().zip(&vars) {
        let b = g.wrt(v);
        let (mut n, mut d) = (0.0, 0.0);
        for (x, y) in a.data().iter().zip(b.data()) {
            n += (f64::from(*x) - f64::from(*y)).powi(2);
            d += f64::from(*y).powi(2);
        }
        num += n;
        den += d;
        if d > 0.0 {
            worst = worst.max((n / d).sqrt());
        }
    }
    let rel = (num / den).sqrt();
    ensure(rel <= 1e-5, || format!("relative gradient difference {rel:.2e}"))?;
    Ok(format!(
        "4 micro-batches of 2 vs one tape of 8: grad rel {rel:.2e} (worst tensor {worst:.2e}), loss rel {loss_rel:.1e}"
    ))
}

fn a7() -> Check {
    let cfg = AdafactorConfig::default();
    let (rows, cols) = (3usize, 5usize);
    let r = [0.3, -1.2, 0.7];
    let c = [1.0, -0.4, 2.5, 0.05, -0.9];
    let scales = [1.0, 0.3, 2.0, -0.7, 5.0, 0.01];
    let init: Vec<f64> = (0..rows * cols).map(|i| (i as f64 * 0.37).sin()).collect();
    let mut params = vec![Tensor::<f64>::from_f64(&[rows, cols], &init).unwrap()];
    let mut opt = Adafactor::new(cfg.clone(), &params);
    let mut oracle_p = init.clone();
    let mut oracle_v = vec![0.0f64; rows * cols];
    let lr = 0.01;
    let mut worst: f64 = 0.0;
    for (t, &a) in scales.iter().enumerate() {
        let g: Vec<f64> = (0..rows * cols).map(|k| a * r[k / cols] * c[k % cols]).collect();
        let beta = 1.0 - ((t + 1) as f64).powf(-cfg.decay_rate);
        let mut u = vec![0.0; g.len()];
        for k in 0..g.len() {
            oracle_v[k] = beta * oracle_v[k] + (1.0 - beta) * (g[k] * g[k] + cfg.eps1);
            u[k] = g[k] / oracle_v[k].sqrt();
        }
        let rms = (u.iter().map(|x| x * x).sum::<f64>() / u.len() as f64).sqrt();
        let d = (rms / cfg.clip_threshold).max(1.0);
        let before = params[0].data().to_vec();
        for k in 0..g.len() {
            oracle_p[k] = before[k] - lr * u[k] / d;
        }
        opt.update(&mut params, &[Tensor::from_f64(&[rows, cols], &g).unwrap()], lr)
            .map_err(|e| e.to_string())?;
        for k in 0..g.len() {
            let got = params[0].data()[k] - before[k];
            let want = oracle_p[k] - before[k];
            worst = worst.max((got - want).abs() / want.abs().max(1e-12));
        }
    }
    ensure(worst <= 1e-6, || format!("factored vs unfactored update rel {worst:.2e}"))?;

    let schedule = PretrainSchedule {
        total_steps: 20,
        ..PretrainSchedule::desk()
    };
    let mut grad_rng = rng_from(7);
    let mut p = vec![Tensor::<f64>::scalar(0.5)];
    let mut opt = Adafactor::new(cfg.clone(), &p);
    let (mut hp, mut hv) = (0.5f64, 0.0f64);
    for t in 1..=20u64 {
        let g: f64 = grad_rng.random_range(-2.0..2.0) * if t % 5 == 0 { 1e-3 } else { 1.0 };
        let lr = linear_decay_lr(t - 1, &schedule).unwrap();
        let beta = 1.0 - (t as f64).powf(-cfg.decay_rate);
        hv = beta * hv + (1.0 - beta) * (g * g + cfg.eps1);
        let u = g / hv.sqrt();
        let d = ((u * u).sqrt() / cfg.clip_threshold).max(1.0);
        hp -= lr * (u / d);
        opt.update(&mut p, &[Tensor::scalar(g)], lr).map_err(|e| e.to_string())?;
        let got = p[0].item();
        ensure(got.to_bits() == hp.to_bits(), || format!("step {t}: {got:e} vs hand {hp:e}"))?;
    }
    Ok(format!(
        "rank-1 factored vs unfactored: rel {worst:.1e} over {} steps; scalar recurrence bit-exact over 20 steps",
        scales.len()
    ))
}

fn a8() -> Check {
    // (metrics, stop with patience 5, stop with patience 3), 1-based eval index
    let traces: Vec<(Vec<f64>, Option<usize>, Option<usize>)> = vec![
        (vec![0.7, 0.72, 0.71, 0.71, 0.71, 0.71, 0.71, 0.71], Some(7), Some(5)),
        ((1..=10).map(|i| i as f64 / 10.0).collect(), None, None),
        (vec![0.5; 10], Some(6), Some(4)),
        (vec![0.5; 4], None, Some(4)),
        (vec![0.3, 0.4, 0.4, 0.5, 0.5, 0.5, 0.6, 0.5, 0.5, 0.5, 0.5, 0.5], Some(12), Some(10)),
        (vec![0.9, 0.8, 0.7, 0.6, 0.5, 0.4], Some(6), Some(4)),
        (vec![0.2, 0.1, 0.3, 0.2, 0.1, 0.4, 0.3, 0.2, 0.1, 0.0], None, Some(9)),
        (vec![0.5, 0.5, 0.5, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6], Some(9), Some(7)),
        (vec![], None, None),
        (vec![0.33], None, None),
        (vec![0.1, 0.2, 0.3, 0.3, 0.3, 0.3, 0.31, 0.31, 0.31, 0.31, 0.31], None, Some(6)),
        (vec![0.4, 0.4, 0.4, 0.41, 0.4, 0.4, 0.4], None, Some(7)),
        (vec![0.6, 0.5, 0.5, 0.5, 0.5, 0.61, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5], Some(11), Some(4)),
        (vec![0.1, 0.3, 0.2, 0.4, 0.3, 0.5, 0.4, 0.6, 0.5, 0.7], None, None),
        (vec![0.9, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1], Some(6), Some(4)),
        (vec![0.5, 0.5, 0.5, 0.5000001, 0.5, 0.5, 0.5, 0.5, 0.5], Some(9), Some(7)),
        (vec![0.2; 6], Some(6), Some(4)),
        (vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0], Some(7), Some(5)),
        (vec![0.3, 0.31, 0.32, 0.33, 0.34, 0.34, 0.34, 0.34, 0.34, 0.34], Some(10), Some(8)),
        (vec![0.5, 0.4, 0.45, 0.49, 0.5, 0.51, 0.3, 0.3, 0.3], None, Some(4)),
        (vec![0.2, 0.2, 0.2, 0.2, 0.25, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2], Some(10), Some(4)),
        (vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6], Some(11), Some(9)),
        (vec![0.7, 0.6, 0.7, 0.6, 0.7, 0.6, 0.7, 0.6], Some(6), Some(4)),
        (
            vec![0.1, 0.2, 0.1, 0.2, 0.3, 0.2, 0.3, 0.4, 0.3, 0.2, 0.1, 0.4, 0.41],
            None,
            Some(11),
        ),
        (vec![0.33, 0.34, 0.35, 0.34, 0.33, 0.32, 0.31, 0.36], None, Some(6)),
    ];
    ensure(traces.len() == 25, || "expected 25 traces".into())?;
    let nli = FinetuneConfig::nli();
    let qa = FinetuneConfig::qa();
    let mut agree = 0;
    for (i, (m, want5, want3)) in traces.iter().enumerate() {
        let got5 = stop_point(m, nli.patience, true).map_err(|e| e.to_string())?;
        let got3 = stop_point(m, qa.patience, true).map_err(|e| e.to_string())?;
        ensure(got5 == *want5, || {
            format!("trace {i}: patience 5 stops at {got5:?}, hand trace {want5:?}")
        })?;
        ensure(got3 == *want3, || {
            format!("trace {i}: patience 3 stops at {got3:?}, hand trace {want3:?}")
        })?;
        agree += 2;
    }
    // 640 examples at 16 x 4 per step: 10 steps per epoch, validation every 2
    ensure(step_plan(640, &nli) == (10, 2), || format!("{:?}", step_plan(640, &nli)))?;
    // 240 examples at 6 x 4 per step: 10 steps per epoch, validation once per epoch
    ensure(step_plan(240, &qa) == (10, 10), || format!("{:?}", step_plan(240, &qa)))?;
    Ok(format!("{agree}/50 stop points agree; eval cadences 0.2 and 1.0 epoch"))
}

fn brute_normalize(text: &str, en: bool) -> Vec<String> {
    let mut cleaned = String::new();
    for ch in text.chars() {
        for lc in ch.to_lowercase() {
            if !lc.is_ascii_punctuation() {
                cleaned.push(lc);
            }
        }
    }
    cleaned
        .split_whitespace()
        .filter(|w| !(en && (*w == "a" || *w == "an" || *w == "the")))
        .map(String::from)
        .collect()
}

fn brute_f1(pred: &str, gold: &str, en: bool) -> f64 {
    let p = brute_normalize(pred, en);
    let g = brute_normalize(gold, en);
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let mut seen: Vec<&String> = Vec::new();
    let mut common = 0usize;
    for t in &p {
        if seen.contains(&t) {
            continue;
        }
        seen.push(t);
        let cp = p.iter().filter(|x| *x == t).count();
        let cg = g.iter().filter(|x| *x == t).count();
        common += cp.min(cg);
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

struct RandomClass(RefCell<Rng>);

impl Predictor for RandomClass {
    fn predict(&self, _input: &[u32], _max_output: usize) -> bytelm::Result<Vec<u32>> {
        let label = self.0.borrow_mut().random_range(0..3u8);
        let mut out = encode_bytes(&[b'0' + label]);
        out.push(EOS);
        Ok(out)
    }
}

fn a9() -> Check {
    let mut rng = rng_from(9);
    let words = [
        "a", "the", "An", "cat", "Cat!", "dog", "dog,", "x", "y.", "z", "über", "\"q\"", "de", "la",
    ];
    let phrase = |rng: &mut Rng| -> String {
        let n = rng.random_range(0..7usize);
        (0..n)
            .map(|_| *words.choose(rng).unwrap())
            .collect::<Vec<_>>()
            .join(if rng.random_bool(0.2) { "  " } else { " " })
    };
    for case in 0..50 {
        let pred = phrase(&mut rng);
        let golds: Vec<String> = (0..rng.random_range(1..4usize)).map(|_| phrase(&mut rng)).collect();
        for lang in ["en", "fr"] {
            let want = golds.iter().map(|g| brute_f1(&pred, g, lang == "en")).fold(0.0, f64::max);
            let got = qa_f1(&pred, &golds, lang);
            ensure(got == want, || {
                format!("f1 case {case} ({lang}): {got} vs {want} for {pred:?} / {golds:?}")
            })?;
        }
    }
    let worked = qa_f1("a b c", &["b c d".to_string()], "fr");
    ensure(worked == 2.0 / 3.0, || format!("worked case {worked}"))?;

    for case in 0..50 {
        let n = rng.random_range(1..200usize);
        let golds: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let preds: Vec<Option<usize>> = (0..n)
            .map(|_| if rng.random_bool(0.1) { None } else { Some(rng.random_range(0..4)) })
            .collect();
        let mut hits = 0;
        for i in 0..n {
            if let Some(p) = preds[i] {
                if p == golds[i] {
                    hits += 1;
                }
            }
        }
        let want = hits as f64 / n as f64;
        let got = accuracy(&preds, &golds).map_err(|e| e.to_string())?;
        ensure(got == want, || format!("accuracy case {case}: {got} vs {want}"))?;
    }

    let data = TaskDataset::Nli(
        (0..10_000)
            .map(|i| NliExample {
                premise: format!("premise {i}"),
                hypothesis: "h".into(),
                label: i % 3,
            })
            .collect(),
    );
    let report = evaluate_task(&RandomClass(RefCell::new(rng_from(99))), &data, &Task::nli(3)).map_err(|e| e.to_string())?;
    ensure((report.value - 1.0 / 3.0).abs() <= 0.01, || {
        format!("random predictor {:.4}", report.value)
    })?;
    Ok(format!(
        "50/50 F1 and 50/50 accuracy cases exact; \"a b c\" vs \"b c d\" = {worked:.4}; random 3-class {:.2}%",
        report.percent()
    ))
}

fn a10() -> Check {
    let s = PretrainSchedule::desk();
    let lr = |t| linear_decay_lr(t, &s).unwrap();
    ensure(lr(0) == 1e-3, || format!("lr(0) = {:e}", lr(0)))?;
    ensure(lr(s.total_steps) == 0.0, || format!("lr(T) = {:e}", lr(s.total_steps)))?;
    ensure(lr(s.total_steps / 2) == 5e-4, || format!("lr(T/2) = {:e}", lr(s.total_steps / 2)))?;

    let mut rng = rng_from(10);
    for case in 0..100 {
        let n = rng.random_range(0..60usize);
        let docs: Vec<Document> = (0..n)
            .map(|i| {
                let len = if rng.random_bool(0.1) { 0 } else { rng.random_range(1..400usize) };
                Document::new(i.to_string(), "en", "é".repeat(len / 2) + &"x".repeat(len % 2))
            })
            .collect();
        let total: u64 = docs.iter().map(|d| d.text.len() as u64).sum();
        let budget = rng.random_range(0..=total + 50);
        let kept = trim_to_budget(docs.clone(), CorpusBudget::new(budget));
        let k = kept.documents.len();
        let kept_bytes: u64 = docs[..k].iter().map(|d| d.text.len() as u64).sum();
        ensure(kept.documents[..] == docs[..k], || format!("case {case}: not a prefix"))?;
        ensure(kept_bytes <= budget && kept.total_bytes() == kept_bytes, || {
            format!("case {case}: {kept_bytes} > {budget}")
        })?;
        ensure(k == n || kept_bytes + docs[k].text.len() as u64 > budget, || {
            format!("case {case}: document {k} would still fit")
        })?;
    }
    Ok("lr(0)=1e-3, lr(T)=0, lr(T/2)=5e-4 exact; 100/100 trims prefix-maximal".into())
}

fn a11() -> Check {
    let start = Instant::now();
    let (natural, held_out) = natural_split();
    let bytes = natural.total_bytes();
    let vocab = build_zipf_vocab(&natural.documents, 100, usize::MAX).map_err(|e| e.to_string())?;
    let hier = generate_corpus(
        &SynthSpec::Hierarchical {
            vocab: &vocab,
            cfg: HierarchicalGenConfig::default(),
        },
        bytes,
    )
    .map_err(|e| e.to_string())?;
    let nonsense = generate_corpus(
        &SynthSpec::Nonsense {
            cfg: NonsenseGenConfig::default(),
        },
        bytes,
    )
    .map_err(|e| e.to_string())?;
    let splits = toy_nli(&held_out, &ToyNliConfig::default()).map_err(|e| e.to_string())?;
    let task = Task::nli(3);
    let ft = FinetuneConfig {
        lr: 1e-3,
        ..FinetuneConfig::nli()
    };
    let seq = 256;
    let sc = SpanCorruptionConfig {
        sequence_length: seq,
        ..Default::default()
    };
    let schedule = PretrainSchedule {
        sequence_length: seq,
        batch_bytes: 4 * seq,
        ..PretrainSchedule::desk()
    };
    let mut scores = Vec::new();
    for (name, corpus) in [("natural", &natural), ("hierarchical", &hier), ("nonsense", &nonsense)] {
        let t = Instant::now();
        let examples = pack_corpus(&corpus.documents, &sc).map_err(|e| e.to_string())?;
        let out = pretrain(&examples, ModelConfig::default(), &schedule, 0).map_err(|e| format!("{name}: {e}"))?;
        let tail = &out.curve[out.curve.len().saturating_sub(50)..];
        let final_loss = tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64;
        let res = finetune(&out.checkpoint, &splits, &task, &ft).map_err(|e| format!("{name}: {e}"))?;
        eprintln!(
            "  {name}: {} bytes, final pretrain loss {final_loss:.3}, NLI accuracy per seed {:?}, mean {:.4} ({:.0}s)",
            corpus.total_bytes(),
            res.report.per_seed,
            res.report.value,
            t.elapsed().as_secs_f64()
        );
        scores.push(res.report.value);
    }
    let (n, h, s) = (scores[0], scores[1], scores[2]);
    let chance = 1.0 / 3.0;
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let detail = format!(
        "natural {:.2}%, hierarchical {:.2}%, nonsense {:.2}%, {minutes:.1} min",
        100.0 * n,
        100.0 * h,
        100.0 * s
    );
    ensure(n >= h, || format!("natural < hierarchical: {detail}"))?;
    ensure(h > s, || format!("hierarchical <= nonsense: {detail}"))?;
    ensure((s - chance).abs() <= 0.05, || format!("nonsense not at chance: {detail}"))?;
    ensure(minutes < 60.0, || format!("over an hour: {detail}"))?;
    Ok(detail)
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("A1", a1),
        ("A2", a2),
        ("A3", a3),
        ("A4", a4),
        ("A5", a5),
        ("A6", a6),
        ("A7", a7),
        ("A8", a8),
        ("A9", a9),
        ("A10", a10),
        ("A11", a11),
    ];
    let named: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let full = std::env::var("BYTELM_ACCEPT_FULL").is_ok_and(|v| v == "1");
    let time_limits: HashMap<&str, f64> = [("A1", 5.0), ("A4", 120.0)].into_iter().collect();
    let mut failed = 0;
    for (id, check) in criteria {
        if !named.is_empty() && !named.iter().any(|n| n == id) {
            continue;
        }
        if id == "A11" && named.is_empty() && !full {
            println!("{id} SKIP  long end-to-end run; set BYTELM_ACCEPT_FULL=1 or pass A11");
            continue;
        }
        let t = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        let secs = t.elapsed().as_secs_f64();
        let result = match (result, time_limits.get(id)) {
            (Ok(d), Some(&limit)) if secs >= limit => Err(format!("{d}; took {secs:.1}s, limit {limit}s")),
            (r, _) => r,
        };
        match result {
            Ok(detail) => println!("{id} PASS  {detail}  [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("{id} FAIL  {detail}  [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
