use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bytelm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bytelm")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout_json(o: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&o.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_corpus(dir: &Path) -> PathBuf {
    let path = dir.join("corpus.jsonl");
    let mut lines = Vec::new();
    for i in 0..400 {
        let lang = if i % 4 == 3 { "pt" } else { "en" };
        let text = format!("document {i} says the quick brown fox jumps over the lazy dog {} times.", i * 7);
        lines.push(serde_json::json!({"id": i.to_string(), "lang": lang, "text": text}).to_string());
    }
    lines.insert(5, "{not json".into());
    fs::write(&path, lines.join("\n")).unwrap();
    path
}

#[test]
fn corpus_trim_respects_budget() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path());
    let out = dir.path().join("trim.jsonl");
    let o = bytelm(&[
        "corpus",
        "trim",
        "--in",
        p(&corpus),
        "--lang",
        "en",
        "--budget-bytes",
        "5000",
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stats = &stdout_json(&o)[0];
    let total = stats["total_bytes"].as_u64().unwrap();
    assert!(total <= 5000 && total > 4800);
    let recomputed: u64 = fs::read_to_string(&out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["text"].as_str().unwrap().len() as u64)
        .sum();
    assert_eq!(recomputed, total);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("trim.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["inputs"][0]["sha256"].as_str().unwrap().len(), 64);

    let zero = dir.path().join("zero.jsonl");
    let o = bytelm(&[
        "corpus",
        "trim",
        "--in",
        p(&corpus),
        "--lang",
        "en",
        "--budget-bytes",
        "0",
        "--out",
        p(&zero),
    ]);
    assert_eq!(code(&o), 0);
    assert!(fs::read(&zero).unwrap().is_empty());
}

#[test]
fn missing_input_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.jsonl");
    let out = dir.path().join("x.jsonl");
    let o = bytelm(&[
        "corpus",
        "trim",
        "--in",
        p(&missing),
        "--lang",
        "en",
        "--budget-bytes",
        "10",
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&bytelm(&["corpus", "trim"])), 2);
}

#[test]
fn synth_generate_is_balanced_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path());
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for out in [&a, &b] {
        let o = bytelm(&[
            "synth",
            "generate",
            "--kind",
            "hier",
            "--bytes",
            "20000",
            "--vocab-corpus",
            p(&corpus),
            "--out",
            p(out),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let report = &stdout_json(&o)[0];
        assert_eq!(report["balanced_fraction"].as_f64().unwrap(), 1.0);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let n = dir.path().join("n.jsonl");
    let o = bytelm(&[
        "synth",
        "generate",
        "--kind",
        "nonsense",
        "--bytes",
        "5000",
        "--seed",
        "3",
        "--out",
        p(&n),
    ]);
    assert_eq!(code(&o), 0);
    let o = bytelm(&["synth", "generate", "--kind", "zigzag", "--bytes", "5000", "--out", p(&n)]);
    assert_eq!(code(&o), 2);
    let o = bytelm(&["synth", "generate", "--kind", "hier", "--bytes", "5000", "--out", p(&n)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn examples_build_counts_and_reconstructs() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    let text: String = "abcdefghij".repeat(410).chars().take(4096).collect();
    fs::write(&corpus, serde_json::json!({"id": "0", "lang": "en", "text": text}).to_string()).unwrap();
    let out = dir.path().join("ex.bin");
    let o = bytelm(&["examples", "build", "--corpus", p(&corpus), "--seq-len", "1024", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s = &stdout_json(&o)[0];
    assert_eq!(s["records"], 4);
    assert_eq!(s["reconstructed"], 4);

    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"corruption_rate": 1.0}"#).unwrap();
    let o = bytelm(&["examples", "build", "--corpus", p(&corpus), "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&o), 2);
}

fn tiny_model_config(dir: &Path) -> PathBuf {
    let path = dir.join("pretrain.json");
    let cfg = serde_json::json!({
        "model": {"d_model": 16, "num_heads": 2, "d_ff": 24, "encoder_layers": 1, "decoder_layers": 1,
                  "relative_attention_buckets": 8, "relative_attention_max_distance": 16},
        "schedule": {"total_steps": 3, "accumulation_steps": 2, "batch_bytes": 256, "sequence_length": 64},
    });
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn build_examples(dir: &Path) -> PathBuf {
    let corpus = dir.join("c.jsonl");
    let text = "pack my box with five dozen liquor jugs. ".repeat(40);
    fs::write(&corpus, serde_json::json!({"id": "0", "lang": "en", "text": text}).to_string()).unwrap();
    let out = dir.join("ex.bin");
    let o = bytelm(&["examples", "build", "--corpus", p(&corpus), "--seq-len", "64", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn write_nli(path: &Path, n: usize, offset: usize) {
    let lines: Vec<String> = (0..n)
        .map(|i| {
            let label = (i + offset) % 3;
            serde_json::json!({"premise": format!("premise {}", i + offset), "hypothesis": "hyp", "label": label}).to_string()
        })
        .collect();
    fs::write(path, lines.join("\n")).unwrap();
}

#[test]
fn pretrain_finetune_evaluate_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let examples = build_examples(dir.path());
    let cfg = tiny_model_config(dir.path());

    let init = dir.path().join("init");
    let o = bytelm(&[
        "pretrain",
        "--examples",
        p(&examples),
        "--config",
        p(&cfg),
        "--steps",
        "0",
        "--out",
        p(&init),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_json(&o)[0]["steps"], 0);
    assert!(init.join("final.ckpt").exists());

    let run = dir.path().join("run");
    let o = bytelm(&["pretrain", "--examples", p(&examples), "--config", p(&cfg), "--out", p(&run)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_json(&o)[0]["steps"], 3);
    let again = dir.path().join("again");
    let o = bytelm(&["pretrain", "--examples", p(&examples), "--config", p(&cfg), "--out", p(&again)]);
    assert_eq!(code(&o), 0);
    assert_eq!(
        fs::read(run.join("final.ckpt")).unwrap(),
        fs::read(again.join("final.ckpt")).unwrap()
    );
    let m1: Value = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    let m2: Value = serde_json::from_str(&fs::read_to_string(again.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m1["outputs"][0]["sha256"], m2["outputs"][0]["sha256"]);

    let (train, val, test) = (
        dir.path().join("train.jsonl"),
        dir.path().join("val.jsonl"),
        dir.path().join("test.jsonl"),
    );
    write_nli(&train, 12, 0);
    write_nli(&val, 6, 50);
    write_nli(&test, 6, 90);
    let ft = dir.path().join("ft");
    let ckpt = run.join("final.ckpt");
    let o = bytelm(&[
        "finetune",
        "--checkpoint",
        p(&ckpt),
        "--task",
        "nli",
        "--train",
        p(&train),
        "--validation",
        p(&val),
        "--test",
        p(&test),
        "--seeds",
        "1,2,3",
        "--epochs",
        "1",
        "--out",
        p(&ft),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let lines = stdout_json(&o);
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[3]["mean"]["per_seed"].as_array().unwrap().len(), 3);
    assert!(ft.join("seed-2.ckpt").exists());

    let o = bytelm(&["evaluate", "--checkpoint", p(&ckpt), "--task", "nli", "--data", p(&test)]);
    assert_eq!(code(&o), 0);
    let r = &stdout_json(&o)[0];
    assert_eq!(r["n"], 6);
    assert!((0.0..=1.0).contains(&r["value"].as_f64().unwrap()));

    let o = bytelm(&[
        "evaluate",
        "--checkpoint",
        p(&dir.path().join("nope.ckpt")),
        "--task",
        "nli",
        "--data",
        p(&test),
    ]);
    assert_ne!(code(&o), 0);
}

#[test]
fn gradcheck_passes_on_a_small_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("m.json");
    fs::write(
        &cfg,
        r#"{"d_model": 16, "num_heads": 2, "d_ff": 24, "encoder_layers": 1, "decoder_layers": 1,
            "relative_attention_buckets": 8, "relative_attention_max_distance": 16}"#,
    )
    .unwrap();
    let o = bytelm(&["gradcheck", "--model-config", p(&cfg), "--coords", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let reports = stdout_json(&o);
    assert!(reports.len() > 20);
    assert!(reports.iter().all(|r| r["passed"] == true));
}
