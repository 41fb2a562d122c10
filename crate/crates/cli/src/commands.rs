use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use bytelm::codec::{encode_bytes, pack_corpus, read_examples, reconstruct, write_examples, PretrainExample, SpanCorruptionConfig};
use bytelm::corpus::{compute_stats, ingest_documents, trim_stream_to_budget, write_jsonl, CorpusBudget, DocumentReader};
use bytelm::eval::{evaluate_task, load_nli_jsonl, load_qa_jsonl, Task, TaskDataset};
use bytelm::model::{Checkpoint, Model, ModelConfig};
use bytelm::synth::{
    build_zipf_vocab, generate_corpus, validate_corpus, HierarchicalGenConfig, NonsenseGenConfig, SynthKind, SynthSpec, DEFAULT_DOC_LIMIT,
    DEFAULT_TOP_K,
};
use bytelm::tensor::gradcheck::{check_all_ops, GradCheckReport};
use bytelm::tensor::Float;
use bytelm::train::{AdafactorConfig, FinetuneConfig, PretrainSchedule, Pretrainer, TaskSplits};

use crate::manifest::{dir_manifest, sidecar_manifest, Manifest};
use crate::{CliError, DTypeArg, TaskArg, TaskArgs};

type Result<T> = std::result::Result<T, CliError>;

fn open_input(path: &Path) -> Result<BufReader<File>> {
    match File::open(path) {
        Ok(f) => Ok(BufReader::new(f)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(CliError::Usage(format!("input file {} not found", path.display()))),
        Err(e) => Err(e.into()),
    }
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => serde_json::from_reader(open_input(p)?).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", p.display()))),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn to_value(value: &impl Serialize) -> serde_json::Value {
    serde_json::to_value(value).expect("serializable")
}

pub fn corpus_trim(a: &crate::TrimArgs) -> Result<()> {
    let mut reader = DocumentReader::new(open_input(&a.input)?, Some(&a.lang));
    let corpus = trim_stream_to_budget(reader.by_ref(), CorpusBudget::new(a.budget_bytes))?;
    write_jsonl(create(&a.out)?, &corpus.documents)?;
    let stats = compute_stats(&corpus.documents);
    let summary = serde_json::json!({
        "doc_count": stats.doc_count,
        "total_bytes": stats.total_bytes,
        "rejects": reader.rejects(),
        "byte_histogram": stats.byte_histogram,
    });
    print_json(&summary)?;
    let mut m = Manifest::new(
        "corpus trim",
        None,
        serde_json::json!({"lang": a.lang, "budget_bytes": a.budget_bytes}),
    );
    m.summary = summary;
    m.write(
        &sidecar_manifest(&a.out),
        std::slice::from_ref(&a.input),
        std::slice::from_ref(&a.out),
    )?;
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabSource {
    pub corpus: Option<PathBuf>,
    pub lang: Option<String>,
    pub top_k: usize,
    pub doc_limit: usize,
}

impl Default for VocabSource {
    fn default() -> Self {
        Self {
            corpus: None,
            lang: None,
            top_k: DEFAULT_TOP_K,
            doc_limit: DEFAULT_DOC_LIMIT,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub hierarchical: HierarchicalGenConfig,
    pub nonsense: NonsenseGenConfig,
    pub vocab: VocabSource,
}

pub fn synth_generate(a: &crate::SynthArgs) -> Result<()> {
    let kind: SynthKind = a.kind.parse()?;
    let mut cfg: SynthConfig = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.hierarchical.seed = s;
        cfg.nonsense.seed = s;
    }
    if let Some(p) = &a.vocab_corpus {
        cfg.vocab.corpus = Some(p.clone());
    }
    let mut inputs = vec![];
    if let Some(p) = &a.config {
        inputs.push(p.clone());
    }
    let (corpus, report, seed) = match kind {
        SynthKind::Hierarchical => {
            let src = cfg
                .vocab
                .corpus
                .clone()
                .ok_or_else(|| CliError::Usage("hierarchical generation needs --vocab-corpus".into()))?;
            let docs = match &cfg.vocab.lang {
                Some(lang) => ingest_documents(open_input(&src)?, lang)?.0,
                None => DocumentReader::new(open_input(&src)?, None).collect::<bytelm::error::Result<Vec<_>>>()?,
            };
            inputs.push(src);
            let vocab = build_zipf_vocab(&docs, cfg.vocab.top_k, cfg.vocab.doc_limit)?;
            let spec = SynthSpec::Hierarchical {
                vocab: &vocab,
                cfg: cfg.hierarchical.clone(),
            };
            let corpus = generate_corpus(&spec, a.bytes)?;
            let report = validate_corpus(&kind, &corpus, Some(&vocab));
            (corpus, report, cfg.hierarchical.seed)
        }
        SynthKind::Nonsense => {
            let corpus = generate_corpus(&SynthSpec::Nonsense { cfg: cfg.nonsense.clone() }, a.bytes)?;
            let report = validate_corpus(&kind, &corpus, None);
            (corpus, report, cfg.nonsense.seed)
        }
    };
    write_jsonl(create(&a.out)?, &corpus.documents)?;
    print_json(&report)?;
    let mut m = Manifest::new(
        "synth generate",
        Some(seed),
        serde_json::json!({"kind": a.kind, "bytes": a.bytes, "config": cfg}),
    );
    m.summary = to_value(&report);
    m.write(&sidecar_manifest(&a.out), &inputs, std::slice::from_ref(&a.out))?;
    Ok(())
}

pub fn examples_build(a: &crate::BuildArgs) -> Result<()> {
    let mut cfg: SpanCorruptionConfig = load_config(a.config.as_deref())?;
    if let Some(n) = a.seq_len {
        cfg.sequence_length = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let docs = DocumentReader::new(open_input(&a.corpus)?, None).collect::<bytelm::error::Result<Vec<_>>>()?;
    let examples = pack_corpus(&docs, &cfg)?;
    let bytes: Vec<u8> = docs.iter().flat_map(|d| d.text.bytes()).collect();
    let mut ok = 0usize;
    let mut noise = 0usize;
    for (ex, window) in examples.iter().zip(bytes.chunks(cfg.sequence_length)) {
        if reconstruct(ex)? == encode_bytes(window) {
            ok += 1;
        }
        noise += ex.target_ids.iter().filter(|&&t| bytelm::codec::is_byte_id(t)).count();
    }
    if ok != examples.len() {
        return Err(bytelm::error::Error::Data(format!(
            "{} of {} records failed to reconstruct",
            examples.len() - ok,
            examples.len()
        ))
        .into());
    }
    let mut w = create(&a.out)?;
    write_examples(&mut w, &examples)?;
    w.flush()?;
    let summary = serde_json::json!({
        "records": examples.len(),
        "reconstructed": ok,
        "corrupted_fraction": noise as f64 / bytes.len().max(1) as f64,
    });
    print_json(&summary)?;
    let mut inputs = vec![a.corpus.clone()];
    if let Some(p) = &a.config {
        inputs.push(p.clone());
    }
    let mut m = Manifest::new("examples build", Some(cfg.seed), to_value(&cfg));
    m.summary = summary;
    m.write(&sidecar_manifest(&a.out), &inputs, std::slice::from_ref(&a.out))?;
    Ok(())
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub schedule: PretrainSchedule,
    pub optimizer: AdafactorConfig,
    pub model_seed: u64,
}

fn load_examples(path: &Path) -> Result<Vec<PretrainExample>> {
    Ok(read_examples(&mut open_input(path)?)?)
}

pub fn pretrain(a: &crate::PretrainArgs) -> Result<()> {
    let mut cfg: PretrainConfig = load_config(a.config.as_deref())?;
    if let Some(s) = a.steps {
        cfg.schedule.total_steps = s;
    }
    if let Some(s) = a.seed {
        cfg.model_seed = s;
        cfg.schedule.seed = s;
    }
    if let Some(lr) = a.lr {
        cfg.schedule.base_lr = lr;
    }
    let examples = load_examples(&a.examples)?;
    if examples.is_empty() && cfg.schedule.total_steps > 0 {
        return Err(bytelm::error::Error::Empty("example file has no records".into()).into());
    }
    let mut inputs = vec![a.examples.clone()];
    let mut trainer = match &a.resume {
        Some(p) => {
            inputs.push(p.clone());
            let t = Pretrainer::from_checkpoint(&Checkpoint::load(p)?)?;
            cfg.model = t.model().config().clone();
            cfg.schedule = t.schedule().clone();
            t
        }
        None => Pretrainer::new(cfg.model.clone(), cfg.schedule.clone(), cfg.model_seed, cfg.optimizer.clone())?,
    };
    if let Some(p) = &a.config {
        inputs.push(p.clone());
    }
    fs::create_dir_all(&a.out)?;
    trainer.checkpoint_dir = Some(a.out.clone());
    let curve = trainer.run(&examples, None, |_| true)?;
    let final_path = a.out.join("final.ckpt");
    trainer.checkpoint().save(&final_path)?;
    let curve_path = a.out.join("curve.jsonl");
    let mut w = create(&curve_path)?;
    for r in &curve {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let summary = serde_json::json!({
        "steps": trainer.step(),
        "initial_loss": curve.first().map(|r| r.loss),
        "final_loss": curve.last().map(|r| r.loss),
        "checkpoint": final_path.display().to_string(),
    });
    print_json(&summary)?;
    let mut m = Manifest::new("pretrain", Some(cfg.model_seed), to_value(&cfg));
    m.summary = summary;
    m.write(&dir_manifest(&a.out), &inputs, &[final_path, curve_path])?;
    Ok(())
}

fn task_of(t: &TaskArgs) -> Task {
    match t.task {
        TaskArg::Nli => Task::nli(t.num_classes),
        TaskArg::Qa => Task::qa(&t.language),
    }
}

fn load_dataset(task: &Task, path: &Path) -> Result<TaskDataset> {
    let r = open_input(path)?;
    Ok(match task.name() {
        "qa" => TaskDataset::Qa(load_qa_jsonl(r)?),
        _ => TaskDataset::Nli(load_nli_jsonl(r)?),
    })
}

pub fn finetune(a: &crate::FinetuneArgs) -> Result<()> {
    let task = task_of(&a.task);
    let mut cfg: FinetuneConfig = match &a.config {
        Some(p) => load_config(Some(p))?,
        None => FinetuneConfig::for_task(&task),
    };
    if let Some(s) = &a.seeds {
        cfg.seeds = s.clone();
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    cfg.validate()?;
    let start = Checkpoint::load(&a.checkpoint).map_err(|e| match e {
        bytelm::error::Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
            CliError::Usage(format!("checkpoint {} not found", a.checkpoint.display()))
        }
        other => other.into(),
    })?;
    let splits = TaskSplits {
        train: load_dataset(&task, &a.train)?,
        validation: load_dataset(&task, &a.validation)?,
        test: load_dataset(&task, &a.test)?,
    };
    let out = bytelm::train::finetune(&start, &splits, &task, &cfg)?;
    fs::create_dir_all(&a.out)?;
    let mut outputs = Vec::new();
    for (run, ckpt) in out.runs.iter().zip(&out.best) {
        print_json(
            &serde_json::json!({"seed": run.seed, "report": run.test, "best_step": run.best_step, "best_validation": run.best_validation}),
        )?;
        let p = a.out.join(format!("seed-{}.ckpt", run.seed));
        ckpt.save(&p)?;
        outputs.push(p);
    }
    print_json(&serde_json::json!({"mean": out.report}))?;
    let report_path = a.out.join("report.json");
    let report = serde_json::json!({"runs": out.runs, "mean": out.report});
    fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    outputs.push(report_path);
    let mut m = Manifest::new(
        "finetune",
        cfg.seeds.first().copied(),
        serde_json::json!({"task": task, "finetune": cfg}),
    );
    m.summary = to_value(&out.report);
    let mut inputs = vec![a.checkpoint.clone(), a.train.clone(), a.validation.clone(), a.test.clone()];
    if let Some(p) = &a.config {
        inputs.push(p.clone());
    }
    m.write(&dir_manifest(&a.out), &inputs, &outputs)?;
    Ok(())
}

pub fn evaluate(a: &crate::EvaluateArgs) -> Result<()> {
    let task = task_of(&a.task);
    let model = Checkpoint::load(&a.checkpoint)?.model()?;
    let data = load_dataset(&task, &a.data)?;
    let report = evaluate_task(&model, &data, &task)?;
    print_json(&report)?;
    if let Some(out) = &a.out {
        fs::write(out, serde_json::to_string_pretty(&report)?)?;
        let mut m = Manifest::new("evaluate", None, serde_json::json!({"task": task}));
        m.summary = to_value(&report);
        m.write(
            &sidecar_manifest(out),
            &[a.checkpoint.clone(), a.data.clone()],
            std::slice::from_ref(out),
        )?;
    }
    Ok(())
}

fn gradcheck_model<T: Float>(cfg: &ModelConfig, a: &crate::GradcheckArgs) -> Result<GradCheckReport> {
    let model = Model::<T>::init(cfg.clone(), a.seed)?;
    let batch = [
        PretrainExample {
            input_ids: encode_bytes(b"finite differences <x> check"),
            target_ids: vec![258, 70, 71, 72, 259, 80, 1],
        },
        PretrainExample {
            input_ids: encode_bytes(b"a second, shorter input"),
            target_ids: vec![258, 90, 91, 1],
        },
    ];
    Ok(model.grad_check(&batch, a.coords, a.seed)?)
}

pub fn gradcheck(a: &crate::GradcheckArgs) -> Result<()> {
    let model_cfg: ModelConfig = load_config(a.model_config.as_deref())?;
    let (f32s, f64s) = match a.dtype {
        DTypeArg::F32 => (true, false),
        DTypeArg::F64 => (false, true),
        DTypeArg::Both => (true, true),
    };
    let mut reports = Vec::new();
    if f64s {
        reports.extend(check_all_ops::<f64>(a.seed)?);
        if !a.skip_model {
            reports.push(gradcheck_model::<f64>(&model_cfg, a)?);
        }
    }
    if f32s {
        reports.extend(check_all_ops::<f32>(a.seed)?);
        if !a.skip_model {
            reports.push(gradcheck_model::<f32>(&model_cfg, a)?);
        }
    }
    for r in &reports {
        print_json(r)?;
    }
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{} ({:?})", r.name, r.dtype))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!("gradient check failed: {}", failed.join(", "))))
    }
}
