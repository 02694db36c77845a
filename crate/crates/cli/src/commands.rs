//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use log::info;
use mathmoe_core::checkpoint::Checkpoint;
use mathmoe_core::corpus::{build_vocabulary, load_corpus, save_corpus, CorpusRecord};
use mathmoe_core::metrics::{classification_metrics, generation_metrics};
use mathmoe_core::model::{render_ids, routing_report, Decoding, Model};
use mathmoe_core::refinement::{refine, HttpJsonClient, IdentityClient, IndexSource, LlmClient, RefineStatus};
use mathmoe_core::retrieval::{contrastive_train, Composition, Embedder, EmbeddingIndex, Hit, Query};
use mathmoe_core::synthetic::{arithmetic_corpus, finetune_mixture};
use mathmoe_core::text::{MathText, Tokenizer, Vocabulary};
use mathmoe_core::training::{
    build_batch, check_gradients, datasets_from_records, finetune, predict_label, predict_sequence, prepare_model,
    pretrain, unify_finetune_data, TaskFormat, UnifiedTasks,
};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::io::{output, read_jsonl, read_texts, write_json, JsonlWriter};

pub struct Ctx {
    pub config: RunConfig,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum SynthKind {
    /// Single-digit arithmetic word problems.
    Arithmetic,
    /// Two classification tasks and a copy task.
    Mixture,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum ClientKind {
    /// Returns each draft unchanged.
    Mock,
    /// JSON completion endpoint from the `http` config section.
    Http,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum CompositionArg {
    Statement,
    StatementDraft,
    Draft,
}

impl From<CompositionArg> for Composition {
    fn from(c: CompositionArg) -> Self {
        match c {
            CompositionArg::Statement => Composition::Statement,
            CompositionArg::StatementDraft => Composition::StatementDraft,
            CompositionArg::Draft => Composition::Draft,
        }
    }
}

fn texts(records: &[CorpusRecord], tk: &Tokenizer, vocab: &Vocabulary) -> anyhow::Result<Vec<MathText>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| r.to_text(tk, vocab).with_context(|| format!("record {}", i + 1)))
        .collect()
}

struct Loaded {
    model: Model,
    vocab: Vocabulary,
    tasks: Option<UnifiedTasks>,
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Loaded> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let model = ck.restore()?;
    Ok(Loaded {
        model,
        vocab: ck.vocabulary,
        tasks: ck.tasks,
    })
}

pub fn synth_corpus(ctx: &Ctx, kind: SynthKind, n: usize, file: Option<&Path>) -> anyhow::Result<()> {
    let records = match kind {
        SynthKind::Arithmetic => arithmetic_corpus(n, ctx.seed),
        SynthKind::Mixture => finetune_mixture(n, ctx.seed),
    };
    let path = match file {
        Some(p) => p.to_path_buf(),
        None => output(&ctx.out, "corpus.jsonl")?,
    };
    save_corpus(&path, &records)?;
    println!("wrote {} records to {}", records.len(), path.display());
    Ok(())
}

pub fn pretrain_cmd(ctx: &Ctx, corpus: &Path, steps: Option<usize>) -> anyhow::Result<()> {
    let tk = Tokenizer::default();
    let records = load_corpus(corpus, &tk)?;
    let vocab = build_vocabulary(&records, &tk)?;
    let texts = texts(&records, &tk, &vocab)?;
    let mut model_config = ctx.config.model.clone();
    model_config.vocab_size = vocab.len();
    let mut model = Model::new(model_config, ctx.seed)?;
    let mut config = ctx.config.pretrain.clone();
    if let Some(s) = steps {
        config.steps = s;
    }
    info!(
        "pre-training {} parameters on {} texts (vocabulary {}) for {} steps",
        model.store.num_scalars(),
        texts.len(),
        vocab.len(),
        config.steps
    );
    let every = (config.steps / 20).max(1);
    let log = pretrain(&mut model, &texts, &vocab, &config, |m| {
        if m.step % every == 0 {
            info!("step {} total {:.4} L_MT {:.4}", m.step, m.total, m.multitask());
        }
        Ok(())
    })?;
    let mut w = JsonlWriter::create(&output(&ctx.out, "metrics.jsonl")?)?;
    for m in &log {
        w.write(m)?;
    }
    w.finish()?;
    let path = output(&ctx.out, "model.json")?;
    Checkpoint::capture(&model, &vocab, None).save(&path)?;
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        println!("L_MT {:.4} -> {:.4}; checkpoint {}", first.multitask(), last.multitask(), path.display());
    }
    Ok(())
}

pub fn finetune_cmd(ctx: &Ctx, checkpoint: &Path, train: &Path, steps: Option<usize>) -> anyhow::Result<()> {
    let Loaded { mut model, vocab, .. } = load_checkpoint(checkpoint)?;
    let tk = Tokenizer::default();
    let records = load_corpus(train, &tk)?;
    let data = datasets_from_records(&records, &tk, &vocab)?;
    let tasks = unify_finetune_data(&data)?;
    prepare_model(&mut model, &tasks, ctx.seed);
    let mut config = ctx.config.finetune.clone();
    if let Some(s) = steps {
        config.steps = s;
    }
    info!(
        "fine-tuning on {} tasks, {} labels, {} steps",
        tasks.tasks.len(),
        tasks.labels.len(),
        config.steps
    );
    let every = (config.steps / 20).max(1);
    let log = finetune(&mut model, &tasks, &data, &config, |s| {
        if s.step % every == 0 {
            info!("step {} task {} loss {:.4}", s.step, s.task, s.loss);
        }
        Ok(())
    })?;
    let mut w = JsonlWriter::create(&output(&ctx.out, "finetune.jsonl")?)?;
    for s in &log {
        w.write(s)?;
    }
    w.finish()?;
    let path = output(&ctx.out, "model.json")?;
    Checkpoint::capture(&model, &vocab, Some(&tasks)).save(&path)?;
    println!("checkpoint {}", path.display());
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct TaskReport {
    pub count: usize,
    pub metrics: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub absent_labels: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub tasks: BTreeMap<String, TaskReport>,
    pub config: crate::config::EvalConfig,
}

fn finish_report(ctx: &Ctx, report: &EvalReport) -> anyhow::Result<()> {
    let path = output(&ctx.out, "eval.json")?;
    write_json(&path, report)?;
    for (name, t) in &report.tasks {
        let shown: Vec<String> = t.metrics.iter().map(|(k, v)| format!("{k} {:.2}", v * 100.0)).collect();
        println!("{name} ({} examples): {}", t.count, shown.join(", "));
    }
    Ok(())
}

/// Scores hypothesis lines against reference lines.
pub fn eval_files(ctx: &Ctx, hyp: &Path, reference: &Path) -> anyhow::Result<()> {
    let h = read_texts(hyp)?;
    let r = read_texts(reference)?;
    if h.len() != r.len() {
        bail!("{} hypotheses for {} references", h.len(), r.len());
    }
    let markers: Vec<&str> = ctx.config.eval.answer_markers.iter().map(String::as_str).collect();
    let pairs: Vec<(String, String)> = h.into_iter().zip(r).collect();
    let mut tasks = BTreeMap::new();
    tasks.insert(
        "generation".to_string(),
        TaskReport {
            count: pairs.len(),
            metrics: generation_metrics(&pairs, &Tokenizer::default(), &markers),
            absent_labels: Vec::new(),
        },
    );
    finish_report(
        ctx,
        &EvalReport {
            tasks,
            config: ctx.config.eval.clone(),
        },
    )
}

/// Runs a fine-tuned checkpoint on a labelled corpus, task by task.
pub fn eval_model(ctx: &Ctx, checkpoint: &Path, data: &Path) -> anyhow::Result<()> {
    let Loaded { model, vocab, tasks } = load_checkpoint(checkpoint)?;
    let tasks = tasks.context("the checkpoint has no fine-tuned tasks")?;
    let tk = Tokenizer::default();
    let records = load_corpus(data, &tk)?;
    let datasets = datasets_from_records(&records, &tk, &vocab)?;
    let eval = &ctx.config.eval;
    let decoding = if eval.beam > 1 { Decoding::Beam(eval.beam) } else { Decoding::Greedy };
    let markers: Vec<&str> = eval.answer_markers.iter().map(String::as_str).collect();
    let mut report = BTreeMap::new();
    for d in &datasets {
        let spec = tasks.task(&d.name)?;
        if spec.format != d.format {
            bail!("task {} is {:?} in the checkpoint but {:?} in the data", d.name, spec.format, d.format);
        }
        let task_report = match spec.format {
            TaskFormat::Classification => {
                let prefix = format!("{}/", spec.name);
                let labels: Vec<String> = tasks.labels[spec.label_range()]
                    .iter()
                    .map(|l| l.strip_prefix(&prefix).unwrap_or(l).to_string())
                    .collect();
                let mut predictions = Vec::with_capacity(d.examples.len());
                let mut gold = Vec::with_capacity(d.examples.len());
                for ex in &d.examples {
                    predictions.push(predict_label(&model, &tasks, spec, &ex.input)?);
                    gold.push(ex.labels.first().cloned().unwrap_or_default());
                }
                let c = classification_metrics(&predictions, &gold, &labels)?;
                TaskReport {
                    count: d.examples.len(),
                    metrics: BTreeMap::from([("accuracy".to_string(), c.accuracy), ("f1_macro".to_string(), c.f1_macro)]),
                    absent_labels: c.absent_labels,
                }
            }
            TaskFormat::Generation => {
                let mut pairs = Vec::with_capacity(d.examples.len());
                for ex in &d.examples {
                    let out = predict_sequence(&model, spec, &ex.input, eval.max_new_tokens, decoding)?;
                    pairs.push((render_ids(&out, &vocab), render_ids(&ex.target, &vocab)));
                }
                TaskReport {
                    count: pairs.len(),
                    metrics: generation_metrics(&pairs, &tk, &markers),
                    absent_labels: Vec::new(),
                }
            }
        };
        report.insert(d.name.clone(), task_report);
    }
    finish_report(
        ctx,
        &EvalReport {
            tasks: report,
            config: eval.clone(),
        },
    )
}

enum Pool {
    Records(Vec<CorpusRecord>),
    Index(EmbeddingIndex),
}

/// `.jsonl` files are corpora to embed; anything else is a saved index.
fn load_pool(path: &Path) -> anyhow::Result<Pool> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        Ok(Pool::Records(load_corpus(path, &Tokenizer::default())?))
    } else {
        Ok(Pool::Index(
            EmbeddingIndex::load(path).with_context(|| format!("loading index {}", path.display()))?,
        ))
    }
}

fn index_for(ctx: &Ctx, pool: Pool, embedder: &Embedder) -> anyhow::Result<EmbeddingIndex> {
    let index = match pool {
        Pool::Records(records) => {
            let index = EmbeddingIndex::build(embedder, &records)?;
            let path = output(&ctx.out, "index.json")?;
            index.save(&path)?;
            info!("indexed {} problems into {}", index.len(), path.display());
            index
        }
        Pool::Index(index) => index,
    };
    if index.dim != embedder.model.config.d_model {
        bail!(
            "index has dimension {}, the model produces {}",
            index.dim,
            embedder.model.config.d_model
        );
    }
    Ok(index)
}

#[derive(Debug, Deserialize)]
struct QueryRecord {
    #[serde(default)]
    statement: Option<String>,
    #[serde(default, alias = "solution")]
    draft: Option<String>,
}

#[derive(Serialize)]
struct Retrieved<'a> {
    query: usize,
    composition: &'static str,
    hits: &'a [Hit],
}

pub fn retrieve_cmd(
    ctx: &Ctx,
    checkpoint: &Path,
    pool: &Path,
    queries: &Path,
    top: usize,
    composition: Composition,
    contrastive: bool,
) -> anyhow::Result<()> {
    let Loaded { mut model, vocab, tasks } = load_checkpoint(checkpoint)?;
    let pool = load_pool(pool)?;
    if contrastive {
        let Pool::Records(records) = &pool else {
            bail!("contrastive training needs a corpus pool, not a saved index");
        };
        let tk = Tokenizer::default();
        let statements = records
            .iter()
            .map(|r| tk.tokenize(&r.statement, &vocab))
            .collect::<Result<Vec<_>, _>>()?;
        let losses = contrastive_train(&mut model, &statements, &ctx.config.contrastive)?;
        if let (Some(a), Some(b)) = (losses.first(), losses.last()) {
            info!("contrastive loss {a:.4} -> {b:.4}");
        }
        Checkpoint::capture(&model, &vocab, tasks.as_ref()).save(output(&ctx.out, "model.json")?)?;
    }
    let embedder = Embedder::new(&model, &vocab);
    let index = index_for(ctx, pool, &embedder)?;
    let mut w = JsonlWriter::create(&output(&ctx.out, "retrieved.jsonl")?)?;
    for (i, q) in read_jsonl::<QueryRecord>(queries)?.into_iter().enumerate() {
        let needs_statement = composition != Composition::Draft;
        let needs_draft = composition != Composition::Statement;
        if (needs_statement && q.statement.is_none()) || (needs_draft && q.draft.is_none()) {
            bail!("query {} lacks the fields required by composition {}", i + 1, composition.name());
        }
        let query = Query {
            composition,
            statement: q.statement,
            draft: q.draft,
        };
        let hits = index.retrieve(&embedder, &query, top)?;
        w.write(&Retrieved {
            query: i,
            composition: composition.name(),
            hits: &hits,
        })?;
    }
    w.finish()
}

#[derive(Debug, Deserialize)]
struct DraftRecord {
    #[serde(default)]
    id: Option<String>,
    statement: String,
    #[serde(alias = "solution")]
    draft: String,
}

#[allow(clippy::too_many_arguments)]
pub fn refine_cmd(
    ctx: &Ctx,
    input: &Path,
    pool: &Path,
    checkpoint: &Path,
    client: ClientKind,
    iterations: Option<usize>,
    exemplars: Option<usize>,
) -> anyhow::Result<()> {
    let Loaded { model, vocab, .. } = load_checkpoint(checkpoint)?;
    let pool = load_pool(pool)?;
    let embedder = Embedder::new(&model, &vocab);
    let index = index_for(ctx, pool, &embedder)?;
    let source = IndexSource {
        index: &index,
        embedder,
    };
    let mut config = ctx.config.refine.clone();
    if let Some(t) = iterations {
        config.iterations = t;
    }
    if let Some(b) = exemplars {
        config.exemplars = b;
    }
    let client: Box<dyn LlmClient> = match client {
        ClientKind::Mock => Box::new(IdentityClient),
        ClientKind::Http => Box::new(HttpJsonClient::new(ctx.config.http.clone())),
    };
    let drafts: Vec<DraftRecord> = read_jsonl(input)?;
    let mut w = JsonlWriter::create(&output(&ctx.out, "transcripts.jsonl")?)?;
    let mut partial = 0;
    for (i, d) in drafts.iter().enumerate() {
        let id = d.id.clone().unwrap_or_else(|| i.to_string());
        let t = refine(&id, &d.statement, &d.draft, &source, client.as_ref(), &config)
            .with_context(|| format!("refining problem {id}"))?;
        if t.status == RefineStatus::Partial {
            partial += 1;
        }
        w.write(&t)?;
    }
    w.finish()?;
    println!("{} transcripts ({partial} partial)", drafts.len());
    Ok(())
}

pub fn route_report_cmd(ctx: &Ctx, checkpoint: &Path, corpus: &Path, task: Option<&str>) -> anyhow::Result<()> {
    let Loaded { model, vocab, tasks } = load_checkpoint(checkpoint)?;
    let task = match task {
        Some(name) => Some(
            tasks
                .as_ref()
                .context("the checkpoint has no fine-tuned tasks")?
                .task(name)?
                .prompt,
        ),
        None => None,
    };
    let tk = Tokenizer::default();
    let texts = texts(&load_corpus(corpus, &tk)?, &tk, &vocab)?;
    let rows = routing_report(&model, &texts, task)?;
    write_json(&output(&ctx.out, "routing.json")?, &rows)?;
    let k = model.config.moe.experts;
    for layer in 0..model.config.encoder_layers {
        let mut counts = vec![0usize; k];
        for r in rows.iter().filter(|r| r.layer == layer) {
            counts[r.expert] += 1;
        }
        let total = counts.iter().sum::<usize>().max(1) as f64;
        let shares: Vec<String> = counts.iter().map(|&c| format!("{:.3}", c as f64 / total)).collect();
        println!("layer {layer}: dispatch [{}]", shares.join(", "));
    }
    Ok(())
}

/// Relative error below which the analytic gradients are accepted.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub fn gradcheck_cmd(ctx: &Ctx, corpus: &Path, checkpoint: Option<&Path>, per_param: usize) -> anyhow::Result<()> {
    let tk = Tokenizer::default();
    let records: Vec<CorpusRecord> = load_corpus(corpus, &tk)?.into_iter().take(2).collect();
    let (model, vocab) = match checkpoint {
        Some(p) => {
            let l = load_checkpoint(p)?;
            (l.model, l.vocab)
        }
        None => {
            let vocab = build_vocabulary(&records, &tk)?;
            let mut config = ctx.config.model.clone();
            config.vocab_size = vocab.len();
            (Model::new(config, ctx.seed)?, vocab)
        }
    };
    let texts = texts(&records, &tk, &vocab)?;
    let refs: Vec<&MathText> = texts.iter().collect();
    let batch = build_batch(&model, &refs, &vocab, ctx.config.pretrain.mask_rate, true, ctx.seed)?;
    let report = check_gradients(&model, &batch, ctx.seed, per_param, ctx.seed)?;
    let worst = report.worst.and_then(|(p, e)| {
        model
            .store
            .iter()
            .find(|(id, _)| id.index() == p)
            .map(|(_, param)| format!("{}[{e}]", param.name))
    });
    let pass = report.max_relative_error < GRADCHECK_TOLERANCE;
    let summary = serde_json::json!({
        "max_relative_error": report.max_relative_error,
        "max_absolute_error": report.max_absolute_error,
        "checked": report.checked,
        "worst": worst,
        "tolerance": GRADCHECK_TOLERANCE,
        "pass": pass,
    });
    write_json(&output(&ctx.out, "gradcheck.json")?, &summary)?;
    println!(
        "{} entries checked, max relative error {:.3e}",
        report.checked, report.max_relative_error
    );
    if !pass {
        bail!(
            "gradient check failed: relative error {:.3e} at {}",
            report.max_relative_error,
            worst.unwrap_or_default()
        );
    }
    Ok(())
}
