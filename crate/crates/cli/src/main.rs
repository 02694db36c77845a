//! `mathmoe`: pre-training, fine-tuning, evaluation, retrieval, refinement
//! and diagnostics from the command line.
//!
//! Exit status: 0 on success, 1 on a runtime failure, 2 on a usage error.

mod commands;
mod config;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{ClientKind, CompositionArg, Ctx, SynthKind};
use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "mathmoe", version, about = "Mixture-of-experts math language model toolkit")]
struct Cli {
    /// Seed for initialisation, batching, corruption and dropout.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory receiving every output file.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus (JSON lines).
    SynthCorpus {
        #[arg(long, value_enum, default_value = "arithmetic")]
        kind: SynthKind,
        /// Records (per task for `mixture`).
        #[arg(long, default_value_t = 2000)]
        n: usize,
        /// Output file; defaults to `<out>/corpus.jsonl`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Multi-task pre-training; writes `model.json` and `metrics.jsonl`.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        /// Overrides `pretrain.steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Unified multi-task fine-tuning; writes `model.json` and `finetune.jsonl`.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        train: PathBuf,
        /// Overrides `finetune.steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score hypothesis/reference files, or a fine-tuned checkpoint on a
    /// labelled corpus; writes `eval.json`.
    Eval {
        #[arg(long, requires = "reference", conflicts_with_all = ["checkpoint", "data"])]
        hyp: Option<PathBuf>,
        #[arg(long = "ref", requires = "hyp")]
        reference: Option<PathBuf>,
        #[arg(long, requires = "data")]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        data: Option<PathBuf>,
    },
    /// Top-B exemplar retrieval; writes `retrieved.jsonl` (and `index.json`
    /// when the pool is a corpus).
    Retrieve {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus (`.jsonl`) or saved index.
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        query_file: PathBuf,
        #[arg(long, default_value_t = 8)]
        top: usize,
        #[arg(long, value_enum, default_value = "statement")]
        composition: CompositionArg,
        /// Contrastive training on the pool statements before indexing.
        #[arg(long)]
        contrastive: bool,
    },
    /// Three-stage iterative refinement; writes `transcripts.jsonl`.
    Refine {
        /// JSON lines with `statement`, `draft` and optional `id`.
        #[arg(long)]
        input: PathBuf,
        /// Corpus (`.jsonl`) or saved index.
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "mock")]
        client: ClientKind,
        /// Steps per stage.
        #[arg(long = "T", alias = "iterations")]
        iterations: Option<usize>,
        /// Exemplars per prompt.
        #[arg(long = "B", alias = "exemplars")]
        exemplars: Option<usize>,
    },
    /// Per-token expert assignments; writes `routing.json`.
    RouteReport {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Route with this task's prompt.
        #[arg(long)]
        task: Option<String>,
    },
    /// Finite-difference check of the pre-training gradients on the first
    /// two records of a corpus; writes `gradcheck.json`.
    Gradcheck {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Entries probed per parameter tensor.
        #[arg(long, default_value_t = 4)]
        per_param: usize,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let ctx = Ctx {
        config: RunConfig::load(cli.config.as_deref(), cli.seed)?,
        seed: cli.seed,
        out: cli.out,
    };
    match cli.command {
        Command::SynthCorpus { kind, n, output } => commands::synth_corpus(&ctx, kind, n, output.as_deref()),
        Command::Pretrain { corpus, steps } => commands::pretrain_cmd(&ctx, &corpus, steps),
        Command::Finetune { checkpoint, train, steps } => commands::finetune_cmd(&ctx, &checkpoint, &train, steps),
        Command::Eval {
            hyp,
            reference,
            checkpoint,
            data,
        } => match (hyp, reference, checkpoint, data) {
            (Some(h), Some(r), None, None) => commands::eval_files(&ctx, &h, &r),
            (None, None, Some(c), Some(d)) => commands::eval_model(&ctx, &c, &d),
            _ => anyhow::bail!("eval needs either --hyp and --ref, or --checkpoint and --data"),
        },
        Command::Retrieve {
            checkpoint,
            pool,
            query_file,
            top,
            composition,
            contrastive,
        } => commands::retrieve_cmd(&ctx, &checkpoint, &pool, &query_file, top, composition.into(), contrastive),
        Command::Refine {
            input,
            pool,
            checkpoint,
            client,
            iterations,
            exemplars,
        } => commands::refine_cmd(&ctx, &input, &pool, &checkpoint, client, iterations, exemplars),
        Command::RouteReport { checkpoint, corpus, task } => {
            commands::route_report_cmd(&ctx, &checkpoint, &corpus, task.as_deref())
        }
        Command::Gradcheck {
            corpus,
            checkpoint,
            per_param,
        } => commands::gradcheck_cmd(&ctx, &corpus, checkpoint.as_deref(), per_param),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
