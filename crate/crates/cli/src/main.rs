//! `uniret`: ingest a corpus, build BM25 and dense indices, train and
//! fine-tune bi-encoders, mine adversarial confounders, and evaluate.
//!
//! Every subcommand writes its artifacts plus `<command>.manifest.json`
//! under `--out`. Failures print one JSON line on stderr:
//! `{"error":"<kind>","message":"..."}`.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use uniret::corpus::TaskClass;
use uniret::trainer::Profile;

use commands::{Retriever, RunSource, TrainInputs};

#[derive(Parser)]
#[command(name = "uniret", version, about = "Multi-task dense + sparse passage retrieval")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
pub struct Global {
    /// JSON config (training config, or generator config for `synth`)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice; overrides the config's seed
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Hyperparameter defaults the config is overlaid on
    #[arg(long, global = true, default_value = "desk")]
    pub profile: Profile,
    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
struct Splits {
    /// Passages JSONL (from `ingest`)
    #[arg(long)]
    corpus: PathBuf,
    /// Training queries JSONL
    #[arg(long)]
    queries: PathBuf,
    /// Validation queries JSONL
    #[arg(long)]
    dev: PathBuf,
}

impl Splits {
    fn inputs(&self) -> TrainInputs<'_> {
        TrainInputs {
            passages: &self.corpus,
            train: &self.queries,
            dev: &self.dev,
        }
    }
}

#[derive(Args)]
struct RetrieverArgs {
    /// Dense index (flat or IVF); needs --checkpoint
    #[arg(long, requires = "checkpoint", conflicts_with = "bm25")]
    index: Option<PathBuf>,
    /// Encoder checkpoint; needs --index
    #[arg(long, requires = "index")]
    checkpoint: Option<PathBuf>,
    /// BM25 index
    #[arg(long)]
    bm25: Option<PathBuf>,
}

impl RetrieverArgs {
    fn retriever(&self) -> Option<Retriever> {
        match (&self.index, &self.checkpoint, &self.bm25) {
            (Some(index), Some(checkpoint), _) => Some(Retriever::Dense {
                checkpoint: checkpoint.clone(),
                index: index.clone(),
            }),
            (_, _, Some(b)) => Some(Retriever::Bm25(b.clone())),
            _ => None,
        }
    }
}

fn parse_task_class(s: &str) -> Result<TaskClass, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
        let names: Vec<&str> = TaskClass::ALL.iter().map(|c| c.name()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic three-task corpus and query splits
    Synth,
    /// Chunk a document JSONL into fixed-length passages
    Ingest {
        /// Documents JSONL: {page_id, title, body}
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = uniret::corpus::DEFAULT_CHUNK_SIZE)]
        chunk_size: usize,
    },
    /// Build a BM25 index over passages
    Bm25Build {
        /// Passages JSONL
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = uniret::sparse::DEFAULT_K1)]
        k1: f64,
        #[arg(long, default_value_t = uniret::sparse::DEFAULT_B)]
        b: f64,
    },
    /// Train a bi-encoder from scratch
    Train {
        #[command(flatten)]
        splits: Splits,
        /// Mined confounders to add to the BM25 ones
        #[arg(long)]
        mined: Option<PathBuf>,
    },
    /// Few-shot training from a checkpoint (or from scratch without one)
    Finetune {
        #[command(flatten)]
        splits: Splits,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Few-shot sample size; overrides the config's few_shot_size
        #[arg(long)]
        few_shot: Option<usize>,
    },
    /// Encode passages into a flat dense index
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Passages JSONL
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Build an IVF index from a dense index
    IndexBuild {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        cells: usize,
        /// Cells scanned per query (default: ceil(sqrt(cells)))
        #[arg(long)]
        nprobe: Option<usize>,
    },
    /// Retrieve for a query file (writes run.json) or one query (prints JSON lines)
    Search {
        #[command(flatten)]
        retriever: RetrieverArgs,
        #[arg(long, conflicts_with = "text")]
        queries: Option<PathBuf>,
        #[arg(long)]
        text: Option<String>,
        #[arg(long, default_value = "qa", value_parser = parse_task_class)]
        task_class: TaskClass,
        #[arg(short, long, default_value_t = uniret::eval::DEFAULT_EVAL_DEPTH)]
        k: usize,
    },
    /// Mine adversarial confounders with a trained model
    Mine {
        #[command(flatten)]
        splits: Splits,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Mining config JSON (default: one confounder, page exclusion, all config datasets)
        #[arg(long)]
        mining_config: Option<PathBuf>,
    },
    /// Page- and passage-level R-precision
    Eval {
        /// Saved run (from `search`)
        #[arg(long, conflicts_with_all = ["index", "bm25"])]
        run: Option<PathBuf>,
        #[command(flatten)]
        retriever: RetrieverArgs,
        /// Queries JSONL with gold provenance
        #[arg(long)]
        queries: PathBuf,
        /// Passages JSONL
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = uniret::eval::DEFAULT_EVAL_DEPTH)]
        depth: usize,
    },
    /// Side-by-side table of metric reports
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        reports: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    if let Some(n) = g.threads {
        #[cfg(feature = "parallel")]
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
        #[cfg(not(feature = "parallel"))]
        let _ = n;
    }
    match &cli.command {
        Command::Synth => commands::synth(g),
        Command::Ingest { corpus, chunk_size } => commands::ingest(g, corpus, *chunk_size),
        Command::Bm25Build { corpus, k1, b } => commands::bm25_build(g, corpus, *k1, *b),
        Command::Train { splits, mined } => commands::train(g, &splits.inputs(), mined.as_deref()),
        Command::Finetune {
            splits,
            checkpoint,
            few_shot,
        } => commands::finetune(g, &splits.inputs(), checkpoint.as_deref(), *few_shot),
        Command::Embed { checkpoint, corpus } => commands::embed(g, checkpoint, corpus),
        Command::IndexBuild { index, cells, nprobe } => commands::index_build(g, index, *cells, *nprobe),
        Command::Search {
            retriever,
            queries,
            text,
            task_class,
            k,
        } => {
            let r = retriever
                .retriever()
                .ok_or_else(|| anyhow::anyhow!("give --index with --checkpoint, or --bm25"))?;
            match (queries, text) {
                (Some(q), _) => commands::search_queries(g, &r, q, *k),
                (None, Some(t)) => commands::search_text(&r, t, *task_class, *k),
                (None, None) => anyhow::bail!("give --queries or --text"),
            }
        }
        Command::Mine {
            splits,
            checkpoint,
            mining_config,
        } => commands::mine(g, checkpoint, &splits.inputs(), mining_config.as_deref()),
        Command::Eval {
            run,
            retriever,
            queries,
            corpus,
            depth,
        } => {
            let source = match (run, retriever.retriever()) {
                (Some(p), _) => RunSource::File(p.clone()),
                (None, Some(r)) => RunSource::Retrieve(r),
                (None, None) => anyhow::bail!("give --run, --index with --checkpoint, or --bm25"),
            };
            commands::evaluate(g, &source, queries, corpus, *depth)
        }
        Command::Compare { reports } => commands::compare(g, reports),
    }
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    if let Some(e) = e.downcast_ref::<uniret::Error>() {
        return e.kind();
    }
    if e.downcast_ref::<std::io::Error>().is_some() {
        return "io";
    }
    if e.downcast_ref::<serde_json::Error>().is_some() {
        return "parse";
    }
    "invalid"
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": error_kind(&e), "message": format!("{e:#}") });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
