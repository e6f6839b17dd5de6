use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

use uniret::corpus::{self, Passage, QueryRecord, TaskClass};
use uniret::dense_index::{embed_corpus, DenseIndex, IvfIndex};
use uniret::encoder::EncoderParams;
use uniret::eval::{self, MetricReport, PageMap, RetrievalRun};
use uniret::mining::{self, MinedConfounderSet, MiningConfig, MiningContext};
use uniret::sparse::Bm25Index;
use uniret::synth::{self, SynthConfig};
use uniret::trainer::{self, TrainConfig, TrainData, TrainOutcome};

use crate::manifest::ManifestBuilder;
use crate::Global;

fn out_dir(g: &Global) -> Result<&Path> {
    let out = g.out.as_deref().ok_or_else(|| anyhow!("--out is required"))?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

fn manifest(g: &Global, command: &str) -> ManifestBuilder {
    ManifestBuilder::new(command, g.config.as_deref(), g.seed, &g.profile.to_string())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// `--config` overlaid on the profile, then `--seed` on top.
fn train_config(g: &Global) -> Result<TrainConfig> {
    let path = g.config.as_deref().ok_or_else(|| anyhow!("--config is required"))?;
    let mut c = TrainConfig::load(path, g.profile)?;
    if let Some(seed) = g.seed {
        c.seed = seed;
    }
    c.validate()?;
    Ok(c)
}

pub fn synth(g: &Global) -> Result<()> {
    let out = out_dir(g)?;
    let mut m = manifest(g, "synth");
    let mut config: SynthConfig = match &g.config {
        Some(p) => {
            m.input(p)?;
            read_json(p)?
        }
        None => SynthConfig::default(),
    };
    if let Some(seed) = g.seed {
        config.seed = seed;
    }
    synth::generate(&config)?.write_to(out)?;
    for f in ["corpus.jsonl", "train.jsonl", "dev.jsonl", "test.jsonl"] {
        m.output(out.join(f));
    }
    m.write(out)?;
    Ok(())
}

pub fn ingest(g: &Global, docs: &Path, chunk_size: usize) -> Result<()> {
    let out = out_dir(g)?;
    let mut m = manifest(g, "ingest");
    m.input(docs)?;
    let passages = corpus::chunk_corpus(&corpus::load_documents(docs)?, chunk_size)?;
    let path = out.join("passages.jsonl");
    corpus::write_passages(&path, &passages)?;
    m.output(path);
    m.write(out)?;
    eprintln!("{} passages", passages.len());
    Ok(())
}

pub fn bm25_build(g: &Global, passages: &Path, k1: f64, b: f64) -> Result<()> {
    let out = out_dir(g)?;
    let mut m = manifest(g, "bm25-build");
    m.input(passages)?;
    let index = Bm25Index::build_with(&corpus::load_passages(passages)?, k1, b)?;
    let path = out.join("bm25.idx");
    index.save(&path)?;
    m.output(path);
    m.write(out)?;
    Ok(())
}

pub struct TrainInputs<'a> {
    pub passages: &'a Path,
    pub train: &'a Path,
    pub dev: &'a Path,
}

struct Loaded {
    passages: Vec<Passage>,
    train: Vec<QueryRecord>,
    dev: Vec<QueryRecord>,
}

impl Loaded {
    fn read(inputs: &TrainInputs, m: &mut ManifestBuilder) -> Result<Self> {
        for p in [inputs.passages, inputs.train, inputs.dev] {
            m.input(p)?;
        }
        Ok(Loaded {
            passages: corpus::load_passages(inputs.passages)?,
            train: corpus::load_queries(inputs.train)?,
            dev: corpus::load_queries(inputs.dev)?,
        })
    }

    fn data(&self) -> TrainData<'_> {
        TrainData {
            passages: &self.passages,
            train: &self.train,
            dev: &self.dev,
        }
    }
}

fn save_outcome(out: &Path, outcome: &TrainOutcome, config: &TrainConfig, m: &mut ManifestBuilder) -> Result<()> {
    let ckpt = out.join("checkpoint.bin");
    outcome.params.save(&ckpt)?;
    m.checkpoint(ckpt);
    let log = out.join("train_log.jsonl");
    std::fs::write(&log, outcome.log_jsonl())?;
    m.output(log);
    let resolved = out.join("resolved_config.json");
    std::fs::write(&resolved, config.to_json() + "\n")?;
    m.output(resolved);
    eprintln!(
        "{} steps, selected step {} (validation R-prec {})",
        outcome.total_steps,
        outcome.best_step,
        outcome.best_metric.map_or("n/a".into(), |v| format!("{v:.4}"))
    );
    Ok(())
}

pub fn train(g: &Global, inputs: &TrainInputs, mined: Option<&Path>) -> Result<()> {
    let out = out_dir(g)?;
    let config = train_config(g)?;
    let mut m = manifest(g, "train");
    m.input(g.config.as_deref().expect("checked"))?;
    let loaded = Loaded::read(inputs, &mut m)?;
    let bm25 = Bm25Index::build(&loaded.passages)?;
    let mut examples = trainer::build_training_set(
        &loaded.train,
        &bm25,
        &config.datasets,
        config.seed,
        config.mapping_threshold,
    )?;
    if let Some(path) = mined {
        m.input(path)?;
        examples = mining::augment(&examples, &MinedConfounderSet::load(path)?);
    }
    let init = EncoderParams::init(config.variant, config.dim, config.vocab_size, config.seed)?;
    let outcome = trainer::train_examples(&config, init, &examples, loaded.data())?;
    save_outcome(out, &outcome, &config, &mut m)?;
    m.write(out)?;
    Ok(())
}

/// Few-shot training on a seeded sample of the config's datasets, from a
/// checkpoint or from a fresh init.
pub fn finetune(g: &Global, inputs: &TrainInputs, checkpoint: Option<&Path>, size: Option<usize>) -> Result<()> {
    let out = out_dir(g)?;
    let mut config = train_config(g)?;
    if size.is_some() {
        config.few_shot_size = size;
    }
    let n = config
        .few_shot_size
        .ok_or_else(|| anyhow!("few-shot size missing: set few_shot_size in the config or pass --few-shot"))?;
    let mut m = manifest(g, "finetune");
    m.input(g.config.as_deref().expect("checked"))?;
    let loaded = Loaded::read(inputs, &mut m)?;
    let start = match checkpoint {
        Some(p) => {
            m.input(p)?;
            EncoderParams::load(p)?
        }
        None => EncoderParams::init(config.variant, config.dim, config.vocab_size, config.seed)?,
    };
    let ids = config.dataset_ids();
    let pool: Vec<QueryRecord> = loaded
        .train
        .iter()
        .filter(|q| ids.contains(&q.dataset_id.as_str()) && trainer::is_retained(q, config.mapping_threshold))
        .cloned()
        .collect();
    let few = trainer::sample_few_shot(&pool, n, config.seed)?;
    let bm25 = Bm25Index::build(&loaded.passages)?;
    let examples = trainer::build_training_set(&few, &bm25, &config.datasets, config.seed, config.mapping_threshold)?;
    let outcome = trainer::finetune(&start, &examples, &config, loaded.data())?;
    let sample = out.join("few_shot.jsonl");
    corpus::write_jsonl(&sample, &few)?;
    m.output(sample);
    save_outcome(out, &outcome, &config, &mut m)?;
    m.write(out)?;
    Ok(())
}

pub fn embed(g: &Global, checkpoint: &Path, passages: &Path) -> Result<()> {
    let out = out_dir(g)?;
    let mut m = manifest(g, "embed");
    m.input(checkpoint)?;
    m.input(passages)?;
    let params = EncoderParams::load(checkpoint)?;
    let index = DenseIndex::Flat(embed_corpus(&params, &corpus::load_passages(passages)?));
    let path = out.join("dense.idx");
    index.save(&path)?;
    m.output(path);
    m.write(out)?;
    Ok(())
}

pub fn index_build(g: &Global, index: &Path, cells: usize, nprobe: Option<usize>) -> Result<()> {
    let out = out_dir(g)?;
    let mut m = manifest(g, "index-build");
    m.input(index)?;
    let base = DenseIndex::load(index)?.flat().clone();
    let mut ivf = IvfIndex::build(base, cells, g.seed.unwrap_or(0))?;
    if let Some(p) = nprobe {
        if p == 0 || p > cells {
            bail!("--nprobe must be in 1..={cells}");
        }
        ivf.nprobe = p;
    }
    let path = out.join("ivf.idx");
    DenseIndex::Ivf(ivf).save(&path)?;
    m.output(path);
    m.write(out)?;
    Ok(())
}

/// A dense model with its index, or a BM25 index.
pub enum Retriever {
    Dense { checkpoint: PathBuf, index: PathBuf },
    Bm25(PathBuf),
}

impl Retriever {
    fn inputs(&self) -> Vec<&Path> {
        match self {
            Retriever::Dense { checkpoint, index } => vec![checkpoint, index],
            Retriever::Bm25(p) => vec![p],
        }
    }

    fn run(&self, queries: &[QueryRecord], k: usize) -> Result<RetrievalRun> {
        Ok(match self {
            Retriever::Dense { checkpoint, index } => {
                let params = EncoderParams::load(checkpoint)?;
                let index = DenseIndex::load(index)?;
                let mut id = model_id(checkpoint);
                if let DenseIndex::Ivf(ivf) = &index {
                    id = format!("{id}+ivf{}/{}", ivf.nprobe, ivf.cells());
                }
                eval::dense_run(&params, &index, queries, k, &id)?
            }
            Retriever::Bm25(p) => eval::bm25_run(&Bm25Index::load(p)?, queries, k, "bm25")?,
        })
    }
}

/// Checkpoint file stem, or its parent directory's name for `checkpoint.bin`.
fn model_id(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    if stem == "checkpoint" {
        if let Some(dir) = path.parent().and_then(Path::file_name).and_then(|s| s.to_str()) {
            return dir.to_string();
        }
    }
    stem.to_string()
}

pub fn search_text(retriever: &Retriever, text: &str, class: TaskClass, k: usize) -> Result<()> {
    let ranked = match retriever {
        Retriever::Dense { checkpoint, index } => {
            let params = EncoderParams::load(checkpoint)?;
            DenseIndex::load(index)?.search(&params.encode_query(text, class), k)?
        }
        Retriever::Bm25(p) => Bm25Index::load(p)?.search_text(text, k),
    };
    for (rank, (id, score)) in ranked.iter().enumerate() {
        println!(
            "{}",
            serde_json::json!({ "rank": rank + 1, "passage_id": id, "score": score })
        );
    }
    Ok(())
}

pub fn search_queries(g: &Global, retriever: &Retriever, queries: &Path, k: usize) -> Result<()> {
    let out = out_dir(g)?;
    let mut m = manifest(g, "search");
    for p in retriever.inputs() {
        m.input(p)?;
    }
    m.input(queries)?;
    let run = retriever.run(&corpus::load_queries(queries)?, k)?;
    let path = out.join("run.json");
    write_json(&path, &run)?;
    m.output(path);
    m.write(out)?;
    Ok(())
}

pub fn mine(g: &Global, checkpoint: &Path, inputs: &TrainInputs, mining_config: Option<&Path>) -> Result<()> {
    let out = out_dir(g)?;
    let config = train_config(g)?;
    let mut m = manifest(g, "mine");
    m.input(g.config.as_deref().expect("checked"))?;
    m.input(checkpoint)?;
    let loaded = Loaded::read(inputs, &mut m)?;
    let mining: MiningConfig = match mining_config {
        Some(p) => {
            m.input(p)?;
            read_json(p)?
        }
        None => MiningConfig {
            datasets: config.dataset_ids().into_iter().map(String::from).collect(),
            ..MiningConfig::default()
        },
    };
    let params = EncoderParams::load(checkpoint)?;
    let bm25 = Bm25Index::build(&loaded.passages)?;
    let examples = trainer::build_training_set(
        &loaded.train,
        &bm25,
        &config.datasets,
        config.seed,
        config.mapping_threshold,
    )?;
    let ctx = MiningContext::embed(&params, &loaded.passages)?;
    let mined = mining::mine_for_examples(&params, &ctx, &examples, &mining, 1, &model_id(checkpoint))?;
    mined.verify(&ctx, &loaded.train, mining.exclusion)?;
    let path = out.join("mined.jsonl");
    mined.save(&path)?;
    m.output(path);
    m.write(out)?;
    eprintln!("{} confounders for {} queries", mined.total(), mined.mined.len());
    Ok(())
}

pub enum RunSource {
    File(PathBuf),
    Retrieve(Retriever),
}

pub fn evaluate(g: &Global, source: &RunSource, queries: &Path, passages: &Path, depth: usize) -> Result<()> {
    let out = out_dir(g)?;
    let mut m = manifest(g, "eval");
    let qs = corpus::load_queries(queries)?;
    let run = match source {
        RunSource::File(p) => {
            m.input(p)?;
            let run: RetrievalRun = read_json(p)?;
            run.validate()?;
            run
        }
        RunSource::Retrieve(r) => {
            for p in r.inputs() {
                m.input(p)?;
            }
            r.run(&qs, depth)?
        }
    };
    m.input(queries)?;
    m.input(passages)?;
    let pages = PageMap::from_passages(&corpus::load_passages(passages)?);
    let report = eval::evaluate_run(&run, &qs, &pages)?;
    let path = out.join("report.json");
    write_json(&path, &report)?;
    m.output(path);
    m.write(out)?;
    for (id, d) in &report.datasets {
        eprintln!(
            "{id}: page {:.2} passage {:.2} ({} queries)",
            100.0 * d.page_rprec,
            100.0 * d.passage_rprec,
            d.queries
        );
    }
    Ok(())
}

pub fn compare(g: &Global, reports: &[PathBuf]) -> Result<()> {
    let out = out_dir(g)?;
    let mut m = manifest(g, "compare");
    let mut loaded: Vec<MetricReport> = Vec::new();
    for p in reports {
        m.input(p)?;
        loaded.push(read_json(p)?);
    }
    let table = eval::compare_reports(&loaded)?;
    let text = table.render_text();
    for (name, body) in [("comparison.txt", text.clone()), ("comparison.csv", table.render_csv())] {
        let path = out.join(name);
        std::fs::write(&path, body)?;
        m.output(path);
    }
    m.write(out)?;
    print!("{text}");
    Ok(())
}
