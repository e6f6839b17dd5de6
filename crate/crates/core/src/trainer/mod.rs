//! Training-set construction, in-batch contrastive training with hard
//! confounders, Adam with warmup and linear decay, and checkpoint selection
//! on validation R-precision.

mod batch;
mod config;
mod examples;
mod optim;

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use batch::{assemble_batch, contrastive_loss_and_grads, contrastive_loss_into, plan_epoch, softmax_nll, Batch};
pub use config::{make_leave_one_out_plan, Cap, DatasetSpec, Profile, TrainConfig};
pub use examples::{build_training_set, is_retained, resolve_caps, sample_few_shot, PassageLookup, TrainingExample};
pub use optim::{optimizer_step, AdamState, Schedule, BETA1, BETA2, EPSILON};

use crate::corpus::{Passage, QueryRecord};
use crate::dense_index::{embed_corpus, DenseIndex};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, PageMap};
use crate::sparse::Bm25Index;

const SHUFFLE_STREAM: u64 = 0x7368_7566_666c_6531;

/// The corpus plus the query splits a run draws from.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub passages: &'a [Passage],
    pub train: &'a [QueryRecord],
    pub dev: &'a [QueryRecord],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    /// Mean training loss since the previous record; `None` before any step.
    pub loss: Option<f64>,
    /// Page-level validation R-precision per dataset.
    pub rprec: BTreeMap<String, f64>,
    pub macro_rprec: f64,
    pub selected: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The selected checkpoint.
    pub params: EncoderParams,
    pub best_step: usize,
    pub best_metric: Option<f64>,
    pub total_steps: usize,
    pub log: Vec<LogRecord>,
}

impl TrainOutcome {
    pub fn log_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.log {
            out.push_str(&serde_json::to_string(r).expect("log serializes"));
            out.push('\n');
        }
        out
    }
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::Diverged { what, .. } => Error::Diverged { step, what },
        other => other,
    }
}

/// Page-level R-precision per dataset over the whole corpus.
pub fn validation_scores(
    params: &EncoderParams,
    passages: &[Passage],
    pages: &PageMap,
    dev: &[QueryRecord],
    depth: usize,
) -> Result<BTreeMap<String, f64>> {
    let index = DenseIndex::Flat(embed_corpus(params, passages));
    let max_r = dev
        .iter()
        .map(|q| q.gold_pages.len().max(q.gold_passages.len()))
        .max()
        .unwrap_or(1);
    let report = evaluate_model(params, &index, dev, pages, depth.max(max_r), "validation")?;
    Ok(report.datasets.into_iter().map(|(k, v)| (k, v.page_rprec)).collect())
}

fn validation_split(config: &TrainConfig, dev: &[QueryRecord]) -> Result<Vec<QueryRecord>> {
    let ids: BTreeSet<&str> = config.dataset_ids().into_iter().collect();
    let split: Vec<QueryRecord> = dev
        .iter()
        .filter(|q| ids.contains(q.dataset_id.as_str()))
        .cloned()
        .collect();
    for id in &ids {
        if !split.iter().any(|q| q.dataset_id == *id) {
            return Err(Error::invalid(format!("no validation queries for dataset `{id}`")));
        }
    }
    Ok(split)
}

/// Build the training set from `data.train` and train from a fresh init.
pub fn train(config: &TrainConfig, data: TrainData) -> Result<TrainOutcome> {
    config.validate()?;
    let bm25 = Bm25Index::build(data.passages)?;
    let examples = build_training_set(
        data.train,
        &bm25,
        &config.datasets,
        config.seed,
        config.mapping_threshold,
    )?;
    let init = EncoderParams::init(config.variant, config.dim, config.vocab_size, config.seed)?;
    train_examples(config, init, &examples, data)
}

/// The optimization loop over prepared examples, starting from `init`.
/// `data.train` is unused here.
pub fn train_examples(
    config: &TrainConfig,
    init: EncoderParams,
    examples: &[TrainingExample],
    data: TrainData,
) -> Result<TrainOutcome> {
    optimize(config, init, examples, data, false)
}

/// With `score_init`, `init` is validated at step 0 and can be selected.
fn optimize(
    config: &TrainConfig,
    init: EncoderParams,
    examples: &[TrainingExample],
    data: TrainData,
    score_init: bool,
) -> Result<TrainOutcome> {
    config.validate()?;
    for e in examples {
        e.validate()?;
    }
    let dev = validation_split(config, data.dev)?;
    let pages = PageMap::from_passages(data.passages);
    let lookup = PassageLookup::new(data.passages);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_STREAM);
    let plan: Vec<Vec<Vec<usize>>> = (0..config.epochs)
        .map(|_| plan_epoch(examples, config.batch_size, &mut rng))
        .collect();
    let total: usize = plan.iter().map(Vec::len).sum();
    if total == 0 {
        if config.epochs == 0 {
            return Ok(TrainOutcome {
                params: init,
                best_step: 0,
                best_metric: None,
                total_steps: 0,
                log: Vec::new(),
            });
        }
        return Err(Error::invalid("no batch of two compatible examples could be formed"));
    }
    let schedule = Schedule {
        base: config.lr,
        warmup: config
            .warmup_steps
            .unwrap_or_else(|| (total as f64 * 0.1).round() as usize),
        total,
    };
    let interval = config.eval_interval.unwrap_or(plan[0].len().max(1));

    let mut params = init;
    let mut grads = params.zeros_like();
    let mut adam = AdamState::new(&params);
    let mut best: Option<(EncoderParams, usize, f64)> = None;
    let mut log = Vec::new();
    let mut validate = |params: &EncoderParams, step: usize, epoch: usize, loss: Option<f64>| -> Result<()> {
        let rprec = validation_scores(params, data.passages, &pages, &dev, config.eval_depth)?;
        let macro_rprec = rprec.values().sum::<f64>() / rprec.len() as f64;
        let selected = best.as_ref().is_none_or(|b| macro_rprec > b.2);
        if selected {
            best = Some((params.clone(), step, macro_rprec));
        }
        log.push(LogRecord {
            step,
            epoch,
            loss,
            rprec,
            macro_rprec,
            selected,
        });
        Ok(())
    };
    if score_init {
        validate(&params, 0, 0, None)?;
    }
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    let mut step = 0;
    for (epoch, batches) in plan.iter().enumerate() {
        for members in batches {
            step += 1;
            let batch_seed: u64 = rng.gen();
            let refs: Vec<&TrainingExample> = members.iter().map(|&i| &examples[i]).collect();
            let dropout = (config.dropout > 0.0).then_some((config.dropout, batch_seed));
            let batch = assemble_batch(&refs, &params, &lookup, dropout)?;
            for t in grads.tensors_mut() {
                t.data.fill(0.0);
            }
            let loss = contrastive_loss_into(&batch, &params, &mut grads).map_err(|e| at_step(e, step))?;
            optimizer_step(&mut params, &grads, &mut adam, &schedule)?;
            if !params.is_finite() {
                return Err(Error::Diverged {
                    step,
                    what: "parameters",
                });
            }
            loss_sum += loss;
            loss_n += 1;

            if step % interval == 0 || step == total {
                validate(&params, step, epoch + 1, Some(loss_sum / loss_n as f64))?;
                loss_sum = 0.0;
                loss_n = 0;
            }
        }
    }
    let (params, best_step, metric) = best.expect("the final step is always evaluated");
    Ok(TrainOutcome {
        params,
        best_step,
        best_metric: Some(metric),
        total_steps: total,
        log,
    })
}

/// Continue training `checkpoint` on the few-shot examples only, with fresh
/// optimizer state. The starting checkpoint is validated at step 0 and is
/// returned if no later checkpoint beats it.
pub fn finetune(
    checkpoint: &EncoderParams,
    few_shot: &[TrainingExample],
    config: &TrainConfig,
    data: TrainData,
) -> Result<TrainOutcome> {
    if few_shot.is_empty() {
        return Err(Error::EmptyDataset("few-shot set".into()));
    }
    if let Some(n) = config.few_shot_size {
        if few_shot.len() != n {
            return Err(Error::invalid(format!(
                "few-shot set has {} examples, config expects {n}",
                few_shot.len()
            )));
        }
    }
    optimize(config, checkpoint.clone(), few_shot, data, true)
}
