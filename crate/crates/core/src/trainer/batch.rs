use std::collections::{HashSet, VecDeque};

use rand::seq::SliceRandom;
use rand::Rng;

use super::examples::{PassageLookup, TrainingExample};
use crate::encoder::{dot, EmbeddingVector, EncoderParams, Trace};
use crate::error::{Error, Result};
use crate::par;

/// Encoded batch. Candidates are the B positives in example order followed
/// by every hard confounder, so `positive_index[i] == i`.
pub struct Batch {
    pub queries: Vec<EmbeddingVector>,
    pub candidates: Vec<EmbeddingVector>,
    pub candidate_ids: Vec<String>,
    pub positive_index: Vec<usize>,
    query_traces: Vec<Trace>,
    candidate_traces: Vec<Trace>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    /// Negatives faced by each query.
    pub fn negatives_per_query(&self) -> usize {
        self.candidates.len() - 1
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn compatible(batch: &[usize], candidate: usize, examples: &[TrainingExample]) -> bool {
    let e = &examples[candidate];
    batch.iter().all(|&j| {
        let o = &examples[j];
        o.positive != e.positive
            && !o.hard_confounders.contains(&e.positive)
            && !e.hard_confounders.contains(&o.positive)
    })
}

/// One epoch of batches over a fresh shuffle. An example that would put some
/// member's positive among another member's negatives is deferred to a later
/// batch. Leftover singletons are dropped, so every batch has at least 2.
pub fn plan_epoch<R: Rng>(examples: &[TrainingExample], batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(rng);
    let mut pending: VecDeque<usize> = order.into();
    let mut batches = Vec::new();
    while !pending.is_empty() {
        let mut batch = Vec::with_capacity(batch_size);
        let mut deferred = Vec::new();
        while batch.len() < batch_size {
            let Some(i) = pending.pop_front() else { break };
            if compatible(&batch, i, examples) {
                batch.push(i);
            } else {
                deferred.push(i);
            }
        }
        for i in deferred.into_iter().rev() {
            pending.push_front(i);
        }
        if batch.len() >= 2 {
            batches.push(batch);
        }
    }
    batches
}

/// Encode a batch. `dropout = Some((rate, seed))` gives every encoded item its
/// own mask seed derived from `seed` and its position.
pub fn assemble_batch(
    examples: &[&TrainingExample],
    params: &EncoderParams,
    passages: &PassageLookup,
    dropout: Option<(f64, u64)>,
) -> Result<Batch> {
    if examples.len() < 2 {
        return Err(Error::invalid("a batch needs at least 2 examples"));
    }
    let mut positives = HashSet::new();
    for e in examples {
        if !positives.insert(e.positive.as_str()) {
            return Err(Error::invalid(format!(
                "positive `{}` appears twice in the batch",
                e.positive
            )));
        }
    }
    let mut candidate_ids: Vec<String> = examples.iter().map(|e| e.positive.clone()).collect();
    candidate_ids.extend(examples.iter().flat_map(|e| e.hard_confounders.iter().cloned()));

    let mut inputs = Vec::with_capacity(examples.len() + candidate_ids.len());
    for e in examples {
        let tokens = crate::corpus::tokenize(&e.query.text);
        inputs.push(params.prepare_query(&tokens, e.query.task_class));
    }
    for id in &candidate_ids {
        inputs.push(params.prepare_passage(&passages.get(id)?.tokens));
    }
    let encoded = par::map_range(inputs.len(), |i| {
        let drop = dropout.map(|(rate, seed)| (rate, splitmix(seed ^ splitmix(i as u64))));
        params.forward(&inputs[i], drop)
    });
    let (vectors, mut traces): (Vec<EmbeddingVector>, Vec<Trace>) = encoded.into_iter().unzip();
    let mut queries = vectors;
    let candidates = queries.split_off(examples.len());
    let candidate_traces = traces.split_off(examples.len());
    Ok(Batch {
        positive_index: (0..examples.len()).collect(),
        queries,
        candidates,
        candidate_ids,
        query_traces: traces,
        candidate_traces,
    })
}

/// `-log softmax(scores)[positive]` with max subtraction, and its gradient
/// `softmax(scores) - onehot(positive)`.
pub fn softmax_nll(scores: &[f64], positive: usize) -> Result<(f64, Vec<f64>)> {
    if positive >= scores.len() {
        return Err(Error::invalid("positive index out of range"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Diverged { step: 0, what: "score" });
    }
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
    let lse = m + z.ln();
    let mut grad: Vec<f64> = scores.iter().map(|s| (s - lse).exp()).collect();
    grad[positive] -= 1.0;
    Ok((lse - scores[positive], grad))
}

/// Mean NLL over the batch; gradients are added into `grads` in a fixed
/// order (queries, then candidates). Divergence errors carry step 0.
pub fn contrastive_loss_into(batch: &Batch, params: &EncoderParams, grads: &mut EncoderParams) -> Result<f64> {
    let b = batch.len();
    let n = batch.candidates.len();
    let inv_b = 1.0 / b as f64;
    let mut d_scores = Vec::with_capacity(b);
    let mut loss = 0.0;
    for (i, q) in batch.queries.iter().enumerate() {
        let scores: Vec<f64> = batch.candidates.iter().map(|c| dot(&q.0, &c.0)).collect();
        let (l, g) = softmax_nll(&scores, batch.positive_index[i])?;
        loss += l;
        d_scores.push(g.into_iter().map(|v| v * inv_b).collect::<Vec<f64>>());
    }
    let dim = params.dim;
    for (i, trace) in batch.query_traces.iter().enumerate() {
        let mut d_q = vec![0.0; dim];
        for j in 0..n {
            let g = d_scores[i][j];
            d_q.iter_mut()
                .zip(&batch.candidates[j].0)
                .for_each(|(d, c)| *d += g * c);
        }
        params.backward(trace, &d_q, grads);
    }
    for (j, trace) in batch.candidate_traces.iter().enumerate() {
        let mut d_c = vec![0.0; dim];
        for i in 0..b {
            let g = d_scores[i][j];
            d_c.iter_mut().zip(&batch.queries[i].0).for_each(|(d, q)| *d += g * q);
        }
        params.backward(trace, &d_c, grads);
    }
    let loss = loss * inv_b;
    if !loss.is_finite() {
        return Err(Error::Diverged { step: 0, what: "loss" });
    }
    Ok(loss)
}

pub fn contrastive_loss_and_grads(batch: &Batch, params: &EncoderParams) -> Result<(f64, EncoderParams)> {
    let mut grads = params.zeros_like();
    let loss = contrastive_loss_into(batch, params, &mut grads)?;
    Ok((loss, grads))
}
