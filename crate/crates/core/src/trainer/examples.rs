use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Cap, DatasetSpec};
use crate::corpus::{Passage, QueryRecord};
use crate::error::{Error, Result};
use crate::par;
use crate::sparse::Bm25Index;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub query: QueryRecord,
    /// Always a member of `query.gold_passages`.
    pub positive: String,
    /// Disjoint from `query.gold_passages`.
    pub hard_confounders: Vec<String>,
}

impl TrainingExample {
    pub fn validate(&self) -> Result<()> {
        if !self.query.gold_passages.contains(&self.positive) {
            return Err(Error::invalid(format!(
                "query `{}`: positive `{}` is not gold",
                self.query.query_id, self.positive
            )));
        }
        if let Some(c) = self
            .hard_confounders
            .iter()
            .find(|c| self.query.gold_passages.contains(*c))
        {
            return Err(Error::invalid(format!(
                "query `{}`: confounder `{c}` is gold",
                self.query.query_id
            )));
        }
        Ok(())
    }
}

/// Passage lookup by id.
pub struct PassageLookup<'a>(HashMap<&'a str, &'a Passage>);

impl<'a> PassageLookup<'a> {
    pub fn new(passages: &'a [Passage]) -> Self {
        PassageLookup(passages.iter().map(|p| (p.passage_id.as_str(), p)).collect())
    }

    pub fn get(&self, id: &str) -> Result<&'a Passage> {
        self.0
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownPassage(id.to_string()))
    }
}

/// Records with provenance whose mapping score clears `threshold`.
pub fn is_retained(q: &QueryRecord, threshold: f64) -> bool {
    !q.gold_passages.is_empty() && q.mapping_score.is_none_or(|s| s >= threshold)
}

/// Resolve each dataset's cap against its retained size.
pub fn resolve_caps(specs: &[DatasetSpec], sizes: &BTreeMap<String, usize>) -> BTreeMap<String, Option<usize>> {
    let auto = specs
        .iter()
        .filter(|d| d.cap.is_none())
        .filter_map(|d| sizes.get(&d.id).copied())
        .max();
    specs
        .iter()
        .map(|d| {
            let cap = match d.cap {
                None => None,
                Some(Cap::Limit(n)) => Some(n),
                Some(Cap::Auto) => auto,
            };
            (d.id.clone(), cap)
        })
        .collect()
}

fn dataset_seed(seed: u64, id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    seed ^ h
}

/// Uniform sample of `k` out of `n` indices without replacement, in
/// ascending order.
fn sample_sorted(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Filter, downsample and attach one BM25 hard confounder per query.
/// Datasets come out in config order, queries in input order.
pub fn build_training_set(
    queries: &[QueryRecord],
    bm25: &Bm25Index,
    datasets: &[DatasetSpec],
    seed: u64,
    threshold: f64,
) -> Result<Vec<TrainingExample>> {
    let mut grouped: BTreeMap<String, Vec<&QueryRecord>> = BTreeMap::new();
    for q in queries {
        if is_retained(q, threshold) {
            grouped.entry(q.dataset_id.clone()).or_default().push(q);
        }
    }
    let sizes = grouped.iter().map(|(k, v)| (k.clone(), v.len())).collect();
    let caps = resolve_caps(datasets, &sizes);
    let mut selected: Vec<&QueryRecord> = Vec::new();
    for d in datasets {
        let pool = grouped
            .get(&d.id)
            .filter(|v| !v.is_empty())
            .ok_or_else(|| Error::EmptyDataset(d.id.clone()))?;
        match caps[&d.id] {
            Some(cap) if cap < pool.len() => {
                let idx = sample_sorted(pool.len(), cap, dataset_seed(seed, &d.id));
                selected.extend(idx.into_iter().map(|i| pool[i]));
            }
            _ => selected.extend(pool.iter().copied()),
        }
    }
    Ok(par::map(&selected, |q| {
        let positive = q.gold_passages.iter().next().expect("retained").clone();
        let exclude: HashSet<String> = q.gold_passages.iter().cloned().collect();
        TrainingExample {
            query: (*q).clone(),
            positive,
            hard_confounders: bm25.mine_confounder(q, &exclude).into_iter().collect(),
        }
    }))
}

/// Seeded subset of `size` queries, in input order.
pub fn sample_few_shot(queries: &[QueryRecord], size: usize, seed: u64) -> Result<Vec<QueryRecord>> {
    if size == 0 || size > queries.len() {
        return Err(Error::invalid(format!(
            "cannot draw {size} few-shot examples from {} queries",
            queries.len()
        )));
    }
    Ok(sample_sorted(queries.len(), size, seed)
        .into_iter()
        .map(|i| queries[i].clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{tokenize, TaskClass};
    use std::collections::BTreeSet;

    fn corpus() -> Vec<Passage> {
        (0..30)
            .map(|i| {
                let text = format!(
                    "page {i} about topic{} and shared words {}",
                    i % 7,
                    "filler ".repeat(i % 4)
                );
                Passage::new(&format!("p{i}"), 0, tokenize(&text))
            })
            .collect()
    }

    fn query(id: usize, ds: &str, score: Option<f64>) -> QueryRecord {
        let page = format!("p{}", id % 30);
        QueryRecord {
            query_id: format!("{ds}-{id}"),
            dataset_id: ds.into(),
            task_class: TaskClass::Qa,
            text: format!("topic{} shared", id % 7),
            gold_pages: BTreeSet::from([page.clone()]),
            gold_passages: BTreeSet::from([format!("{page}::0")]),
            answers: None,
            mapping_score: score,
        }
    }

    #[test]
    fn caps_filter_and_confounders() {
        let passages = corpus();
        let bm25 = Bm25Index::build(&passages).unwrap();
        let mut qs: Vec<QueryRecord> = (0..100).map(|i| query(i, "a", None)).collect();
        qs.extend((0..20).map(|i| query(i, "b", Some(if i % 2 == 0 { 0.4 } else { 0.5 }))));
        let specs = [DatasetSpec::capped("a", Cap::Limit(10)), DatasetSpec::new("b")];
        let ex = build_training_set(&qs, &bm25, &specs, 3, 0.5).unwrap();
        assert_eq!(ex.iter().filter(|e| e.query.dataset_id == "a").count(), 10);
        // 0.4 is dropped, 0.5 is kept
        assert_eq!(ex.iter().filter(|e| e.query.dataset_id == "b").count(), 10);
        assert!(ex.iter().all(|e| e.query.mapping_score.map_or(true, |s| s >= 0.5)));
        assert_eq!(build_training_set(&qs, &bm25, &specs, 3, 0.5).unwrap(), ex);
        assert_ne!(build_training_set(&qs, &bm25, &specs, 4, 0.5).unwrap(), ex);
        for e in &ex {
            e.validate().unwrap();
            for c in &e.hard_confounders {
                assert!(e.query.gold_passages.iter().all(|g| g != c));
            }
        }
        assert!(ex.iter().all(|e| e.hard_confounders.len() == 1));

        let err = build_training_set(&qs, &bm25, &[DatasetSpec::new("zz")], 0, 0.5).unwrap_err();
        assert!(matches!(err, Error::EmptyDataset(ref d) if d == "zz"));
    }

    #[test]
    fn below_cap_is_untouched_and_auto_cap() {
        let passages = corpus();
        let bm25 = Bm25Index::build(&passages).unwrap();
        let mut qs: Vec<QueryRecord> = (0..12).map(|i| query(i, "a", None)).collect();
        qs.extend((0..40).map(|i| query(i, "b", None)));
        let specs = [
            DatasetSpec::capped("a", Cap::Limit(50)),
            DatasetSpec::capped("b", Cap::Auto),
        ];
        let ex = build_training_set(&qs, &bm25, &specs, 0, 0.5).unwrap();
        let a: Vec<&str> = ex
            .iter()
            .filter(|e| e.query.dataset_id == "a")
            .map(|e| e.query.query_id.as_str())
            .collect();
        let want: Vec<String> = (0..12).map(|i| format!("a-{i}")).collect();
        assert_eq!(a, want.iter().map(String::as_str).collect::<Vec<_>>());
        // no uncapped dataset: auto means no cap
        assert_eq!(ex.len(), 52);

        let specs = [DatasetSpec::new("a"), DatasetSpec::capped("b", Cap::Auto)];
        let ex = build_training_set(&qs, &bm25, &specs, 0, 0.5).unwrap();
        assert_eq!(ex.iter().filter(|e| e.query.dataset_id == "b").count(), 12);
    }

    #[test]
    fn few_shot_sampling() {
        let qs: Vec<QueryRecord> = (0..300).map(|i| query(i, "a", None)).collect();
        let a = sample_few_shot(&qs, 128, 5).unwrap();
        assert_eq!(a, sample_few_shot(&qs, 128, 5).unwrap());
        assert_eq!(a.len(), 128);
        assert_ne!(a, sample_few_shot(&qs, 128, 6).unwrap());
        assert!(sample_few_shot(&qs, 0, 5).is_err());
        assert!(sample_few_shot(&qs, 301, 5).is_err());
    }
}
