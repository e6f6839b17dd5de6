//! Adversarial confounder selection: a trained retriever mines its own
//! high-ranking non-relevant passages, which are added to the training set
//! for a second round.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{read_jsonl, tokenize, write_jsonl, Passage, QueryRecord};
use crate::dense_index::{embed_corpus, DenseIndex};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::eval::PageMap;
use crate::par;
use crate::sparse::Bm25Index;
use crate::trainer::{build_training_set, train_examples, TrainConfig, TrainData, TrainOutcome, TrainingExample};

/// True iff some non-empty answer occurs as a contiguous token run.
pub fn answer_present(passage: &Passage, answers: &[String]) -> bool {
    answers.iter().any(|a| {
        let needle = tokenize(a);
        !needle.is_empty()
            && needle.len() <= passage.tokens.len()
            && passage.tokens.windows(needle.len()).any(|w| w == needle.as_slice())
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoldExclusion {
    /// Skip every passage of every gold page.
    Page,
    /// Skip only the gold passages.
    Passage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiningConfig {
    /// Mined confounders per query.
    pub m: usize,
    pub exclusion: GoldExclusion,
    /// Datasets whose examples receive mined confounders.
    pub datasets: Vec<String>,
    /// Round 2 starts from a fresh init rather than the round-1 checkpoint.
    pub from_scratch: bool,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            m: 1,
            exclusion: GoldExclusion::Page,
            datasets: Vec::new(),
            from_scratch: true,
        }
    }
}

/// Passages, their pages and a dense index built with the mining model.
pub struct MiningContext<'a> {
    pub passages: &'a [Passage],
    pub pages: PageMap,
    pub index: DenseIndex,
    by_id: BTreeMap<&'a str, &'a Passage>,
}

impl<'a> MiningContext<'a> {
    pub fn new(passages: &'a [Passage], index: DenseIndex) -> Result<Self> {
        if index.flat().len() != passages.len() {
            return Err(Error::invalid("dense index and passage list differ in size"));
        }
        Ok(MiningContext {
            passages,
            pages: PageMap::from_passages(passages),
            index,
            by_id: passages.iter().map(|p| (p.passage_id.as_str(), p)).collect(),
        })
    }

    pub fn embed(params: &EncoderParams, passages: &'a [Passage]) -> Result<Self> {
        Self::new(passages, DenseIndex::Flat(embed_corpus(params, passages)))
    }

    /// Whether `passage_id` may serve as a negative for `query`.
    pub fn admissible(&self, query: &QueryRecord, passage_id: &str, exclusion: GoldExclusion) -> Result<bool> {
        if query.gold_passages.contains(passage_id) {
            return Ok(false);
        }
        if exclusion == GoldExclusion::Page {
            let page = self
                .pages
                .page(passage_id)
                .ok_or_else(|| Error::UnknownPassage(passage_id.to_string()))?;
            if query.gold_pages.contains(page) {
                return Ok(false);
            }
        }
        if let Some(answers) = query.answers.as_deref().filter(|a| !a.is_empty()) {
            let p = self
                .by_id
                .get(passage_id)
                .ok_or_else(|| Error::UnknownPassage(passage_id.to_string()))?;
            if answer_present(p, answers) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Up to `m` top-ranked admissible passages not already in `skip`.
pub fn mine_adversarial_confounders(
    params: &EncoderParams,
    ctx: &MiningContext,
    query: &QueryRecord,
    m: usize,
    exclusion: GoldExclusion,
    skip: &HashSet<String>,
) -> Result<Vec<String>> {
    let n = ctx.passages.len();
    if m == 0 || n == 0 {
        return Ok(Vec::new());
    }
    let q = params.encode_query(&query.text, query.task_class);
    let mut depth = (m + query.gold_passages.len() + skip.len() + 16).min(n);
    loop {
        let ranked = ctx.index.search(&q, depth)?;
        let mut out = Vec::new();
        for (id, _) in &ranked {
            if !skip.contains(id) && ctx.admissible(query, id, exclusion)? {
                out.push(id.clone());
                if out.len() == m {
                    return Ok(out);
                }
            }
        }
        if depth == n {
            return Ok(out);
        }
        depth = (depth * 4).min(n);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinedRecord {
    pub query_id: String,
    pub mined: Vec<String>,
    pub round: u32,
    pub model_id: String,
}

/// Mined confounders per query with the producing model and round.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MinedConfounderSet {
    pub round: u32,
    pub model_id: String,
    pub mined: BTreeMap<String, Vec<String>>,
}

impl MinedConfounderSet {
    pub fn total(&self) -> usize {
        self.mined.values().map(Vec::len).sum()
    }

    pub fn records(&self) -> Vec<MinedRecord> {
        self.mined
            .iter()
            .map(|(q, m)| MinedRecord {
                query_id: q.clone(),
                mined: m.clone(),
                round: self.round,
                model_id: self.model_id.clone(),
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.records())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut set = MinedConfounderSet::default();
        for (i, (line, r)) in read_jsonl::<MinedRecord>(path)?.into_iter().enumerate() {
            if i == 0 {
                set.round = r.round;
                set.model_id = r.model_id.clone();
            } else if r.round != set.round || r.model_id != set.model_id {
                return Err(Error::Parse {
                    line,
                    message: "records disagree on round or model_id".into(),
                });
            }
            if set.mined.insert(r.query_id.clone(), r.mined).is_some() {
                return Err(Error::DuplicateId(r.query_id));
            }
        }
        Ok(set)
    }

    /// Re-check both exclusion predicates against the queries.
    pub fn verify(&self, ctx: &MiningContext, queries: &[QueryRecord], exclusion: GoldExclusion) -> Result<()> {
        let by_id: BTreeMap<&str, &QueryRecord> = queries.iter().map(|q| (q.query_id.as_str(), q)).collect();
        for (qid, mined) in &self.mined {
            let q = by_id
                .get(qid.as_str())
                .ok_or_else(|| Error::invalid(format!("mined set names unknown query `{qid}`")))?;
            for p in mined {
                if !ctx.admissible(q, p, exclusion)? {
                    return Err(Error::invalid(format!(
                        "query `{qid}`: mined passage `{p}` is gold or answer-bearing"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Mine for the examples of `config.datasets`, in parallel over examples.
pub fn mine_for_examples(
    params: &EncoderParams,
    ctx: &MiningContext,
    examples: &[TrainingExample],
    config: &MiningConfig,
    round: u32,
    model_id: &str,
) -> Result<MinedConfounderSet> {
    let targets: Vec<&TrainingExample> = examples
        .iter()
        .filter(|e| config.datasets.contains(&e.query.dataset_id))
        .collect();
    let mined = par::map(&targets, |e| {
        let skip: HashSet<String> = e.hard_confounders.iter().cloned().collect();
        mine_adversarial_confounders(params, ctx, &e.query, config.m, config.exclusion, &skip)
    });
    let mut set = MinedConfounderSet {
        round,
        model_id: model_id.to_string(),
        mined: BTreeMap::new(),
    };
    for (e, m) in targets.iter().zip(mined) {
        set.mined.insert(e.query.query_id.clone(), m?);
    }
    Ok(set)
}

/// Append mined confounders; example count and order are unchanged.
pub fn augment(examples: &[TrainingExample], mined: &MinedConfounderSet) -> Vec<TrainingExample> {
    examples
        .iter()
        .map(|e| {
            let mut e = e.clone();
            if let Some(extra) = mined.mined.get(&e.query.query_id) {
                for p in extra {
                    if !e.hard_confounders.contains(p) {
                        e.hard_confounders.push(p.clone());
                    }
                }
            }
            e
        })
        .collect()
}

pub struct AdversarialOutcome {
    pub round1_examples: Vec<TrainingExample>,
    pub round2_examples: Vec<TrainingExample>,
    pub mined: MinedConfounderSet,
    pub round2: TrainOutcome,
}

/// Mine with the round-1 model, augment the BM25 training set and train
/// round 2.
pub fn adversarial_round(
    train_config: &TrainConfig,
    mining: &MiningConfig,
    round1: &EncoderParams,
    data: TrainData,
) -> Result<AdversarialOutcome> {
    let bm25 = Bm25Index::build(data.passages)?;
    let round1_examples = build_training_set(
        data.train,
        &bm25,
        &train_config.datasets,
        train_config.seed,
        train_config.mapping_threshold,
    )?;
    let ctx = MiningContext::embed(round1, data.passages)?;
    let mined = mine_for_examples(round1, &ctx, &round1_examples, mining, 1, "round1")?;
    if mined.total() == 0 {
        return Err(Error::invalid("mining produced no confounders for any query"));
    }
    let round2_examples = augment(&round1_examples, &mined);
    let init = if mining.from_scratch {
        EncoderParams::init(
            train_config.variant,
            train_config.dim,
            train_config.vocab_size,
            train_config.seed,
        )?
    } else {
        round1.clone()
    };
    let round2 = train_examples(train_config, init, &round2_examples, data)?;
    Ok(AdversarialOutcome {
        round1_examples,
        round2_examples,
        mined,
        round2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TaskClass;
    use crate::encoder::Variant;
    use std::collections::BTreeSet;

    fn passage(page: &str, idx: usize, text: &str) -> Passage {
        Passage::new(page, idx, tokenize(text))
    }

    #[test]
    fn answer_matching() {
        let p = passage(
            "sb",
            0,
            "The halftime show was headlined by the British rock group Coldplay.",
        );
        assert!(answer_present(&p, &["Coldplay".into()]));
        assert!(answer_present(&p, &["coldplay".into()]));
        assert!(answer_present(&p, &["rock group".into()]));
        assert!(!answer_present(&p, &["group rock".into()]));
        assert!(!answer_present(&p, &["Cold".into()]));
        assert!(!answer_present(&p, &["".into()]));
    }

    fn setup() -> (Vec<Passage>, QueryRecord) {
        let passages = vec![
            passage("gold", 0, "alpha beta gamma"),
            passage("gold", 1, "alpha beta delta"),
            passage("other", 0, "alpha beta answer"),
            passage("third", 0, "alpha epsilon"),
            passage("fourth", 0, "zeta eta"),
        ];
        let q = QueryRecord {
            query_id: "q".into(),
            dataset_id: "d".into(),
            task_class: TaskClass::Qa,
            text: "alpha beta".into(),
            gold_pages: BTreeSet::from(["gold".to_string()]),
            gold_passages: BTreeSet::from(["gold::0".to_string()]),
            answers: Some(vec!["answer".into()]),
            mapping_score: None,
        };
        (passages, q)
    }

    #[test]
    fn mined_passages_pass_exhaustive_scan() {
        let (passages, q) = setup();
        let params = EncoderParams::init(Variant::Shared, 8, 64, 0).unwrap();
        let ctx = MiningContext::embed(&params, &passages).unwrap();
        for exclusion in [GoldExclusion::Page, GoldExclusion::Passage] {
            let all = mine_adversarial_confounders(&params, &ctx, &q, 10, exclusion, &HashSet::new()).unwrap();
            let expected: BTreeSet<&str> = passages
                .iter()
                .filter(|p| !q.gold_passages.contains(&p.passage_id))
                .filter(|p| exclusion == GoldExclusion::Passage || !q.gold_pages.contains(&p.page_id))
                .filter(|p| !answer_present(p, q.answers.as_ref().unwrap()))
                .map(|p| p.passage_id.as_str())
                .collect();
            assert_eq!(all.iter().map(String::as_str).collect::<BTreeSet<_>>(), expected);
            let first = mine_adversarial_confounders(&params, &ctx, &q, 1, exclusion, &HashSet::new()).unwrap();
            assert_eq!(first, all[..1].to_vec());
        }
    }

    #[test]
    fn all_gold_top_gives_empty() {
        let passages = vec![passage("gold", 0, "a b"), passage("gold", 1, "a c")];
        let (_, mut q) = setup();
        q.gold_passages = BTreeSet::from(["gold::0".to_string(), "gold::1".to_string()]);
        let params = EncoderParams::init(Variant::Shared, 8, 64, 0).unwrap();
        let ctx = MiningContext::embed(&params, &passages).unwrap();
        assert!(
            mine_adversarial_confounders(&params, &ctx, &q, 2, GoldExclusion::Passage, &HashSet::new())
                .unwrap()
                .is_empty()
        );
    }

    #[test]
    fn set_round_trip_and_augment() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mined.jsonl");
        let mut set = MinedConfounderSet {
            round: 1,
            model_id: "m".into(),
            mined: BTreeMap::new(),
        };
        set.mined.insert("q".into(), vec!["third::0".into()]);
        set.save(&path).unwrap();
        assert_eq!(MinedConfounderSet::load(&path).unwrap(), set);

        let (passages, q) = setup();
        let params = EncoderParams::init(Variant::Shared, 8, 64, 0).unwrap();
        let ctx = MiningContext::embed(&params, &passages).unwrap();
        set.verify(&ctx, &[q.clone()], GoldExclusion::Page).unwrap();
        let mut bad = set.clone();
        bad.mined.insert("q".into(), vec!["other::0".into()]);
        assert!(bad.verify(&ctx, &[q.clone()], GoldExclusion::Page).is_err());

        let ex = TrainingExample {
            query: q,
            positive: "gold::0".into(),
            hard_confounders: vec!["fourth::0".into()],
        };
        let aug = augment(&[ex.clone()], &set);
        assert_eq!(aug.len(), 1);
        assert_eq!(
            aug[0].hard_confounders,
            vec!["fourth::0".to_string(), "third::0".to_string()]
        );
        assert!(aug[0].hard_confounders.starts_with(&ex.hard_confounders));
    }
}
