//! A seeded synthetic knowledge source with three retrieval tasks over it.
//!
//! Every page describes one person through eight attribute sentences mixed
//! with filler. The tasks ask for one attribute of one person:
//!
//! - `kwqa`: a question that names the person and uses the same relation
//!   keyword as the page;
//! - `paraqa`: the same question written with alias words for both names and
//!   the relation, so it shares no content word with any passage;
//! - `slot`: the person's name followed by `[sep]` and a slot name.
//!
//! Training queries carry noisy provenance that is mapped back onto passages
//! by BLEU, like gold evidence written against an older snapshot.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{chunk_document, map_provenance, write_jsonl, Document, Passage, QueryRecord, TaskClass};
use crate::error::{Error, Result};

pub const KEYWORD_QA: &str = "kwqa";
pub const PARAPHRASE_QA: &str = "paraqa";
pub const SLOT_FILLING: &str = "slot";
pub const TASKS: [&str; 3] = [KEYWORD_QA, PARAPHRASE_QA, SLOT_FILLING];

struct Relation {
    phrase: &'static [&'static str],
    keyword: &'static str,
    slot: &'static str,
    values: usize,
}

const RELATIONS: [Relation; 8] = [
    Relation {
        phrase: &["was", "born", "in"],
        keyword: "born",
        slot: "birthplace",
        values: 60,
    },
    Relation {
        phrase: &["worked", "as", "a"],
        keyword: "worked",
        slot: "occupation",
        values: 40,
    },
    Relation {
        phrase: &["was", "employed", "by"],
        keyword: "employed",
        slot: "employer",
        values: 50,
    },
    Relation {
        phrase: &["played", "the"],
        keyword: "played",
        slot: "instrument",
        values: 30,
    },
    Relation {
        phrase: &["supported", "the"],
        keyword: "supported",
        slot: "team",
        values: 40,
    },
    Relation {
        phrase: &["lived", "beside", "the"],
        keyword: "lived",
        slot: "residence",
        values: 40,
    },
    Relation {
        phrase: &["spoke"],
        keyword: "spoke",
        slot: "language",
        values: 25,
    },
    Relation {
        phrase: &["studied", "at"],
        keyword: "studied",
        slot: "school",
        values: 40,
    },
];

const QUERY_WORDS: [&str; 6] = ["what", "did", "which", "sep", "the", "a"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub entities: usize,
    pub given_names: usize,
    pub family_names: usize,
    pub filler_words: usize,
    /// Fraction of pages two chunks long; the rest are one chunk.
    pub two_chunk_fraction: f64,
    /// Training queries for kwqa, paraqa and slot.
    pub train: [usize; 3],
    pub dev: usize,
    pub test: usize,
    /// Fraction of training queries whose provenance points at unrelated text.
    pub noisy_fraction: f64,
    pub chunk_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            entities: 1400,
            given_names: 120,
            family_names: 100,
            filler_words: 300,
            two_chunk_fraction: 0.45,
            train: [1000, 1000, 2000],
            dev: 150,
            test: 150,
            noisy_fraction: 0.1,
            chunk_size: crate::corpus::DEFAULT_CHUNK_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub documents: Vec<Document>,
    pub passages: Vec<Passage>,
    pub train: Vec<QueryRecord>,
    pub dev: Vec<QueryRecord>,
    pub test: Vec<QueryRecord>,
}

impl SyntheticData {
    /// `corpus.jsonl`, `train.jsonl`, `dev.jsonl`, `test.jsonl`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_jsonl(&dir.join("corpus.jsonl"), &self.documents)?;
        write_jsonl(&dir.join("train.jsonl"), &self.train)?;
        write_jsonl(&dir.join("dev.jsonl"), &self.dev)?;
        write_jsonl(&dir.join("test.jsonl"), &self.test)
    }
}

struct Lexicon {
    used: HashSet<String>,
}

impl Lexicon {
    fn new() -> Self {
        let mut used = HashSet::new();
        for r in &RELATIONS {
            used.extend(r.phrase.iter().map(|w| w.to_string()));
            used.insert(r.keyword.to_string());
            used.insert(r.slot.to_string());
        }
        used.extend(QUERY_WORDS.iter().map(|w| w.to_string()));
        Lexicon { used }
    }

    /// `n` fresh pronounceable words, distinct from everything drawn so far.
    fn pool<R: Rng>(&mut self, n: usize, rng: &mut R) -> Vec<String> {
        const C: &[u8] = b"bdfgklmnprstvz";
        const V: &[u8] = b"aeiou";
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let syllables = rng.gen_range(2..=3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push(C[rng.gen_range(0..C.len())] as char);
                w.push(V[rng.gen_range(0..V.len())] as char);
            }
            if self.used.insert(w.clone()) {
                out.push(w);
            }
        }
        out
    }
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

struct Entity {
    given: usize,
    family: usize,
    values: [usize; 8],
    page_id: String,
    passages: Vec<Passage>,
    /// Passage index holding each relation's value.
    value_passage: [usize; 8],
}

pub fn generate(config: &SynthConfig) -> Result<SyntheticData> {
    if config.entities == 0 || config.entities > config.given_names * config.family_names {
        return Err(Error::invalid("entity count must be in 1..=given_names*family_names"));
    }
    if config.chunk_size < 60 {
        return Err(Error::invalid("chunk_size must be at least 60"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut lex = Lexicon::new();
    let given = lex.pool(config.given_names, &mut rng);
    let family = lex.pool(config.family_names, &mut rng);
    let given_alias = lex.pool(config.given_names, &mut rng);
    let family_alias = lex.pool(config.family_names, &mut rng);
    let relation_alias = lex.pool(RELATIONS.len(), &mut rng);
    let values: Vec<Vec<String>> = RELATIONS.iter().map(|r| lex.pool(r.values, &mut rng)).collect();
    let filler = lex.pool(config.filler_words, &mut rng);

    let mut names: Vec<(usize, usize)> = (0..config.given_names)
        .flat_map(|g| (0..config.family_names).map(move |f| (g, f)))
        .collect();
    names.shuffle(&mut rng);
    names.truncate(config.entities);

    let mut documents = Vec::with_capacity(config.entities);
    let mut entities = Vec::with_capacity(config.entities);
    for &(g, f) in &names {
        let vals: [usize; 8] = std::array::from_fn(|r| rng.gen_range(0..RELATIONS[r].values));
        let mut sentences: Vec<Vec<String>> = RELATIONS
            .iter()
            .zip(vals)
            .enumerate()
            .map(|(r, (rel, v))| {
                let mut s = vec![capitalize(&given[g]), capitalize(&family[f])];
                s.extend(rel.phrase.iter().map(|w| w.to_string()));
                s.push(capitalize(&values[r][v]));
                s.push(".".into());
                s
            })
            .collect();
        // Pad with filler so the body is exactly one or two chunks long.
        let target = config.chunk_size * if rng.gen_bool(config.two_chunk_fraction) { 2 } else { 1 };
        let mut remaining = target - sentences.iter().map(Vec::len).sum::<usize>();
        while remaining > 0 {
            let len = if remaining <= 11 {
                remaining
            } else {
                rng.gen_range(6..=11).min(remaining - 2)
            };
            let mut s: Vec<String> = (1..len)
                .map(|_| filler[rng.gen_range(0..filler.len())].clone())
                .collect();
            if let Some(first) = s.first_mut() {
                *first = capitalize(first);
            }
            s.push(".".into());
            sentences.push(s);
            remaining -= len;
        }
        sentences.shuffle(&mut rng);
        let page_id = format!("{}_{}", capitalize(&given[g]), capitalize(&family[f]));
        let doc = Document {
            page_id: page_id.clone(),
            title: format!("{} {}", capitalize(&given[g]), capitalize(&family[f])),
            body: sentences.iter().map(|s| s.join(" ")).collect::<Vec<_>>().join(" "),
        };
        let passages = chunk_document(&doc, config.chunk_size)?;
        let value_passage = std::array::from_fn(|r| {
            let v = &values[r][vals[r]];
            passages
                .iter()
                .position(|p| p.tokens.contains(v))
                .expect("every value is written once")
        });
        documents.push(doc);
        entities.push(Entity {
            given: g,
            family: f,
            values: vals,
            page_id,
            passages,
            value_passage,
        });
    }
    let passages: Vec<Passage> = entities.iter().flat_map(|e| e.passages.iter().cloned()).collect();

    let render = |task: usize, e: &Entity, r: usize| -> (String, TaskClass) {
        let (g, f) = (&given[e.given], &family[e.family]);
        match task {
            0 => (
                format!(
                    "what did {} {} {} ?",
                    capitalize(g),
                    capitalize(f),
                    RELATIONS[r].keyword
                ),
                TaskClass::Qa,
            ),
            1 => (
                format!(
                    "which {} {} {} ?",
                    relation_alias[r], given_alias[e.given], family_alias[e.family]
                ),
                TaskClass::Qa,
            ),
            _ => (
                format!("{} {} [sep] {}", capitalize(g), capitalize(f), RELATIONS[r].slot),
                TaskClass::SlotFilling,
            ),
        }
    };

    let mut train = Vec::new();
    let mut dev = Vec::new();
    let mut test = Vec::new();
    for (task, id) in TASKS.iter().enumerate() {
        let mut pairs: Vec<(usize, usize)> = (0..entities.len())
            .flat_map(|e| (0..RELATIONS.len()).map(move |r| (e, r)))
            .collect();
        pairs.shuffle(&mut rng);
        let need = config.train[task] + config.dev + config.test;
        if need > pairs.len() {
            return Err(Error::invalid(format!(
                "task `{id}` needs {need} queries, only {} exist",
                pairs.len()
            )));
        }
        for (n, &(ei, r)) in pairs[..need].iter().enumerate() {
            let e = &entities[ei];
            let (text, task_class) = render(task, e, r);
            let (split, out) = if n < config.train[task] {
                ("train", &mut train)
            } else if n < config.train[task] + config.dev {
                ("dev", &mut dev)
            } else {
                ("test", &mut test)
            };
            let mut q = QueryRecord {
                query_id: format!("{id}-{split}-{n}"),
                dataset_id: id.to_string(),
                task_class,
                text,
                gold_pages: BTreeSet::from([e.page_id.clone()]),
                gold_passages: BTreeSet::from([e.passages[e.value_passage[r]].passage_id.clone()]),
                answers: Some(vec![capitalize(&values[r][e.values[r]])]),
                mapping_score: None,
            };
            if split == "train" {
                // Evidence text: the gold passage with light edits, or for a
                // noisy fraction an unrelated passage with heavy edits.
                let (source, rate) = if rng.gen_bool(config.noisy_fraction) {
                    (&passages[rng.gen_range(0..passages.len())], 0.5)
                } else {
                    (&e.passages[e.value_passage[r]], 0.05)
                };
                let evidence: Vec<&str> = source
                    .tokens
                    .iter()
                    .map(|t| {
                        if rng.gen_bool(rate) {
                            filler[rng.gen_range(0..filler.len())].as_str()
                        } else {
                            t.as_str()
                        }
                    })
                    .collect();
                let (mapped, score) =
                    map_provenance(&evidence.join(" "), &e.passages, 0.0).expect("pages have passages");
                q.gold_passages = BTreeSet::from([mapped.passage_id.clone()]);
                q.mapping_score = Some(score);
            }
            out.push(q);
        }
    }
    Ok(SyntheticData {
        documents,
        passages,
        train,
        dev,
        test,
    })
}
