//! Documents, passages and queries: tokenization, chunking, BLEU-based
//! provenance mapping and JSONL ingestion.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CHUNK_SIZE: usize = 100;
pub const DEFAULT_MAPPING_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Document {
    pub page_id: String,
    pub title: String,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Passage {
    pub passage_id: String,
    pub page_id: String,
    pub index_in_page: usize,
    pub tokens: Vec<String>,
    pub text: String,
}

impl Passage {
    pub fn new(page_id: &str, index_in_page: usize, tokens: Vec<String>) -> Self {
        Passage {
            passage_id: passage_id(page_id, index_in_page),
            page_id: page_id.to_string(),
            index_in_page,
            text: tokens.join(" "),
            tokens,
        }
    }
}

pub fn passage_id(page_id: &str, index_in_page: usize) -> String {
    format!("{page_id}::{index_in_page}")
}

/// Page id encoded in a passage id, if it has the `page::index` shape.
pub fn page_of_passage(passage_id: &str) -> Option<&str> {
    let (page, idx) = passage_id.rsplit_once("::")?;
    idx.parse::<usize>().ok().map(|_| page)
}

/// The five task families queries are grouped into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskClass {
    FactChecking,
    EntityLinking,
    SlotFilling,
    Qa,
    Dialogue,
}

impl TaskClass {
    pub const ALL: [TaskClass; 5] = [
        TaskClass::FactChecking,
        TaskClass::EntityLinking,
        TaskClass::SlotFilling,
        TaskClass::Qa,
        TaskClass::Dialogue,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskClass::FactChecking => "fact_checking",
            TaskClass::EntityLinking => "entity_linking",
            TaskClass::SlotFilling => "slot_filling",
            TaskClass::Qa => "qa",
            TaskClass::Dialogue => "dialogue",
        }
    }
}

impl fmt::Display for TaskClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRecord {
    pub query_id: String,
    pub dataset_id: String,
    pub task_class: TaskClass,
    pub text: String,
    pub gold_pages: BTreeSet<String>,
    pub gold_passages: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answers: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mapping_score: Option<f64>,
}

impl QueryRecord {
    fn validate(&self) -> std::result::Result<(), String> {
        for p in &self.gold_passages {
            match page_of_passage(p) {
                Some(page) if self.gold_pages.contains(page) => {}
                Some(page) => {
                    return Err(format!(
                        "query `{}`: gold passage `{p}` belongs to page `{page}` not in gold_pages",
                        self.query_id
                    ))
                }
                None => return Err(format!("query `{}`: malformed passage id `{p}`", self.query_id)),
            }
        }
        if let Some(s) = self.mapping_score {
            if !(0.0..=1.0).contains(&s) {
                return Err(format!("query `{}`: mapping_score {s} outside [0,1]", self.query_id));
            }
        }
        Ok(())
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Lowercase and split into word runs and single punctuation marks.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut out = Vec::new();
    let mut word = String::new();
    for c in lower.chars() {
        if is_word_char(c) {
            word.push(c);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Split a document body into disjoint, ordered chunks of `chunk_size` tokens.
/// The trailing chunk keeps whatever remains.
pub fn chunk_document(doc: &Document, chunk_size: usize) -> Result<Vec<Passage>> {
    if chunk_size == 0 {
        return Err(Error::invalid("chunk_size must be at least 1"));
    }
    let tokens = tokenize(&doc.body);
    Ok(tokens
        .chunks(chunk_size)
        .enumerate()
        .map(|(i, chunk)| Passage::new(&doc.page_id, i, chunk.to_vec()))
        .collect())
}

pub fn chunk_corpus(docs: &[Document], chunk_size: usize) -> Result<Vec<Passage>> {
    if chunk_size == 0 {
        return Err(Error::invalid("chunk_size must be at least 1"));
    }
    let per_doc = crate::par::map(docs, |d| chunk_document(d, chunk_size));
    let mut out = Vec::new();
    for passages in per_doc {
        out.extend(passages?);
    }
    Ok(out)
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence BLEU up to 4-grams: clipped unigram precision, add-one smoothed
/// higher orders, brevity penalty against the reference length.
pub fn bleu(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand = ngram_counts(candidate, n);
        let refs = ngram_counts(reference, n);
        let total = candidate.len().saturating_sub(n - 1);
        let matched: usize = cand
            .iter()
            .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
            .sum();
        let precision = if n == 1 {
            if matched == 0 {
                return 0.0;
            }
            matched as f64 / total as f64
        } else {
            (matched as f64 + 1.0) / (total as f64 + 1.0)
        };
        log_sum += precision.ln() / 4.0;
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = if c >= r { 1.0 } else { (1.0 - r / c).exp() };
    (bp * log_sum.exp()).clamp(0.0, 1.0)
}

/// Map a gold evidence text onto the best-matching passage by BLEU
/// (gold tokens as candidate, passage tokens as reference).
pub fn map_provenance<'a>(gold_text: &str, passages: &'a [Passage], threshold: f64) -> Option<(&'a Passage, f64)> {
    let gold = tokenize(gold_text);
    let mut best: Option<(&Passage, f64)> = None;
    for p in passages {
        let s = bleu(&gold, &p.tokens);
        let better = match best {
            None => true,
            Some((b, bs)) => s > bs || (s == bs && (p.index_in_page, &p.page_id) < (b.index_in_page, &b.page_id)),
        };
        if better {
            best = Some((p, s));
        }
    }
    best.filter(|&(_, s)| s >= threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    Corpus,
    Queries,
}

#[derive(Debug, Clone)]
pub enum Records {
    Corpus(Vec<Document>),
    Queries(Vec<QueryRecord>),
}

pub fn load_jsonl(path: &Path, kind: RecordKind) -> Result<Records> {
    Ok(match kind {
        RecordKind::Corpus => Records::Corpus(load_documents(path)?),
        RecordKind::Queries => Records::Queries(load_queries(path)?),
    })
}

/// Parse one JSON object per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::invalid(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_documents(path: &Path) -> Result<Vec<Document>> {
    let mut seen = HashSet::new();
    let mut docs = Vec::new();
    for (line, doc) in read_jsonl::<Document>(path)? {
        if doc.body.split_whitespace().next().is_none() {
            return Err(Error::Parse {
                line,
                message: format!("document `{}` has an empty body", doc.page_id),
            });
        }
        if !seen.insert(doc.page_id.clone()) {
            return Err(Error::DuplicateId(doc.page_id));
        }
        docs.push(doc);
    }
    Ok(docs)
}

pub fn load_queries(path: &Path) -> Result<Vec<QueryRecord>> {
    let mut seen = HashSet::new();
    let mut queries = Vec::new();
    for (line, q) in read_jsonl::<QueryRecord>(path)? {
        q.validate().map_err(|message| Error::Parse { line, message })?;
        if !seen.insert(q.query_id.clone()) {
            return Err(Error::DuplicateId(q.query_id));
        }
        queries.push(q);
    }
    Ok(queries)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PassageRow {
    passage_id: String,
    page_id: String,
    index_in_page: usize,
    text: String,
}

pub fn write_passages(path: &Path, passages: &[Passage]) -> Result<()> {
    let rows: Vec<PassageRow> = passages
        .iter()
        .map(|p| PassageRow {
            passage_id: p.passage_id.clone(),
            page_id: p.page_id.clone(),
            index_in_page: p.index_in_page,
            text: p.text.clone(),
        })
        .collect();
    write_jsonl(path, &rows)
}

/// Read passages emitted by `write_passages`; tokens are re-derived from text.
pub fn load_passages(path: &Path) -> Result<Vec<Passage>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, row) in read_jsonl::<PassageRow>(path)? {
        if !seen.insert(row.passage_id.clone()) {
            return Err(Error::DuplicateId(row.passage_id));
        }
        let tokens = tokenize(&row.text);
        if tokens.join(" ") != row.text {
            return Err(Error::Parse {
                line,
                message: format!("passage `{}` text is not in normalized form", row.passage_id),
            });
        }
        out.push(Passage {
            passage_id: row.passage_id,
            page_id: row.page_id,
            index_in_page: row.index_in_page,
            tokens,
            text: row.text,
        });
    }
    Ok(out)
}
