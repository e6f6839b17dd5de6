//! Page- and passage-level R-precision, per-dataset reports and comparison
//! tables.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Passage, QueryRecord};
use crate::dense_index::{DenseIndex, Ranked};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::par;
use crate::sparse::Bm25Index;

/// Minimum retrieval depth used when ranking passages for evaluation.
pub const DEFAULT_EVAL_DEPTH: usize = 100;

/// passage id -> page id.
#[derive(Debug, Clone, Default)]
pub struct PageMap(HashMap<String, String>);

impl PageMap {
    pub fn from_passages(passages: &[Passage]) -> Self {
        PageMap(
            passages
                .iter()
                .map(|p| (p.passage_id.clone(), p.page_id.clone()))
                .collect(),
        )
    }

    pub fn page(&self, passage_id: &str) -> Option<&str> {
        self.0.get(passage_id).map(String::as_str)
    }

    pub fn contains(&self, passage_id: &str) -> bool {
        self.0.contains_key(passage_id)
    }

    fn pages(&self) -> HashSet<&str> {
        self.0.values().map(String::as_str).collect()
    }
}

/// Collapse a passage ranking onto pages, keeping each page's first position.
pub fn rank_to_pages<S: AsRef<str>>(ranked: &[S], pages: &PageMap) -> Result<Vec<String>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for id in ranked {
        let id = id.as_ref();
        let page = pages.page(id).ok_or_else(|| Error::UnknownPassage(id.to_string()))?;
        if seen.insert(page) {
            out.push(page.to_string());
        }
    }
    Ok(out)
}

/// `r / R`: gold items among the top `R = |gold|`; missing slots are misses.
pub fn r_precision<S: AsRef<str>>(ranked: &[S], gold: &BTreeSet<String>) -> Result<f64> {
    if gold.is_empty() {
        return Err(Error::invalid("R-precision needs a non-empty gold set"));
    }
    let r = gold.len();
    let hits = ranked.iter().take(r).filter(|id| gold.contains(id.as_ref())).count();
    Ok(hits as f64 / r as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRun {
    pub model_id: String,
    pub corpus_id: String,
    pub rankings: BTreeMap<String, Ranked>,
}

impl RetrievalRun {
    pub fn validate(&self) -> Result<()> {
        for (qid, ranked) in &self.rankings {
            let mut seen = HashSet::new();
            for w in ranked.windows(2) {
                let ordered = w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0);
                if !ordered {
                    return Err(Error::invalid(format!(
                        "query `{qid}`: ranking not ordered at `{}`",
                        w[1].0
                    )));
                }
            }
            for (id, _) in ranked {
                if !seen.insert(id) {
                    return Err(Error::invalid(format!("query `{qid}`: duplicate passage `{id}`")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub query_id: String,
    pub dataset_id: String,
    pub page_rprec: f64,
    pub passage_rprec: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetrics {
    pub queries: usize,
    pub page_rprec: f64,
    pub passage_rprec: f64,
    /// Queries whose gold provenance is partly absent from the corpus.
    pub unmapped_gold: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model_id: String,
    pub datasets: BTreeMap<String, DatasetMetrics>,
    pub macro_page_rprec: f64,
    pub macro_passage_rprec: f64,
    pub per_query: Vec<QueryMetrics>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl MetricReport {
    fn from_queries(model_id: &str, per_query: Vec<QueryMetrics>, unmapped: &HashMap<String, usize>) -> Self {
        let mut grouped: BTreeMap<String, Vec<&QueryMetrics>> = BTreeMap::new();
        for q in &per_query {
            grouped.entry(q.dataset_id.clone()).or_default().push(q);
        }
        let datasets: BTreeMap<String, DatasetMetrics> = grouped
            .into_iter()
            .map(|(id, qs)| {
                let m = DatasetMetrics {
                    queries: qs.len(),
                    page_rprec: mean(qs.iter().map(|q| q.page_rprec)),
                    passage_rprec: mean(qs.iter().map(|q| q.passage_rprec)),
                    unmapped_gold: unmapped.get(&id).copied().unwrap_or(0),
                };
                (id, m)
            })
            .collect();
        MetricReport {
            model_id: model_id.to_string(),
            macro_page_rprec: mean(datasets.values().map(|d| d.page_rprec)),
            macro_passage_rprec: mean(datasets.values().map(|d| d.passage_rprec)),
            datasets,
            per_query,
        }
    }

    pub fn dataset(&self, id: &str) -> Option<&DatasetMetrics> {
        self.datasets.get(id)
    }
}

/// Score a run against gold provenance at both levels. Queries missing from
/// the run, or whose gold is absent from the corpus, score as misses.
pub fn evaluate_run(run: &RetrievalRun, queries: &[QueryRecord], pages: &PageMap) -> Result<MetricReport> {
    let known_pages = pages.pages();
    let mut unmapped: HashMap<String, usize> = HashMap::new();
    let mut per_query = Vec::with_capacity(queries.len());
    let empty = Vec::new();
    for q in queries {
        if q.gold_pages.is_empty() {
            return Err(Error::invalid(format!("query `{}` has no gold pages", q.query_id)));
        }
        let absent = q.gold_passages.iter().any(|p| !pages.contains(p))
            || q.gold_pages.iter().any(|p| !known_pages.contains(p.as_str()));
        if absent {
            *unmapped.entry(q.dataset_id.clone()).or_default() += 1;
        }
        let ranked = run.rankings.get(&q.query_id).unwrap_or(&empty);
        let ids: Vec<&str> = ranked.iter().map(|(id, _)| id.as_str()).collect();
        let page_rank = rank_to_pages(&ids, pages)?;
        let passage_rprec = if q.gold_passages.is_empty() {
            0.0
        } else {
            r_precision(&ids, &q.gold_passages)?
        };
        per_query.push(QueryMetrics {
            query_id: q.query_id.clone(),
            dataset_id: q.dataset_id.clone(),
            page_rprec: r_precision(&page_rank, &q.gold_pages)?,
            passage_rprec,
        });
    }
    Ok(MetricReport::from_queries(&run.model_id, per_query, &unmapped))
}

fn check_depth(queries: &[QueryRecord], k: usize) -> Result<()> {
    let max_r = queries
        .iter()
        .map(|q| q.gold_pages.len().max(q.gold_passages.len()))
        .max()
        .unwrap_or(0);
    if k < max_r.max(1) {
        return Err(Error::invalid(format!(
            "retrieval depth {k} is below the largest gold set ({max_r})"
        )));
    }
    Ok(())
}

/// Dense retrieval run: encode each query with its task class, then MIPS.
pub fn dense_run(
    params: &EncoderParams,
    index: &DenseIndex,
    queries: &[QueryRecord],
    k: usize,
    model_id: &str,
) -> Result<RetrievalRun> {
    check_depth(queries, k)?;
    let ranked = par::map(queries, |q| {
        let v = params.encode_query(&q.text, q.task_class);
        index.search(&v, k)
    });
    let mut rankings = BTreeMap::new();
    for (q, r) in queries.iter().zip(ranked) {
        rankings.insert(q.query_id.clone(), r?);
    }
    Ok(RetrievalRun {
        model_id: model_id.to_string(),
        corpus_id: String::new(),
        rankings,
    })
}

pub fn bm25_run(index: &Bm25Index, queries: &[QueryRecord], k: usize, model_id: &str) -> Result<RetrievalRun> {
    check_depth(queries, k)?;
    let ranked = par::map(queries, |q| index.search(&tokenize(&q.text), k));
    Ok(RetrievalRun {
        model_id: model_id.to_string(),
        corpus_id: String::new(),
        rankings: queries.iter().map(|q| q.query_id.clone()).zip(ranked).collect(),
    })
}

pub fn evaluate_model(
    params: &EncoderParams,
    index: &DenseIndex,
    queries: &[QueryRecord],
    pages: &PageMap,
    k: usize,
    model_id: &str,
) -> Result<MetricReport> {
    evaluate_run(&dense_run(params, index, queries, k, model_id)?, queries, pages)
}

pub fn evaluate_bm25(
    index: &Bm25Index,
    queries: &[QueryRecord],
    pages: &PageMap,
    k: usize,
    model_id: &str,
) -> Result<MetricReport> {
    evaluate_run(&bm25_run(index, queries, k, model_id)?, queries, pages)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Marker {
    None,
    Best,
    Second,
}

/// Models as rows, `dataset/level` as columns.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonTable {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
    pub markers: Vec<Vec<Marker>>,
}

pub fn compare_reports(reports: &[MetricReport]) -> Result<ComparisonTable> {
    let Some(first) = reports.first() else {
        return Err(Error::invalid("nothing to compare"));
    };
    let expected: BTreeSet<&String> = first.datasets.keys().collect();
    for r in &reports[1..] {
        let got: BTreeSet<&String> = r.datasets.keys().collect();
        if got != expected {
            let missing: Vec<_> = expected.difference(&got).collect();
            let extra: Vec<_> = got.difference(&expected).collect();
            return Err(Error::invalid(format!(
                "report `{}` datasets differ from `{}`: missing {missing:?}, extra {extra:?}",
                r.model_id, first.model_id
            )));
        }
    }
    let mut columns = Vec::new();
    for id in &expected {
        columns.push(format!("{id}/page"));
        columns.push(format!("{id}/passage"));
    }
    let rows: Vec<(String, Vec<f64>)> = reports
        .iter()
        .map(|r| {
            let vals = r
                .datasets
                .values()
                .flat_map(|d| [d.page_rprec, d.passage_rprec])
                .collect();
            (r.model_id.clone(), vals)
        })
        .collect();
    let mut markers = vec![vec![Marker::None; columns.len()]; rows.len()];
    if rows.len() > 1 {
        for c in 0..columns.len() {
            let mut distinct: Vec<f64> = rows.iter().map(|(_, v)| v[c]).collect();
            distinct.sort_by(|a, b| b.total_cmp(a));
            distinct.dedup();
            for (r, (_, v)) in rows.iter().enumerate() {
                if v[c] == distinct[0] {
                    markers[r][c] = Marker::Best;
                } else if distinct.len() > 1 && v[c] == distinct[1] {
                    markers[r][c] = Marker::Second;
                }
            }
        }
    }
    Ok(ComparisonTable { columns, rows, markers })
}

impl ComparisonTable {
    /// Aligned plain text; percentages, best as `**x**`, runner-up as `__x__`.
    pub fn render_text(&self) -> String {
        let cell = |v: f64, m: Marker| {
            let s = format!("{:.2}", v * 100.0);
            match m {
                Marker::Best => format!("**{s}**"),
                Marker::Second => format!("__{s}__"),
                Marker::None => s,
            }
        };
        let mut grid: Vec<Vec<String>> = vec![std::iter::once("model".to_string())
            .chain(self.columns.iter().cloned())
            .collect()];
        for ((name, vals), marks) in self.rows.iter().zip(&self.markers) {
            grid.push(
                std::iter::once(name.clone())
                    .chain(vals.iter().zip(marks).map(|(&v, &m)| cell(v, m)))
                    .collect(),
            );
        }
        let widths: Vec<usize> = (0..grid[0].len())
            .map(|c| grid.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &grid {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(
                    |(i, (s, w))| {
                        if i == 0 {
                            format!("{s:<w$}")
                        } else {
                            format!("{s:>w$}")
                        }
                    },
                )
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }

    pub fn render_csv(&self) -> String {
        let mut out = format!("model,{}\n", self.columns.join(","));
        for (name, vals) in &self.rows {
            let vals: Vec<String> = vals.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(out, "{name},{}", vals.join(","));
        }
        out
    }
}
