//! Okapi BM25 over an in-memory inverted index.
//!
//! Documents are stored in lexicographic passage-id order, so every postings
//! list (sorted by document slot) is also sorted by passage id.
//!
//! Binary layout (`UBM1`, all integers little-endian):
//!
//! ```text
//! magic  "UBM1"
//! k1 f64, b f64
//! N u64, then N x { id: u32 len + UTF-8, doc_len u32 }
//! T u64, then T x { term: u32 len + UTF-8, df u64, df x { slot u32, tf u32 } }
//! ```
//!
//! Terms are written in byte order. `avg_doc_length` is recomputed on load.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use crate::binio::{self, Reader, Writer};
use crate::corpus::{tokenize, Passage, QueryRecord};
use crate::error::{Error, Result};

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;
const MAGIC: &[u8; 4] = b"UBM1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub slot: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bm25Index {
    ids: Vec<String>,
    slot_of: HashMap<String, u32>,
    doc_lengths: Vec<u32>,
    postings: BTreeMap<String, Vec<Posting>>,
    avg_doc_length: f64,
    pub k1: f64,
    pub b: f64,
}

/// Query terms with duplicates removed, kept in first-occurrence order.
pub fn unique_terms(query_tokens: &[String]) -> Vec<&str> {
    let mut seen = HashSet::new();
    query_tokens
        .iter()
        .map(String::as_str)
        .filter(|t| seen.insert(*t))
        .collect()
}

/// Sort `(id, score)` pairs by score descending, id ascending.
pub(crate) fn rank_desc<T: AsRef<str>>(hits: &mut [(T, f64)]) {
    hits.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.as_ref().cmp(b.0.as_ref())));
}

impl Bm25Index {
    pub fn build(passages: &[Passage]) -> Result<Self> {
        Self::build_with(passages, DEFAULT_K1, DEFAULT_B)
    }

    pub fn build_with(passages: &[Passage], k1: f64, b: f64) -> Result<Self> {
        if passages.is_empty() {
            return Err(Error::invalid("cannot build a BM25 index over zero passages"));
        }
        let mut order: Vec<&Passage> = passages.iter().collect();
        order.sort_by(|a, b| a.passage_id.cmp(&b.passage_id));
        for w in order.windows(2) {
            if w[0].passage_id == w[1].passage_id {
                return Err(Error::DuplicateId(w[0].passage_id.clone()));
            }
        }
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_lengths = Vec::with_capacity(order.len());
        for (slot, p) in order.iter().enumerate() {
            doc_lengths.push(p.tokens.len() as u32);
            let mut tf: BTreeMap<&str, u32> = BTreeMap::new();
            for t in &p.tokens {
                *tf.entry(t.as_str()).or_default() += 1;
            }
            for (term, tf) in tf {
                postings
                    .entry(term.to_string())
                    .or_default()
                    .push(Posting { slot: slot as u32, tf });
            }
        }
        let ids: Vec<String> = order.iter().map(|p| p.passage_id.clone()).collect();
        Ok(Self::assemble(ids, doc_lengths, postings, k1, b))
    }

    fn assemble(
        ids: Vec<String>,
        doc_lengths: Vec<u32>,
        postings: BTreeMap<String, Vec<Posting>>,
        k1: f64,
        b: f64,
    ) -> Self {
        let total: u64 = doc_lengths.iter().map(|&l| l as u64).sum();
        let avg_doc_length = total as f64 / doc_lengths.len().max(1) as f64;
        let slot_of = ids.iter().enumerate().map(|(i, id)| (id.clone(), i as u32)).collect();
        Bm25Index {
            ids,
            slot_of,
            doc_lengths,
            postings,
            avg_doc_length,
            k1,
            b,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn passage_ids(&self) -> &[String] {
        &self.ids
    }

    pub fn doc_length(&self, passage_id: &str) -> Option<u32> {
        self.slot_of.get(passage_id).map(|&s| self.doc_lengths[s as usize])
    }

    /// Postings for `term` as `(passage_id, tf)`, sorted by passage id.
    pub fn postings(&self, term: &str) -> Vec<(&str, u32)> {
        self.postings
            .get(term)
            .map(|ps| ps.iter().map(|p| (self.ids[p.slot as usize].as_str(), p.tf)).collect())
            .unwrap_or_default()
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.len() as f64;
        let df = self.doc_freq(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_weight(&self, idf: f64, tf: u32, doc_len: u32) -> f64 {
        let tf = tf as f64;
        let norm = 1.0 - self.b + self.b * doc_len as f64 / self.avg_doc_length;
        idf * tf * (self.k1 + 1.0) / (tf + self.k1 * norm)
    }

    pub fn score(&self, query_tokens: &[String], passage_id: &str) -> Result<f64> {
        let slot = *self
            .slot_of
            .get(passage_id)
            .ok_or_else(|| Error::UnknownPassage(passage_id.to_string()))?;
        let len = self.doc_lengths[slot as usize];
        let mut score = 0.0;
        for term in unique_terms(query_tokens) {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            if let Ok(i) = list.binary_search_by_key(&slot, |p| p.slot) {
                score += self.term_weight(self.idf(term), list[i].tf, len);
            }
        }
        Ok(score)
    }

    /// Top-`k` passages with positive score, best first.
    pub fn search(&self, query_tokens: &[String], k: usize) -> Vec<(String, f64)> {
        if k == 0 {
            return Vec::new();
        }
        let mut acc: HashMap<u32, f64> = HashMap::new();
        for term in unique_terms(query_tokens) {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            let idf = self.idf(term);
            for p in list {
                *acc.entry(p.slot).or_insert(0.0) += self.term_weight(idf, p.tf, self.doc_lengths[p.slot as usize]);
            }
        }
        let mut hits: Vec<(&str, f64)> = acc
            .into_iter()
            .filter(|&(_, s)| s > 0.0)
            .map(|(slot, s)| (self.ids[slot as usize].as_str(), s))
            .collect();
        rank_desc(&mut hits);
        hits.truncate(k);
        hits.into_iter().map(|(id, s)| (id.to_string(), s)).collect()
    }

    pub fn search_text(&self, query: &str, k: usize) -> Vec<(String, f64)> {
        self.search(&tokenize(query), k)
    }

    /// Highest-scoring passage outside `exclude`.
    pub fn mine_confounder(&self, query: &QueryRecord, exclude: &HashSet<String>) -> Option<String> {
        let tokens = tokenize(&query.text);
        // At most |exclude| of the top |exclude|+1 can be filtered out.
        self.search(&tokens, exclude.len() + 1)
            .into_iter()
            .map(|(id, _)| id)
            .find(|id| !exclude.contains(id))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.f64(self.k1);
        w.f64(self.b);
        w.u64(self.ids.len() as u64);
        for (id, &len) in self.ids.iter().zip(&self.doc_lengths) {
            w.str(id);
            w.u32(len);
        }
        w.u64(self.postings.len() as u64);
        for (term, list) in &self.postings {
            w.str(term);
            w.u64(list.len() as u64);
            for p in list {
                w.u32(p.slot);
                w.u32(p.tf);
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        let k1 = r.f64()?;
        let b = r.f64()?;
        let n = r.count(8)?;
        let mut ids = Vec::with_capacity(n);
        let mut doc_lengths = Vec::with_capacity(n);
        for _ in 0..n {
            let at = r.offset();
            let id = r.str()?;
            if ids.last().is_some_and(|prev: &String| prev >= &id) {
                return Err(Error::Format {
                    offset: at,
                    message: format!("passage ids not strictly sorted at `{id}`"),
                });
            }
            ids.push(id);
            doc_lengths.push(r.u32()?);
        }
        let terms = r.count(12)?;
        let mut postings = BTreeMap::new();
        for _ in 0..terms {
            let term = r.str()?;
            let df = r.count(8)?;
            let mut list = Vec::with_capacity(df);
            for _ in 0..df {
                let at = r.offset();
                let slot = r.u32()?;
                let tf = r.u32()?;
                if slot as usize >= n {
                    return Err(Error::Format {
                        offset: at,
                        message: format!("posting slot {slot} out of range"),
                    });
                }
                list.push(Posting { slot, tf });
            }
            postings.insert(term, list);
        }
        r.finish()?;
        Ok(Self::assemble(ids, doc_lengths, postings, k1, b))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    fn fixture() -> Vec<Passage> {
        vec![
            Passage::new("a", 0, toks("the cat sat on the mat")),
            Passage::new("b", 0, toks("the dog chased the cat")),
            Passage::new("c", 0, toks("a bird sang")),
        ]
    }

    #[test]
    fn single_passage_stats() {
        let p = Passage::new("x", 0, (0..10).map(|i| format!("t{i}")).collect());
        let idx = Bm25Index::build(&[p]).unwrap();
        assert_eq!(idx.len(), 1);
        assert_eq!(idx.avg_doc_length(), 10.0);
    }

    #[test]
    fn build_errors() {
        assert!(Bm25Index::build(&[]).is_err());
        let ps = vec![Passage::new("a", 0, toks("x")), Passage::new("a", 0, toks("y"))];
        match Bm25Index::build(&ps) {
            Err(Error::DuplicateId(id)) => assert_eq!(id, "a::0"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn postings_match_linear_scan() {
        let ps = fixture();
        let idx = Bm25Index::build(&ps).unwrap();
        for term in ["the", "cat", "bird", "zzz"] {
            let mut expected: Vec<(&str, u32)> = ps
                .iter()
                .filter_map(|p| {
                    let tf = p.tokens.iter().filter(|t| *t == term).count() as u32;
                    (tf > 0).then_some((p.passage_id.as_str(), tf))
                })
                .collect();
            expected.sort();
            assert_eq!(idx.postings(term), expected, "{term}");
        }
        assert_eq!(idx.postings("the"), vec![("a::0", 2), ("b::0", 2)]);
    }

    #[test]
    fn hand_computed_single_passage() {
        // N=1, df=1 => idf = ln(1 + 0.5/1.5) = ln(4/3). len = avg => norm = 1,
        // so each tf=1 term contributes idf * 2.2 / 2.2 = idf.
        let p = Passage::new("x", 0, toks("alpha beta gamma"));
        let idx = Bm25Index::build(&[p.clone()]).unwrap();
        let s = idx.score(&p.tokens, "x::0").unwrap();
        assert!((s - 3.0 * (4.0f64 / 3.0).ln()).abs() < 1e-6);
        assert!((s - 0.863_046_217_355_288_7).abs() < 1e-6);
    }

    #[test]
    fn hand_computed_fixture_score() {
        // "cat" in a::0: N=3, df=2, tf=1, len=6, avg=14/3.
        // idf = ln(1 + 1.5/2.5) = ln 1.6; norm = 0.25 + 0.75*6/(14/3) = 1.214285714...
        // weight = ln1.6 * 2.2 / (1 + 1.2*norm) = 0.420817...
        let idx = Bm25Index::build(&fixture()).unwrap();
        let s = idx.score(&toks("cat"), "a::0").unwrap();
        let norm = 0.25 + 0.75 * 6.0 / (14.0 / 3.0);
        let expected = 1.6f64.ln() * 2.2 / (1.0 + 1.2 * norm);
        assert!((s - expected).abs() < 1e-12);
        assert!((s - 0.420_817_202_9).abs() < 1e-6, "{s}");
    }

    #[test]
    fn score_edge_cases() {
        let idx = Bm25Index::build(&fixture()).unwrap();
        assert_eq!(idx.score(&toks("bird"), "a::0").unwrap(), 0.0);
        assert!(matches!(idx.score(&toks("x"), "nope"), Err(Error::UnknownPassage(_))));
        // duplicated query terms count once
        assert_eq!(
            idx.score(&toks("cat cat cat"), "a::0").unwrap(),
            idx.score(&toks("cat"), "a::0").unwrap()
        );
    }

    #[test]
    fn monotone_in_tf() {
        let mut prev = 0.0;
        for tf in 1..=10 {
            let mut tokens = vec!["x".to_string(); tf];
            tokens.extend((0..(10 - tf)).map(|i| format!("f{i}")));
            let ps = vec![
                Passage::new("a", 0, tokens),
                Passage::new("b", 0, toks("y y y y y y y y y y")),
            ];
            let idx = Bm25Index::build(&ps).unwrap();
            let s = idx.score(&toks("x"), "a::0").unwrap();
            assert!(s >= prev, "tf={tf}");
            prev = s;
        }
    }

    #[test]
    fn search_behaviour() {
        let idx = Bm25Index::build(&fixture()).unwrap();
        assert!(idx.search(&toks("unicorn"), 5).is_empty());
        let all = idx.search(&toks("the cat"), 100);
        // same term counts, b::0 is shorter
        assert_eq!(all.len(), 2);
        assert_eq!(all[0].0, "b::0");
    }

    #[test]
    fn confounder_mining() {
        let idx = Bm25Index::build(&fixture()).unwrap();
        let mut q = QueryRecord {
            query_id: "q".into(),
            dataset_id: "d".into(),
            task_class: crate::corpus::TaskClass::Qa,
            text: "the cat sat".into(),
            gold_pages: ["a".to_string()].into(),
            gold_passages: ["a::0".to_string()].into(),
            answers: None,
            mapping_score: None,
        };
        // brute-force ranking: a::0 first, b::0 second
        let exclude: HashSet<String> = q.gold_passages.iter().cloned().collect();
        assert_eq!(idx.mine_confounder(&q, &exclude).as_deref(), Some("b::0"));
        assert_eq!(
            idx.mine_confounder(&q, &HashSet::new()),
            Some(idx.search(&toks(&q.text), 1)[0].0.clone())
        );
        q.text = "cat".into();
        let all: HashSet<String> = ["a::0".to_string(), "b::0".to_string()].into();
        assert_eq!(idx.mine_confounder(&q, &all), None);
    }

    #[test]
    fn binary_round_trip_and_corruption() {
        let idx = Bm25Index::build(&fixture()).unwrap();
        let bytes = idx.to_bytes();
        let back = Bm25Index::from_bytes(&bytes).unwrap();
        assert_eq!(back, idx);
        assert_eq!(back.to_bytes(), bytes);
        assert!(matches!(
            Bm25Index::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Format { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Bm25Index::from_bytes(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    fn brute_force(ps: &[Passage], q: &[String], k: usize) -> Vec<(String, f64)> {
        let n = ps.len() as f64;
        let avg = ps.iter().map(|p| p.tokens.len()).sum::<usize>() as f64 / n;
        let mut out: Vec<(String, f64)> = ps
            .iter()
            .map(|p| {
                let mut seen = HashSet::new();
                let mut s = 0.0;
                for t in q {
                    if !seen.insert(t) {
                        continue;
                    }
                    let tf = p.tokens.iter().filter(|x| *x == t).count() as f64;
                    if tf == 0.0 {
                        continue;
                    }
                    let df = ps.iter().filter(|d| d.tokens.contains(t)).count() as f64;
                    let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                    let norm = 1.0 - 0.75 + 0.75 * p.tokens.len() as f64 / avg;
                    s += idf * tf * 2.2 / (tf + 1.2 * norm);
                }
                (p.passage_id.clone(), s)
            })
            .filter(|(_, s)| *s > 0.0)
            .collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        out.truncate(k);
        out
    }

    proptest::proptest! {
        #[test]
        fn search_equals_exhaustive(
            docs in proptest::collection::vec(proptest::collection::vec(0u8..12, 1..15), 1..40),
            query in proptest::collection::vec(0u8..14, 0..6),
            k in 1usize..50,
        ) {
            let ps: Vec<Passage> = docs
                .iter()
                .enumerate()
                .map(|(i, d)| Passage::new(&format!("p{i:03}"), 0, d.iter().map(|t| format!("w{t}")).collect()))
                .collect();
            let q: Vec<String> = query.iter().map(|t| format!("w{t}")).collect();
            let idx = Bm25Index::build(&ps).unwrap();
            let got = idx.search(&q, k);
            let want = brute_force(&ps, &q, k);
            proptest::prop_assert_eq!(got.len(), want.len());
            for (g, w) in got.iter().zip(&want) {
                proptest::prop_assert_eq!(&g.0, &w.0);
                proptest::prop_assert!((g.1 - w.1).abs() < 1e-12);
            }
        }
    }
}
