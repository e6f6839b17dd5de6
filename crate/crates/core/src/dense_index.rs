//! Maximum inner-product search over passage embeddings.
//!
//! [`FlatIndex`] scores every row; [`IvfIndex`] groups rows under unit-norm
//! centroids and scans only the `nprobe` cells whose centroids score highest
//! against the query. Vectors are stored as f32 and scored with f64
//! accumulation. Rankings order by score descending, then passage id
//! ascending.
//!
//! Binary layout (`UIVX`, little-endian):
//!
//! ```text
//! magic "UIVX", version u8 (=1), flags u8 (0 = flat, 1 = ivf),
//! dim u32, N u64, N x id (u32 len + UTF-8), N*dim f32 vectors,
//! ivf only: C u64, nprobe u32, C*dim f32 centroids,
//!           C x { len u64, len x row u32 }
//! ```

use std::collections::HashSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binio::{self, Reader, Writer};
use crate::corpus::Passage;
use crate::encoder::{EmbeddingVector, EncoderParams};
use crate::error::{Error, Result};
use crate::par;
use crate::sparse::rank_desc;

const MAGIC: &[u8; 4] = b"UIVX";
const VERSION: u8 = 1;
const FLAG_FLAT: u8 = 0;
const FLAG_IVF: u8 = 1;
pub const KMEANS_ITERATIONS: usize = 20;

pub type Ranked = Vec<(String, f64)>;

#[derive(Debug, Clone, PartialEq)]
pub struct FlatIndex {
    ids: Vec<String>,
    dim: usize,
    vectors: Vec<f32>,
}

/// Inner product of a stored f32 row with an f64 query, summed in index order.
fn row_score(row: &[f32], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for (v, x) in row.iter().zip(q) {
        s += *v as f64 * x;
    }
    s
}

fn top_k(ids: &[String], scored: Vec<(usize, f64)>, k: usize) -> Ranked {
    let mut hits: Vec<(&str, f64)> = scored.into_iter().map(|(i, s)| (ids[i].as_str(), s)).collect();
    let cmp = |a: &(&str, f64), b: &(&str, f64)| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0));
    if k < hits.len() {
        hits.select_nth_unstable_by(k, cmp);
        hits.truncate(k);
    }
    rank_desc(&mut hits);
    hits.into_iter().map(|(id, s)| (id.to_string(), s)).collect()
}

impl FlatIndex {
    pub fn new(ids: Vec<String>, dim: usize, vectors: Vec<f32>) -> Result<Self> {
        if vectors.len() != ids.len() * dim {
            return Err(Error::invalid(format!(
                "{} ids with dim {dim} need {} values, got {}",
                ids.len(),
                ids.len() * dim,
                vectors.len()
            )));
        }
        let mut seen = HashSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        Ok(FlatIndex { ids, dim, vectors })
    }

    pub fn from_embeddings(ids: Vec<String>, dim: usize, rows: &[EmbeddingVector]) -> Result<Self> {
        let mut vectors = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.dim() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    got: r.dim(),
                });
            }
            vectors.extend(r.0.iter().map(|&v| v as f32));
        }
        Self::new(ids, dim, vectors)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    fn check_dim(&self, q: &EmbeddingVector) -> Result<()> {
        if q.dim() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: q.dim(),
            });
        }
        Ok(())
    }

    fn score_rows(&self, q: &[f64], rows: impl Iterator<Item = usize>) -> Vec<(usize, f64)> {
        rows.map(|i| (i, row_score(self.row(i), q))).collect()
    }

    /// Exact top-`k` by inner product.
    pub fn search(&self, q: &EmbeddingVector, k: usize) -> Result<Ranked> {
        self.check_dim(q)?;
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        Ok(top_k(&self.ids, self.score_rows(&q.0, 0..self.len()), k))
    }

    /// One search per query, fanned out across workers.
    pub fn search_many(&self, queries: &[EmbeddingVector], k: usize) -> Result<Vec<Ranked>> {
        par::map(queries, |q| self.search(q, k)).into_iter().collect()
    }

    fn write(&self, w: &mut Writer) {
        w.u32(self.dim as u32);
        w.u64(self.len() as u64);
        for id in &self.ids {
            w.str(id);
        }
        for &v in &self.vectors {
            w.f32(v);
        }
    }

    fn read(r: &mut Reader) -> Result<Self> {
        let dim = r.u32()? as usize;
        let n = r.count(4)?;
        let ids = (0..n).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let at = r.offset();
        let total = n.checked_mul(dim).ok_or_else(|| r.err("vector count overflows"))?;
        let raw = r.take(total * 4)?;
        let vectors = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(ids, dim, vectors).map_err(|e| Error::Format {
            offset: at,
            message: e.to_string(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u8(VERSION);
        w.u8(FLAG_FLAT);
        self.write(&mut w);
        w.buf
    }
}

/// Encode every passage with the passage tower; row `i` is passage `i`.
pub fn embed_corpus(params: &EncoderParams, passages: &[Passage]) -> FlatIndex {
    let rows = par::map(passages, |p| params.encode_passage_tokens(&p.tokens));
    let ids = passages.iter().map(|p| p.passage_id.clone()).collect();
    FlatIndex::from_embeddings(ids, params.dim, &rows).expect("passage ids are unique and dims agree")
}

#[derive(Debug, Clone, PartialEq)]
pub struct IvfIndex {
    base: FlatIndex,
    /// C x dim, unit norm (or zero).
    centroids: Vec<f32>,
    assignments: Vec<Vec<u32>>,
    pub nprobe: usize,
}

fn normalized(v: &[f64]) -> Vec<f32> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x / norm) as f32).collect()
}

fn dot32(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += *x as f64 * *y as f64;
    }
    s
}

fn nearest_centroid(row: &[f32], centroids: &[f32], dim: usize) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (c, cent) in centroids.chunks_exact(dim).enumerate() {
        let s = dot32(row, cent);
        if s > best.1 {
            best = (c, s);
        }
    }
    best.0
}

impl IvfIndex {
    /// Spherical k-means: rows are assigned to the centroid with the highest
    /// inner product after centroid normalization, then centroids move to the
    /// mean of their rows. Empty cells keep their previous centroid.
    pub fn build(base: FlatIndex, cells: usize, seed: u64) -> Result<Self> {
        let n = base.len();
        if cells == 0 || cells > n {
            return Err(Error::invalid(format!("cell count must be in 1..={n}, got {cells}")));
        }
        let dim = base.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut means: Vec<Vec<f64>> = rand::seq::index::sample(&mut rng, n, cells)
            .into_iter()
            .map(|i| base.row(i).iter().map(|&v| v as f64).collect())
            .collect();
        let mut centroids: Vec<f32> = means.iter().flat_map(|m| normalized(m)).collect();
        for _ in 0..KMEANS_ITERATIONS {
            let assign = par::map_range(n, |i| nearest_centroid(base.row(i), &centroids, dim));
            let mut sums = vec![vec![0.0f64; dim]; cells];
            let mut counts = vec![0usize; cells];
            for (i, &c) in assign.iter().enumerate() {
                counts[c] += 1;
                for (s, &v) in sums[c].iter_mut().zip(base.row(i)) {
                    *s += v as f64;
                }
            }
            for c in 0..cells {
                if counts[c] > 0 {
                    means[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
                }
            }
            centroids = means.iter().flat_map(|m| normalized(m)).collect();
        }
        let assign = par::map_range(n, |i| nearest_centroid(base.row(i), &centroids, dim));
        let mut assignments = vec![Vec::new(); cells];
        for (i, c) in assign.into_iter().enumerate() {
            assignments[c].push(i as u32);
        }
        let nprobe = ((cells as f64).sqrt().ceil() as usize).clamp(1, cells);
        Ok(IvfIndex {
            base,
            centroids,
            assignments,
            nprobe,
        })
    }

    pub fn base(&self) -> &FlatIndex {
        &self.base
    }

    pub fn cells(&self) -> usize {
        self.assignments.len()
    }

    pub fn assignments(&self) -> &[Vec<u32>] {
        &self.assignments
    }

    pub fn centroid(&self, c: usize) -> &[f32] {
        &self.centroids[c * self.base.dim..(c + 1) * self.base.dim]
    }

    /// Top-`k` among rows in the `nprobe` best cells.
    pub fn search(&self, q: &EmbeddingVector, k: usize, nprobe: usize) -> Result<Ranked> {
        self.base.check_dim(q)?;
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if nprobe == 0 || nprobe > self.cells() {
            return Err(Error::invalid(format!(
                "nprobe must be in 1..={}, got {nprobe}",
                self.cells()
            )));
        }
        let mut cells: Vec<(usize, f64)> = (0..self.cells())
            .map(|c| {
                let cent = self.centroid(c);
                let s: f64 = cent.iter().zip(&q.0).map(|(a, b)| *a as f64 * b).sum();
                (c, s)
            })
            .collect();
        cells.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let rows = cells[..nprobe]
            .iter()
            .flat_map(|&(c, _)| self.assignments[c].iter().map(|&r| r as usize));
        Ok(top_k(&self.base.ids, self.base.score_rows(&q.0, rows), k))
    }

    pub fn search_many(&self, queries: &[EmbeddingVector], k: usize, nprobe: usize) -> Result<Vec<Ranked>> {
        par::map(queries, |q| self.search(q, k, nprobe)).into_iter().collect()
    }

    fn read(r: &mut Reader) -> Result<Self> {
        let base = FlatIndex::read(r)?;
        let dim = base.dim;
        let at = r.offset();
        let cells = r.count(dim * 4 + 8)?;
        let nprobe = r.u32()? as usize;
        if cells == 0 || cells > base.len() || nprobe == 0 || nprobe > cells {
            return Err(Error::Format {
                offset: at,
                message: format!("invalid cell count {cells} / nprobe {nprobe}"),
            });
        }
        let centroids = (0..cells * dim).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        let mut seen = vec![false; base.len()];
        let mut assignments = Vec::with_capacity(cells);
        for _ in 0..cells {
            let len = r.count(4)?;
            let mut list = Vec::with_capacity(len);
            for _ in 0..len {
                let at = r.offset();
                let row = r.u32()?;
                match seen.get_mut(row as usize) {
                    Some(s) if !*s => *s = true,
                    _ => {
                        return Err(Error::Format {
                            offset: at,
                            message: format!("row {row} out of range or assigned twice"),
                        })
                    }
                }
                list.push(row);
            }
            assignments.push(list);
        }
        if seen.iter().any(|s| !s) {
            return Err(r.err("assignments do not cover every row"));
        }
        Ok(IvfIndex {
            base,
            centroids,
            assignments,
            nprobe,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u8(VERSION);
        w.u8(FLAG_IVF);
        self.base.write(&mut w);
        w.u64(self.cells() as u64);
        w.u32(self.nprobe as u32);
        for &v in &self.centroids {
            w.f32(v);
        }
        for list in &self.assignments {
            w.u64(list.len() as u64);
            for &row in list {
                w.u32(row);
            }
        }
        w.buf
    }
}

/// Either index kind, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum DenseIndex {
    Flat(FlatIndex),
    Ivf(IvfIndex),
}

impl DenseIndex {
    pub fn flat(&self) -> &FlatIndex {
        match self {
            DenseIndex::Flat(f) => f,
            DenseIndex::Ivf(i) => i.base(),
        }
    }

    /// Flat search, or IVF search at the index's own `nprobe`.
    pub fn search(&self, q: &EmbeddingVector, k: usize) -> Result<Ranked> {
        match self {
            DenseIndex::Flat(f) => f.search(q, k),
            DenseIndex::Ivf(i) => i.search(q, k, i.nprobe),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            DenseIndex::Flat(f) => f.to_bytes(),
            DenseIndex::Ivf(i) => i.to_bytes(),
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported version {version}"),
            });
        }
        let out = match r.u8()? {
            FLAG_FLAT => DenseIndex::Flat(FlatIndex::read(&mut r)?),
            FLAG_IVF => DenseIndex::Ivf(IvfIndex::read(&mut r)?),
            other => {
                return Err(Error::Format {
                    offset: 5,
                    message: format!("unknown index flags {other}"),
                })
            }
        };
        r.finish()?;
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path)?)
    }
}

/// Fraction of `exact` ids that also appear in `approx`.
pub fn recall(approx: &[(String, f64)], exact: &[(String, f64)]) -> f64 {
    if exact.is_empty() {
        return 1.0;
    }
    let got: HashSet<&str> = approx.iter().map(|(id, _)| id.as_str()).collect();
    exact.iter().filter(|(id, _)| got.contains(id.as_str())).count() as f64 / exact.len() as f64
}
