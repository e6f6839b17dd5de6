//! The trainable bi-encoder.
//!
//! Each tower maps a token sequence to a vector: hashed token embeddings are
//! mean-pooled and pushed through a two-layer `dim -> dim -> dim` projection
//! with a tanh in between. Queries go through one of the query towers and
//! passages through the single passage tower; the two sides never share
//! parameters.
//!
//! Checkpoint layout (`UENC`, little-endian):
//!
//! ```text
//! magic "UENC", variant u8, dim u32, vocab_size u32, tensor count u32,
//! then per tensor: name (u32 len + UTF-8), rows u32, cols u32, rows*cols f64
//! ```

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader, Writer};
use crate::corpus::{tokenize, TaskClass};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"UENC";
pub const INIT_SCALE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// One query tower for every task.
    Shared,
    /// One query tower plus a learned marker vector per task class.
    TaskMarkers,
    /// One query tower per task class.
    TaskSpecific,
}

impl Variant {
    fn tag(self) -> u8 {
        match self {
            Variant::Shared => 0,
            Variant::TaskMarkers => 1,
            Variant::TaskSpecific => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Variant::Shared),
            1 => Some(Variant::TaskMarkers),
            2 => Some(Variant::TaskSpecific),
            _ => None,
        }
    }

    pub fn query_towers(self) -> usize {
        match self {
            Variant::TaskSpecific => TaskClass::ALL.len(),
            _ => 1,
        }
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-INIT_SCALE..=INIT_SCALE))
            .collect();
        Tensor { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tower {
    pub embeddings: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Tower {
    fn init(vocab: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Tower {
            embeddings: Tensor::uniform(vocab, dim, rng),
            w1: Tensor::uniform(dim, dim, rng),
            b1: Tensor::zeros(1, dim),
            w2: Tensor::uniform(dim, dim, rng),
            b2: Tensor::zeros(1, dim),
        }
    }

    fn tensors(&self) -> [(&'static str, &Tensor); 5] {
        [
            ("embeddings", &self.embeddings),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 5] {
        [
            &mut self.embeddings,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// Which tower an input is routed through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TowerId {
    Query(usize),
    Passage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub variant: Variant,
    pub dim: usize,
    pub vocab_size: usize,
    pub query_towers: Vec<Tower>,
    pub passage_tower: Tower,
    /// One row per task class; only for [`Variant::TaskMarkers`].
    pub markers: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn similarity(q: &EmbeddingVector, p: &EmbeddingVector) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::DimMismatch {
            expected: q.dim(),
            got: p.dim(),
        });
    }
    Ok(dot(&q.0, &p.0))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fixed multiplicative hash of a token into `0..vocab`.
pub fn token_row(token: &str, vocab: usize) -> usize {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in token.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ((h.wrapping_mul(0x9e37_79b9_7f4a_7c15) >> 16) % vocab as u64) as usize
}

/// A tokenized input bound to its tower, ready for the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedInput {
    pub tower: TowerId,
    pub rows: Vec<usize>,
    pub marker: Option<usize>,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    input: PreparedInput,
    pooled: Vec<f64>,
    /// Per-coordinate dropout multiplier (0 or 1/(1-rate)).
    mask: Option<Vec<f64>>,
    hidden: Vec<f64>,
}

impl EncoderParams {
    pub fn init(variant: Variant, dim: usize, vocab_size: usize, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::invalid("encoder dim must be at least 2"));
        }
        if vocab_size == 0 {
            return Err(Error::invalid("vocab_size must be at least 1"));
        }
        // Every tower starts from the same draw, the way two encoders start
        // from one pretrained checkpoint; training then moves them apart.
        let tower_init = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Tower::init(vocab_size, dim, &mut rng)
        };
        let query_towers = (0..variant.query_towers()).map(|_| tower_init()).collect();
        let passage_tower = tower_init();
        let markers = (variant == Variant::TaskMarkers).then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_726b_6572_7321);
            Tensor::uniform(TaskClass::ALL.len(), dim, &mut rng)
        });
        Ok(EncoderParams {
            variant,
            dim,
            vocab_size,
            query_towers,
            passage_tower,
            markers,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let zero_tower = |t: &Tower| Tower {
            embeddings: Tensor::zeros(t.embeddings.rows, t.embeddings.cols),
            w1: Tensor::zeros(t.w1.rows, t.w1.cols),
            b1: Tensor::zeros(1, t.b1.cols),
            w2: Tensor::zeros(t.w2.rows, t.w2.cols),
            b2: Tensor::zeros(1, t.b2.cols),
        };
        EncoderParams {
            variant: self.variant,
            dim: self.dim,
            vocab_size: self.vocab_size,
            query_towers: self.query_towers.iter().map(zero_tower).collect(),
            passage_tower: zero_tower(&self.passage_tower),
            markers: self.markers.as_ref().map(|m| Tensor::zeros(m.rows, m.cols)),
        }
    }

    /// All tensors with stable names, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (k, tower) in self.query_towers.iter().enumerate() {
            for (name, t) in tower.tensors() {
                out.push((format!("query.{k}.{name}"), t));
            }
        }
        for (name, t) in self.passage_tower.tensors() {
            out.push((format!("passage.{name}"), t));
        }
        if let Some(m) = &self.markers {
            out.push(("markers".to_string(), m));
        }
        out
    }

    /// Mutable tensors in the same order as [`named_tensors`](Self::named_tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for tower in &mut self.query_towers {
            out.extend(tower.tensors_mut());
        }
        out.extend(self.passage_tower.tensors_mut());
        if let Some(m) = &mut self.markers {
            out.push(m);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn tower(&self, id: TowerId) -> &Tower {
        match id {
            TowerId::Query(k) => &self.query_towers[k],
            TowerId::Passage => &self.passage_tower,
        }
    }

    fn tower_mut(&mut self, id: TowerId) -> &mut Tower {
        match id {
            TowerId::Query(k) => &mut self.query_towers[k],
            TowerId::Passage => &mut self.passage_tower,
        }
    }

    pub fn prepare_query(&self, tokens: &[String], class: TaskClass) -> PreparedInput {
        let tower = match self.variant {
            Variant::TaskSpecific => TowerId::Query(class.index()),
            _ => TowerId::Query(0),
        };
        PreparedInput {
            tower,
            rows: tokens.iter().map(|t| token_row(t, self.vocab_size)).collect(),
            marker: (self.variant == Variant::TaskMarkers).then_some(class.index()),
        }
    }

    pub fn prepare_passage(&self, tokens: &[String]) -> PreparedInput {
        PreparedInput {
            tower: TowerId::Passage,
            rows: tokens.iter().map(|t| token_row(t, self.vocab_size)).collect(),
            marker: None,
        }
    }

    pub fn encode_query(&self, text: &str, class: TaskClass) -> EmbeddingVector {
        self.forward(&self.prepare_query(&tokenize(text), class), None).0
    }

    pub fn encode_passage(&self, text: &str) -> EmbeddingVector {
        self.forward(&self.prepare_passage(&tokenize(text)), None).0
    }

    pub fn encode_passage_tokens(&self, tokens: &[String]) -> EmbeddingVector {
        self.forward(&self.prepare_passage(tokens), None).0
    }

    /// Run a tower. `dropout = Some((rate, seed))` applies inverted dropout to
    /// the pooled vector with a mask drawn from `seed`.
    pub fn forward(&self, input: &PreparedInput, dropout: Option<(f64, u64)>) -> (EmbeddingVector, Trace) {
        let dim = self.dim;
        let tower = self.tower(input.tower);
        let mut pooled = vec![0.0; dim];
        for &r in &input.rows {
            for (p, e) in pooled.iter_mut().zip(tower.embeddings.row(r)) {
                *p += e;
            }
        }
        if let (Some(c), Some(m)) = (input.marker, &self.markers) {
            for (p, e) in pooled.iter_mut().zip(m.row(c)) {
                *p += e;
            }
        }
        let count = input.rows.len() + usize::from(input.marker.is_some());
        if count > 0 {
            let inv = 1.0 / count as f64;
            pooled.iter_mut().for_each(|p| *p *= inv);
        }
        let mask = match dropout {
            Some((rate, seed)) if rate > 0.0 => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let keep = 1.0 / (1.0 - rate);
                let mask: Vec<f64> = (0..dim)
                    .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
                    .collect();
                pooled.iter_mut().zip(&mask).for_each(|(p, m)| *p *= m);
                Some(mask)
            }
            _ => None,
        };
        let hidden: Vec<f64> = (0..dim)
            .map(|i| (dot(tower.w1.row(i), &pooled) + tower.b1.data[i]).tanh())
            .collect();
        let out: Vec<f64> = (0..dim)
            .map(|i| dot(tower.w2.row(i), &hidden) + tower.b2.data[i])
            .collect();
        (
            EmbeddingVector(out),
            Trace {
                input: input.clone(),
                pooled,
                mask,
                hidden,
            },
        )
    }

    /// Accumulate d(loss)/d(params) into `grads` given d(loss)/d(output).
    pub fn backward(&self, trace: &Trace, d_out: &[f64], grads: &mut EncoderParams) {
        let dim = self.dim;
        let id = trace.input.tower;
        let tower = self.tower(id);
        let g = grads.tower_mut(id);

        let mut d_hidden = vec![0.0; dim];
        for i in 0..dim {
            let d = d_out[i];
            g.b2.data[i] += d;
            for (gw, h) in g.w2.row_mut(i).iter_mut().zip(&trace.hidden) {
                *gw += d * h;
            }
            for (dh, w) in d_hidden.iter_mut().zip(tower.w2.row(i)) {
                *dh += d * w;
            }
        }
        let mut d_pooled = vec![0.0; dim];
        for i in 0..dim {
            let h = trace.hidden[i];
            let dz = d_hidden[i] * (1.0 - h * h);
            g.b1.data[i] += dz;
            for (gw, p) in g.w1.row_mut(i).iter_mut().zip(&trace.pooled) {
                *gw += dz * p;
            }
            for (dp, w) in d_pooled.iter_mut().zip(tower.w1.row(i)) {
                *dp += dz * w;
            }
        }
        if let Some(mask) = &trace.mask {
            d_pooled.iter_mut().zip(mask).for_each(|(d, m)| *d *= m);
        }
        let count = trace.input.rows.len() + usize::from(trace.input.marker.is_some());
        if count == 0 {
            return;
        }
        let inv = 1.0 / count as f64;
        d_pooled.iter_mut().for_each(|d| *d *= inv);
        for &r in &trace.input.rows {
            for (ge, d) in g.embeddings.row_mut(r).iter_mut().zip(&d_pooled) {
                *ge += d;
            }
        }
        if let (Some(c), Some(m)) = (trace.input.marker, grads.markers.as_mut()) {
            for (gm, d) in m.row_mut(c).iter_mut().zip(&d_pooled) {
                *gm += d;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors()
            .iter()
            .all(|(_, t)| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u8(self.variant.tag());
        w.u32(self.dim as u32);
        w.u32(self.vocab_size as u32);
        let tensors = self.named_tensors();
        w.u32(tensors.len() as u32);
        for (name, t) in tensors {
            w.str(&name);
            w.u32(t.rows as u32);
            w.u32(t.cols as u32);
            for &v in &t.data {
                w.f64(v);
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        let tag = r.u8()?;
        let variant = Variant::from_tag(tag).ok_or_else(|| Error::Format {
            offset: 4,
            message: format!("unknown variant tag {tag}"),
        })?;
        let dim = r.u32()? as usize;
        let vocab = r.u32()? as usize;
        if dim < 2 || vocab == 0 {
            return Err(r.err(format!("invalid shape dim={dim} vocab={vocab}")));
        }
        // Shapes come from the variant; the file must agree tensor by tensor.
        let mut params = Self::zeros_template(variant, dim, vocab);
        let expected: Vec<(String, usize, usize)> = params
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.rows, t.cols))
            .collect();
        let count = r.u32()? as usize;
        if count != expected.len() {
            return Err(r.err(format!("expected {} tensors, found {count}", expected.len())));
        }
        for ((name, rows, cols), slot) in expected.into_iter().zip(params.tensors_mut()) {
            let at = r.offset();
            let got = r.str()?;
            let (gr, gc) = (r.u32()? as usize, r.u32()? as usize);
            if got != name || gr != rows || gc != cols {
                return Err(Error::Format {
                    offset: at,
                    message: format!("expected tensor {name} [{rows}x{cols}], found {got} [{gr}x{gc}]"),
                });
            }
            for v in slot.data.iter_mut() {
                *v = r.f64()?;
            }
        }
        r.finish()?;
        Ok(params)
    }

    fn zeros_template(variant: Variant, dim: usize, vocab: usize) -> Self {
        let tower = || Tower {
            embeddings: Tensor::zeros(vocab, dim),
            w1: Tensor::zeros(dim, dim),
            b1: Tensor::zeros(1, dim),
            w2: Tensor::zeros(dim, dim),
            b2: Tensor::zeros(1, dim),
        };
        EncoderParams {
            variant,
            dim,
            vocab_size: vocab,
            query_towers: (0..variant.query_towers()).map(|_| tower()).collect(),
            passage_tower: tower(),
            markers: (variant == Variant::TaskMarkers).then(|| Tensor::zeros(TaskClass::ALL.len(), dim)),
        }
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

    #[test]
    fn init_is_deterministic() {
        let a = EncoderParams::init(Variant::TaskMarkers, 8, 50, 3).unwrap();
        let b = EncoderParams::init(Variant::TaskMarkers, 8, 50, 3).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = EncoderParams::init(Variant::TaskMarkers, 8, 50, 4).unwrap();
        assert_ne!(a, c);
        for (_, t) in a.named_tensors() {
            assert!(t.data.iter().all(|v| v.abs() <= INIT_SCALE));
        }
        assert!(a.passage_tower.b1.data.iter().all(|&v| v == 0.0));
        assert!(EncoderParams::init(Variant::Shared, 1, 10, 0).is_err());
        assert!(EncoderParams::init(Variant::Shared, 4, 0, 0).is_err());
    }

    #[test]
    fn parameter_census() {
        // Per tower: V*d embeddings + two d*d weights + two d biases.
        let (d, v) = (128usize, 10_000usize);
        let tower = v * d + 2 * d * d + 2 * d;
        assert_eq!(tower, 1_313_024);
        let shared = EncoderParams::init(Variant::Shared, d, v, 0).unwrap();
        assert_eq!(shared.param_count(), 2_626_048);
        let markers = EncoderParams::init(Variant::TaskMarkers, d, v, 0).unwrap();
        assert_eq!(markers.param_count(), 2_626_048 + 5 * 128);
        let specific = EncoderParams::init(Variant::TaskSpecific, d, v, 0).unwrap();
        assert_eq!(specific.param_count(), 7_878_144);
        assert_eq!(specific.query_towers.len(), 5);
        assert_eq!(shared.query_towers.len(), 1);
        assert_eq!(markers.query_towers.len(), 1);
    }

    #[test]
    fn shared_variant_ignores_class() {
        let p = EncoderParams::init(Variant::Shared, 16, 100, 1).unwrap();
        assert_eq!(
            p.encode_query("who wrote it", TaskClass::Qa),
            p.encode_query("who wrote it", TaskClass::FactChecking)
        );
    }

    #[test]
    fn markers_distinguish_classes() {
        let p = EncoderParams::init(Variant::TaskMarkers, 16, 100, 1).unwrap();
        assert_ne!(
            p.encode_query("who wrote it", TaskClass::Qa),
            p.encode_query("who wrote it", TaskClass::FactChecking)
        );
    }

    #[test]
    fn task_specific_routes_by_class() {
        let mut p = EncoderParams::init(Variant::TaskSpecific, 8, 100, 1).unwrap();
        let before = p.encode_query("x y", TaskClass::Dialogue);
        p.query_towers[TaskClass::Qa.index()].b2.data[0] += 1.0;
        assert_eq!(p.encode_query("x y", TaskClass::Dialogue), before);
        assert_ne!(p.encode_query("x y", TaskClass::Qa), before);
    }

    #[test]
    fn passage_encoding_is_pure_and_handles_empty() {
        let p = EncoderParams::init(Variant::Shared, 8, 100, 1).unwrap();
        assert_eq!(p.encode_passage("a b c"), p.encode_passage("a b c"));
        let empty = p.encode_passage("   ");
        let t = &p.passage_tower;
        // zero pool => h = tanh(b1) = 0 => out = b2
        assert_eq!(empty.0, t.b2.data);
    }

    #[test]
    fn similarity_examples() {
        let e = |i: usize| {
            let mut v = vec![0.0; 4];
            v[i] = 1.0;
            EmbeddingVector(v)
        };
        assert_eq!(similarity(&e(0), &e(0)).unwrap(), 1.0);
        assert_eq!(similarity(&e(0), &e(1)).unwrap(), 0.0);
        assert!(matches!(
            similarity(&e(0), &EmbeddingVector(vec![1.0])),
            Err(Error::DimMismatch { .. })
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<f64> = (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut naive = 0.0;
        for i in 0..128 {
            naive += a[i] * b[i];
        }
        let s = similarity(&EmbeddingVector(a.clone()), &EmbeddingVector(b)).unwrap();
        assert!((s - naive).abs() < 1e-9);
    }

    /// d(w . output)/d(theta) against central differences, for a random
    /// direction `w` (so every output coordinate participates).
    fn check_tower_gradients(params: &EncoderParams, input: &PreparedInput, dropout: Option<(f64, u64)>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..params.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = |p: &EncoderParams| dot(&p.forward(input, dropout).0 .0, &w);
        let (_, trace) = params.forward(input, dropout);
        let mut grads = params.zeros_like();
        params.backward(&trace, &w, &mut grads);

        let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
        let analytic: Vec<Vec<f64>> = grads.named_tensors().iter().map(|(_, t)| t.data.clone()).collect();
        let mut probe = params.clone();
        let h = 1e-6;
        for (ti, name) in names.iter().enumerate() {
            let len = analytic[ti].len();
            // probe the rows the input touched plus random coordinates
            let mut coords: Vec<usize> = (0..6).map(|_| rng.gen_range(0..len)).collect();
            if name.ends_with("embeddings") {
                for &r in &input.rows {
                    coords.push(r * params.dim + rng.gen_range(0..params.dim));
                }
            }
            for c in coords {
                let orig = probe.tensors_mut()[ti].data[c];
                probe.tensors_mut()[ti].data[c] = orig + h;
                let up = f(&probe);
                probe.tensors_mut()[ti].data[c] = orig - h;
                let down = f(&probe);
                probe.tensors_mut()[ti].data[c] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic[ti][c];
                let scale = a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (a - numeric).abs() / scale <= 1e-4,
                    "{name}[{c}]: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    fn scaled_params(variant: Variant, seed: u64) -> EncoderParams {
        // Larger weights than init so tanh is in its nonlinear range.
        let mut p = EncoderParams::init(variant, 6, 40, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for t in p.tensors_mut() {
            for v in t.data.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        p
    }

    #[test]
    fn query_and_passage_gradients_match_finite_differences() {
        let texts = [
            "alpha beta gamma",
            "beta beta delta epsilon",
            "zeta",
            "",
            "eta theta iota kappa lambda",
        ];
        let mut n = 0;
        for variant in [Variant::Shared, Variant::TaskMarkers, Variant::TaskSpecific] {
            for (i, text) in texts.iter().enumerate() {
                let p = scaled_params(variant, i as u64);
                let toks = tokenize(text);
                let class = TaskClass::ALL[i % 5];
                check_tower_gradients(&p, &p.prepare_query(&toks, class), None, i as u64);
                check_tower_gradients(&p, &p.prepare_passage(&toks), None, 50 + i as u64);
                check_tower_gradients(&p, &p.prepare_passage(&toks), Some((0.3, 7 + i as u64)), 90 + i as u64);
                n += 3;
            }
        }
        assert!(n >= 20);
    }

    #[test]
    fn token_row_is_stable() {
        assert_eq!(token_row("coldplay", 1000), token_row("coldplay", 1000));
        assert!(token_row("x", 7) < 7);
    }

    #[test]
    fn checkpoint_round_trip() {
        for variant in [Variant::Shared, Variant::TaskMarkers, Variant::TaskSpecific] {
            let p = EncoderParams::init(variant, 4, 9, 11).unwrap();
            let bytes = p.to_bytes();
            let back = EncoderParams::from_bytes(&bytes).unwrap();
            assert_eq!(back, p);
            assert_eq!(back.to_bytes(), bytes);
            assert!(EncoderParams::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        }
        assert!(matches!(
            EncoderParams::from_bytes(b"NOPE"),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    proptest::proptest! {
        #[test]
        fn bilinear_scaling(alpha in -4i32..4, seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // small integers keep the products exact
            let q: Vec<f64> = (0..4).map(|_| rng.gen_range(-8..8) as f64).collect();
            let p: Vec<f64> = (0..4).map(|_| rng.gen_range(-8..8) as f64).collect();
            let a = alpha as f64;
            let scaled = EmbeddingVector(q.iter().map(|v| v * a).collect());
            let lhs = similarity(&scaled, &EmbeddingVector(p.clone())).unwrap();
            let rhs = a * similarity(&EmbeddingVector(q), &EmbeddingVector(p)).unwrap();
            proptest::prop_assert_eq!(lhs, rhs);
        }
    }
}
