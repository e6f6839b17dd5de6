use crate::encoder::EncoderParams;
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Linear warmup to `base` at `warmup`, then linear decay to 0 at `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub base: f64,
    pub warmup: usize,
    pub total: usize,
}

impl Schedule {
    pub fn lr(&self, t: usize) -> f64 {
        let t = t as f64;
        let up = if self.warmup == 0 {
            f64::INFINITY
        } else {
            t / self.warmup as f64
        };
        let down = if self.total <= self.warmup {
            f64::INFINITY
        } else {
            (self.total as f64 - t) / (self.total - self.warmup) as f64
        };
        let factor = up.min(down);
        if factor.is_infinite() {
            self.base
        } else {
            (self.base * factor).max(0.0)
        }
    }
}

/// Adam moments shaped like the parameters; `t` counts completed steps.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: EncoderParams,
    v: EncoderParams,
    /// Per tensor row: has it ever seen a nonzero gradient. A row that has
    /// not has m = v = 0 and would not move, so the update skips it.
    touched: Vec<Vec<bool>>,
    pub t: usize,
}

impl AdamState {
    pub fn new(params: &EncoderParams) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            touched: params
                .named_tensors()
                .iter()
                .map(|(_, t)| vec![false; t.rows])
                .collect(),
            t: 0,
        }
    }

    fn shapes(p: &EncoderParams) -> Vec<(usize, usize)> {
        p.named_tensors().iter().map(|(_, t)| (t.rows, t.cols)).collect()
    }
}

/// One Adam step at `t = state.t + 1` with learning rate `schedule.lr(t)`.
pub fn optimizer_step(
    params: &mut EncoderParams,
    grads: &EncoderParams,
    state: &mut AdamState,
    schedule: &Schedule,
) -> Result<()> {
    let shape = AdamState::shapes(params);
    if shape != AdamState::shapes(grads) || shape != AdamState::shapes(&state.m) {
        return Err(Error::invalid("optimizer state does not match parameter shapes"));
    }
    state.t += 1;
    let t = state.t as i32;
    let lr = schedule.lr(state.t);
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    let g_all = grads.named_tensors();
    let p_all = params.tensors_mut();
    let m_all = state.m.tensors_mut();
    let v_all = state.v.tensors_mut();
    let tensors = p_all
        .into_iter()
        .zip(g_all)
        .zip(m_all)
        .zip(v_all)
        .zip(&mut state.touched);
    for ((((p, (_, g)), m), v), touched) in tensors {
        let cols = p.cols;
        for (r, seen) in touched.iter_mut().enumerate() {
            let span = r * cols..(r + 1) * cols;
            if !*seen {
                if g.data[span.clone()].iter().all(|&x| x == 0.0) {
                    continue;
                }
                *seen = true;
            }
            for i in span {
                let gi = g.data[i];
                let mi = BETA1 * m.data[i] + (1.0 - BETA1) * gi;
                let vi = BETA2 * v.data[i] + (1.0 - BETA2) * gi * gi;
                m.data[i] = mi;
                v.data[i] = vi;
                p.data[i] -= lr * (mi / c1) / ((vi / c2).sqrt() + EPSILON);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Variant;

    #[test]
    fn schedule_shape() {
        let s = Schedule {
            base: 1.0,
            warmup: 10,
            total: 110,
        };
        assert_eq!(s.lr(0), 0.0);
        assert_eq!(s.lr(5), 0.5);
        assert_eq!(s.lr(10), 1.0);
        assert_eq!(s.lr(60), 0.5);
        assert_eq!(s.lr(110), 0.0);
        assert_eq!(s.lr(200), 0.0);
        assert_eq!(
            Schedule {
                base: 2.0,
                warmup: 0,
                total: 4
            }
            .lr(0),
            2.0
        );
        assert_eq!(
            Schedule {
                base: 2.0,
                warmup: 4,
                total: 4
            }
            .lr(4),
            2.0
        );
    }

    fn one_scalar() -> EncoderParams {
        let mut p = EncoderParams::init(Variant::Shared, 2, 1, 0).unwrap();
        for t in p.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = EncoderParams::init(Variant::TaskMarkers, 3, 5, 1).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let sched = Schedule {
            base: 0.1,
            warmup: 0,
            total: 10,
        };
        let mut g = before.zeros_like();
        g.passage_tower.b2.data[0] = 1.0;
        optimizer_step(&mut p, &g, &mut st, &sched).unwrap();
        let m1 = st.m.passage_tower.b2.data[0];
        optimizer_step(&mut p, &before.zeros_like(), &mut st, &sched).unwrap();
        assert_eq!(p.query_towers, before.query_towers);
        assert_eq!(st.m.passage_tower.b2.data[0], 0.9 * m1);

        let mut q = before.clone();
        let mut st = AdamState::new(&q);
        optimizer_step(&mut q, &before.zeros_like(), &mut st, &sched).unwrap();
        assert_eq!(q, before);
    }

    #[test]
    fn scalar_quadratic_matches_hand_stepped_adam() {
        // f(x) = 0.5 * a * (x - c)^2 on one coordinate.
        let (a, c) = (3.0, 1.5);
        let sched = Schedule {
            base: 0.1,
            warmup: 2,
            total: 6,
        };
        let mut p = one_scalar();
        p.passage_tower.b2.data[0] = -2.0;
        let mut st = AdamState::new(&p);

        let (mut x, mut m, mut v) = (-2.0f64, 0.0f64, 0.0f64);
        let lrs = [0.05, 0.1, 0.075, 0.05, 0.025];
        for (k, lr) in lrs.iter().enumerate() {
            let g = a * (x - c);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mhat = m / (1.0 - 0.9f64.powi(k as i32 + 1));
            let vhat = v / (1.0 - 0.999f64.powi(k as i32 + 1));
            x -= lr * mhat / (vhat.sqrt() + 1e-8);

            let mut grads = p.zeros_like();
            grads.passage_tower.b2.data[0] = a * (p.passage_tower.b2.data[0] - c);
            optimizer_step(&mut p, &grads, &mut st, &sched).unwrap();
            assert!((p.passage_tower.b2.data[0] - x).abs() < 1e-10);
            assert!((sched.lr(k + 1) - lr).abs() < 1e-15);
        }
    }

    /// The textbook update on every coordinate.
    fn dense_step(
        p: &mut EncoderParams,
        g: &EncoderParams,
        m: &mut EncoderParams,
        v: &mut EncoderParams,
        t: i32,
        lr: f64,
    ) {
        let gs = g.named_tensors();
        for (((p, (_, g)), m), v) in p
            .tensors_mut()
            .into_iter()
            .zip(gs)
            .zip(m.tensors_mut())
            .zip(v.tensors_mut())
        {
            for i in 0..p.data.len() {
                m.data[i] = BETA1 * m.data[i] + (1.0 - BETA1) * g.data[i];
                v.data[i] = BETA2 * v.data[i] + (1.0 - BETA2) * g.data[i] * g.data[i];
                let mhat = m.data[i] / (1.0 - BETA1.powi(t));
                let vhat = v.data[i] / (1.0 - BETA2.powi(t));
                p.data[i] -= lr * mhat / (vhat.sqrt() + EPSILON);
            }
        }
    }

    #[test]
    fn row_skipping_matches_dense_update_bitwise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut fast = EncoderParams::init(Variant::TaskMarkers, 3, 11, 2).unwrap();
        let mut slow = fast.clone();
        let (mut m, mut v) = (fast.zeros_like(), fast.zeros_like());
        let mut st = AdamState::new(&fast);
        let sched = Schedule {
            base: 0.01,
            warmup: 2,
            total: 9,
        };
        for t in 1..=8 {
            let mut g = fast.zeros_like();
            for tensor in g.tensors_mut() {
                let cols = tensor.cols;
                for r in 0..tensor.rows {
                    if rng.gen_bool(0.3) {
                        for c in 0..cols {
                            tensor.data[r * cols + c] = rng.gen_range(-1.0..1.0);
                        }
                    }
                }
            }
            optimizer_step(&mut fast, &g, &mut st, &sched).unwrap();
            dense_step(&mut slow, &g, &mut m, &mut v, t, sched.lr(t as usize));
            assert_eq!(fast.to_bytes(), slow.to_bytes());
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = EncoderParams::init(Variant::Shared, 3, 5, 1).unwrap();
        let other = EncoderParams::init(Variant::Shared, 4, 5, 1).unwrap();
        let mut st = AdamState::new(&p);
        let sched = Schedule {
            base: 0.1,
            warmup: 0,
            total: 1,
        };
        assert!(optimizer_step(&mut p, &other, &mut st, &sched).is_err());
    }
}
