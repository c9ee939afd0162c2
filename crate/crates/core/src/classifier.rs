//! Downstream classifier over the selected frames: a pooled affine frame
//! embedder, additive attention pooling over the `k` slots, and a two-layer
//! MLP head trained with cross-entropy.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::rng::RandomStream;
use crate::sampler::{init_uniform, Mlp};
use crate::tensor::Tensor;

/// Side of the adaptive average-pool grid applied to every frame.
pub const POOL_GRID: usize = 4;

pub const PREFIX: &str = "clf";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub embed: usize,
    pub hidden: usize,
    pub num_classes: usize,
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < POOL_GRID || self.width < POOL_GRID {
            return Err(Error::invalid(format!(
                "frames must be at least {POOL_GRID}x{POOL_GRID}, got {}x{}",
                self.height, self.width
            )));
        }
        if self.channels == 0 || self.embed == 0 || self.hidden == 0 {
            return Err(Error::invalid("channels, embedding and hidden widths must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        Ok(())
    }

    fn pooled_len(&self) -> usize {
        self.channels * POOL_GRID * POOL_GRID
    }
}

/// Adaptive-average-pool bins: `[floor(i·n/g), ceil((i+1)·n/g))`.
fn pool_bins(n: usize) -> Vec<(usize, usize)> {
    (0..POOL_GRID)
        .map(|i| ((i * n) / POOL_GRID, ((i + 1) * n).div_ceil(POOL_GRID)))
        .collect()
}

/// Linear map `[C·H·W] → [C·4·4]` implementing the adaptive average pool.
pub fn pool_matrix(c: usize, h: usize, w: usize) -> Result<Tensor> {
    if h < POOL_GRID || w < POOL_GRID {
        return Err(Error::invalid(format!(
            "frames must be at least {POOL_GRID}x{POOL_GRID}, got {h}x{w}"
        )));
    }
    let cols = c * POOL_GRID * POOL_GRID;
    let mut m = Tensor::zeros(&[c * h * w, cols]);
    let (rows_b, cols_b) = (pool_bins(h), pool_bins(w));
    for ch in 0..c {
        for (gy, &(y0, y1)) in rows_b.iter().enumerate() {
            for (gx, &(x0, x1)) in cols_b.iter().enumerate() {
                let weight = 1.0 / ((y1 - y0) * (x1 - x0)) as f64;
                let col = (ch * POOL_GRID + gy) * POOL_GRID + gx;
                for y in y0..y1 {
                    for x in x0..x1 {
                        m.set(&[(ch * h + y) * w + x, col], weight);
                    }
                }
            }
        }
    }
    Ok(m)
}

#[derive(Clone, Debug)]
pub struct ClassifierVars {
    pub pool: Var,
    pub embed_w: Var,
    pub embed_b: Var,
    pub agg_w: Var,
    pub agg_v: Var,
    pub head: Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub cfg: ClassifierConfig,
    pool: Tensor,
}

impl Classifier {
    pub fn new(cfg: ClassifierConfig) -> Result<Self> {
        cfg.validate()?;
        let pool = pool_matrix(cfg.channels, cfg.height, cfg.width)?;
        Ok(Self { cfg, pool })
    }

    pub fn init_params(&self, store: &mut ParameterStore, stream: &mut RandomStream) -> Result<()> {
        let c = &self.cfg;
        let p = c.pooled_len();
        store.insert(&format!("{PREFIX}.embed.w"), init_uniform(stream, &[p, c.embed], p))?;
        store.insert(&format!("{PREFIX}.embed.b"), Tensor::zeros(&[c.embed]))?;
        store.insert(&format!("{PREFIX}.agg.w"), init_uniform(stream, &[c.embed, c.embed], c.embed))?;
        store.insert(&format!("{PREFIX}.agg.v"), init_uniform(stream, &[c.embed, 1], c.embed))?;
        Mlp::init(store, &format!("{PREFIX}.head"), (c.embed, c.hidden, c.num_classes), stream)
    }

    pub fn bind(&self, g: &mut Graph, store: &ParameterStore) -> Result<ClassifierVars> {
        Ok(ClassifierVars {
            pool: g.constant(self.pool.clone())?,
            embed_w: g.param(store, &format!("{PREFIX}.embed.w"))?,
            embed_b: g.param(store, &format!("{PREFIX}.embed.b"))?,
            agg_w: g.param(store, &format!("{PREFIX}.agg.w"))?,
            agg_v: g.param(store, &format!("{PREFIX}.agg.v"))?,
            head: Mlp::bind(g, store, &format!("{PREFIX}.head"))?,
        })
    }

    /// Selected frames `[B, k, C, H, W]` → class logits `[B, num_classes]`.
    pub fn forward(&self, g: &mut Graph, vars: &ClassifierVars, frames: Var) -> Result<Var> {
        let e = frame_embed(g, frames, vars)?;
        let agg = attention_aggregate(g, e, vars.agg_w, vars.agg_v)?;
        classify(g, agg, &vars.head)
    }
}

/// `tanh(pool(frame) · W_e + b_e)` per selected frame; `[B, k, e]`.
pub fn frame_embed(g: &mut Graph, frames: Var, vars: &ClassifierVars) -> Result<Var> {
    let s = g.shape(frames).to_vec();
    if s.len() != 5 {
        return Err(Error::invalid(format!("frames must be [B, k, C, H, W], got {s:?}")));
    }
    if s[3] < POOL_GRID || s[4] < POOL_GRID {
        return Err(Error::invalid(format!(
            "frames must be at least {POOL_GRID}x{POOL_GRID}, got {}x{}",
            s[3], s[4]
        )));
    }
    let (b, k) = (s[0], s[1]);
    let flat = g.reshape(frames, &[b, k, s[2] * s[3] * s[4]])?;
    let pooled = g.matmul(flat, vars.pool)?;
    let z = g.matmul(pooled, vars.embed_w)?;
    let z = g.add(z, vars.embed_b)?;
    g.tanh(z)
}

/// Softmax over slots of `v · tanh(W_a E_j)`, then the weighted sum; `[B, e]`.
pub fn attention_aggregate(g: &mut Graph, embeddings: Var, w_a: Var, v: Var) -> Result<Var> {
    let weights = attention_weights(g, embeddings, w_a, v)?;
    let (b, k) = (g.shape(weights)[0], g.shape(weights)[1]);
    let w3 = g.reshape(weights, &[b, 1, k])?;
    let pooled = g.matmul(w3, embeddings)?;
    let e = g.shape(pooled)[2];
    g.reshape(pooled, &[b, e])
}

/// Slot weights `[B, k]` of [`attention_aggregate`].
pub fn attention_weights(g: &mut Graph, embeddings: Var, w_a: Var, v: Var) -> Result<Var> {
    let s = g.shape(embeddings).to_vec();
    if s.len() != 3 || s[1] == 0 {
        return Err(Error::invalid(format!("embeddings must be [B, k>=1, e], got {s:?}")));
    }
    let h = g.matmul(embeddings, w_a)?;
    let h = g.tanh(h)?;
    let scores = g.matmul(h, v)?;
    let scores = g.reshape(scores, &[s[0], s[1]])?;
    g.softmax(scores, 1)
}

pub fn classify(g: &mut Graph, agg: Var, head: &Mlp) -> Result<Var> {
    head.forward(g, agg)
}

/// Row-wise `log_softmax`, stabilised by a detached row maximum.
pub fn log_softmax(g: &mut Graph, logits: Var) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 {
        return Err(Error::invalid(format!("logits must be [B, K], got {s:?}")));
    }
    let (b, k) = (s[0], s[1]);
    let vals = g.value(logits);
    let maxes = Tensor::from_fn(&[b, 1], |r| {
        vals.data()[r * k..(r + 1) * k]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    });
    let m = g.constant(maxes)?;
    let shifted = g.sub(logits, m)?;
    let ex = g.exp(shifted)?;
    let total = g.sum(ex, 1)?;
    let lse = g.log(total)?;
    let lse = g.reshape(lse, &[b, 1])?;
    g.sub(shifted, lse)
}

/// Mean cross-entropy.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
        return Err(Error::invalid(format!(
            "cross entropy: logits {s:?} for {} labels",
            labels.len()
        )));
    }
    let (b, k) = (s[0], s[1]);
    let mut onehot = Tensor::zeros(&[b, k]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::invalid(format!("label {y} out of range for {k} classes")));
        }
        onehot.set(&[i, y], 1.0);
    }
    let logp = log_softmax(g, logits)?;
    let mask = g.constant(onehot)?;
    let picked = g.mul(logp, mask)?;
    let total = g.sum_all(picked)?;
    g.scale(total, -1.0 / b as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_params;

    fn small() -> (Classifier, ParameterStore) {
        let c = Classifier::new(ClassifierConfig {
            channels: 1,
            height: 6,
            width: 5,
            embed: 4,
            hidden: 3,
            num_classes: 3,
        })
        .unwrap();
        let mut store = ParameterStore::new();
        c.init_params(&mut store, &mut RandomStream::new(8)).unwrap();
        (c, store)
    }

    #[test]
    fn pool_matrix_averages_bins() {
        let m = pool_matrix(1, 4, 4).unwrap();
        // 4x4 → 4x4 is the identity
        for i in 0..16 {
            for j in 0..16 {
                assert_eq!(m.get(&[i, j]), if i == j { 1.0 } else { 0.0 });
            }
        }
        let m = pool_matrix(2, 8, 6).unwrap();
        for col in 0..32 {
            let s: f64 = (0..96).map(|r| m.get(&[r, col])).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(pool_matrix(1, 3, 8).is_err());
    }

    #[test]
    fn zero_frames_embed_to_zero() {
        let (c, mut store) = small();
        store.value_mut("clf.embed.b").unwrap().data_mut().fill(0.0);
        let mut g = Graph::new();
        let vars = c.bind(&mut g, &store).unwrap();
        let x = g.constant(Tensor::zeros(&[2, 3, 1, 6, 5])).unwrap();
        let e = frame_embed(&mut g, x, &vars).unwrap();
        assert_eq!(g.shape(e), &[2, 3, 4]);
        assert!(g.value(e).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_frames_embed_identically() {
        let (c, store) = small();
        let mut s = RandomStream::new(2);
        let frame: Vec<f64> = (0..30).map(|_| s.uniform()).collect();
        let data: Vec<f64> = (0..3).flat_map(|_| frame.clone()).collect();
        let mut g = Graph::new();
        let vars = c.bind(&mut g, &store).unwrap();
        let x = g.constant(Tensor::new(vec![1, 3, 1, 6, 5], data).unwrap()).unwrap();
        let e = frame_embed(&mut g, x, &vars).unwrap();
        let d = g.value(e).data();
        assert_eq!(&d[0..4], &d[4..8]);
        assert_eq!(&d[0..4], &d[8..12]);
    }

    #[test]
    fn small_frames_rejected() {
        let (c, store) = small();
        let mut g = Graph::new();
        let vars = c.bind(&mut g, &store).unwrap();
        let x = g.constant(Tensor::zeros(&[1, 1, 1, 3, 5])).unwrap();
        assert!(frame_embed(&mut g, x, &vars).is_err());
        assert!(Classifier::new(ClassifierConfig { height: 3, ..c.cfg.clone() }).is_err());
    }

    #[test]
    fn embedding_gradient_matches_finite_differences() {
        let (c, store) = small();
        let mut s = RandomStream::new(4);
        let frames = Tensor::from_fn(&[2, 3, 1, 6, 5], |_| s.uniform() - 0.5);
        let proj = Tensor::from_fn(&[2, 3, 4], |_| s.uniform() - 0.5);
        let errs = grad_check_params(
            |g, st| {
                let vars = c.bind(g, st)?;
                let x = g.constant(frames.clone())?;
                let e = frame_embed(g, x, &vars)?;
                let p = g.constant(proj.clone())?;
                let y = g.mul(e, p)?;
                g.sum_all(y)
            },
            &store,
            1e-5,
        )
        .unwrap();
        for (name, err) in errs {
            if name.starts_with("clf.embed") {
                assert!(err < 1e-4, "{name}: {err}");
            }
        }
    }

    fn agg_of(e: Tensor, w: Tensor, v: Tensor) -> Tensor {
        let mut g = Graph::new();
        let e = g.constant(e).unwrap();
        let w = g.constant(w).unwrap();
        let v = g.constant(v).unwrap();
        let out = attention_aggregate(&mut g, e, w, v).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn aggregate_of_single_slot_is_identity() {
        let e = Tensor::new(vec![1, 1, 3], vec![0.3, -0.2, 0.9]).unwrap();
        let out = agg_of(e.clone(), Tensor::full(&[3, 3], 0.4), Tensor::full(&[3, 1], 1.0));
        assert_eq!(out.data(), e.data());
    }

    #[test]
    fn aggregate_of_identical_slots_is_that_slot() {
        let row = [0.25, -0.5, 0.125];
        let e = Tensor::new(vec![1, 4, 3], row.repeat(4)).unwrap();
        let mut s = RandomStream::new(6);
        let out = agg_of(e, Tensor::from_fn(&[3, 3], |_| s.uniform()), Tensor::from_fn(&[3, 1], |_| s.uniform()));
        for (a, b) in out.data().iter().zip(row) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn dominant_score_saturates() {
        // W_a = I, v = (20/tanh(1), 0): slot 0 has first coordinate 1, the rest 0
        let e = Tensor::new(
            vec![1, 3, 2],
            vec![1.0, 0.3, 0.0, -0.7, 0.0, 0.9],
        )
        .unwrap();
        let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = Tensor::new(vec![2, 1], vec![20.0 / 1f64.tanh(), 0.0]).unwrap();
        let out = agg_of(e, w, v);
        // weights: e^20 : 1 : 1
        let w0 = 1.0 / (1.0 + 2.0 * (-20f64).exp());
        assert!((w0 - 1.0).abs() < 1e-8);
        assert!((out.data()[0] - 1.0).abs() < 1e-6);
        assert!((out.data()[1] - 0.3).abs() < 1e-6);
    }

    #[test]
    fn aggregate_is_permutation_invariant() {
        let mut s = RandomStream::new(12);
        let e = Tensor::from_fn(&[2, 4, 3], |_| s.uniform() - 0.5);
        let w = Tensor::from_fn(&[3, 3], |_| s.uniform() - 0.5);
        let v = Tensor::from_fn(&[3, 1], |_| s.uniform() - 0.5);
        let perm = [3, 1, 0, 2];
        let pe = Tensor::from_fn(&[2, 4, 3], |i| {
            let (b, j, c) = (i / 12, (i / 3) % 4, i % 3);
            e.get(&[b, perm[j], c])
        });
        let (a, b) = (agg_of(e, w.clone(), v.clone()), agg_of(pe, w, v));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn ce(logits: Tensor, labels: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let l = g.constant(logits)?;
        let loss = cross_entropy(&mut g, l, labels)?;
        Ok(g.value(loss).data()[0])
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = ce(Tensor::full(&[2, 5], 1.7), &[0, 3]).unwrap();
        assert!((uniform - 5f64.ln()).abs() < 1e-14);
        let sat = ce(Tensor::new(vec![1, 3], vec![30.0, 0.0, 0.0]).unwrap(), &[0]).unwrap();
        assert!(sat < 1e-9);
        assert!(ce(Tensor::zeros(&[1, 3]), &[3]).is_err());
        // huge logits stay finite
        let big = ce(Tensor::new(vec![1, 2], vec![1e6, -1e6]).unwrap(), &[1]).unwrap();
        assert!((big - 2e6).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_matches_log_softmax_oracle() {
        let mut s = RandomStream::new(21);
        let logits = Tensor::from_fn(&[4, 5], |_| 8.0 * s.uniform() - 4.0);
        let labels = [0, 4, 2, 2];
        let mut oracle = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = &logits.data()[r * 5..(r + 1) * 5];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            oracle -= (row[y].exp() / z).ln();
        }
        oracle /= 4.0;
        assert!((ce(logits, &labels).unwrap() - oracle).abs() < 1e-10);
    }
}
