//! Deep attention-guided subsampling.
//!
//! Per-frame descriptors `F [B, T, d]` feed
//!
//! * a shared base score `a_base = F·w + b0` (`[B, T]`),
//! * `H` head MLPs whose softplus outputs scale the base score per selected
//!   slot, averaged into logits `A [B, k, T]`,
//! * a temperature MLP, `τ = τ0·(0.5 + σ(MLP(F̄)))`,
//!
//! and each row of `A` is sampled with Gumbel-softmax. The forward pass uses
//! the one-hot argmax; gradients flow through the soft relaxation.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::features::{build_features, FrameSequence, NUM_FEATURES};
use crate::params::ParameterStore;
use crate::rng::RandomStream;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub heads: usize,
    pub samples: usize,
    pub hidden: usize,
    pub tau0: f64,
    pub features: usize,
}

impl SamplerConfig {
    pub fn new(samples: usize) -> Self {
        Self {
            heads: 4,
            samples,
            hidden: 16,
            tau0: 1.0,
            features: NUM_FEATURES,
        }
    }

    pub fn validate(&self, frames: usize) -> Result<()> {
        if self.heads == 0 {
            return Err(Error::invalid("at least one attention head is required"));
        }
        if self.samples == 0 || self.samples > frames {
            return Err(Error::invalid(format!(
                "sample count {} outside 1..={frames}",
                self.samples
            )));
        }
        if !(self.tau0 > 0.0 && self.tau0.is_finite()) {
            return Err(Error::invalid(format!("base temperature must be positive, got {}", self.tau0)));
        }
        if self.hidden == 0 || self.features == 0 {
            return Err(Error::invalid("hidden width and feature count must be positive"));
        }
        Ok(())
    }
}

/// How the sampled frames are formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relaxation {
    /// Hard one-hot forward, soft gradient backward.
    StraightThrough,
    /// Soft probabilities in both directions (used for finite-difference checks).
    Soft,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Train,
    Eval { deterministic: bool },
}

impl SampleMode {
    pub fn draws_noise(self) -> bool {
        !matches!(self, SampleMode::Eval { deterministic: true })
    }
}

/// Uniform(-bound, bound) initialisation with `bound = 1/sqrt(fan_in)`.
pub(crate) fn init_uniform(stream: &mut RandomStream, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| bound * (2.0 * stream.uniform() - 1.0))
}

/// Two affine layers with a tanh in between.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl Mlp {
    pub fn init(
        store: &mut ParameterStore,
        prefix: &str,
        dims: (usize, usize, usize),
        stream: &mut RandomStream,
    ) -> Result<()> {
        let (d_in, hidden, d_out) = dims;
        store.insert(&format!("{prefix}.w1"), init_uniform(stream, &[d_in, hidden], d_in))?;
        store.insert(&format!("{prefix}.b1"), Tensor::zeros(&[hidden]))?;
        store.insert(&format!("{prefix}.w2"), init_uniform(stream, &[hidden, d_out], hidden))?;
        store.insert(&format!("{prefix}.b2"), Tensor::zeros(&[d_out]))?;
        Ok(())
    }

    pub fn bind(g: &mut Graph, store: &ParameterStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            w1: g.param(store, &format!("{prefix}.w1"))?,
            b1: g.param(store, &format!("{prefix}.b1"))?,
            w2: g.param(store, &format!("{prefix}.w2"))?,
            b2: g.param(store, &format!("{prefix}.b2"))?,
        })
    }

    /// `x`: `[B, d_in]` → `[B, d_out]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = g.matmul(x, self.w1)?;
        let h = g.add(h, self.b1)?;
        let h = g.tanh(h)?;
        let o = g.matmul(h, self.w2)?;
        g.add(o, self.b2)
    }
}

/// Graph handles for every DAS parameter.
#[derive(Clone, Debug)]
pub struct DasVars {
    pub base_w: Var,
    pub base_b: Var,
    pub heads: Vec<Mlp>,
    pub temp: Mlp,
}

pub const PREFIX: &str = "das";

#[derive(Clone, Debug, PartialEq)]
pub struct DasSampler {
    pub cfg: SamplerConfig,
}

impl DasSampler {
    pub fn new(cfg: SamplerConfig) -> Self {
        Self { cfg }
    }

    pub fn init_params(&self, store: &mut ParameterStore, stream: &mut RandomStream) -> Result<()> {
        let c = &self.cfg;
        store.insert(
            &format!("{PREFIX}.base.w"),
            init_uniform(stream, &[c.features, 1], c.features),
        )?;
        store.insert(&format!("{PREFIX}.base.b"), Tensor::zeros(&[1]))?;
        for h in 0..c.heads {
            Mlp::init(store, &format!("{PREFIX}.head{h}"), (c.features, c.hidden, c.samples), stream)?;
        }
        Mlp::init(store, &format!("{PREFIX}.temp"), (c.features, c.hidden, 1), stream)
    }

    pub fn bind(&self, g: &mut Graph, store: &ParameterStore) -> Result<DasVars> {
        Ok(DasVars {
            base_w: g.param(store, &format!("{PREFIX}.base.w"))?,
            base_b: g.param(store, &format!("{PREFIX}.base.b"))?,
            heads: (0..self.cfg.heads)
                .map(|h| Mlp::bind(g, store, &format!("{PREFIX}.head{h}")))
                .collect::<Result<_>>()?,
            temp: Mlp::bind(g, store, &format!("{PREFIX}.temp"))?,
        })
    }

    /// Logits, temperature and the sampled matrix for standardized features `[B, T, d]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &DasVars,
        features: Var,
        noise: &Tensor,
        relax: Relaxation,
    ) -> Result<Sampled> {
        let a_base = base_attention(g, features, vars.base_w, vars.base_b)?;
        let scales = vars
            .heads
            .iter()
            .map(|mlp| head_scales(g, features, mlp))
            .collect::<Result<Vec<_>>>()?;
        let logits = combine_heads(g, a_base, &scales)?;
        let tau = adaptive_temperature(g, features, &vars.temp, self.cfg.tau0)?;
        gumbel_softmax_sample(g, logits, tau, noise, relax)
    }

    /// Builds batch-standardized features, samples, and applies the
    /// selection to `seq`. `streams` holds one stream per batch item.
    pub fn sample(
        &self,
        seq: &FrameSequence,
        store: &ParameterStore,
        streams: &mut [RandomStream],
        mode: SampleMode,
    ) -> Result<(Tensor, SamplingMatrix)> {
        self.cfg.validate(seq.frames())?;
        let features = build_features(seq)?;
        let noise = draw_noise(streams, self.cfg.samples, seq.frames(), mode)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, store)?;
        let f = g.constant(features.data)?;
        let sampled = self.forward(&mut g, &vars, f, &noise, Relaxation::StraightThrough)?;
        let frames = g.constant(seq.data().clone())?;
        let out = apply_sampling(&mut g, sampled.selection, frames)?;
        Ok((g.value(out).clone(), sampled.matrix(&g)))
    }
}

/// `a_base[b, t] = w · F[b, t] + b0`.
pub fn base_attention(g: &mut Graph, features: Var, w: Var, b0: Var) -> Result<Var> {
    let shape = g.shape(features).to_vec();
    if shape.len() != 3 {
        return Err(Error::invalid(format!("features must be [B, T, d], got {shape:?}")));
    }
    let proj = g.matmul(features, w)?;
    let proj = g.reshape(proj, &shape[..2])?;
    g.add(proj, b0)
}

/// `s_h = softplus(MLP_h(mean_t F))`, `[B, k]`.
pub fn head_scales(g: &mut Graph, features: Var, mlp: &Mlp) -> Result<Var> {
    let pooled = g.mean(features, 1)?;
    let z = mlp.forward(g, pooled)?;
    g.softplus(z)
}

/// `A = (1/H) Σ_h a_base ⊙ s_h`, `[B, k, T]`.
pub fn combine_heads(g: &mut Graph, a_base: Var, scales: &[Var]) -> Result<Var> {
    if scales.is_empty() {
        return Err(Error::invalid("combine_heads needs at least one head"));
    }
    let (b, t) = match g.shape(a_base) {
        [b, t] => (*b, *t),
        s => return Err(Error::invalid(format!("base scores must be [B, T], got {s:?}"))),
    };
    let base = g.reshape(a_base, &[b, 1, t])?;
    let mut total: Option<Var> = None;
    for &s in scales {
        let k = match g.shape(s) {
            [sb, k] if *sb == b => *k,
            other => {
                return Err(Error::Shape {
                    op: "combine_heads",
                    lhs: vec![b, t],
                    rhs: other.to_vec(),
                })
            }
        };
        let s3 = g.reshape(s, &[b, k, 1])?;
        let head = g.mul(base, s3)?;
        total = Some(match total {
            None => head,
            Some(acc) => g.add(acc, head)?,
        });
    }
    let total = total.expect("at least one head");
    g.scale(total, 1.0 / scales.len() as f64)
}

/// `τ = τ0·(0.5 + σ(MLP_temp(mean_t F)))`, `[B]`.
pub fn adaptive_temperature(g: &mut Graph, features: Var, mlp: &Mlp, tau0: f64) -> Result<Var> {
    if !(tau0 > 0.0) {
        return Err(Error::invalid(format!("base temperature must be positive, got {tau0}")));
    }
    let pooled = g.mean(features, 1)?;
    let z = mlp.forward(g, pooled)?;
    let b = g.shape(z)[0];
    let z = g.reshape(z, &[b])?;
    temperature_from_logit(g, z, tau0)
}

/// `τ0·(0.5 + σ(z))`.
pub fn temperature_from_logit(g: &mut Graph, z: Var, tau0: f64) -> Result<Var> {
    let s = g.sigmoid(z)?;
    let half = g.constant(Tensor::scalar(0.5))?;
    let shifted = g.add(s, half)?;
    g.scale(shifted, tau0)
}

/// Gumbel(0, 1) noise `[B, k, T]`, row-major per item from that item's stream;
/// zeros when `mode` is deterministic evaluation.
pub fn draw_noise(streams: &mut [RandomStream], k: usize, t: usize, mode: SampleMode) -> Result<Tensor> {
    let b = streams.len();
    if !mode.draws_noise() {
        return Ok(Tensor::zeros(&[b, k, t]));
    }
    let mut data = Vec::with_capacity(b * k * t);
    for s in streams.iter_mut() {
        data.extend((0..k * t).map(|_| s.gumbel()));
    }
    Tensor::new(vec![b, k, t], data)
}

/// One-hot at the per-row argmax along the last axis; ties go to the lowest index.
pub fn hard_from_soft(soft: &Tensor) -> Tensor {
    let t = *soft.shape().last().expect("rank >= 1");
    let mut out = Tensor::zeros(soft.shape());
    for (row, dst) in soft.data().chunks(t).zip(out.data_mut().chunks_mut(t)) {
        dst[argmax(row)] = 1.0;
    }
    out
}

/// Index of the first maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Graph handles produced by one Gumbel-softmax draw.
#[derive(Clone, Debug)]
pub struct Sampled {
    pub logits: Var,
    pub tau: Var,
    pub soft: Var,
    pub hard: Tensor,
    /// What gets applied to the frames: straight-through or soft, per [`Relaxation`].
    pub selection: Var,
}

impl Sampled {
    pub fn matrix(&self, g: &Graph) -> SamplingMatrix {
        SamplingMatrix {
            soft: g.value(self.soft).clone(),
            hard: self.hard.clone(),
            logits: g.value(self.logits).clone(),
            temperature: g.value(self.tau).clone(),
        }
    }
}

/// `P_soft = softmax_t((A + G) / τ)`, `P_hard = onehot(argmax_t P_soft)`.
pub fn gumbel_softmax_sample(
    g: &mut Graph,
    logits: Var,
    tau: Var,
    noise: &Tensor,
    relax: Relaxation,
) -> Result<Sampled> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 3 {
        return Err(Error::invalid(format!("logits must be [B, k, T], got {shape:?}")));
    }
    if !g.value(logits).is_finite() {
        return Err(Error::fault("non-finite sampling logits"));
    }
    if noise.shape() != shape.as_slice() {
        return Err(Error::Shape {
            op: "gumbel_softmax_sample",
            lhs: shape,
            rhs: noise.shape().to_vec(),
        });
    }
    if g.shape(tau) != [shape[0]] {
        return Err(Error::Shape {
            op: "gumbel_softmax_sample",
            lhs: vec![shape[0]],
            rhs: g.shape(tau).to_vec(),
        });
    }
    if g.value(tau).data().iter().any(|&v| !(v > 0.0)) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let noise = g.constant(noise.clone())?;
    let perturbed = g.add(logits, noise)?;
    let tau3 = g.reshape(tau, &[shape[0], 1, 1])?;
    let scaled = g.div(perturbed, tau3)?;
    let soft = g.softmax(scaled, 2)?;
    let hard = hard_from_soft(g.value(soft));
    let selection = match relax {
        Relaxation::StraightThrough => g.straight_through(hard.clone(), soft)?,
        Relaxation::Soft => soft,
    };
    Ok(Sampled {
        logits,
        tau,
        soft,
        hard,
        selection,
    })
}

/// `out[b, j] = Σ_t P[b, j, t] · X[b, t]` for `P [B, k, T]`, `X [B, T, ...]`.
pub fn apply_sampling(g: &mut Graph, p: Var, frames: Var) -> Result<Var> {
    let ps = g.shape(p).to_vec();
    let xs = g.shape(frames).to_vec();
    if ps.len() != 3 || xs.len() < 2 || ps[0] != xs[0] || ps[2] != xs[1] {
        return Err(Error::Shape {
            op: "apply_sampling",
            lhs: ps,
            rhs: xs,
        });
    }
    let frame: usize = xs[2..].iter().product();
    let flat = g.reshape(frames, &[xs[0], xs[1], frame])?;
    let out = g.matmul(p, flat)?;
    let mut shape = vec![ps[0], ps[1]];
    shape.extend_from_slice(&xs[2..]);
    g.reshape(out, &shape)
}

/// Plain-value snapshot of one sampling step.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingMatrix {
    /// `[B, k, T]`
    pub soft: Tensor,
    /// `[B, k, T]`, one-hot rows.
    pub hard: Tensor,
    /// `[B, k, T]`
    pub logits: Tensor,
    /// `[B]`
    pub temperature: Tensor,
}

impl SamplingMatrix {
    /// Deterministic one-hot selection (non-learned strategies): soft = hard,
    /// zero logits, temperature `tau`.
    pub fn from_indices(indices: &[Vec<usize>], t: usize, tau: f64) -> Result<Self> {
        let b = indices.len();
        let k = indices.first().map_or(0, Vec::len);
        let mut hard = Tensor::zeros(&[b, k, t]);
        for (bi, row) in indices.iter().enumerate() {
            if row.len() != k {
                return Err(Error::invalid("ragged selection indices"));
            }
            for (j, &ix) in row.iter().enumerate() {
                if ix >= t {
                    return Err(Error::invalid(format!("selected index {ix} outside 0..{t}")));
                }
                hard.set(&[bi, j, ix], 1.0);
            }
        }
        Ok(Self {
            soft: hard.clone(),
            hard,
            logits: Tensor::zeros(&[b, k, t]),
            temperature: Tensor::full(&[b], tau),
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.hard.shape();
        (s[0], s[1], s[2])
    }

    /// Selected frame index per `(item, slot)`.
    pub fn selected_indices(&self) -> Vec<Vec<usize>> {
        let (b, k, t) = self.dims();
        (0..b)
            .map(|bi| {
                (0..k)
                    .map(|j| argmax(&self.hard.data()[(bi * k + j) * t..(bi * k + j + 1) * t]))
                    .collect()
            })
            .collect()
    }

    /// Number of slots per item that repeat an earlier slot's frame.
    pub fn duplicate_counts(&self) -> Vec<usize> {
        self.selected_indices()
            .into_iter()
            .map(|mut row| {
                let k = row.len();
                row.sort_unstable();
                row.dedup();
                k - row.len()
            })
            .collect()
    }

    /// Checks the structural invariants; `tau0` enables the temperature bound.
    pub fn check_invariants(&self, tau0: Option<f64>) -> Result<()> {
        let (_, _, t) = self.dims();
        for (r, (soft, hard)) in self.soft.data().chunks(t).zip(self.hard.data().chunks(t)).enumerate() {
            let sum: f64 = soft.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::fault(format!("soft row {r} sums to {sum}")));
            }
            if soft.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::fault(format!("soft row {r} leaves [0, 1]")));
            }
            let ones = hard.iter().filter(|&&v| v == 1.0).count();
            let zeros = hard.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || zeros != t - 1 {
                return Err(Error::fault(format!("hard row {r} is not one-hot")));
            }
            if hard[argmax(soft)] != 1.0 {
                return Err(Error::fault(format!("hard row {r} is not at the soft argmax")));
            }
        }
        if let Some(tau0) = tau0 {
            for &tau in self.temperature.data() {
                if tau < 0.5 * tau0 || tau > 1.5 * tau0 {
                    return Err(Error::fault(format!("temperature {tau} outside [{}, {}]", 0.5 * tau0, 1.5 * tau0)));
                }
            }
        }
        Ok(())
    }
}

/// One JSON-lines record of a sampling-matrix dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingRecord {
    pub item_id: usize,
    pub temperature: f64,
    pub selected_indices: Vec<usize>,
    pub soft_rows: Vec<Vec<f64>>,
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

impl SamplingMatrix {
    /// One dump record per batch item; `item_ids[b]` labels item `b`.
    pub fn records(&self, item_ids: &[usize]) -> Vec<SamplingRecord> {
        let (b, k, t) = self.dims();
        let selected = self.selected_indices();
        (0..b)
            .map(|bi| SamplingRecord {
                item_id: item_ids[bi],
                temperature: round6(self.temperature.data()[bi]),
                selected_indices: selected[bi].clone(),
                soft_rows: (0..k)
                    .map(|j| {
                        self.soft.data()[(bi * k + j) * t..(bi * k + j + 1) * t]
                            .iter()
                            .map(|&v| round6(v))
                            .collect()
                    })
                    .collect(),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features_var(g: &mut Graph, seed: u64, b: usize, t: usize) -> Var {
        let mut s = RandomStream::new(seed);
        g.constant(Tensor::from_fn(&[b, t, NUM_FEATURES], |_| 2.0 * s.uniform() - 1.0))
            .unwrap()
    }

    fn sampler(heads: usize, k: usize) -> (DasSampler, ParameterStore) {
        let mut cfg = SamplerConfig::new(k);
        cfg.heads = heads;
        cfg.hidden = 5;
        let s = DasSampler::new(cfg);
        let mut store = ParameterStore::new();
        s.init_params(&mut store, &mut RandomStream::new(99)).unwrap();
        (s, store)
    }

    #[test]
    fn zero_projection_gives_zero_scores() {
        let mut g = Graph::new();
        let f = features_var(&mut g, 1, 2, 4);
        let w = g.constant(Tensor::zeros(&[NUM_FEATURES, 1])).unwrap();
        let b = g.constant(Tensor::zeros(&[1])).unwrap();
        let a = base_attention(&mut g, f, w, b).unwrap();
        assert_eq!(g.shape(a), &[2, 4]);
        assert!(g.value(a).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_hot_projection_picks_variance_channel() {
        let mut g = Graph::new();
        let f = features_var(&mut g, 2, 2, 3);
        let mut e = Tensor::zeros(&[NUM_FEATURES, 1]);
        e.data_mut()[0] = 1.0;
        let w = g.constant(e).unwrap();
        let b = g.constant(Tensor::zeros(&[1])).unwrap();
        let a = base_attention(&mut g, f, w, b).unwrap();
        for bi in 0..2 {
            for t in 0..3 {
                assert_eq!(g.value(a).get(&[bi, t]), g.value(f).get(&[bi, t, 0]));
            }
        }
    }

    #[test]
    fn base_weight_gradient_is_feature_column_sum() {
        let mut g = Graph::new();
        let f = features_var(&mut g, 3, 2, 5);
        let w = g.variable(Tensor::from_fn(&[NUM_FEATURES, 1], |i| 0.1 * i as f64)).unwrap();
        let b = g.variable(Tensor::from_vec(vec![0.3])).unwrap();
        let a = base_attention(&mut g, f, w, b).unwrap();
        let s = g.sum_all(a).unwrap();
        let grads = g.backward(s).unwrap();
        let fv = g.value(f);
        for k in 0..NUM_FEATURES {
            let col: f64 = (0..10).map(|r| fv.data()[r * NUM_FEATURES + k]).sum();
            assert!((grads.get(w).unwrap().data()[k] - col).abs() < 1e-12);
        }
        assert_eq!(grads.get(b).unwrap().data(), &[10.0]);
    }

    #[test]
    fn zero_head_mlp_gives_ln2_scales() {
        let (s, mut store) = sampler(2, 3);
        for name in store.names().map(str::to_string).collect::<Vec<_>>() {
            if name.starts_with("das.head") {
                store.value_mut(&name).unwrap().data_mut().fill(0.0);
            }
        }
        let mut g = Graph::new();
        let vars = s.bind(&mut g, &store).unwrap();
        let f = features_var(&mut g, 4, 3, 6);
        let sc = head_scales(&mut g, f, &vars.heads[0]).unwrap();
        assert_eq!(g.shape(sc), &[3, 3]);
        for &v in g.value(sc).data() {
            assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn scales_depend_on_frame_content() {
        let (s, store) = sampler(1, 2);
        let eval = |perturb: f64| {
            let mut g = Graph::new();
            let vars = s.bind(&mut g, &store).unwrap();
            let mut s2 = RandomStream::new(5);
            let mut t = Tensor::from_fn(&[1, 4, NUM_FEATURES], |_| s2.uniform());
            t.data_mut()[2 * NUM_FEATURES + 1] += perturb;
            let f = g.constant(t).unwrap();
            let sc = head_scales(&mut g, f, &vars.heads[0]).unwrap();
            g.value(sc).clone()
        };
        let (a, b) = (eval(0.0), eval(0.5));
        assert!(a.data().iter().zip(b.data()).any(|(x, y)| (x - y).abs() > 1e-9));
        assert!(a.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn combine_heads_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let s = g.constant(Tensor::new(vec![1, 1], vec![2.0]).unwrap()).unwrap();
        let one = combine_heads(&mut g, a, &[s]).unwrap();
        assert_eq!(g.value(one).data(), &[2.0, 4.0, 6.0]);
        let s1 = g.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap()).unwrap();
        let s2 = g.constant(Tensor::new(vec![1, 1], vec![3.0]).unwrap()).unwrap();
        let two = combine_heads(&mut g, a, &[s1, s2]).unwrap();
        assert_eq!(g.value(two).data(), &[2.0, 4.0, 6.0]);
        assert!(combine_heads(&mut g, a, &[]).is_err());
    }

    #[test]
    fn temperature_limits() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::from_vec(vec![0.0, 800.0, -800.0])).unwrap();
        let tau = temperature_from_logit(&mut g, z, 2.0).unwrap();
        assert_eq!(g.value(tau).data(), &[2.0, 3.0, 1.0]);
    }

    #[test]
    fn equal_logits_without_noise_are_uniform() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(&[1, 2, 4], 0.7)).unwrap();
        let tau = g.constant(Tensor::from_vec(vec![1.3])).unwrap();
        let s = gumbel_softmax_sample(&mut g, a, tau, &Tensor::zeros(&[1, 2, 4]), Relaxation::StraightThrough)
            .unwrap();
        for &v in g.value(s.soft).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        // ties resolve to the lowest index
        assert_eq!(s.matrix(&g).selected_indices(), vec![vec![0, 0]]);
    }

    #[test]
    fn two_logit_closed_form() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![1, 1, 2], vec![0.0, 10.0]).unwrap()).unwrap();
        let tau = g.constant(Tensor::from_vec(vec![1.0])).unwrap();
        let s = gumbel_softmax_sample(&mut g, a, tau, &Tensor::zeros(&[1, 1, 2]), Relaxation::Soft).unwrap();
        let p0 = 1.0 / (1.0 + 10f64.exp());
        let soft = g.value(s.soft).data();
        assert!((soft[0] - p0).abs() < 1e-15 && (soft[0] - 4.54e-5).abs() < 1e-7);
        assert!((soft[1] - 0.999955).abs() < 1e-6);
        assert_eq!(s.hard.data(), &[0.0, 1.0]);
        assert_eq!(s.selection, s.soft);
    }

    #[test]
    fn hard_is_argmax_of_soft() {
        let soft = Tensor::new(vec![1, 1, 3], vec![0.2, 0.5, 0.3]).unwrap();
        assert_eq!(hard_from_soft(&soft).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn non_finite_and_mismatched_inputs_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[1, 1, 3])).unwrap();
        let tau = g.constant(Tensor::from_vec(vec![1.0])).unwrap();
        assert!(gumbel_softmax_sample(&mut g, a, tau, &Tensor::zeros(&[1, 1, 2]), Relaxation::Soft).is_err());
        let frames = g.constant(Tensor::zeros(&[1, 4, 1, 2, 2])).unwrap();
        assert!(apply_sampling(&mut g, a, frames).is_err());
    }

    #[test]
    fn apply_one_hot_and_soft_rows() {
        let mut g = Graph::new();
        let frames = Tensor::from_fn(&[1, 3, 1, 2, 2], |i| i as f64 * 0.5 - 1.0);
        let x = g.constant(frames.clone()).unwrap();
        let mut p = Tensor::zeros(&[1, 2, 3]);
        p.set(&[0, 0, 2], 1.0);
        p.set(&[0, 1, 0], 0.5);
        p.set(&[0, 1, 1], 0.5);
        let pv = g.constant(p).unwrap();
        let out = apply_sampling(&mut g, pv, x).unwrap();
        let out = g.value(out);
        assert_eq!(out.shape(), &[1, 2, 1, 2, 2]);
        assert_eq!(&out.data()[..4], &frames.data()[8..12]);
        for i in 0..4 {
            assert_eq!(out.data()[4 + i], 0.5 * frames.data()[i] + 0.5 * frames.data()[4 + i]);
        }
    }

    #[test]
    fn apply_matches_weighted_sum_oracle() {
        let mut s = RandomStream::new(31);
        let (b, k, t, n) = (2, 3, 5, 6);
        let frames = Tensor::from_fn(&[b, t, 1, 2, 3], |_| s.uniform() - 0.5);
        let logits = Tensor::from_fn(&[b, k, t], |_| 3.0 * s.uniform());
        let p = crate::autodiff::softmax_tensor(&logits, 2);
        let mut g = Graph::new();
        let pv = g.constant(p.clone()).unwrap();
        let xv = g.constant(frames.clone()).unwrap();
        let out = apply_sampling(&mut g, pv, xv).unwrap();
        let out = g.value(out);
        for bi in 0..b {
            for j in 0..k {
                for e in 0..n {
                    let mut acc = 0.0;
                    for ti in 0..t {
                        acc += p.data()[(bi * k + j) * t + ti] * frames.data()[(bi * t + ti) * n + e];
                    }
                    assert!((out.data()[(bi * k + j) * n + e] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn sample_is_input_adaptive_and_valid() {
        let (s, store) = sampler(4, 3);
        let mut rs = RandomStream::new(17);
        let data = Tensor::from_fn(&[2, 6, 1, 4, 4], |_| rs.uniform());
        let seq = FrameSequence::new(data.clone(), vec![6, 6]).unwrap();
        let mut streams = vec![RandomStream::new(1), RandomStream::new(2)];
        let (frames, m) = s.sample(&seq, &store, &mut streams, SampleMode::Train).unwrap();
        assert_eq!(frames.shape(), &[2, 3, 1, 4, 4]);
        m.check_invariants(Some(1.0)).unwrap();
        // forward output is pure hard selection
        let sel = m.selected_indices();
        for bi in 0..2 {
            for j in 0..3 {
                let got = &frames.data()[(bi * 3 + j) * 16..(bi * 3 + j + 1) * 16];
                assert_eq!(got, seq.frame(bi, sel[bi][j]));
            }
        }

        let mut changed = data.clone();
        for v in &mut changed.data_mut()[3 * 16..4 * 16] {
            *v = 2.0 * *v + 0.3;
        }
        let seq2 = FrameSequence::new(changed, vec![6, 6]).unwrap();
        let det = SampleMode::Eval { deterministic: true };
        let mut st = vec![RandomStream::new(1), RandomStream::new(2)];
        let (_, m1) = s.sample(&seq, &store, &mut st.clone(), det).unwrap();
        let (_, m2) = s.sample(&seq2, &store, &mut st, det).unwrap();
        assert_ne!(m1.logits, m2.logits);
        // deterministic eval selects per-row logit argmax
        for (bi, row) in m1.selected_indices().iter().enumerate() {
            for (j, &ix) in row.iter().enumerate() {
                let l = &m1.logits.data()[(bi * 3 + j) * 6..(bi * 3 + j + 1) * 6];
                assert_eq!(ix, argmax(l));
            }
        }
    }

    #[test]
    fn records_round_values() {
        let m = SamplingMatrix {
            soft: Tensor::new(vec![1, 1, 2], vec![0.123_456_789, 0.876_543_211]).unwrap(),
            hard: Tensor::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap(),
            logits: Tensor::zeros(&[1, 1, 2]),
            temperature: Tensor::from_vec(vec![1.234_567_89]),
        };
        let r = &m.records(&[42])[0];
        assert_eq!(r.item_id, 42);
        assert_eq!(r.selected_indices, vec![1]);
        assert_eq!(r.soft_rows, vec![vec![0.123457, 0.876543]]);
        assert_eq!(r.temperature, 1.234568);
        let json = serde_json::to_string(r).unwrap();
        assert!(json.contains("\"selected_indices\":[1]"), "{json}");
    }

    #[test]
    fn duplicates_are_reported_not_removed() {
        let m = SamplingMatrix::from_indices(&[vec![2, 2, 0], vec![0, 1, 3]], 4, 1.0).unwrap();
        assert_eq!(m.duplicate_counts(), vec![1, 0]);
        assert_eq!(m.selected_indices()[0], vec![2, 2, 0]);
        m.check_invariants(Some(1.0)).unwrap();
    }

    #[test]
    fn config_validation() {
        let mut c = SamplerConfig::new(3);
        assert!(c.validate(3).is_ok());
        assert!(c.validate(2).is_err());
        c.heads = 0;
        assert!(c.validate(5).is_err());
        let mut c = SamplerConfig::new(3);
        c.tau0 = 0.0;
        assert!(c.validate(5).is_err());
    }
}
