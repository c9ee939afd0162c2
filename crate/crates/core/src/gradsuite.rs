//! Finite-difference checks over every differentiable primitive and the
//! composite modules built from them.
//!
//! Each check draws a random point (and random projection weights that turn
//! tensor outputs into scalars) from the suite's stream, so different seeds
//! probe different regions.

use crate::autodiff::{Graph, Var};
use crate::classifier::{cross_entropy, Classifier, ClassifierConfig};
use crate::error::Result;
use crate::features::{build_features, FrameSequence, NUM_FEATURES};
use crate::gradcheck::{grad_check, grad_check_params};
use crate::params::ParameterStore;
use crate::rng::RandomStream;
use crate::sampler::{
    adaptive_temperature, apply_sampling, base_attention, combine_heads, gumbel_softmax_sample,
    head_scales, DasSampler, Mlp, Relaxation, SamplerConfig,
};
use crate::tensor::Tensor;

pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn uniform(s: &mut RandomStream, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| lo + (hi - lo) * s.uniform())
}

/// `Σ W ⊙ out` for fixed random `W`.
fn project(g: &mut Graph, out: Var, w: &Tensor) -> Result<Var> {
    let w = g.constant(w.clone())?;
    let p = g.mul(out, w)?;
    g.sum_all(p)
}

fn output_shape(op: &dyn Fn(&mut Graph, Var) -> Result<Var>, x: &Tensor) -> Result<Vec<usize>> {
    let mut g = Graph::new();
    let v = g.variable(x.clone())?;
    let o = op(&mut g, v)?;
    Ok(g.shape(o).to_vec())
}

/// Checks `op` at a random point of `shape` drawn from `[lo, hi]`.
fn check_fn(
    name: &str,
    s: &mut RandomStream,
    shape: &[usize],
    (lo, hi): (f64, f64),
    op: &dyn Fn(&mut Graph, Var) -> Result<Var>,
) -> Result<CheckResult> {
    let x = uniform(s, shape, lo, hi);
    let w = uniform(s, &output_shape(op, &x)?, -1.0, 1.0);
    let err = grad_check(
        |g, v| {
            let o = op(g, v)?;
            project(g, o, &w)
        },
        &x,
        STEP,
    )?;
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_error: err,
        tolerance: PRIMITIVE_TOLERANCE,
    })
}

/// Checks both operands of a binary op; the other operand is held fixed.
fn check_binary(
    name: &str,
    s: &mut RandomStream,
    (sa, ra): (&[usize], (f64, f64)),
    (sb, rb): (&[usize], (f64, f64)),
    op: fn(&mut Graph, Var, Var) -> Result<Var>,
) -> Result<Vec<CheckResult>> {
    let a = uniform(s, sa, ra.0, ra.1);
    let b = uniform(s, sb, rb.0, rb.1);
    let wrt_a = check_fn(&format!("{name} (lhs {sa:?})"), s, sa, ra, &|g, x| {
        let c = g.constant(b.clone())?;
        op(g, x, c)
    })?;
    let wrt_b = check_fn(&format!("{name} (rhs {sb:?})"), s, sb, rb, &|g, x| {
        let c = g.constant(a.clone())?;
        op(g, c, x)
    })?;
    Ok(vec![wrt_a, wrt_b])
}

/// One check per primitive (per operand for binary ones).
pub fn primitive_checks(s: &mut RandomStream) -> Result<Vec<CheckResult>> {
    let sym = (-1.0, 1.0);
    let pos = (0.5, 2.0);
    let mut out = Vec::new();
    out.extend(check_binary("add", s, (&[2, 3, 4], sym), (&[4], sym), |g, a, b| g.add(a, b))?);
    out.extend(check_binary("sub", s, (&[3, 1], sym), (&[3, 4], sym), |g, a, b| g.sub(a, b))?);
    out.extend(check_binary("mul", s, (&[2, 3], sym), (&[1, 3], sym), |g, a, b| g.mul(a, b))?);
    out.extend(check_binary("div", s, (&[2, 3], sym), (&[2, 3], pos), |g, a, b| g.div(a, b))?);
    out.extend(check_binary("matmul", s, (&[3, 4], sym), (&[4, 2], sym), |g, a, b| g.matmul(a, b))?);
    out.extend(check_binary("matmul batched", s, (&[2, 3, 4], sym), (&[4, 5], sym), |g, a, b| {
        g.matmul(a, b)
    })?);
    out.extend(check_binary("matmul batched pair", s, (&[2, 3, 4], sym), (&[2, 4, 2], sym), |g, a, b| {
        g.matmul(a, b)
    })?);
    out.push(check_fn("broadcast_to", s, &[3, 1], sym, &|g, x| g.broadcast_to(x, &[2, 3, 4]))?);
    out.push(check_fn("reshape", s, &[2, 6], sym, &|g, x| g.reshape(x, &[3, 4]))?);
    out.push(check_fn("sum", s, &[2, 3, 4], sym, &|g, x| g.sum(x, 1))?);
    out.push(check_fn("mean", s, &[2, 3, 4], sym, &|g, x| g.mean(x, 2))?);
    out.push(check_fn("sum_all", s, &[2, 3], sym, &|g, x| g.sum_all(x))?);
    out.push(check_fn("softmax (last axis)", s, &[2, 3, 4], (-2.0, 2.0), &|g, x| g.softmax(x, 2))?);
    out.push(check_fn("softmax (axis 0)", s, &[3, 2], (-2.0, 2.0), &|g, x| g.softmax(x, 0))?);
    out.push(check_fn("softplus", s, &[2, 5], (-3.0, 3.0), &|g, x| g.softplus(x))?);
    out.push(check_fn("sigmoid", s, &[2, 5], (-3.0, 3.0), &|g, x| g.sigmoid(x))?);
    out.push(check_fn("tanh", s, &[2, 5], (-2.0, 2.0), &|g, x| g.tanh(x))?);
    out.push(check_fn("exp", s, &[2, 5], sym, &|g, x| g.exp(x))?);
    out.push(check_fn("log", s, &[2, 5], pos, &|g, x| g.log(x))?);
    out.push(check_fn("scale", s, &[2, 5], sym, &|g, x| g.scale(x, -1.7))?);
    let side_a = uniform(s, &[2, 1, 3], -1.0, 1.0);
    let side_b = uniform(s, &[2, 3, 3], -1.0, 1.0);
    out.push(check_fn("concat", s, &[2, 2, 3], sym, &|g, x| {
        let a = g.constant(side_a.clone())?;
        let b = g.constant(side_b.clone())?;
        g.concat(&[a, x, b], 1)
    })?);
    out.push(straight_through_check(s)?);
    Ok(out)
}

/// The straight-through output's forward value is constant in its soft
/// input, so finite differences see nothing. Instead: with a downstream
/// function linear in the selection, the gradient reaching the logits
/// through the straight-through path must equal the finite-difference
/// gradient of the purely soft path.
fn straight_through_check(s: &mut RandomStream) -> Result<CheckResult> {
    let (b, k, t, f) = (2, 3, 5, 4);
    let logits = uniform(s, &[b, k, t], -1.5, 1.5);
    let noise = s.sample_gumbel(&[b, k, t]);
    let tau = uniform(s, &[b], 0.6, 1.4);
    let frames = uniform(s, &[b, t, f], -1.0, 1.0);
    let w = uniform(s, &[b, k, f], -1.0, 1.0);
    let downstream = |g: &mut Graph, a: Var, relax: Relaxation| -> Result<Var> {
        let tau = g.constant(tau.clone())?;
        let sampled = gumbel_softmax_sample(g, a, tau, &noise, relax)?;
        let x = g.constant(frames.clone())?;
        let out = apply_sampling(g, sampled.selection, x)?;
        project(g, out, &w)
    };
    let mut g = Graph::new();
    let a = g.variable(logits.clone())?;
    let root = downstream(&mut g, a, Relaxation::StraightThrough)?;
    let ste = g.backward(root)?.get(a).cloned().expect("gradient for logits");

    // Soft-path gradient by finite differences, compared coordinate-wise.
    let soft_value = |p: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let a = g.variable(p.clone())?;
        let root = downstream(&mut g, a, Relaxation::Soft)?;
        Ok(g.value(root).data()[0])
    };
    let mut worst = 0.0f64;
    for i in 0..logits.len() {
        let mut up = logits.clone();
        up.data_mut()[i] += STEP;
        let mut down = logits.clone();
        down.data_mut()[i] -= STEP;
        let numeric = (soft_value(&up)? - soft_value(&down)?) / (2.0 * STEP);
        worst = worst.max((ste.data()[i] - numeric).abs() / numeric.abs().max(1.0));
    }
    Ok(CheckResult {
        name: "straight_through (vs soft path)".into(),
        max_rel_error: worst,
        tolerance: PRIMITIVE_TOLERANCE,
    })
}

fn params_check(name: &str, results: Vec<(String, f64)>, tolerance: f64) -> CheckResult {
    let worst = results.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    CheckResult {
        name: name.to_string(),
        max_rel_error: worst,
        tolerance,
    }
}

fn small_sequence(s: &mut RandomStream, b: usize, t: usize, h: usize, w: usize) -> Result<FrameSequence> {
    let valid: Vec<usize> = (0..b).map(|i| t - i % 2).collect();
    let frame = h * w;
    let data = Tensor::from_fn(&[b, t, 1, h, w], |i| {
        let (bi, ti) = (i / (t * frame), (i / frame) % t);
        if ti < valid[bi] { s.uniform() } else { 0.0 }
    });
    FrameSequence::new(data, valid)
}

/// Sampler pieces, the classifier, and the loss.
pub fn composite_checks(s: &mut RandomStream) -> Result<Vec<CheckResult>> {
    let (b, t, k, d) = (2, 5, 3, NUM_FEATURES);
    let mut out = Vec::new();

    let features = uniform(s, &[b, t, d], -1.5, 1.5);
    let w0 = uniform(s, &[d, 1], -1.0, 1.0);
    let b0 = uniform(s, &[1], -1.0, 1.0);
    out.push(check_fn("base_attention (weights)", s, &[d, 1], (-1.0, 1.0), &|g, w| {
        let f = g.constant(features.clone())?;
        let b0 = g.constant(b0.clone())?;
        base_attention(g, f, w, b0)
    })?);
    out.push(check_fn("base_attention (features)", s, &[b, t, d], (-1.5, 1.5), &|g, f| {
        let w = g.constant(w0.clone())?;
        let b0 = g.constant(b0.clone())?;
        base_attention(g, f, w, b0)
    })?);

    let scales: Vec<Tensor> = (0..3).map(|_| uniform(s, &[b, k], 0.1, 2.0)).collect();
    out.push(check_fn("combine_heads (base scores)", s, &[b, t], (-1.0, 1.0), &|g, a| {
        let vars = scales.iter().map(|x| g.constant(x.clone())).collect::<Result<Vec<_>>>()?;
        combine_heads(g, a, &vars)
    })?);
    let base = uniform(s, &[b, t], -1.0, 1.0);
    out.push(check_fn("combine_heads (head scales)", s, &[b, k], (0.1, 2.0), &|g, x| {
        let a = g.constant(base.clone())?;
        let mut vars = vec![x];
        for sc in &scales[1..] {
            vars.push(g.constant(sc.clone())?);
        }
        combine_heads(g, a, &vars)
    })?);

    // Head MLP and temperature MLP through their own parameters.
    let mut store = ParameterStore::new();
    Mlp::init(&mut store, "head", (d, 4, k), s)?;
    Mlp::init(&mut store, "temp", (d, 4, 1), s)?;
    let w_head = uniform(s, &[b, k], -1.0, 1.0);
    out.push(params_check(
        "head_scales (MLP parameters)",
        grad_check_params(
            |g, st| {
                let mlp = Mlp::bind(g, st, "head")?;
                let f = g.constant(features.clone())?;
                let sc = head_scales(g, f, &mlp)?;
                project(g, sc, &w_head)
            },
            &store,
            STEP,
        )?,
        PRIMITIVE_TOLERANCE,
    ));

    // Temperature path: MLP_temp → τ → soft sampling matrix, noise fixed.
    let logits = uniform(s, &[b, k, t], -1.5, 1.5);
    let noise = s.sample_gumbel(&[b, k, t]);
    let w_soft = uniform(s, &[b, k, t], -1.0, 1.0);
    out.push(params_check(
        "temperature path (MLP parameters through soft sampling)",
        grad_check_params(
            |g, st| {
                let mlp = Mlp::bind(g, st, "temp")?;
                let f = g.constant(features.clone())?;
                let tau = adaptive_temperature(g, f, &mlp, 1.3)?;
                let a = g.constant(logits.clone())?;
                let sampled = gumbel_softmax_sample(g, a, tau, &noise, Relaxation::Soft)?;
                project(g, sampled.soft, &w_soft)
            },
            &store,
            STEP,
        )?,
        PRIMITIVE_TOLERANCE,
    ));

    // Logits path: A → soft sampling matrix at fixed τ and noise.
    let tau_fixed = uniform(s, &[b], 0.6, 1.4);
    out.push(check_fn("logits path (soft sampling)", s, &[b, k, t], (-1.5, 1.5), &|g, a| {
        let tau = g.constant(tau_fixed.clone())?;
        Ok(gumbel_softmax_sample(g, a, tau, &noise, Relaxation::Soft)?.soft)
    })?);

    let frames = uniform(s, &[b, t, 2, 3], -1.0, 1.0);
    let p_soft = uniform(s, &[b, k, t], 0.0, 1.0);
    out.push(check_fn("apply_sampling (matrix)", s, &[b, k, t], (0.0, 1.0), &|g, p| {
        let x = g.constant(frames.clone())?;
        apply_sampling(g, p, x)
    })?);
    out.push(check_fn("apply_sampling (frames)", s, &[b, t, 2, 3], (-1.0, 1.0), &|g, x| {
        let p = g.constant(p_soft.clone())?;
        apply_sampling(g, p, x)
    })?);

    // Full sampler, every parameter, soft relaxation.
    let das = DasSampler::new(SamplerConfig {
        heads: 2,
        samples: k,
        hidden: 4,
        tau0: 1.0,
        features: d,
    });
    let mut das_store = ParameterStore::new();
    das.init_params(&mut das_store, s)?;
    out.push(params_check(
        "sampler (all parameters, soft relaxation)",
        grad_check_params(
            |g, st| {
                let vars = das.bind(g, st)?;
                let f = g.constant(features.clone())?;
                let sampled = das.forward(g, &vars, f, &noise, Relaxation::Soft)?;
                project(g, sampled.soft, &w_soft)
            },
            &das_store,
            STEP,
        )?,
        PRIMITIVE_TOLERANCE,
    ));

    // Classifier and loss.
    let clf = Classifier::new(ClassifierConfig {
        channels: 1,
        height: 5,
        width: 4,
        embed: 4,
        hidden: 5,
        num_classes: 3,
    })?;
    let mut clf_store = ParameterStore::new();
    clf.init_params(&mut clf_store, s)?;
    let selected = uniform(s, &[b, k, 1, 5, 4], 0.0, 1.0);
    let labels = [2, 0];
    out.push(params_check(
        "classifier (all parameters, cross-entropy)",
        grad_check_params(
            |g, st| {
                let vars = clf.bind(g, st)?;
                let x = g.constant(selected.clone())?;
                let logits = clf.forward(g, &vars, x)?;
                cross_entropy(g, logits, &labels)
            },
            &clf_store,
            STEP,
        )?,
        PRIMITIVE_TOLERANCE,
    ));
    out.push(check_fn("cross_entropy (logits)", s, &[b, 3], (-3.0, 3.0), &|g, z| {
        cross_entropy(g, z, &labels)
    })?);
    Ok(out)
}

/// Sampler and classifier trained jointly: `B = 2`, `T = 6`, `k = 3`.
pub fn end_to_end_check(s: &mut RandomStream) -> Result<CheckResult> {
    let (b, t, k, h, w) = (2, 6, 3, 4, 4);
    let seq = small_sequence(s, b, t, h, w)?;
    let features = build_features(&seq)?.data;
    let das = DasSampler::new(SamplerConfig {
        heads: 2,
        samples: k,
        hidden: 4,
        tau0: 1.0,
        features: NUM_FEATURES,
    });
    let clf = Classifier::new(ClassifierConfig {
        channels: 1,
        height: h,
        width: w,
        embed: 4,
        hidden: 5,
        num_classes: 3,
    })?;
    let mut store = ParameterStore::new();
    das.init_params(&mut store, s)?;
    clf.init_params(&mut store, s)?;
    let noise = s.sample_gumbel(&[b, k, t]);
    let labels = [1, 2];
    let results = grad_check_params(
        |g, st| {
            let dv = das.bind(g, st)?;
            let f = g.constant(features.clone())?;
            let sampled = das.forward(g, &dv, f, &noise, Relaxation::Soft)?;
            let x = g.constant(seq.data().clone())?;
            let chosen = apply_sampling(g, sampled.selection, x)?;
            let cv = clf.bind(g, st)?;
            let logits = clf.forward(g, &cv, chosen)?;
            cross_entropy(g, logits, &labels)
        },
        &store,
        STEP,
    )?;
    Ok(params_check("end-to-end (sampler + classifier)", results, END_TO_END_TOLERANCE))
}

/// Every check, seeded.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let root = RandomStream::new(seed).derive("gradsuite");
    let mut out = primitive_checks(&mut root.derive("primitives"))?;
    out.extend(composite_checks(&mut root.derive("composites"))?);
    out.push(end_to_end_check(&mut root.derive("end-to-end"))?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_a_few_seeds() {
        for seed in 0..3 {
            for r in run_suite(seed).unwrap() {
                assert!(r.passed(), "seed {seed}: {} error {:e}", r.name, r.max_rel_error);
            }
        }
    }

    #[test]
    fn suite_covers_every_primitive() {
        let names: Vec<String> = run_suite(0).unwrap().into_iter().map(|r| r.name).collect();
        for p in [
            "add", "sub", "mul", "div", "matmul", "broadcast_to", "reshape", "sum", "mean", "sum_all",
            "softmax", "softplus", "sigmoid", "tanh", "exp", "log", "scale", "concat", "straight_through",
        ] {
            assert!(names.iter().any(|n| n.starts_with(p)), "{p} not covered");
        }
    }
}
