//! Comparison strategies: full sequence, random, uniform, and DPS-style
//! fixed learned logits. All of them produce a [`SamplingMatrix`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::rng::RandomStream;
use crate::sampler::{gumbel_softmax_sample, init_uniform, Relaxation, Sampled, SamplingMatrix};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Full,
    Random,
    Uniform,
    #[serde(alias = "dps-fixed")]
    Dps,
    Das,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [
        StrategyKind::Full,
        StrategyKind::Random,
        StrategyKind::Uniform,
        StrategyKind::Dps,
        StrategyKind::Das,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Full => "full",
            StrategyKind::Random => "random",
            StrategyKind::Uniform => "uniform",
            StrategyKind::Dps => "dps",
            StrategyKind::Das => "das",
        }
    }

    pub fn is_learned(self) -> bool {
        matches!(self, StrategyKind::Dps | StrategyKind::Das)
    }

    /// Whether the strategy actually drops frames (everything but `full`).
    pub fn subsamples(self) -> bool {
        self != StrategyKind::Full
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(StrategyKind::Full),
            "random" => Ok(StrategyKind::Random),
            "uniform" => Ok(StrategyKind::Uniform),
            "dps" | "dps-fixed" => Ok(StrategyKind::Dps),
            "das" => Ok(StrategyKind::Das),
            other => Err(Error::invalid(format!(
                "unknown strategy {other:?} (expected full, random, uniform, dps or das)"
            ))),
        }
    }
}

fn check_k(t: usize, k: usize) -> Result<()> {
    if k == 0 || k > t {
        return Err(Error::invalid(format!("cannot select {k} of {t} frames")));
    }
    Ok(())
}

/// `floor((j + 0.5) · T / k)` for `j = 0..k`.
pub fn uniform_indices(t: usize, k: usize) -> Result<Vec<usize>> {
    check_k(t, k)?;
    Ok((0..k).map(|j| ((2 * j + 1) * t) / (2 * k)).collect())
}

/// `k` distinct indices drawn uniformly from `0..T`, sorted ascending.
pub fn random_indices(t: usize, k: usize, stream: &mut RandomStream) -> Result<Vec<usize>> {
    check_k(t, k)?;
    let mut pool: Vec<usize> = (0..t).collect();
    for i in 0..k {
        let j = i + stream.below(t - i);
        pool.swap(i, j);
    }
    let mut picked = pool[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Identity selection over all `T` frames.
pub fn full_matrix(batch: usize, t: usize, tau: f64) -> Result<SamplingMatrix> {
    let rows: Vec<Vec<usize>> = (0..batch).map(|_| (0..t).collect()).collect();
    SamplingMatrix::from_indices(&rows, t, tau)
}

pub const DPS_PARAM: &str = "dps.logits";

/// Input-independent learned logits `Θ [k, T]` pushed through the shared
/// Gumbel-softmax machinery at constant temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct DpsSampler {
    pub samples: usize,
    pub frames: usize,
    pub tau0: f64,
}

impl DpsSampler {
    pub fn init_params(&self, store: &mut ParameterStore, stream: &mut RandomStream) -> Result<()> {
        check_k(self.frames, self.samples)?;
        let mut theta = init_uniform(stream, &[self.samples, self.frames], 1);
        for v in theta.data_mut() {
            *v *= 0.1;
        }
        store.insert(DPS_PARAM, theta)
    }

    pub fn bind(&self, g: &mut Graph, store: &ParameterStore) -> Result<Var> {
        g.param(store, DPS_PARAM)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        theta: Var,
        batch: usize,
        noise: &Tensor,
        relax: Relaxation,
    ) -> Result<Sampled> {
        let logits = g.broadcast_to(theta, &[batch, self.samples, self.frames])?;
        let tau = g.constant(Tensor::full(&[batch], self.tau0))?;
        gumbel_softmax_sample(g, logits, tau, noise, relax)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{draw_noise, SampleMode};

    #[test]
    fn uniform_examples() {
        assert_eq!(uniform_indices(8, 4).unwrap(), vec![1, 3, 5, 7]);
        assert_eq!(uniform_indices(6, 6).unwrap(), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(uniform_indices(10, 5).unwrap(), vec![1, 3, 5, 7, 9]);
        assert_eq!(uniform_indices(16, 8).unwrap(), vec![1, 3, 5, 7, 9, 11, 13, 15]);
        assert!(uniform_indices(3, 4).is_err());
        assert!(uniform_indices(3, 0).is_err());
    }

    #[test]
    fn uniform_indices_are_ordered_and_in_range() {
        for t in 1..40 {
            for k in 1..=t {
                let ix = uniform_indices(t, k).unwrap();
                assert!(ix.windows(2).all(|w| w[0] <= w[1]));
                assert!(*ix.last().unwrap() < t);
                // the float formula, evaluated directly
                for (j, &v) in ix.iter().enumerate() {
                    assert_eq!(v, ((j as f64 + 0.5) * t as f64 / k as f64).floor() as usize);
                }
            }
        }
    }

    #[test]
    fn random_examples() {
        let mut s = RandomStream::new(5);
        assert_eq!(random_indices(7, 7, &mut s).unwrap(), (0..7).collect::<Vec<_>>());
        let a = random_indices(20, 6, &mut RandomStream::new(9)).unwrap();
        let b = random_indices(20, 6, &mut RandomStream::new(9)).unwrap();
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(random_indices(3, 4, &mut s).is_err());
    }

    #[test]
    fn random_marginals_are_half() {
        let mut s = RandomStream::new(77);
        let mut counts = [0usize; 100];
        let trials = 10_000;
        for _ in 0..trials {
            for i in random_indices(100, 50, &mut s).unwrap() {
                counts[i] += 1;
            }
        }
        for (i, &c) in counts.iter().enumerate() {
            let f = c as f64 / trials as f64;
            assert!((f - 0.5).abs() < 0.02, "index {i}: {f}");
        }
    }

    #[test]
    fn full_is_identity() {
        let m = full_matrix(2, 4, 1.0).unwrap();
        assert_eq!(m.soft, m.hard);
        assert_eq!(m.selected_indices(), vec![vec![0, 1, 2, 3]; 2]);
        m.check_invariants(Some(1.0)).unwrap();
    }

    #[test]
    fn dps_logits_ignore_content() {
        let dps = DpsSampler { samples: 2, frames: 5, tau0: 1.0 };
        let mut store = ParameterStore::new();
        dps.init_params(&mut store, &mut RandomStream::new(1)).unwrap();
        let mut g = Graph::new();
        let theta = dps.bind(&mut g, &store).unwrap();
        let mut streams = vec![RandomStream::new(3), RandomStream::new(4)];
        let noise = draw_noise(&mut streams, 2, 5, SampleMode::Train).unwrap();
        let s = dps.forward(&mut g, theta, 2, &noise, Relaxation::StraightThrough).unwrap();
        let m = s.matrix(&g);
        let l = m.logits.data();
        assert_eq!(&l[..10], &l[10..]);
        m.check_invariants(Some(1.0)).unwrap();
    }

    #[test]
    fn dominant_dps_logit_wins_in_deterministic_eval() {
        let dps = DpsSampler { samples: 2, frames: 4, tau0: 1.0 };
        let mut store = ParameterStore::new();
        dps.init_params(&mut store, &mut RandomStream::new(1)).unwrap();
        let theta = store.value_mut(DPS_PARAM).unwrap();
        theta.set(&[0, 3], 20.0);
        theta.set(&[1, 1], 20.0);
        let mut g = Graph::new();
        let th = dps.bind(&mut g, &store).unwrap();
        let noise = Tensor::zeros(&[1, 2, 4]);
        let s = dps.forward(&mut g, th, 1, &noise, Relaxation::StraightThrough).unwrap();
        assert_eq!(s.matrix(&g).selected_indices(), vec![vec![3, 1]]);
    }

    #[test]
    fn strategy_names_round_trip() {
        for k in StrategyKind::ALL {
            assert_eq!(k.as_str().parse::<StrategyKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.as_str()));
        }
        assert_eq!("dps-fixed".parse::<StrategyKind>().unwrap(), StrategyKind::Dps);
        assert!("adps".parse::<StrategyKind>().is_err());
    }
}
