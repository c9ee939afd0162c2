//! A subsampling strategy composed with the downstream classifier.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::baselines::{full_matrix, random_indices, uniform_indices, DpsSampler, StrategyKind};
use crate::classifier::{Classifier, ClassifierConfig};
use crate::error::{Error, Result};
use crate::features::{FrameSequence, NUM_FEATURES};
use crate::params::ParameterStore;
use crate::rng::RandomStream;
use crate::sampler::{
    apply_sampling, draw_noise, DasSampler, Relaxation, SampleMode, SamplerConfig, SamplingMatrix,
};
use crate::tensor::Tensor;

/// Everything needed to rebuild a model; stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub strategy: StrategyKind,
    pub frames: usize,
    pub samples: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub heads: usize,
    pub sampler_hidden: usize,
    pub tau0: f64,
    pub embed: usize,
    pub classifier_hidden: usize,
}

impl ModelSpec {
    /// Number of frames the classifier sees: `T` for the full strategy, `k` otherwise.
    pub fn slots(&self) -> usize {
        if self.strategy.subsamples() {
            self.samples
        } else {
            self.frames
        }
    }
}

pub struct Forward {
    /// `[B, num_classes]`
    pub logits: Var,
    pub matrix: SamplingMatrix,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    das: Option<DasSampler>,
    dps: Option<DpsSampler>,
    classifier: Classifier,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        if spec.samples == 0 || spec.samples > spec.frames {
            return Err(Error::invalid(format!(
                "cannot select {} of {} frames",
                spec.samples, spec.frames
            )));
        }
        let das = (spec.strategy == StrategyKind::Das).then(|| {
            DasSampler::new(SamplerConfig {
                heads: spec.heads,
                samples: spec.samples,
                hidden: spec.sampler_hidden,
                tau0: spec.tau0,
                features: NUM_FEATURES,
            })
        });
        if let Some(d) = &das {
            d.cfg.validate(spec.frames)?;
        }
        let dps = (spec.strategy == StrategyKind::Dps).then(|| DpsSampler {
            samples: spec.samples,
            frames: spec.frames,
            tau0: spec.tau0,
        });
        let classifier = Classifier::new(ClassifierConfig {
            channels: spec.channels,
            height: spec.height,
            width: spec.width,
            embed: spec.embed,
            hidden: spec.classifier_hidden,
            num_classes: spec.num_classes,
        })?;
        Ok(Self {
            spec,
            das,
            dps,
            classifier,
        })
    }

    /// Whether the sampler consumes per-frame descriptors.
    pub fn uses_features(&self) -> bool {
        self.das.is_some()
    }

    pub fn init_params(&self, seed: u64) -> Result<ParameterStore> {
        let root = RandomStream::new(seed).derive("init");
        let mut store = ParameterStore::new();
        if let Some(das) = &self.das {
            das.init_params(&mut store, &mut root.derive("das"))?;
        }
        if let Some(dps) = &self.dps {
            dps.init_params(&mut store, &mut root.derive("dps"))?;
        }
        self.classifier
            .init_params(&mut store, &mut root.derive("classifier"))?;
        Ok(store)
    }

    /// Builds the forward graph for one batch. `features` holds the
    /// standardized descriptors `[B, T, d]` (required for DAS only);
    /// `streams` holds one random stream per item.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        seq: &FrameSequence,
        features: Option<&Tensor>,
        streams: &mut [RandomStream],
        mode: SampleMode,
    ) -> Result<Forward> {
        let (b, t) = (seq.batch(), seq.frames());
        if t != self.spec.frames || streams.len() != b {
            return Err(Error::invalid(format!(
                "batch of {b}x{t} frames with {} streams for a model over {} frames",
                streams.len(),
                self.spec.frames
            )));
        }
        let k = self.spec.samples;
        let tau0 = self.spec.tau0;
        let frames = g.constant(seq.data().clone())?;
        let (selected, matrix) = match self.spec.strategy {
            StrategyKind::Full => (frames, full_matrix(b, t, tau0)?),
            StrategyKind::Random | StrategyKind::Uniform => {
                let rows = if self.spec.strategy == StrategyKind::Random {
                    streams
                        .iter_mut()
                        .map(|s| random_indices(t, k, s))
                        .collect::<Result<Vec<_>>>()?
                } else {
                    vec![uniform_indices(t, k)?; b]
                };
                let matrix = SamplingMatrix::from_indices(&rows, t, tau0)?;
                let p = g.constant(matrix.hard.clone())?;
                (apply_sampling(g, p, frames)?, matrix)
            }
            StrategyKind::Dps => {
                let dps = self.dps.as_ref().expect("dps sampler");
                let theta = dps.bind(g, store)?;
                let noise = draw_noise(streams, k, t, mode)?;
                let s = dps.forward(g, theta, b, &noise, Relaxation::StraightThrough)?;
                (apply_sampling(g, s.selection, frames)?, s.matrix(g))
            }
            StrategyKind::Das => {
                let das = self.das.as_ref().expect("das sampler");
                let features = features.ok_or_else(|| Error::invalid("DAS needs frame descriptors"))?;
                if features.shape() != [b, t, NUM_FEATURES] {
                    return Err(Error::Shape {
                        op: "das_forward",
                        lhs: vec![b, t, NUM_FEATURES],
                        rhs: features.shape().to_vec(),
                    });
                }
                let vars = das.bind(g, store)?;
                let f = g.constant(features.clone())?;
                let noise = draw_noise(streams, k, t, mode)?;
                let s = das.forward(g, &vars, f, &noise, Relaxation::StraightThrough)?;
                (apply_sampling(g, s.selection, frames)?, s.matrix(g))
            }
        };
        let vars = self.classifier.bind(g, store)?;
        let logits = self.classifier.forward(g, &vars, selected)?;
        Ok(Forward { logits, matrix })
    }
}
