//! Non-learned per-frame descriptors: spatial variance, Sobel/Laplacian edge
//! energy, and mean intensity, followed by per-channel standardization over
//! the valid (non-padding) frames of a batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_FEATURES: usize = 6;

pub const CHANNEL_MAP: [&str; NUM_FEATURES] = [
    "variance",
    "sobel_x",
    "sobel_y",
    "laplacian_4",
    "laplacian_8",
    "intensity_mean",
];

pub const STD_FLOOR: f64 = 1e-8;

type Kernel = [[f64; 3]; 3];

pub const SOBEL_X: Kernel = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
pub const SOBEL_Y: Kernel = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
pub const LAPLACIAN_4: Kernel = [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]];
pub const LAPLACIAN_8: Kernel = [[1.0, 1.0, 1.0], [1.0, -8.0, 1.0], [1.0, 1.0, 1.0]];
pub const EDGE_KERNELS: [Kernel; 4] = [SOBEL_X, SOBEL_Y, LAPLACIAN_4, LAPLACIAN_8];

/// A padded batch of frame stacks, `[B, T, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    data: Tensor,
    valid_len: Vec<usize>,
}

impl FrameSequence {
    pub fn new(data: Tensor, valid_len: Vec<usize>) -> Result<Self> {
        let shape = data.shape();
        if shape.len() != 5 {
            return Err(Error::invalid(format!(
                "frame sequence must be [B, T, C, H, W], got {shape:?}"
            )));
        }
        let (b, t) = (shape[0], shape[1]);
        if valid_len.len() != b {
            return Err(Error::invalid(format!(
                "{} valid lengths for a batch of {b}",
                valid_len.len()
            )));
        }
        if shape[2] * shape[3] * shape[4] == 0 {
            return Err(Error::invalid("frames must have at least one value"));
        }
        let frame = shape[2] * shape[3] * shape[4];
        for (bi, &len) in valid_len.iter().enumerate() {
            if len == 0 || len > t {
                return Err(Error::invalid(format!(
                    "valid length {len} of item {bi} outside 1..={t}"
                )));
            }
            let pad = &data.data()[(bi * t + len) * frame..(bi + 1) * t * frame];
            if pad.iter().any(|&v| v != 0.0) {
                return Err(Error::invalid(format!("padding frames of item {bi} are not empty")));
            }
        }
        Ok(Self { data, valid_len })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn valid_len(&self) -> &[usize] {
        &self.valid_len
    }

    pub fn batch(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[1]
    }

    /// `(C, H, W)`.
    pub fn frame_dims(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[2], s[3], s[4])
    }

    pub fn frame_len(&self) -> usize {
        let (c, h, w) = self.frame_dims();
        c * h * w
    }

    pub fn frame(&self, b: usize, t: usize) -> &[f64] {
        let n = self.frame_len();
        let off = (b * self.frames() + t) * n;
        &self.data.data()[off..off + n]
    }
}

/// Per-frame descriptors `[B, T, d]` with their channel labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTensor {
    pub data: Tensor,
    pub channels: Vec<String>,
}

fn population_variance(values: &[f64]) -> f64 {
    let mean = shifted_mean(values.iter().copied());
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64
}

/// Mean computed relative to the first value, so a constant sequence yields
/// that constant exactly.
fn shifted_mean(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let mut it = values.clone();
    let Some(first) = it.next() else { return 0.0 };
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + (v - first), n + 1));
    first + sum / n as f64
}

/// Population variance of each frame over `(C, H, W)`; `[B, T]`.
pub fn frame_variance(seq: &FrameSequence) -> Tensor {
    let (b, t) = (seq.batch(), seq.frames());
    Tensor::from_fn(&[b, t], |i| population_variance(seq.frame(i / t, i % t)))
}

fn check_edge_dims(seq: &FrameSequence) -> Result<()> {
    let (_, h, w) = seq.frame_dims();
    if h < 3 || w < 3 {
        return Err(Error::invalid(format!(
            "edge features need frames of at least 3x3, got {h}x{w}"
        )));
    }
    Ok(())
}

/// Mean absolute response of each kernel over channels and "valid" positions.
fn frame_edges(frame: &[f64], c: usize, h: usize, w: usize) -> [f64; 4] {
    let mut acc = [0.0; 4];
    for ch in 0..c {
        let img = &frame[ch * h * w..(ch + 1) * h * w];
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                for (k, kernel) in EDGE_KERNELS.iter().enumerate() {
                    let mut r = 0.0;
                    for (dy, row) in kernel.iter().enumerate() {
                        for (dx, &kv) in row.iter().enumerate() {
                            r += kv * img[(y + dy - 1) * w + (x + dx - 1)];
                        }
                    }
                    acc[k] += r.abs();
                }
            }
        }
    }
    let n = (c * (h - 2) * (w - 2)) as f64;
    acc.map(|v| v / n)
}

/// Sobel-x, Sobel-y, 4- and 8-neighbour Laplacian magnitudes; `[B, T, 4]`.
pub fn edge_features(seq: &FrameSequence) -> Result<Tensor> {
    check_edge_dims(seq)?;
    let (b, t) = (seq.batch(), seq.frames());
    let (c, h, w) = seq.frame_dims();
    let mut data = Vec::with_capacity(b * t * 4);
    for bi in 0..b {
        for ti in 0..t {
            data.extend_from_slice(&frame_edges(seq.frame(bi, ti), c, h, w));
        }
    }
    Tensor::new(vec![b, t, 4], data)
}

/// All six descriptors of one frame, unstandardized.
pub fn frame_descriptor(frame: &[f64], c: usize, h: usize, w: usize) -> [f64; NUM_FEATURES] {
    let e = frame_edges(frame, c, h, w);
    let mean = frame.iter().sum::<f64>() / frame.len() as f64;
    [population_variance(frame), e[0], e[1], e[2], e[3], mean]
}

/// Unstandardized descriptors `[B, T, 6]`.
pub fn raw_features(seq: &FrameSequence) -> Result<Tensor> {
    check_edge_dims(seq)?;
    let (b, t) = (seq.batch(), seq.frames());
    let (c, h, w) = seq.frame_dims();
    let mut data = Vec::with_capacity(b * t * NUM_FEATURES);
    for bi in 0..b {
        for ti in 0..t {
            data.extend_from_slice(&frame_descriptor(seq.frame(bi, ti), c, h, w));
        }
    }
    Tensor::new(vec![b, t, NUM_FEATURES], data)
}

/// Per-channel location/scale used for standardization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    /// Statistics over the valid frames of a raw `[B, T, d]` tensor.
    pub fn from_valid(raw: &Tensor, valid_len: &[usize]) -> Result<Self> {
        let shape = raw.shape();
        if shape.len() != 3 || shape[0] != valid_len.len() {
            return Err(Error::invalid(format!(
                "feature statistics need [B, T, d] with B = {}, got {shape:?}",
                valid_len.len()
            )));
        }
        let (t, d) = (shape[1], shape[2]);
        let column = |k: usize| {
            valid_len
                .iter()
                .enumerate()
                .flat_map(move |(b, &len)| (0..len).map(move |ti| raw.data()[(b * t + ti) * d + k]))
        };
        let mut mean = Vec::with_capacity(d);
        let mut std = Vec::with_capacity(d);
        for k in 0..d {
            let m = shifted_mean(column(k));
            let n = column(k).count() as f64;
            let var = column(k).map(|v| (v - m).powi(2)).sum::<f64>() / n;
            mean.push(m);
            std.push(var.sqrt().max(STD_FLOOR));
        }
        Ok(Self { mean, std })
    }

    /// Standardizes every frame (padding included) of a raw `[B, T, d]` tensor.
    pub fn apply(&self, raw: &Tensor) -> Result<Tensor> {
        let d = *raw.shape().last().unwrap_or(&0);
        if d != self.mean.len() {
            return Err(Error::Shape {
                op: "standardize",
                lhs: raw.shape().to_vec(),
                rhs: vec![self.mean.len()],
            });
        }
        let data = raw
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % d]) / self.std[i % d])
            .collect();
        Tensor::new(raw.shape().to_vec(), data)
    }
}

/// Exponential moving average of batch statistics for inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub momentum: f64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub updates: u64,
}

impl RunningStats {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            mean: vec![0.0; NUM_FEATURES],
            var: vec![1.0; NUM_FEATURES],
            updates: 0,
        }
    }

    pub fn update(&mut self, batch: &FeatureStats) {
        let m = if self.updates == 0 { 1.0 } else { self.momentum };
        for k in 0..self.mean.len() {
            self.mean[k] = (1.0 - m) * self.mean[k] + m * batch.mean[k];
            self.var[k] = (1.0 - m) * self.var[k] + m * batch.std[k] * batch.std[k];
        }
        self.updates += 1;
    }

    pub fn stats(&self) -> FeatureStats {
        FeatureStats {
            mean: self.mean.clone(),
            std: self.var.iter().map(|v| v.sqrt().max(STD_FLOOR)).collect(),
        }
    }
}

impl Default for RunningStats {
    fn default() -> Self {
        Self::new(0.1)
    }
}

/// Raw descriptors standardized with the batch's own valid-frame statistics.
pub fn build_features(seq: &FrameSequence) -> Result<FeatureTensor> {
    let raw = raw_features(seq)?;
    let stats = FeatureStats::from_valid(&raw, seq.valid_len())?;
    Ok(FeatureTensor {
        data: stats.apply(&raw)?,
        channels: CHANNEL_MAP.iter().map(|s| s.to_string()).collect(),
    })
}
