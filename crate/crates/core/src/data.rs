//! Synthetic frame-sequence datasets with planted informative frames, and
//! the `DASDATA1` on-disk format.
//!
//! ```text
//! b"DASDATA1"
//! u64 LE   header length in bytes
//! [u8]     UTF-8 JSON header: format_version, spec echo, frame shape, item index
//! [f32 LE] per item, at its byte offset into the payload: T_max·C·H·W frame values
//! ```

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::baselines::random_indices;
use crate::error::{Error, Result};
use crate::features::FrameSequence;
use crate::rng::RandomStream;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"DASDATA1";
const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignalKind {
    IntensityLevel,
    OrientedGradient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_items: usize,
    pub num_classes: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub signal_frames: usize,
    pub noise_std: f64,
    pub signal_kind: SignalKind,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_items: 600,
            num_classes: 5,
            t_min: 12,
            t_max: 16,
            channels: 1,
            height: 16,
            width: 16,
            signal_frames: 3,
            noise_std: 0.25,
            signal_kind: SignalKind::IntensityLevel,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if self.t_min == 0 || self.t_min > self.t_max {
            return Err(Error::invalid(format!(
                "sequence lengths need 1 <= t_min <= t_max, got {}..={}",
                self.t_min, self.t_max
            )));
        }
        if self.signal_frames == 0 || self.signal_frames > self.t_min {
            return Err(Error::invalid(format!(
                "signal frames ({}) must be in 1..=t_min ({})",
                self.signal_frames, self.t_min
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 || self.num_items == 0 {
            return Err(Error::invalid("dimensions and item count must be positive"));
        }
        Ok(())
    }

    /// Class-`label` pattern value at pixel `(y, x)`.
    pub fn pattern(&self, label: usize, y: usize, x: usize) -> f64 {
        match self.signal_kind {
            SignalKind::IntensityLevel => (label + 1) as f64 / self.num_classes as f64,
            SignalKind::OrientedGradient => {
                let angle = label as f64 * PI / self.num_classes as f64;
                let (s, c) = angle.sin_cos();
                let u = centered(x, self.width);
                let v = centered(y, self.height);
                0.5 + 0.5 * (u * c + v * s) / (c.abs() + s.abs())
            }
        }
    }
}

/// Maps `0..n` onto `[-1, 1]`.
fn centered(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        2.0 * i as f64 / (n - 1) as f64 - 1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub id: usize,
    pub label: usize,
    pub valid_len: usize,
    pub signal_positions: Vec<usize>,
    pub split: Split,
    /// `[T_max, C, H, W]`, zero past `valid_len`.
    pub frames: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SynthSpec,
    pub items: Vec<Item>,
}

impl Dataset {
    pub fn t_max(&self) -> usize {
        self.spec.t_max
    }

    pub fn frame_dims(&self) -> (usize, usize, usize) {
        (self.spec.channels, self.spec.height, self.spec.width)
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// Item indices belonging to `split`, in id order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.items.len()).filter(|&i| self.items[i].split == split).collect()
    }

    /// Stacks items into a padded `[B, T_max, C, H, W]` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<FrameSequence> {
        let (c, h, w) = self.frame_dims();
        let t = self.t_max();
        let mut data = Vec::with_capacity(indices.len() * t * c * h * w);
        let mut valid = Vec::with_capacity(indices.len());
        for &i in indices {
            let item = self
                .items
                .get(i)
                .ok_or_else(|| Error::invalid(format!("item index {i} out of range")))?;
            data.extend_from_slice(item.frames.data());
            valid.push(item.valid_len);
        }
        FrameSequence::new(Tensor::new(vec![indices.len(), t, c, h, w], data)?, valid)
    }
}

/// Rounds through `f32` so that the dataset survives the on-disk format bit-exactly.
fn as_stored(v: f64) -> f64 {
    v as f32 as f64
}

/// Draws a dataset; deterministic in `spec.seed`.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let root = RandomStream::new(spec.seed);
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let frame_len = c * h * w;
    let noise = Normal::new(0.0, spec.noise_std)
        .map_err(|e| Error::invalid(format!("noise distribution: {e}")))?;

    let mut items = Vec::with_capacity(spec.num_items);
    for id in 0..spec.num_items {
        let mut rng = root.derive("item").derive_index(id as u64);
        let label = id % spec.num_classes;
        let valid_len = spec.t_min + rng.below(spec.t_max - spec.t_min + 1);
        let positions = random_indices(valid_len, spec.signal_frames, &mut rng)?;
        let mut frames = Tensor::zeros(&[spec.t_max, c, h, w]);
        let data = frames.data_mut();
        for t in 0..valid_len {
            let is_signal = positions.binary_search(&t).is_ok();
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let base = if is_signal { spec.pattern(label, y, x) } else { 0.0 };
                        let n = noise.sample(&mut rng);
                        data[t * frame_len + (ch * h + y) * w + x] = as_stored(base + n);
                    }
                }
            }
        }
        items.push(Item {
            id,
            label,
            valid_len,
            signal_positions: positions,
            split: Split::Train,
            frames,
        });
    }
    assign_splits(&mut items, spec.num_classes, &mut root.derive("split"));
    Ok(Dataset {
        spec: spec.clone(),
        items,
    })
}

/// Stratified 70/15/15 split.
fn assign_splits(items: &mut [Item], num_classes: usize, rng: &mut RandomStream) {
    for class in 0..num_classes {
        let mut ids: Vec<usize> = (0..items.len()).filter(|&i| items[i].label == class).collect();
        rng.shuffle(&mut ids);
        let n = ids.len();
        let n_train = (0.70 * n as f64).round() as usize;
        let n_val = (0.15 * n as f64).round() as usize;
        for (rank, &i) in ids.iter().enumerate() {
            items[i].split = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ItemHeader {
    id: usize,
    offset: u64,
    label: usize,
    valid_len: usize,
    signal_positions: Vec<usize>,
    split: Split,
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format_version: u32,
    spec: SynthSpec,
    frame_shape: Vec<usize>,
    items: Vec<ItemHeader>,
}

pub fn dataset_to_bytes(ds: &Dataset) -> Result<Vec<u8>> {
    let (c, h, w) = ds.frame_dims();
    let frame_shape = vec![ds.t_max(), c, h, w];
    let per_item = frame_shape.iter().product::<usize>() * 4;
    let header = DatasetHeader {
        format_version: DATASET_VERSION,
        spec: ds.spec.clone(),
        frame_shape: frame_shape.clone(),
        items: ds
            .items
            .iter()
            .enumerate()
            .map(|(i, it)| ItemHeader {
                id: it.id,
                offset: (i * per_item) as u64,
                label: it.label,
                valid_len: it.valid_len,
                signal_positions: it.signal_positions.clone(),
                split: it.split,
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header.len() + per_item * ds.items.len());
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for it in &ds.items {
        if it.frames.shape() != frame_shape.as_slice() {
            return Err(Error::Shape {
                op: "write_dataset",
                lhs: frame_shape,
                rhs: it.frames.shape().to_vec(),
            });
        }
        for &v in it.frames.data() {
            let f = v as f32;
            if f as f64 != v {
                return Err(Error::invalid(format!(
                    "item {} holds a value not representable as f32",
                    it.id
                )));
            }
            out.extend_from_slice(&f.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 8 || &bytes[..8] != DATASET_MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(DATASET_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(8)]).into_owned(),
        });
    }
    if bytes.len() < 16 {
        return Err(Error::Truncated {
            what: "dataset header length",
            expected: 16,
            actual: bytes.len(),
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .ok_or_else(|| Error::Format("header length overflows".into()))?;
    if bytes.len() < header_end {
        return Err(Error::Truncated {
            what: "dataset header",
            expected: header_end,
            actual: bytes.len(),
        });
    }
    let header: DatasetHeader = serde_json::from_slice(&bytes[16..header_end])?;
    if header.format_version != DATASET_VERSION {
        return Err(Error::Version {
            expected: DATASET_VERSION,
            found: header.format_version,
        });
    }
    let spec = header.spec;
    let frame_shape = header.frame_shape;
    if frame_shape != [spec.t_max, spec.channels, spec.height, spec.width] {
        return Err(Error::Format(format!(
            "frame shape {frame_shape:?} disagrees with the spec echo"
        )));
    }
    let per_item = frame_shape.iter().product::<usize>() * 4;
    let payload = &bytes[header_end..];
    let expected = per_item * header.items.len();
    if payload.len() != expected {
        return Err(Error::Truncated {
            what: "dataset payload",
            expected,
            actual: payload.len(),
        });
    }
    let mut items = Vec::with_capacity(header.items.len());
    for ih in header.items {
        let start = ih.offset as usize;
        if start + per_item > payload.len() {
            return Err(Error::Format(format!("item {} points past the payload", ih.id)));
        }
        if ih.label >= spec.num_classes || ih.valid_len == 0 || ih.valid_len > spec.t_max {
            return Err(Error::Format(format!("item {} has an invalid label or length", ih.id)));
        }
        if ih.signal_positions.iter().any(|&p| p >= ih.valid_len) {
            return Err(Error::Format(format!("item {} has a signal position past its length", ih.id)));
        }
        let data = payload[start..start + per_item]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        items.push(Item {
            id: ih.id,
            label: ih.label,
            valid_len: ih.valid_len,
            signal_positions: ih.signal_positions,
            split: ih.split,
            frames: Tensor::new(frame_shape.clone(), data)?,
        });
    }
    Ok(Dataset { spec, items })
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let bytes = dataset_to_bytes(ds)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    dataset_from_bytes(&bytes)
}
