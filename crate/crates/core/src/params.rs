//! Named trainable tensors with gradient buffers, Adam state, and the
//! `DASCKPT1` checkpoint format.
//!
//! Checkpoint layout:
//!
//! ```text
//! b"DASCKPT1"
//! u64 LE   header length in bytes
//! [u8]     UTF-8 JSON header: {"format_version", "entries": [{name, shape, offset, step}], "meta"}
//! [f64 LE] per entry, at `offset` bytes into the payload: value, grad, adam-m, adam-v
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DASCKPT1";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub value: Tensor,
    pub grad: Tensor,
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

impl ParamEntry {
    fn new(value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Self {
            value,
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            step: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    entries: BTreeMap<String, ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    entries: Vec<HeaderEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter name {name:?}")));
        }
        if !value.is_finite() {
            return Err(Error::fault(format!("initial value of {name:?} is not finite")));
        }
        self.entries.insert(name.to_string(), ParamEntry::new(value));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total count of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))?;
        if entry.grad.shape() != grad.shape() {
            return Err(Error::Shape {
                op: "accumulate_grad",
                lhs: entry.grad.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        for (a, g) in entry.grad.data_mut().iter_mut().zip(grad.data()) {
            *a += g;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().fill(0.0);
        }
    }

    /// Copies only parameter values from `other` (same names and shapes required).
    pub fn copy_values_from(&mut self, other: &ParameterStore) -> Result<()> {
        for (name, e) in self.entries.iter_mut() {
            let src = other
                .value(name)
                .ok_or_else(|| Error::invalid(format!("missing parameter {name:?}")))?;
            if src.shape() != e.value.shape() {
                return Err(Error::Shape {
                    op: "copy_values_from",
                    lhs: e.value.shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            e.value = src.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self, meta: &serde_json::Value) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.entries.len());
        let mut offset = 0u64;
        for (name, e) in &self.entries {
            entries.push(HeaderEntry {
                name: name.clone(),
                shape: e.value.shape().to_vec(),
                offset,
                step: e.step,
            });
            offset += 4 * 8 * e.value.len() as u64;
        }
        let header = serde_json::to_vec(&Header {
            format_version: CHECKPOINT_VERSION,
            entries,
            meta: meta.clone(),
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for e in self.entries.values() {
            for t in [&e.value, &e.grad, &e.m, &e.v] {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, serde_json::Value)> {
        if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
                found: String::from_utf8_lossy(&bytes[..bytes.len().min(8)]).into_owned(),
            });
        }
        if bytes.len() < 16 {
            return Err(Error::Truncated {
                what: "checkpoint header length",
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
                what: "checkpoint header",
                expected: header_end,
                actual: bytes.len(),
            });
        }
        let header: Header = serde_json::from_slice(&bytes[16..header_end])?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                expected: CHECKPOINT_VERSION,
                found: header.format_version,
            });
        }
        let payload = &bytes[header_end..];
        let expected: usize = header
            .entries
            .iter()
            .map(|e| 4 * 8 * e.shape.iter().product::<usize>())
            .sum();
        if payload.len() != expected {
            return Err(Error::Truncated {
                what: "checkpoint payload",
                expected,
                actual: payload.len(),
            });
        }
        let mut store = ParameterStore::new();
        for e in header.entries {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            if start + 32 * n > payload.len() {
                return Err(Error::Format(format!("entry {:?} points past the payload", e.name)));
            }
            let read = |k: usize| -> Result<Tensor> {
                let base = start + k * 8 * n;
                let data = payload[base..base + 8 * n]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Tensor::new(e.shape.clone(), data)
            };
            let entry = ParamEntry {
                value: read(0)?,
                grad: read(1)?,
                m: read(2)?,
                v: read(3)?,
                step: e.step,
            };
            if store.entries.insert(e.name.clone(), entry).is_some() {
                return Err(Error::Format(format!("duplicate entry {:?}", e.name)));
            }
        }
        Ok((store, header.meta))
    }

    pub fn save(&self, path: &Path, meta: &serde_json::Value) -> Result<()> {
        let bytes = self.to_bytes(meta)?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// One bias-corrected Adam update over every entry, then zeroes the gradients.
///
/// All gradients are validated before anything is modified, so a fault
/// leaves the store untouched.
pub fn adam_step(store: &mut ParameterStore, cfg: AdamConfig) -> Result<()> {
    for (name, e) in &store.entries {
        if !e.grad.is_finite() {
            return Err(Error::fault(format!("non-finite gradient for parameter {name:?}")));
        }
    }
    for (name, e) in store.entries.iter_mut() {
        e.step += 1;
        let t = e.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let ParamEntry { value, grad, m, v, .. } = e;
        for (((p, g), m), v) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data_mut().iter_mut())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * *g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * *g * *g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            *g = 0.0;
        }
        if !e.value.is_finite() {
            return Err(Error::fault(format!("parameter {name:?} became non-finite")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_store(v: f64) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("theta", Tensor::from_vec(vec![v])).unwrap();
        s
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = scalar_store(1.0);
        assert!(s.insert("theta", Tensor::scalar(0.0)).is_err());
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut s = scalar_store(0.25);
        adam_step(&mut s, AdamConfig::with_lr(1e-3)).unwrap();
        let e = s.get("theta").unwrap();
        assert_eq!(e.value.data(), &[0.25]);
        assert_eq!(e.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m1 = 0.1, v1 = 0.001; m̂ = 1, v̂ = 1 → Δθ = -lr / (1 + 1e-8)
        let mut s = scalar_store(0.0);
        s.accumulate_grad("theta", &Tensor::from_vec(vec![1.0])).unwrap();
        adam_step(&mut s, AdamConfig { lr: 0.001, beta1: 0.9, beta2: 0.999, eps: 1e-8 }).unwrap();
        let delta = s.value("theta").unwrap().data()[0];
        assert!((delta + 0.001 / (1.0 + 1e-8)).abs() < 1e-15, "{delta}");
        assert_eq!(s.get("theta").unwrap().grad.data(), &[0.0]);
    }

    #[test]
    fn constant_gradient_moves_monotonically() {
        let mut s = scalar_store(1.0);
        let mut prev = 1.0;
        for _ in 0..2 {
            s.accumulate_grad("theta", &Tensor::from_vec(vec![-0.3])).unwrap();
            adam_step(&mut s, AdamConfig::with_lr(0.01)).unwrap();
            let now = s.value("theta").unwrap().data()[0];
            assert!(now > prev);
            prev = now;
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = scalar_store(1.0);
        s.insert("other", Tensor::from_vec(vec![2.0])).unwrap();
        s.accumulate_grad("theta", &Tensor::from_vec(vec![f64::NAN])).unwrap();
        let err = adam_step(&mut s, AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("theta"), "{err}");
        assert_eq!(s.get("other").unwrap().step, 0);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut s = scalar_store(0.75);
        s.accumulate_grad("theta", &Tensor::from_vec(vec![5.0])).unwrap();
        adam_step(&mut s, AdamConfig::with_lr(0.0)).unwrap();
        assert_eq!(s.value("theta").unwrap().data(), &[0.75]);
    }

    #[test]
    fn corrupted_checkpoints_are_rejected() {
        let s = scalar_store(1.5);
        let bytes = s.to_bytes(&serde_json::json!({"k": 1})).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ParameterStore::from_bytes(&bad).unwrap_err().to_string().contains("bad magic"));
        let cut = &bytes[..bytes.len() - 3];
        let msg = ParameterStore::from_bytes(cut).unwrap_err().to_string();
        assert!(msg.contains("expected 32") && msg.contains("found 29"), "{msg}");
    }

    proptest! {
        #[test]
        fn checkpoint_round_trips_bit_exactly(
            vals in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::ZERO, 1..24),
            step in 0u64..1000,
        ) {
            let mut s = ParameterStore::new();
            let n = vals.len();
            s.insert("a.w", Tensor::new(vec![n], vals.clone()).unwrap()).unwrap();
            s.insert("b", Tensor::new(vec![1, n], vals.iter().map(|v| -v).collect()).unwrap()).unwrap();
            s.accumulate_grad("a.w", &Tensor::new(vec![n], vals.clone()).unwrap()).unwrap();
            s.entries.get_mut("b").unwrap().step = step;
            s.entries.get_mut("b").unwrap().m = Tensor::new(vec![1, n], vals.clone()).unwrap();
            let meta = serde_json::json!({"strategy": "das"});
            let bytes = s.to_bytes(&meta).unwrap();
            let (back, meta_back) = ParameterStore::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&meta_back, &meta);
            for (name, e) in s.iter() {
                let b = back.get(name).unwrap();
                prop_assert_eq!(e.step, b.step);
                for (x, y) in [(&e.value, &b.value), (&e.grad, &b.grad), (&e.m, &b.m), (&e.v, &b.v)] {
                    prop_assert_eq!(x.shape(), y.shape());
                    let xb: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
                    let yb: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
                    prop_assert_eq!(xb, yb);
                }
            }
            prop_assert_eq!(back.to_bytes(&meta).unwrap(), bytes);
        }
    }
}
