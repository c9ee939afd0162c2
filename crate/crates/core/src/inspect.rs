//! Sampling-matrix dumps and a duplicate-selection report.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::sampler::{SampleMode, SamplingRecord};
use crate::train::Checkpoint;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DuplicateReport {
    pub items: usize,
    pub slots_per_item: usize,
    /// Slots that repeat a frame already chosen by an earlier slot of the same item.
    pub duplicate_slots: usize,
    pub items_with_duplicates: usize,
    pub signal_hit_rate: f64,
}

impl DuplicateReport {
    pub fn duplicate_fraction(&self) -> f64 {
        self.duplicate_slots as f64 / (self.items * self.slots_per_item).max(1) as f64
    }
}

/// Evaluates `split` and writes one JSON line per item to `out`.
pub fn inspect(
    ckpt: &Checkpoint,
    ds: &Dataset,
    split: Split,
    mode: SampleMode,
    out: &Path,
) -> Result<DuplicateReport> {
    let (eval, summary) = ckpt.evaluate(ds, split, mode)?;
    let mut records: Vec<SamplingRecord> = Vec::with_capacity(eval.item_ids.len());
    let mut duplicates = Vec::with_capacity(eval.item_ids.len());
    let mut offset = 0;
    for m in &eval.matrices {
        let (b, _, _) = m.dims();
        let ids: Vec<usize> = eval.item_ids[offset..offset + b]
            .iter()
            .map(|&i| ds.items[i].id)
            .collect();
        records.extend(m.records(&ids));
        duplicates.extend(m.duplicate_counts());
        offset += b;
    }
    let file = fs::File::create(out).map_err(|e| Error::io(out, e))?;
    let mut w = BufWriter::new(file);
    for r in &records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(out, e))?;
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    Ok(DuplicateReport {
        items: records.len(),
        slots_per_item: ckpt.model.spec.slots(),
        duplicate_slots: duplicates.iter().sum(),
        items_with_duplicates: duplicates.iter().filter(|&&d| d > 0).count(),
        signal_hit_rate: summary.signal_hit_rate,
    })
}
