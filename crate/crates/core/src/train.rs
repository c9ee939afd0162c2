//! Training with early stopping, evaluation, checkpoints, and the
//! multi-strategy comparison harness.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_tensor, Graph};
use crate::baselines::StrategyKind;
use crate::classifier::cross_entropy;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::features::{raw_features, FeatureStats, RunningStats};
use crate::metrics::{argmax_rows, balanced_accuracy, macro_auc, signal_hit_rate};
use crate::model::{Model, ModelSpec};
use crate::params::{adam_step, AdamConfig, ParameterStore};
use crate::rng::RandomStream;
use crate::sampler::{SampleMode, SamplingMatrix};
use crate::tensor::Tensor;

/// Environment variable capping the comparison worker pool (0 or unset = auto).
pub const THREADS_ENV: &str = "DAS_NUM_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub strategy: StrategyKind,
    pub sample_ratio: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub tau0: f64,
    pub heads: usize,
    pub sampler_hidden: usize,
    pub embed: usize,
    pub classifier_hidden: usize,
    pub seeds: Vec<u64>,
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
    pub deterministic_eval: bool,
    /// Write elapsed milliseconds into metrics rows; off keeps CSVs reproducible.
    pub record_wall_time: bool,
    /// Strategies trained by `compare`.
    pub compare_strategies: Vec<StrategyKind>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            strategy: StrategyKind::Das,
            sample_ratio: 0.5,
            lr: 1e-4,
            batch_size: 16,
            max_epochs: 200,
            patience: 10,
            tau0: 1.0,
            heads: 4,
            sampler_hidden: 16,
            embed: 32,
            classifier_hidden: 32,
            seeds: vec![0, 1, 2],
            dataset: PathBuf::from("data/synth.dasdata"),
            output_dir: PathBuf::from("runs"),
            deterministic_eval: false,
            record_wall_time: false,
            compare_strategies: StrategyKind::ALL.to_vec(),
        }
    }
}

impl RunConfig {
    /// Parses a JSON config; unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_ratio > 0.0 && self.sample_ratio <= 1.0) {
            return Err(Error::invalid(format!(
                "sample_ratio must be in (0, 1], got {}",
                self.sample_ratio
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(self.tau0 > 0.0 && self.tau0.is_finite()) {
            return Err(Error::invalid(format!("tau0 must be positive, got {}", self.tau0)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::invalid("batch_size and max_epochs must be positive"));
        }
        if self.heads == 0 || self.sampler_hidden == 0 || self.embed == 0 || self.classifier_hidden == 0 {
            return Err(Error::invalid("heads and hidden widths must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("at least one seed is required"));
        }
        if self.compare_strategies.is_empty() {
            return Err(Error::invalid("compare_strategies must not be empty"));
        }
        Ok(())
    }

    /// `k = max(1, round(ratio · T_max))`.
    pub fn samples(&self, t_max: usize) -> usize {
        ((self.sample_ratio * t_max as f64).round() as usize).clamp(1, t_max)
    }

    pub fn model_spec(&self, strategy: StrategyKind, ds: &Dataset) -> ModelSpec {
        let (c, h, w) = ds.frame_dims();
        let t = ds.t_max();
        ModelSpec {
            strategy,
            frames: t,
            samples: self.samples(t),
            channels: c,
            height: h,
            width: w,
            num_classes: ds.num_classes(),
            heads: self.heads,
            sampler_hidden: self.sampler_hidden,
            tau0: self.tau0,
            embed: self.embed,
            classifier_hidden: self.classifier_hidden,
        }
    }

    fn eval_mode(&self) -> SampleMode {
        SampleMode::Eval {
            deterministic: self.deterministic_eval,
        }
    }
}

/// One metrics CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub strategy: StrategyKind,
    pub seed: u64,
    pub split: Split,
    pub epoch: usize,
    pub loss: f64,
    pub balanced_accuracy: f64,
    pub macro_auc: f64,
    pub signal_hit_rate: f64,
    pub wall_time_ms: u64,
}

/// Patience-based stopping on a loss that should decrease.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best_loss: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records the loss of `epoch` (1-based); returns whether it is a new best.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best_loss {
            self.best_loss = loss;
            self.best_epoch = epoch;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale > 0 && self.stale >= self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best_loss
    }
}

/// Data with per-item raw descriptors cached (only when the model needs them).
pub struct Prepared<'a> {
    pub ds: &'a Dataset,
    raw: Option<Vec<Tensor>>,
}

impl<'a> Prepared<'a> {
    pub fn new(ds: &'a Dataset, with_features: bool) -> Result<Self> {
        let raw = if with_features {
            Some(
                (0..ds.items.len())
                    .map(|i| raw_features(&ds.batch(&[i])?))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(Self { ds, raw })
    }

    fn raw_batch(&self, indices: &[usize]) -> Option<Tensor> {
        let raw = self.raw.as_ref()?;
        let row = raw[indices[0]].shape().to_vec();
        let data = indices.iter().flat_map(|&i| raw[i].data().iter().copied()).collect();
        Some(Tensor::new(vec![indices.len(), row[1], row[2]], data).expect("stacked descriptors"))
    }
}

/// Predictions and diagnostics for one pass over a set of items.
#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub item_ids: Vec<usize>,
    pub loss: f64,
    pub preds: Vec<usize>,
    /// Row-major class probabilities `[N, num_classes]`.
    pub probs: Vec<f64>,
    pub selected: Vec<Vec<usize>>,
    pub matrices: Vec<SamplingMatrix>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub loss: f64,
    pub balanced_accuracy: f64,
    pub macro_auc: f64,
    pub signal_hit_rate: f64,
}

impl EvalOutput {
    pub fn summarize(&self, ds: &Dataset) -> Result<Summary> {
        let truth: Vec<usize> = self.item_ids.iter().map(|&i| ds.items[i].label).collect();
        let signal: Vec<Vec<usize>> = self
            .item_ids
            .iter()
            .map(|&i| ds.items[i].signal_positions.clone())
            .collect();
        Ok(Summary {
            loss: self.loss,
            balanced_accuracy: balanced_accuracy(&self.preds, &truth, ds.num_classes())?,
            macro_auc: macro_auc(&self.probs, &truth, ds.num_classes())?,
            signal_hit_rate: signal_hit_rate(&self.selected, &signal)?,
        })
    }
}

fn item_streams(root: &RandomStream, ds: &Dataset, indices: &[usize]) -> Vec<RandomStream> {
    indices
        .iter()
        .map(|&i| root.derive_index(ds.items[i].id as u64))
        .collect()
}

/// Forward-only pass over `indices` with the given standardization.
pub fn evaluate(
    model: &Model,
    store: &ParameterStore,
    stats: Option<&FeatureStats>,
    data: &Prepared,
    indices: &[usize],
    batch_size: usize,
    mode: SampleMode,
    noise_root: &RandomStream,
) -> Result<EvalOutput> {
    let ds = data.ds;
    let mut out = EvalOutput {
        item_ids: indices.to_vec(),
        loss: 0.0,
        preds: Vec::with_capacity(indices.len()),
        probs: Vec::with_capacity(indices.len() * ds.num_classes()),
        selected: Vec::with_capacity(indices.len()),
        matrices: Vec::new(),
    };
    if indices.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    for chunk in indices.chunks(batch_size.max(1)) {
        let seq = ds.batch(chunk)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| ds.items[i].label).collect();
        let features = match (data.raw_batch(chunk), stats) {
            (Some(raw), Some(stats)) => Some(stats.apply(&raw)?),
            (Some(raw), None) => Some(FeatureStats::from_valid(&raw, seq.valid_len())?.apply(&raw)?),
            (None, _) => None,
        };
        let mut streams = item_streams(noise_root, ds, chunk);
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, store, &seq, features.as_ref(), &mut streams, mode)?;
        let loss = cross_entropy(&mut g, fwd.logits, &labels)?;
        out.loss += g.value(loss).data()[0] * chunk.len() as f64;
        let probs = softmax_tensor(g.value(fwd.logits), 1);
        out.preds.extend(argmax_rows(probs.data(), ds.num_classes()));
        out.probs.extend_from_slice(probs.data());
        out.selected.extend(fwd.matrix.selected_indices());
        out.matrices.push(fwd.matrix);
    }
    out.loss /= indices.len() as f64;
    Ok(out)
}

/// Result of training one strategy with one seed.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub spec: ModelSpec,
    pub seed: u64,
    pub store: ParameterStore,
    pub running: Option<RunningStats>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub records: Vec<MetricsRecord>,
    pub test: Summary,
}

impl RunOutcome {
    pub fn checkpoint_meta(&self, cfg: &RunConfig) -> Result<serde_json::Value> {
        Ok(serde_json::json!({
            "model": self.spec,
            "seed": self.seed,
            "best_epoch": self.best_epoch,
            "running_stats": self.running,
            "config": cfg,
        }))
    }

    pub fn save_checkpoint(&self, cfg: &RunConfig, path: &Path) -> Result<()> {
        self.store.save(path, &self.checkpoint_meta(cfg)?)
    }
}

/// A restored checkpoint.
pub struct Checkpoint {
    pub model: Model,
    pub store: ParameterStore,
    pub running: Option<RunningStats>,
    pub seed: u64,
    pub config: RunConfig,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (store, meta) = ParameterStore::load(path)?;
    let field = |name: &str| {
        meta.get(name)
            .cloned()
            .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks {name:?}")))
    };
    let spec: ModelSpec = serde_json::from_value(field("model")?)?;
    let running: Option<RunningStats> = serde_json::from_value(field("running_stats")?)?;
    let seed: u64 = serde_json::from_value(field("seed")?)?;
    let config: RunConfig = serde_json::from_value(field("config")?)?;
    let model = Model::new(spec)?;
    Ok(Checkpoint {
        model,
        store,
        running,
        seed,
        config,
    })
}

impl Checkpoint {
    /// Evaluates `split` of `ds` the way training evaluated it.
    pub fn evaluate(&self, ds: &Dataset, split: Split, mode: SampleMode) -> Result<(EvalOutput, Summary)> {
        let spec = &self.model.spec;
        if ds.t_max() != spec.frames
            || ds.frame_dims() != (spec.channels, spec.height, spec.width)
            || ds.num_classes() != spec.num_classes
        {
            return Err(Error::invalid(
                "dataset shape or class count does not match the checkpoint",
            ));
        }
        let data = Prepared::new(ds, self.model.uses_features())?;
        let stats = self.running.as_ref().map(RunningStats::stats);
        let indices = ds.split_indices(split);
        let root = RandomStream::new(self.seed).derive("eval");
        let out = evaluate(
            &self.model,
            &self.store,
            stats.as_ref(),
            &data,
            &indices,
            self.config.batch_size,
            mode,
            &root,
        )?;
        let summary = out.summarize(ds)?;
        Ok((out, summary))
    }
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

fn record(strategy: StrategyKind, seed: u64, split: Split, epoch: usize, s: &Summary, wall: u64) -> MetricsRecord {
    MetricsRecord {
        strategy,
        seed,
        split,
        epoch,
        loss: round6(s.loss),
        balanced_accuracy: round6(s.balanced_accuracy),
        macro_auc: round6(s.macro_auc),
        signal_hit_rate: round6(s.signal_hit_rate),
        wall_time_ms: wall,
    }
}

/// Trains `strategy` on the train split with early stopping on validation
/// loss, restores the best epoch, and evaluates the test split.
pub fn train_run(cfg: &RunConfig, strategy: StrategyKind, seed: u64, data: &Prepared) -> Result<RunOutcome> {
    cfg.validate()?;
    let ds = data.ds;
    let spec = cfg.model_spec(strategy, ds);
    let model = Model::new(spec.clone())?;
    if model.uses_features() && data.raw.is_none() {
        return Err(Error::invalid("DAS training needs cached frame descriptors"));
    }
    let started = Instant::now();
    let wall = || {
        if cfg.record_wall_time {
            started.elapsed().as_millis() as u64
        } else {
            0
        }
    };

    let root = RandomStream::new(seed);
    let eval_root = root.derive("eval");
    let mut store = model.init_params(seed)?;
    let mut running = model.uses_features().then(RunningStats::default);
    let adam = AdamConfig::with_lr(cfg.lr);
    let train_ix = ds.split_indices(Split::Train);
    let val_ix = ds.split_indices(Split::Val);
    let test_ix = ds.split_indices(Split::Test);
    if train_ix.is_empty() || val_ix.is_empty() || test_ix.is_empty() {
        return Err(Error::invalid("every split needs at least one item"));
    }

    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = (store.clone(), running.clone());
    let mut records = Vec::new();
    let mut epochs_run = 0;
    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        let mut order = train_ix.clone();
        root.derive("shuffle").derive_index(epoch as u64).shuffle(&mut order);
        let noise_root = root.derive("train").derive_index(epoch as u64);
        let mut train_out = EvalOutput {
            item_ids: Vec::with_capacity(order.len()),
            loss: 0.0,
            preds: Vec::new(),
            probs: Vec::new(),
            selected: Vec::new(),
            matrices: Vec::new(),
        };
        for chunk in order.chunks(cfg.batch_size) {
            let seq = ds.batch(chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| ds.items[i].label).collect();
            let features = match (data.raw_batch(chunk), running.as_mut()) {
                (Some(raw), Some(running)) => {
                    let stats = FeatureStats::from_valid(&raw, seq.valid_len())?;
                    running.update(&stats);
                    Some(stats.apply(&raw)?)
                }
                _ => None,
            };
            let mut streams = item_streams(&noise_root, ds, chunk);
            let mut g = Graph::new();
            let fwd = model.forward(&mut g, &store, &seq, features.as_ref(), &mut streams, SampleMode::Train)?;
            let loss = cross_entropy(&mut g, fwd.logits, &labels)?;
            let grads = g.backward(loss)?;
            g.accumulate_param_grads(&grads, &mut store)?;
            adam_step(&mut store, adam)?;

            train_out.item_ids.extend_from_slice(chunk);
            train_out.loss += g.value(loss).data()[0] * chunk.len() as f64;
            let probs = softmax_tensor(g.value(fwd.logits), 1);
            train_out.preds.extend(argmax_rows(probs.data(), ds.num_classes()));
            train_out.probs.extend_from_slice(probs.data());
            train_out.selected.extend(fwd.matrix.selected_indices());
        }
        train_out.loss /= order.len() as f64;
        let train_summary = train_out.summarize(ds)?;
        records.push(record(strategy, seed, Split::Train, epoch, &train_summary, wall()));

        let stats = running.as_ref().map(RunningStats::stats);
        let val = evaluate(&model, &store, stats.as_ref(), data, &val_ix, cfg.batch_size, cfg.eval_mode(), &eval_root)?;
        let val_summary = val.summarize(ds)?;
        records.push(record(strategy, seed, Split::Val, epoch, &val_summary, wall()));
        log::debug!(
            "{strategy} seed {seed} epoch {epoch}: train loss {:.4}, val loss {:.4}, val bacc {:.3}",
            train_summary.loss,
            val_summary.loss,
            val_summary.balanced_accuracy
        );

        if stopper.observe(epoch, val_summary.loss) {
            best = (store.clone(), running.clone());
        }
        if stopper.should_stop() {
            break;
        }
    }
    let (store, running) = best;
    let stats = running.as_ref().map(RunningStats::stats);
    let test = evaluate(&model, &store, stats.as_ref(), data, &test_ix, cfg.batch_size, cfg.eval_mode(), &eval_root)?;
    let test = test.summarize(ds)?;
    records.push(record(strategy, seed, Split::Test, stopper.best_epoch(), &test, wall()));
    log::info!(
        "{strategy} seed {seed}: best epoch {} of {epochs_run}, test bacc {:.3}, auc {:.3}, hit rate {:.3}",
        stopper.best_epoch(),
        test.balanced_accuracy,
        test.macro_auc,
        test.signal_hit_rate
    );
    Ok(RunOutcome {
        spec,
        seed,
        store,
        running,
        best_epoch: stopper.best_epoch(),
        epochs_run,
        records,
        test,
    })
}

pub fn write_metrics_csv(records: &[MetricsRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!("checked io kind"),
        }
    } else {
        Error::Csv(e)
    }
}

/// Trains `cfg.strategy` once per seed, writing `<strategy>-seed<N>.ckpt`
/// files and `metrics.csv` into the output directory.
pub fn run_training(cfg: &RunConfig, ds: &Dataset) -> Result<Vec<RunOutcome>> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let data = Prepared::new(ds, cfg.strategy == StrategyKind::Das)?;
    let mut outcomes = Vec::new();
    for &seed in &cfg.seeds {
        let out = train_run(cfg, cfg.strategy, seed, &data)?;
        out.save_checkpoint(cfg, &checkpoint_path(cfg, cfg.strategy, seed))?;
        outcomes.push(out);
    }
    let records: Vec<MetricsRecord> = outcomes.iter().flat_map(|o| o.records.clone()).collect();
    write_metrics_csv(&records, &cfg.output_dir.join("metrics.csv"))?;
    Ok(outcomes)
}

pub fn checkpoint_path(cfg: &RunConfig, strategy: StrategyKind, seed: u64) -> PathBuf {
    cfg.output_dir.join(format!("{strategy}-seed{seed}.ckpt"))
}

pub const COMPARISON_METRICS: [&str; 3] = ["balanced_accuracy", "macro_auc", "signal_hit_rate"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub strategy: StrategyKind,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub is_best: bool,
}

#[derive(Clone, Debug)]
pub struct Comparison {
    pub noise_std: f64,
    pub samples: usize,
    pub frames: usize,
    pub seeds: Vec<u64>,
    pub records: Vec<MetricsRecord>,
    pub rows: Vec<ComparisonRow>,
    /// Test item ids shared by every run.
    pub test_items: Vec<usize>,
}

impl Comparison {
    pub fn row(&self, strategy: StrategyKind, metric: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.strategy == strategy && r.metric == metric)
    }

    pub fn header_lines(&self) -> Vec<String> {
        vec![
            format!("# noise_std={}", self.noise_std),
            format!("# samples k={} of T={} frames", self.samples, self.frames),
            format!(
                "# seeds={}",
                self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";")
            ),
            "# adps: not implemented (sequential selection is out of scope)".to_string(),
        ]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        for line in self.header_lines() {
            writeln!(bytes, "{line}").expect("write to Vec");
        }
        {
            let mut w = csv::Writer::from_writer(&mut bytes);
            for r in &self.rows {
                w.serialize(r)?;
            }
            w.flush().expect("write to Vec");
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Human-readable table: one line per strategy, `mean ± std` per metric.
    pub fn table(&self) -> String {
        let mut s = format!("{:<10}", "strategy");
        for m in COMPARISON_METRICS {
            s.push_str(&format!(" {m:>22}"));
        }
        s.push('\n');
        let mut strategies: Vec<StrategyKind> = self.rows.iter().map(|r| r.strategy).collect();
        strategies.dedup();
        for k in strategies {
            s.push_str(&format!("{:<10}", k.as_str()));
            for m in COMPARISON_METRICS {
                let r = self.row(k, m).expect("row per metric");
                let mark = if r.is_best { "*" } else { " " };
                s.push_str(&format!(" {:>13.4} ± {:.4}{mark}", r.mean, r.std));
            }
            s.push('\n');
        }
        s.push_str(&format!("{:<10} {:>22}\n", "adps", "not implemented"));
        s
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregates test records into mean/std rows per strategy and metric and
/// marks the best subsampling strategy per metric.
pub fn comparison_rows(records: &[MetricsRecord], strategies: &[StrategyKind]) -> Vec<ComparisonRow> {
    let mut rows = Vec::new();
    for &k in strategies {
        let tests: Vec<&MetricsRecord> = records
            .iter()
            .filter(|r| r.strategy == k && r.split == Split::Test)
            .collect();
        for metric in COMPARISON_METRICS {
            let values: Vec<f64> = tests
                .iter()
                .map(|r| match metric {
                    "balanced_accuracy" => r.balanced_accuracy,
                    "macro_auc" => r.macro_auc,
                    _ => r.signal_hit_rate,
                })
                .collect();
            let (mean, std) = mean_std(&values);
            rows.push(ComparisonRow {
                strategy: k,
                metric: metric.to_string(),
                mean: round6(mean),
                std: round6(std),
                is_best: false,
            });
        }
    }
    for metric in COMPARISON_METRICS {
        let best = rows
            .iter()
            .filter(|r| r.metric == metric && r.strategy.subsamples())
            .map(|r| r.mean)
            .fold(f64::NEG_INFINITY, f64::max);
        for r in rows.iter_mut().filter(|r| r.metric == metric) {
            r.is_best = r.strategy.subsamples() && r.mean == best;
        }
    }
    rows
}

fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0)
}

/// Trains every strategy in `cfg.compare_strategies` over every seed on
/// the same dataset and splits.
pub fn compare(cfg: &RunConfig, ds: &Dataset) -> Result<Comparison> {
    cfg.validate()?;
    let strategies = &cfg.compare_strategies;
    let plain = Prepared::new(ds, false)?;
    let with_features = if strategies.contains(&StrategyKind::Das) {
        Some(Prepared::new(ds, true)?)
    } else {
        None
    };
    let jobs: Vec<(StrategyKind, u64)> = strategies
        .iter()
        .flat_map(|&k| cfg.seeds.iter().map(move |&s| (k, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let outcomes: Vec<RunOutcome> = pool.install(|| {
        jobs.par_iter()
            .map(|&(k, seed)| {
                let data = if k == StrategyKind::Das {
                    with_features.as_ref().expect("descriptors prepared")
                } else {
                    &plain
                };
                train_run(cfg, k, seed, data)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let records: Vec<MetricsRecord> = outcomes.iter().flat_map(|o| o.records.clone()).collect();
    let rows = comparison_rows(&records, strategies);
    Ok(Comparison {
        noise_std: ds.spec.noise_std,
        samples: cfg.samples(ds.t_max()),
        frames: ds.t_max(),
        seeds: cfg.seeds.clone(),
        records,
        rows,
        test_items: ds.split_indices(Split::Test),
    })
}

/// Runs [`compare`] and writes `compare_metrics.csv` and `comparison.csv`.
pub fn run_compare(cfg: &RunConfig, ds: &Dataset) -> Result<Comparison> {
    let cmp = compare(cfg, ds)?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    write_metrics_csv(&cmp.records, &cfg.output_dir.join("compare_metrics.csv"))?;
    cmp.write_csv(&cfg.output_dir.join("comparison.csv"))?;
    Ok(cmp)
}
