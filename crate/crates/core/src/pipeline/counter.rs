//! People counting: labelled slots of room devices, minority oversampling,
//! leakage-free splitting and MLP training.

use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};
use crate::apportion::largest_remainder;
use crate::metrics::{confusion, report, ClassificationReport, ConfusionMatrix};
use crate::model::{DeviceId, DeviceKind, Field, SensorReading, Timestamp, MILLIS_PER_DAY};
use crate::neural::{Checkpoint, Checkpointable, ClassBatch, Loss, MlpNet, OptConfig, OptKind, OptState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledRow {
    pub features: Vec<f64>,
    pub label: i64,
    /// Set on rows added by oversampling.
    pub duplicate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub feature_names: Vec<String>,
    /// Sorted label values; the network's class index is a position here.
    pub classes: Vec<i64>,
    pub rows: Vec<LabeledRow>,
}

impl LabeledDataset {
    /// Class list is the sorted set of observed labels.
    pub fn new(feature_names: Vec<String>, rows: Vec<(Vec<f64>, i64)>) -> Result<Self> {
        let mut classes: Vec<i64> = rows.iter().map(|r| r.1).collect();
        classes.sort_unstable();
        classes.dedup();
        let rows: Vec<LabeledRow> =
            rows.into_iter().map(|(features, label)| LabeledRow { features, label, duplicate: false }).collect();
        let ds = LabeledDataset { feature_names, classes, rows };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.feature_names.len();
        if self.rows.iter().any(|r| r.features.len() != dim) {
            return Err(PipelineError::RaggedFeatures);
        }
        if let Some(r) = self.rows.iter().find(|r| self.classes.binary_search(&r.label).is_err()) {
            return Err(PipelineError::UnknownLabel(r.label));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for r in &self.rows {
            counts[self.class_index(r.label).expect("validated label")] += 1;
        }
        counts
    }

    pub fn class_index(&self, label: i64) -> Result<usize> {
        self.classes.binary_search(&label).map_err(|_| PipelineError::UnknownLabel(label))
    }

    pub fn duplicate_count(&self) -> usize {
        self.rows.iter().filter(|r| r.duplicate).count()
    }

    fn with_rows(&self, rows: Vec<LabeledRow>) -> Self {
        LabeledDataset { feature_names: self.feature_names.clone(), classes: self.classes.clone(), rows }
    }
}

/// Identity of a row for twin detection: exact feature bits plus label.
fn row_key(r: &LabeledRow) -> (Vec<u64>, i64) {
    (r.features.iter().map(|v| v.to_bits()).collect(), r.label)
}

/// Brings every class up to the majority count by copying random rows of
/// its own; copies are flagged `duplicate`.
pub fn oversample(ds: &LabeledDataset, seed: u64) -> Result<LabeledDataset> {
    let counts = ds.class_counts();
    if let Some(i) = counts.iter().position(|&c| c == 0) {
        return Err(PipelineError::EmptyClass(ds.classes[i]));
    }
    let target = counts.iter().copied().max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = ds.rows.clone();
    for (ci, &class) in ds.classes.iter().enumerate() {
        let own: Vec<usize> = (0..ds.rows.len()).filter(|&i| ds.rows[i].label == class).collect();
        for _ in counts[ci]..target {
            let src = &ds.rows[own[rng.random_range(0..own.len())]];
            rows.push(LabeledRow { duplicate: true, ..src.clone() });
        }
    }
    Ok(ds.with_rows(rows))
}

/// Train/validation/test split. Duplicate-flagged rows and every row that has
/// an identical twin in the dataset go to train; the remaining rows are
/// shuffled and apportioned by `ratios` with largest-remainder rounding.
pub fn split(
    ds: &LabeledDataset,
    ratios: [f64; 3],
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(PipelineError::RatioInvalid(ratios));
    }
    let mut seen: HashMap<(Vec<u64>, i64), usize> = HashMap::new();
    for r in &ds.rows {
        *seen.entry(row_key(r)).or_default() += 1;
    }
    let (forced, mut free): (Vec<&LabeledRow>, Vec<&LabeledRow>) =
        ds.rows.iter().partition(|r| r.duplicate || seen[&row_key(r)] > 1);
    if free.len() < 3 {
        return Err(PipelineError::TooFewRows { needed: 3, found: free.len() });
    }
    free.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let sizes = largest_remainder(free.len(), &ratios);
    let (train_free, rest) = free.split_at(sizes[0]);
    let (val, test) = rest.split_at(sizes[1]);
    let collect = |rows: &[&LabeledRow]| ds.with_rows(rows.iter().map(|&r| r.clone()).collect());
    let mut train: Vec<&LabeledRow> = forced;
    train.extend_from_slice(train_free);
    Ok((collect(&train), collect(val), collect(test)))
}

/// Per-feature z-scoring with training statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl FeatureScaler {
    pub fn fit(rows: &[LabeledRow]) -> Self {
        let dim = rows.first().map_or(0, |r| r.features.len());
        let n = rows.len().max(1) as f64;
        let mean: Vec<f64> = (0..dim).map(|d| rows.iter().map(|r| r.features[d]).sum::<f64>() / n).collect();
        let sd = (0..dim)
            .map(|d| {
                let var = rows.iter().map(|r| (r.features[d] - mean[d]).powi(2)).sum::<f64>() / n;
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        FeatureScaler { mean, sd }
    }

    pub fn apply(&self, features: &[f64]) -> Vec<f64> {
        features.iter().zip(self.mean.iter().zip(&self.sd)).map(|(v, (m, s))| (v - m) / s).collect()
    }

    pub fn matrix(&self, rows: &[LabeledRow]) -> Array2<f64> {
        let dim = self.mean.len();
        let mut x = Array2::zeros((rows.len(), dim));
        for (i, r) in rows.iter().enumerate() {
            for (d, v) in self.apply(&r.features).into_iter().enumerate() {
                x[[i, d]] = v;
            }
        }
        x
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CounterConfig {
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptKind,
    pub lr: f64,
    /// Train, validation and test shares.
    pub split: [f64; 3],
    pub oversample: bool,
    pub patience: usize,
    pub seed: u64,
}

impl Default for CounterConfig {
    fn default() -> Self {
        CounterConfig {
            hidden: vec![512, 256, 128, 64],
            classes: 12,
            epochs: 200,
            batch_size: 32,
            optimizer: OptKind::Adam,
            lr: 1e-3,
            split: [0.7, 0.15, 0.15],
            oversample: true,
            patience: 20,
            seed: 42,
        }
    }
}

impl CounterConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PipelineError::InvalidConfig(m.to_string()));
        if self.classes < 2 {
            return bad("classes must be at least 2");
        }
        if self.hidden.contains(&0) {
            return bad("hidden sizes must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        let sum: f64 = self.split.iter().sum();
        if self.split.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(PipelineError::RatioInvalid(self.split));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CounterEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CounterRun {
    pub net: MlpNet,
    pub scaler: FeatureScaler,
    pub classes: Vec<i64>,
    pub history: Vec<CounterEpoch>,
    pub best_epoch: usize,
    /// Train, validation and test row counts.
    pub split_sizes: [usize; 3],
    pub confusion: ConfusionMatrix,
    pub report: ClassificationReport,
}

impl CounterRun {
    /// Network checkpoint with the scaler and class labels in `meta`.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = self.net.checkpoint();
        ck.meta.insert("feature_mean".into(), self.scaler.mean.clone());
        ck.meta.insert("feature_sd".into(), self.scaler.sd.clone());
        ck.meta.insert("classes".into(), self.classes.iter().map(|&c| c as f64).collect());
        ck
    }

    /// Predicted labels for raw feature rows.
    pub fn predict(&self, rows: &[LabeledRow]) -> Result<Vec<i64>> {
        let idx = self.net.predict(self.scaler.matrix(rows).view())?;
        Ok(idx.into_iter().map(|i| self.classes[i]).collect())
    }
}

fn class_batch(ds: &LabeledDataset, scaler: &FeatureScaler) -> Result<ClassBatch> {
    let y = ds.rows.iter().map(|r| ds.class_index(r.label)).collect::<Result<Vec<_>>>()?;
    Ok(ClassBatch { x: scaler.matrix(&ds.rows), y })
}

/// Oversamples (optionally), splits, trains with cross-entropy and early
/// stopping on validation loss, and scores the held-out test rows.
pub fn train_counter(ds: &LabeledDataset, cfg: &CounterConfig) -> Result<CounterRun> {
    cfg.validate()?;
    ds.validate()?;
    if ds.classes.len() != cfg.classes {
        return Err(PipelineError::ClassCountMismatch { observed: ds.classes.len(), configured: cfg.classes });
    }
    let data = if cfg.oversample { oversample(ds, cfg.seed)? } else { ds.clone() };
    let (train, val, test) = split(&data, cfg.split, cfg.seed)?;
    for (name, part) in [("train", &train), ("validation", &val), ("test", &test)] {
        if part.is_empty() {
            return Err(PipelineError::EmptySplit(name));
        }
    }
    let scaler = FeatureScaler::fit(&train.rows);
    let train_b = class_batch(&train, &scaler)?;
    let val_b = class_batch(&val, &scaler)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dims = vec![ds.feature_names.len()];
    dims.extend(&cfg.hidden);
    dims.push(cfg.classes);
    let mut net = MlpNet::init(&dims, &mut rng)?;
    let mut opt = OptState::for_model(OptConfig { kind: cfg.optimizer, lr: cfg.lr, ..OptConfig::default() }, &net);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, net.clone(), 0);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = ClassBatch {
                x: train_b.x.select(ndarray::Axis(0), chunk),
                y: chunk.iter().map(|&i| train_b.y[i]).collect(),
            };
            let (_, grads) = net.loss_and_gradients(&batch, Loss::CrossEntropy)?;
            opt.step(&mut net, &grads)?;
        }
        let (train_loss, train_ok) = net.evaluate(&train_b)?;
        let (val_loss, val_ok) = net.evaluate(&val_b)?;
        history.push(CounterEpoch {
            epoch,
            train_loss,
            val_loss,
            train_acc: train_ok as f64 / train.len() as f64,
            val_acc: val_ok as f64 / val.len() as f64,
        });
        if val_loss < best.0 {
            best = (val_loss, net.clone(), epoch);
        } else if epoch - best.2 >= cfg.patience {
            break;
        }
    }
    let net = best.1;
    let pred: Vec<i64> =
        net.predict(scaler.matrix(&test.rows).view())?.into_iter().map(|i| ds.classes[i]).collect();
    let truth: Vec<i64> = test.rows.iter().map(|r| r.label).collect();
    let cm = confusion(&truth, &pred, &ds.classes)?;
    let rep = report(&cm)?;
    Ok(CounterRun {
        net,
        scaler,
        classes: ds.classes.clone(),
        history,
        best_epoch: best.2,
        split_sizes: [train.len(), val.len(), test.len()],
        confusion: cm,
        report: rep,
    })
}

/// Fields used as occupancy features for a device kind: its own fields plus
/// temperature and humidity, in dataset column order.
pub fn occupancy_fields(kind: DeviceKind) -> Vec<Field> {
    let mut f: Vec<Field> = kind.fields().into_iter().filter(|&f| f != Field::Battery).collect();
    f.sort_by_key(|f| f.index());
    f
}

/// One row per labelled slot that has a reading with every feature present,
/// ordered by time then device; features are the device fields plus sin/cos
/// of time of day. `max_rows` keeps the earliest rows.
pub fn occupancy_dataset(
    readings: &[SensorReading],
    labels: &BTreeMap<DeviceId, Vec<(Timestamp, u32)>>,
    max_rows: Option<usize>,
) -> Result<LabeledDataset> {
    let by_key: HashMap<(&DeviceId, Timestamp), &SensorReading> =
        readings.iter().filter(|r| labels.contains_key(&r.device)).map(|r| ((&r.device, r.ts), r)).collect();
    let mut kind = None;
    for dev in labels.keys() {
        let Some(k) = readings.iter().find(|r| &r.device == dev).and_then(|r| r.kind().ok()) else {
            continue;
        };
        match kind {
            None => kind = Some(k),
            Some(prev) if prev != k => return Err(PipelineError::MixedKinds),
            _ => {}
        }
    }
    let fields = occupancy_fields(kind.ok_or(PipelineError::EmptyDataset)?);
    let mut slots: Vec<(Timestamp, &DeviceId, u32)> =
        labels.iter().flat_map(|(d, v)| v.iter().map(move |&(ts, n)| (ts, d, n))).collect();
    slots.sort();
    let mut rows = Vec::new();
    for (ts, dev, n) in slots {
        if max_rows.is_some_and(|m| rows.len() >= m) {
            break;
        }
        let Some(r) = by_key.get(&(dev, ts)) else { continue };
        let Some(mut feats) = fields.iter().map(|&f| r.get(f)).collect::<Option<Vec<f64>>>() else { continue };
        let phase = std::f64::consts::TAU * ts.time_of_day_millis() as f64 / MILLIS_PER_DAY as f64;
        feats.push(phase.sin());
        feats.push(phase.cos());
        rows.push((feats, i64::from(n)));
    }
    if rows.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let mut names: Vec<String> = fields.iter().map(|f| f.name().to_string()).collect();
    names.extend(["tod_sin".to_string(), "tod_cos".to_string()]);
    LabeledDataset::new(names, rows)
}
