//! Sliding-window LSTM forecasting and the imputation comparison built on it.
//!
//! The comparison splits a complete series chronologically, hides one seeded
//! set of cells in the training part, repairs them with every strategy and
//! trains an identically initialised forecaster on each repaired copy. RMSE
//! on the untouched tail then reflects the strategy alone.

use ndarray::{Array2, Array3};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Normalization, Normalizer, PipelineError, Result};
use crate::gaps::GriddedSeries;
use crate::impute::{impute, select_k_known, ImputeStrategy, KnnConfig, StrategyArg};
use crate::metrics::rmse;
use crate::neural::{LstmNet, Loss, NeuralError, OptConfig, OptKind, OptState, SeqBatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecastConfig {
    /// Input length in slots.
    pub window: usize,
    /// Slots predicted per window.
    pub horizon: usize,
    pub dims: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptKind,
    pub lr: f64,
    pub normalization: Normalization,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Trailing share of training windows held out for early stopping.
    pub val_fraction: f64,
    /// Trailing share of the series used as the test region.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        ForecastConfig {
            window: 96,
            horizon: 1,
            dims: vec![128, 64, 64, 32],
            epochs: 100,
            batch_size: 32,
            optimizer: OptKind::RmsProp,
            lr: 1e-3,
            normalization: Normalization::ZScore,
            patience: 20,
            val_fraction: 0.1,
            test_fraction: 0.2,
            seed: 42,
        }
    }
}

impl ForecastConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PipelineError::InvalidConfig(m.to_string()));
        if self.window == 0 || self.horizon == 0 {
            return bad("window and horizon must be at least 1");
        }
        if self.dims.is_empty() || self.dims.contains(&0) {
            return bad("dims must be a nonempty list of positive sizes");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must be in [0, 1)");
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad("test_fraction must be in (0, 1)");
        }
        Ok(())
    }

    fn optimizer_config(&self) -> OptConfig {
        OptConfig { kind: self.optimizer, lr: self.lr, ..OptConfig::default() }
    }
}

fn dense_values(series: &GriddedSeries) -> Result<Vec<f64>> {
    if !series.is_complete() {
        return Err(PipelineError::IncompleteSeries(series.missing_count()));
    }
    Ok(series.dense())
}

fn window_count(len: usize, window: usize, horizon: usize) -> Result<usize> {
    if len < window + horizon {
        return Err(PipelineError::SeriesTooShort { len, window, horizon });
    }
    Ok(len - window - horizon + 1)
}

/// Stride-1 `(input, target)` pairs over a complete series.
pub fn make_windows(series: &GriddedSeries, window: usize, horizon: usize) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let values = dense_values(series)?;
    if window == 0 || horizon == 0 {
        return Err(PipelineError::InvalidConfig("window and horizon must be at least 1".into()));
    }
    let n = window_count(values.len(), window, horizon)?;
    Ok((0..n)
        .map(|s| (values[s..s + window].to_vec(), values[s + window..s + window + horizon].to_vec()))
        .collect())
}

/// Batch of windows starting at `starts` in an already-normalised series.
fn batch_at(values: &[f64], starts: &[usize], window: usize, horizon: usize) -> SeqBatch {
    let mut inputs = Array3::zeros((starts.len(), window, 1));
    let mut targets = Array2::zeros((starts.len(), horizon));
    for (b, &s) in starts.iter().enumerate() {
        for t in 0..window {
            inputs[[b, t, 0]] = values[s + t];
        }
        for h in 0..horizon {
            targets[[b, h]] = values[s + window + h];
        }
    }
    SeqBatch { inputs, targets }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forecaster {
    pub net: LstmNet,
    pub normalizer: Normalizer,
    pub window: usize,
    pub horizon: usize,
    /// Losses are in normalised units.
    pub history: Vec<ForecastEpoch>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
}

impl Forecaster {
    /// Predictions in physical units, one row per input window.
    pub fn predict(&self, windows: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        if windows.is_empty() {
            return Ok(Vec::new());
        }
        let mut inputs = Array3::zeros((windows.len(), self.window, 1));
        for (b, w) in windows.iter().enumerate() {
            if w.len() != self.window {
                return Err(NeuralError::DimMismatch { expected: self.window, found: w.len() }.into());
            }
            for (t, &v) in w.iter().enumerate() {
                inputs[[b, t, 0]] = self.normalizer.apply(v);
            }
        }
        let out = self.net.predict(inputs.view())?;
        Ok(out.rows().into_iter().map(|r| r.iter().map(|&z| self.normalizer.invert(z)).collect()).collect())
    }
}

/// Trains on every window of a complete series; the trailing
/// `val_fraction` of windows drives early stopping.
pub fn train_forecaster(series: &GriddedSeries, fc: &ForecastConfig) -> Result<Forecaster> {
    fc.validate()?;
    let raw = dense_values(series)?;
    let n_windows = window_count(raw.len(), fc.window, fc.horizon)?;
    let normalizer = Normalizer::fit(fc.normalization, &raw);
    let values: Vec<f64> = raw.iter().map(|&v| normalizer.apply(v)).collect();

    let n_val = if n_windows >= 2 { ((fc.val_fraction * n_windows as f64).ceil() as usize).min(n_windows - 1) } else { 0 };
    let n_train = n_windows - n_val;
    let val_starts: Vec<usize> = (n_train..n_windows).collect();
    let val_batch = (n_val > 0).then(|| batch_at(&values, &val_starts, fc.window, fc.horizon));

    let mut rng = ChaCha8Rng::seed_from_u64(fc.seed);
    let mut net = LstmNet::init(1, &fc.dims, fc.horizon, &mut rng)?;
    let mut opt = OptState::for_model(fc.optimizer_config(), &net);
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, net.clone(), 0);
    for epoch in 1..=fc.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(fc.batch_size) {
            let batch = batch_at(&values, chunk, fc.window, fc.horizon);
            let (loss, grads) = net.loss_and_gradients(&batch, Loss::Mse)?;
            opt.step(&mut net, &grads)?;
            total += loss * chunk.len() as f64;
        }
        let train_loss = total / n_train as f64;
        let val_loss = match &val_batch {
            Some(b) => mse_of(&net.predict(b.inputs.view())?, &b.targets),
            None => train_loss,
        };
        history.push(ForecastEpoch { epoch, train_loss, val_loss });
        if !val_loss.is_finite() {
            return Err(NeuralError::NonFiniteLoss.into());
        }
        if val_loss < best.0 {
            best = (val_loss, net.clone(), epoch);
        } else if epoch - best.2 >= fc.patience {
            break;
        }
    }
    Ok(Forecaster { net: best.1, normalizer, window: fc.window, horizon: fc.horizon, history, best_epoch: best.2 })
}

fn mse_of(pred: &Array2<f64>, target: &Array2<f64>) -> f64 {
    let d = pred - target;
    d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64
}

/// Autoregressive roll-out: each step's first predicted slot is appended to
/// the window. Inputs and outputs are in physical units.
pub fn forecast(model: &Forecaster, recent_window: &[f64], steps: usize) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(PipelineError::InvalidConfig("steps must be at least 1".into()));
    }
    if recent_window.len() != model.window {
        return Err(NeuralError::DimMismatch { expected: model.window, found: recent_window.len() }.into());
    }
    let mut window = recent_window.to_vec();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let next = model.predict(&[&window])?[0][0];
        out.push(next);
        window.remove(0);
        window.push(next);
    }
    Ok(out)
}

/// What to compare in [`evaluate_imputation`].
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSpec {
    pub strategies: Vec<StrategyArg>,
    /// Share of training-region cells hidden before imputation.
    pub mask_fraction: f64,
    /// Base settings for KNN strategies.
    pub knn: KnnConfig,
    /// Candidates tried by `knn:auto`.
    pub k_candidates: Vec<usize>,
    pub seed: u64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            strategies: ["zero", "linear", "poly:2", "knn:auto", "drop"].iter().map(|s| s.parse().unwrap()).collect(),
            mask_fraction: 0.2,
            knn: KnnConfig::default(),
            k_candidates: (1..=15).step_by(2).collect(),
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyResult {
    /// As requested, e.g. `knn:auto`.
    pub strategy: String,
    /// The strategy actually run, e.g. `knn:7`.
    pub resolved: String,
    pub rmse: f64,
    pub history: Vec<ForecastEpoch>,
    /// `(slot, truth, predicted)` for the first forecast step of every test window.
    pub overlay: Vec<(usize, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImputationEval {
    /// Hidden training cells, shared by every strategy.
    pub mask: Vec<usize>,
    /// First slot of the test region.
    pub test_start: usize,
    pub results: Vec<StrategyResult>,
}

/// Forecast RMSE per imputation strategy on a complete series.
pub fn evaluate_imputation(
    clean: &GriddedSeries,
    companions: &[GriddedSeries],
    spec: &EvalSpec,
    fc: &ForecastConfig,
) -> Result<ImputationEval> {
    fc.validate()?;
    let truth = dense_values(clean)?;
    if clean.slot_map.is_some() {
        return Err(PipelineError::InvalidConfig("evaluation needs an unexcised series".into()));
    }
    if !(0.0..1.0).contains(&spec.mask_fraction) {
        return Err(PipelineError::InvalidConfig("mask_fraction must be in [0, 1)".into()));
    }
    let n = truth.len();
    let test_len = (fc.test_fraction * n as f64).round() as usize;
    let test_start = n - test_len;
    let n_test = window_count(test_len, fc.window, fc.horizon)?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_mask = (spec.mask_fraction * test_start as f64).ceil() as usize;
    let mut mask = sample(&mut rng, test_start, n_mask.min(test_start)).into_vec();
    mask.sort_unstable();

    let mut masked = clean.window(0, test_start);
    for &i in &mask {
        masked.values[i] = None;
    }
    let train_comps: Vec<GriddedSeries> = companions.iter().map(|c| c.window(0, test_start)).collect();

    let test_inputs: Vec<&[f64]> = (0..n_test).map(|s| &truth[test_start + s..test_start + s + fc.window]).collect();
    let test_targets: Vec<&[f64]> = (0..n_test)
        .map(|s| &truth[test_start + s + fc.window..test_start + s + fc.window + fc.horizon])
        .collect();
    let flat_truth: Vec<f64> = test_targets.iter().flat_map(|t| t.iter().copied()).collect();

    let mut results = Vec::with_capacity(spec.strategies.len());
    for arg in &spec.strategies {
        let strategy = match arg {
            StrategyArg::Fixed(ImputeStrategy::Knn(c)) => ImputeStrategy::Knn(KnnConfig { k: c.k, ..spec.knn.clone() }),
            StrategyArg::Fixed(s) => s.clone(),
            StrategyArg::KnnAuto => {
                ImputeStrategy::Knn(KnnConfig { k: auto_k(&masked, &train_comps, spec)?, ..spec.knn.clone() })
            }
        };
        let repaired = impute(&masked, &strategy, &train_comps)?;
        let model = train_forecaster(&repaired, fc)?;
        let preds = model.predict(&test_inputs)?;
        let flat_pred: Vec<f64> = preds.iter().flat_map(|p| p.iter().copied()).collect();
        let overlay = (0..n_test).map(|s| (test_start + s + fc.window, test_targets[s][0], preds[s][0])).collect();
        results.push(StrategyResult {
            strategy: arg.to_string(),
            resolved: strategy.to_string(),
            rmse: rmse(&flat_truth, &flat_pred)?,
            history: model.history,
            overlay,
        });
    }
    Ok(ImputationEval { mask, test_start, results })
}

/// `k*` from the known training cells only: masked cells are excised from
/// the target and its companions before [`select_k`] hides more of them.
fn auto_k(masked: &GriddedSeries, companions: &[GriddedSeries], spec: &EvalSpec) -> Result<usize> {
    if masked.is_complete() {
        return Ok(spec.knn.k);
    }
    let sel = select_k_known(masked, companions, spec.mask_fraction, &spec.k_candidates, spec.seed, &spec.knn)?;
    Ok(sel.k_star)
}
