//! The two experiments end to end: imputation quality measured through LSTM
//! forecasting, and MLP people counting from room-sensor readings.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::impute::ImputeError;
use crate::metrics::MetricsError;
use crate::neural::NeuralError;

pub mod counter;
pub mod forecast;

pub use counter::{
    occupancy_dataset, oversample, split, train_counter, CounterConfig, CounterEpoch, CounterRun, FeatureScaler,
    LabeledDataset, LabeledRow,
};
pub use forecast::{
    evaluate_imputation, forecast, make_windows, train_forecaster, EvalSpec, ForecastConfig, ForecastEpoch,
    Forecaster, ImputationEval, StrategyResult,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("series of length {len} is too short for window {window} plus horizon {horizon}")]
    SeriesTooShort { len: usize, window: usize, horizon: usize },
    #[error("series has {0} missing cells")]
    IncompleteSeries(usize),
    #[error("class {0} has no rows")]
    EmptyClass(i64),
    #[error("split ratios must be nonnegative and sum to 1, got {0:?}")]
    RatioInvalid([f64; 3]),
    #[error("need at least {needed} non-duplicate rows, found {found}")]
    TooFewRows { needed: usize, found: usize },
    #[error("the {0} split is empty")]
    EmptySplit(&'static str),
    #[error("data has {observed} classes but {configured} are configured")]
    ClassCountMismatch { observed: usize, configured: usize },
    #[error("label {0} is not in the class list")]
    UnknownLabel(i64),
    #[error("feature rows have inconsistent dimension")]
    RaggedFeatures,
    #[error("labelled devices are of different kinds")]
    MixedKinds,
    #[error("no labelled rows")]
    EmptyDataset,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Impute(#[from] ImputeError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    ZScore,
    MinMax,
}

impl std::str::FromStr for Normalization {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "z_score" | "zscore" => Ok(Normalization::ZScore),
            "min_max" | "minmax" => Ok(Normalization::MinMax),
            _ => Err(format!("unknown normalization `{s}` (expected z_score or min_max)")),
        }
    }
}

/// Affine map `v -> (v - offset) / scale` fitted on training values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub kind: Normalization,
    pub offset: f64,
    pub scale: f64,
}

impl Normalizer {
    /// A zero spread maps to scale 1.
    pub fn fit(kind: Normalization, values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let (offset, spread) = match kind {
            Normalization::ZScore => {
                let mean = values.iter().sum::<f64>() / n;
                let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                (mean, var.sqrt())
            }
            Normalization::MinMax => {
                let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if values.is_empty() {
                    (0.0, 1.0)
                } else {
                    (lo, hi - lo)
                }
            }
        };
        let scale = if spread > 0.0 && spread.is_finite() { spread } else { 1.0 };
        Normalizer { kind, offset, scale }
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.offset) / self.scale
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.scale + self.offset
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zscore_fit_centres_and_scales() {
        let v = [1.0, 2.0, 3.0, 4.0];
        let n = Normalizer::fit(Normalization::ZScore, &v);
        let z: Vec<f64> = v.iter().map(|&x| n.apply(x)).collect();
        let mean = z.iter().sum::<f64>() / 4.0;
        let var = z.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        assert!((n.invert(n.apply(3.3)) - 3.3).abs() < 1e-12);
    }

    #[test]
    fn minmax_and_constant_series() {
        let n = Normalizer::fit(Normalization::MinMax, &[2.0, 6.0, 4.0]);
        assert_eq!((n.apply(2.0), n.apply(6.0)), (0.0, 1.0));
        let c = Normalizer::fit(Normalization::ZScore, &[420.0; 5]);
        assert_eq!(c.scale, 1.0);
        assert_eq!(c.apply(420.0), 0.0);
    }
}
