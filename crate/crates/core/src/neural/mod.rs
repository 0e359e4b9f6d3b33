//! Dense and LSTM networks with hand-written backpropagation.
//!
//! Everything is `f64` and batch-major: a batch of `B` rows is an `B x n`
//! matrix. Parameters of a model are exposed as a flat list of slices in a
//! fixed order so optimizers, gradient checks and checkpoints can treat every
//! model the same way.

use std::fmt;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod checkpoint;
pub mod lstm;
pub mod mlp;
pub mod optim;

pub use checkpoint::{Checkpoint, Checkpointable};
pub use lstm::{lstm_forward, lstm_step, LstmNet, LstmState, LstmWeights, SeqBatch};
pub use mlp::{ClassBatch, MlpNet};
pub use optim::{OptConfig, OptKind, OptState};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NeuralError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("input sequence is empty")]
    EmptySequence,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("parameter and state shapes differ")]
    ShapeMismatch,
    #[error("{loss} loss cannot train a {model}")]
    IncompatibleLoss { loss: Loss, model: &'static str },
    #[error("invalid network: {0}")]
    InvalidArchitecture(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, NeuralError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Mse,
    CrossEntropy,
}

impl fmt::Display for Loss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Loss::Mse => "mse",
            Loss::CrossEntropy => "cross-entropy",
        })
    }
}

/// Flat view over a model's trainable parameters.
pub trait Params {
    fn param_slices(&self) -> Vec<&[f64]>;
    fn param_slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn param_lens(&self) -> Vec<usize> {
        self.param_slices().iter().map(|s| s.len()).collect()
    }

    fn n_params(&self) -> usize {
        self.param_lens().iter().sum()
    }
}

/// Gradients laid out like [`Params::param_slices`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn zeros_like(lens: &[usize]) -> Self {
        Gradients(lens.iter().map(|&n| vec![0.0; n]).collect())
    }

    pub fn lens(&self) -> Vec<usize> {
        self.0.iter().map(Vec::len).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.0.iter().flatten()
    }

    pub fn max_abs(&self) -> f64 {
        self.iter().fold(0.0, |m, g| m.max(g.abs()))
    }
}

pub(crate) fn to_standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// `log(sum(exp(row)))` computed stably.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Fully connected layer `y = x W^T + b` with `W` of shape `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Dense { w: Array2::zeros((output, input)), b: Array1::zeros(output) }
    }

    /// Uniform in `±1/sqrt(input)`, zero bias.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let a = 1.0 / (input as f64).sqrt();
        let w = Array2::from_shape_simple_fn((output, input), || rng.random_range(-a..a));
        Dense { w, b: Array1::zeros(output) }
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }

    /// Accumulates `dW`, `db` and returns `dx`.
    pub(crate) fn backward(
        &self,
        x: ArrayView2<f64>,
        dy: ArrayView2<f64>,
        dw: &mut [f64],
        db: &mut [f64],
    ) -> Array2<f64> {
        let gw = dy.t().dot(&x);
        for (a, g) in dw.iter_mut().zip(gw.iter()) {
            *a += g;
        }
        for (a, g) in db.iter_mut().zip(dy.sum_axis(Axis(0)).iter()) {
            *a += g;
        }
        dy.dot(&self.w)
    }

    pub(crate) fn slices(&self) -> [&[f64]; 2] {
        [self.w.as_slice().expect("standard layout"), self.b.as_slice().expect("contiguous")]
    }

    pub(crate) fn slices_mut(&mut self) -> [&mut [f64]; 2] {
        [self.w.as_slice_mut().expect("standard layout"), self.b.as_slice_mut().expect("contiguous")]
    }
}
