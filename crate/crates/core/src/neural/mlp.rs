//! Multilayer perceptron classifier: ReLU hidden layers, softmax output.

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use super::{log_sum_exp, softmax_rows, to_standard, Dense, Gradients, Loss, NeuralError, Params, Result};

/// Feature rows with class indices into the output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassBatch {
    pub x: Array2<f64>,
    pub y: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpNet {
    pub layers: Vec<Dense>,
}

impl MlpNet {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        let net = MlpNet { layers };
        net.validate()?;
        Ok(net)
    }

    /// `dims` = input, hidden..., classes.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        Self::check_dims(dims)?;
        MlpNet::new(dims.windows(2).map(|d| Dense::init(d[0], d[1], rng)).collect())
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::check_dims(dims)?;
        MlpNet::new(dims.windows(2).map(|d| Dense::zeros(d[0], d[1])).collect())
    }

    fn check_dims(dims: &[usize]) -> Result<()> {
        if dims.len() < 2 || dims.contains(&0) || dims[dims.len() - 1] < 2 {
            return Err(NeuralError::InvalidArchitecture(format!("mlp dims {dims:?}")));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(NeuralError::InvalidArchitecture("no layers".into()));
        }
        for pair in self.layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(NeuralError::DimMismatch { expected: pair[0].output_dim(), found: pair[1].input_dim() });
            }
        }
        for l in &self.layers {
            if l.b.len() != l.output_dim() {
                return Err(NeuralError::DimMismatch { expected: l.output_dim(), found: l.b.len() });
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(Dense::output_dim));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn n_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    fn check_input(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(NeuralError::DimMismatch { expected: self.input_dim(), found: x.ncols() });
        }
        Ok(())
    }

    /// Pre-activations of every layer and the activations feeding each.
    fn forward_cached(&self, x: ArrayView2<f64>) -> (Vec<Array2<f64>>, Array2<f64>) {
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut a = x.to_owned();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(a.view());
            acts.push(a);
            a = if k < last { z.mapv(|v| v.max(0.0)) } else { z };
        }
        (acts, a)
    }

    pub fn logits(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        Ok(self.forward_cached(x).1)
    }

    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(softmax_rows(self.logits(x)?.view()))
    }

    /// Index of the most probable class per row; first index wins ties.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok(logits
            .rows()
            .into_iter()
            .map(|r| r.iter().enumerate().fold(0, |best, (j, &v)| if v > r[best] { j } else { best }))
            .collect())
    }

    /// Class probabilities for one feature vector.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let xv = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        Ok(self.predict_proba(xv)?.into_raw_vec_and_offset().0)
    }

    /// Mean cross-entropy and the number of rows whose argmax equals the label.
    pub fn evaluate(&self, batch: &ClassBatch) -> Result<(f64, usize)> {
        if batch.y.is_empty() {
            return Err(NeuralError::EmptyBatch);
        }
        if let Some(&bad) = batch.y.iter().find(|&&y| y >= self.n_classes()) {
            return Err(NeuralError::DimMismatch { expected: self.n_classes(), found: bad + 1 });
        }
        let logits = to_standard(self.logits(batch.x.view())?);
        let mut loss = 0.0;
        let mut correct = 0;
        for (row, &y) in logits.rows().into_iter().zip(&batch.y) {
            let r = row.as_slice().expect("standard layout");
            loss += log_sum_exp(r) - r[y];
            let best = r.iter().enumerate().fold(0, |b, (j, &v)| if v > r[b] { j } else { b });
            correct += usize::from(best == y);
        }
        Ok((loss / batch.y.len() as f64, correct))
    }

    /// Mean cross-entropy and its gradient for every parameter.
    pub fn loss_and_gradients(&self, batch: &ClassBatch, loss: Loss) -> Result<(f64, Gradients)> {
        if loss != Loss::CrossEntropy {
            return Err(NeuralError::IncompatibleLoss { loss, model: "softmax classifier" });
        }
        let x = batch.x.view();
        self.check_input(x)?;
        let bsz = x.nrows();
        if bsz == 0 {
            return Err(NeuralError::EmptyBatch);
        }
        if batch.y.len() != bsz {
            return Err(NeuralError::DimMismatch { expected: bsz, found: batch.y.len() });
        }
        let classes = self.n_classes();
        if let Some(&bad) = batch.y.iter().find(|&&y| y >= classes) {
            return Err(NeuralError::DimMismatch { expected: classes, found: bad + 1 });
        }
        let (acts, logits) = self.forward_cached(x);
        let logits = to_standard(logits);
        let mut value = 0.0;
        for (row, &y) in logits.rows().into_iter().zip(&batch.y) {
            let r = row.as_slice().expect("standard layout");
            value += log_sum_exp(r) - r[y];
        }
        value /= bsz as f64;
        if !value.is_finite() {
            return Err(NeuralError::NonFiniteLoss);
        }
        let mut delta = softmax_rows(logits.view());
        for (mut row, &y) in delta.rows_mut().into_iter().zip(&batch.y) {
            row[y] -= 1.0;
        }
        delta /= bsz as f64;

        let mut grads = Gradients::zeros_like(&self.param_lens());
        for k in (0..self.layers.len()).rev() {
            let (gw, gb) = grads.0[2 * k..2 * k + 2].split_at_mut(1);
            let dx = self.layers[k].backward(acts[k].view(), delta.view(), &mut gw[0], &mut gb[0]);
            if k > 0 {
                // acts[k] is the ReLU output of layer k-1
                delta = dx;
                ndarray::Zip::from(&mut delta).and(&acts[k]).for_each(|d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
        }
        Ok((value, grads))
    }
}

impl Params for MlpNet {
    fn param_slices(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(Dense::slices).collect()
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(Dense::slices_mut).collect()
    }
}
