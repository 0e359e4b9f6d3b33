//! Stacked LSTM with a linear readout of the final hidden state.
//!
//! Each layer holds one weight matrix of shape `4H x (I + H)` applied to the
//! concatenation `[x_t; h_{t-1}]`. Row blocks are the input, forget and output
//! gates followed by the candidate cell, in that order.

use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, s, Array1, Array2, Array3, ArrayView2, ArrayView3, ArrayViewMut2, Axis};
use rand::Rng;

use super::{sigmoid, to_standard, Dense, Gradients, Loss, NeuralError, Params, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LstmWeights {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl LstmWeights {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmWeights { w: Array2::zeros((4 * hidden, input + hidden)), b: Array1::zeros(4 * hidden) }
    }

    /// Uniform weights in `±1/sqrt(input + hidden)`; forget-gate bias 1.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let a = 1.0 / ((input + hidden) as f64).sqrt();
        let w = Array2::from_shape_simple_fn((4 * hidden, input + hidden), || rng.random_range(-a..a));
        let mut b = Array1::zeros(4 * hidden);
        b.slice_mut(s![hidden..2 * hidden]).fill(1.0);
        LstmWeights { w, b }
    }

    pub fn hidden(&self) -> usize {
        self.w.nrows() / 4
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols() - self.hidden()
    }

    fn check(&self) -> Result<()> {
        let rows = self.w.nrows();
        if rows == 0 || rows % 4 != 0 || self.w.ncols() <= rows / 4 || self.b.len() != rows {
            return Err(NeuralError::InvalidArchitecture(format!(
                "lstm weights {:?} with bias {}",
                self.w.dim(),
                self.b.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState { h: vec![0.0; hidden], c: vec![0.0; hidden] }
    }
}

/// Activations of one time step for a batch, kept for the backward pass.
struct StepCache {
    concat: Array2<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    o: Vec<f64>,
    g: Vec<f64>,
    c_prev: Vec<f64>,
    tanh_c: Vec<f64>,
}

/// One batched step; returns `(h, c, cache)`.
fn step_batch(
    w: &LstmWeights,
    x: ArrayView2<f64>,
    h_prev: ArrayView2<f64>,
    c_prev: Vec<f64>,
) -> (Array2<f64>, Vec<f64>, StepCache) {
    let (bsz, hid) = (x.nrows(), w.hidden());
    let concat = to_standard(concatenate(Axis(1), &[x, h_prev]).expect("row counts agree"));
    let z = to_standard(concat.dot(&w.w.t()) + &w.b);
    let z = z.as_slice().expect("standard layout");
    let n = bsz * hid;
    let (mut i, mut f, mut o, mut g) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let (mut c, mut tanh_c, mut h) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for r in 0..bsz {
        let zr = &z[r * 4 * hid..(r + 1) * 4 * hid];
        for k in 0..hid {
            let q = r * hid + k;
            i[q] = sigmoid(zr[k]);
            f[q] = sigmoid(zr[hid + k]);
            o[q] = sigmoid(zr[2 * hid + k]);
            g[q] = zr[3 * hid + k].tanh();
            c[q] = f[q] * c_prev[q] + i[q] * g[q];
            tanh_c[q] = c[q].tanh();
            h[q] = o[q] * tanh_c[q];
        }
    }
    let h = Array2::from_shape_vec((bsz, hid), h).expect("sized above");
    (h, c.clone(), StepCache { concat, i, f, o, g, c_prev, tanh_c })
}

/// Runs one layer over a whole batched sequence from zero state.
fn layer_forward(w: &LstmWeights, xs: &[Array2<f64>]) -> (Vec<Array2<f64>>, Vec<StepCache>) {
    let bsz = xs[0].nrows();
    let mut h = Array2::zeros((bsz, w.hidden()));
    let mut c = vec![0.0; bsz * w.hidden()];
    let mut hs = Vec::with_capacity(xs.len());
    let mut caches = Vec::with_capacity(xs.len());
    for x in xs {
        let (h_new, c_new, cache) = step_batch(w, x.view(), h.view(), c);
        hs.push(h_new.clone());
        caches.push(cache);
        h = h_new;
        c = c_new;
    }
    (hs, caches)
}

/// Backpropagation through time for one layer. `dh_above[t]` is the loss
/// gradient flowing into `h_t` from outside the layer. Returns `dx_t`.
fn layer_backward(
    w: &LstmWeights,
    caches: &[StepCache],
    dh_above: &[Option<Array2<f64>>],
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<Array2<f64>> {
    let hid = w.hidden();
    let input = w.input_dim();
    let bsz = caches[0].concat.nrows();
    let n = bsz * hid;
    let mut dw = ArrayViewMut2::from_shape(w.w.dim(), dw).expect("gradient shaped like weights");
    let mut dh_next = vec![0.0; n];
    let mut dc_next = vec![0.0; n];
    let mut dz = vec![0.0; bsz * 4 * hid];
    let mut dxs = vec![Array2::zeros((0, 0)); caches.len()];
    for t in (0..caches.len()).rev() {
        let cache = &caches[t];
        let above = dh_above[t].as_ref().map(|a| a.as_slice().expect("standard layout"));
        for r in 0..bsz {
            for k in 0..hid {
                let q = r * hid + k;
                let dh = dh_next[q] + above.map_or(0.0, |a| a[q]);
                let (i, f, o, g, tc) = (cache.i[q], cache.f[q], cache.o[q], cache.g[q], cache.tanh_c[q]);
                let d_o = dh * tc;
                let dc = dc_next[q] + dh * o * (1.0 - tc * tc);
                let base = r * 4 * hid;
                dz[base + k] = dc * g * i * (1.0 - i);
                dz[base + hid + k] = dc * cache.c_prev[q] * f * (1.0 - f);
                dz[base + 2 * hid + k] = d_o * o * (1.0 - o);
                dz[base + 3 * hid + k] = dc * i * (1.0 - g * g);
                dc_next[q] = dc * f;
            }
        }
        let dz_m = ArrayView2::from_shape((bsz, 4 * hid), &dz).expect("sized above");
        general_mat_mul(1.0, &dz_m.t(), &cache.concat, 1.0, &mut dw);
        for r in 0..bsz {
            for (a, g) in db.iter_mut().zip(&dz[r * 4 * hid..(r + 1) * 4 * hid]) {
                *a += g;
            }
        }
        let dconcat = dz_m.dot(&w.w);
        dxs[t] = dconcat.slice(s![.., ..input]).to_owned();
        for (d, v) in dh_next.iter_mut().zip(dconcat.slice(s![.., input..]).iter()) {
            *d = *v;
        }
    }
    dxs
}

/// Single-sample LSTM cell update.
pub fn lstm_step(x: &[f64], state: &LstmState, w: &LstmWeights) -> Result<LstmState> {
    let hid = w.hidden();
    if x.len() != w.input_dim() {
        return Err(NeuralError::DimMismatch { expected: w.input_dim(), found: x.len() });
    }
    if state.h.len() != hid || state.c.len() != hid {
        return Err(NeuralError::DimMismatch { expected: hid, found: state.h.len().max(state.c.len()) });
    }
    let xv = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
    let hv = ArrayView2::from_shape((1, hid), &state.h).expect("row vector");
    let (h, c, _) = step_batch(w, xv, hv, state.c.clone());
    Ok(LstmState { h: h.into_raw_vec_and_offset().0, c })
}

/// A batch of equal-length input sequences and their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqBatch {
    /// `B x T x I`.
    pub inputs: Array3<f64>,
    /// `B x horizon`.
    pub targets: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmNet {
    pub layers: Vec<LstmWeights>,
    pub head: Dense,
}

impl LstmNet {
    pub fn new(layers: Vec<LstmWeights>, head: Dense) -> Result<Self> {
        let net = LstmNet { layers, head };
        net.validate()?;
        Ok(net)
    }

    pub fn init<R: Rng + ?Sized>(input: usize, hidden: &[usize], horizon: usize, rng: &mut R) -> Result<Self> {
        if input == 0 || horizon == 0 || hidden.is_empty() || hidden.contains(&0) {
            return Err(NeuralError::InvalidArchitecture(format!("lstm {input} -> {hidden:?} -> {horizon}")));
        }
        let mut layers = Vec::with_capacity(hidden.len());
        let mut prev = input;
        for &h in hidden {
            layers.push(LstmWeights::init(prev, h, rng));
            prev = h;
        }
        LstmNet::new(layers, Dense::init(prev, horizon, rng))
    }

    pub fn zeros(input: usize, hidden: &[usize], horizon: usize) -> Result<Self> {
        let mut layers = Vec::new();
        let mut prev = input;
        for &h in hidden {
            layers.push(LstmWeights::zeros(prev, h));
            prev = h;
        }
        LstmNet::new(layers, Dense::zeros(prev, horizon))
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.layers.first() else {
            return Err(NeuralError::InvalidArchitecture("no lstm layers".into()));
        };
        let mut prev = first.input_dim();
        for l in &self.layers {
            l.check()?;
            if l.input_dim() != prev {
                return Err(NeuralError::DimMismatch { expected: prev, found: l.input_dim() });
            }
            prev = l.hidden();
        }
        if self.head.input_dim() != prev || self.head.b.len() != self.head.output_dim() {
            return Err(NeuralError::DimMismatch { expected: prev, found: self.head.input_dim() });
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        self.layers.iter().map(LstmWeights::hidden).collect()
    }

    pub fn horizon(&self) -> usize {
        self.head.output_dim()
    }

    fn split_steps(&self, inputs: ArrayView3<f64>) -> Result<Vec<Array2<f64>>> {
        let (bsz, steps, feat) = inputs.dim();
        if steps == 0 {
            return Err(NeuralError::EmptySequence);
        }
        if bsz == 0 {
            return Err(NeuralError::EmptyBatch);
        }
        if feat != self.input_dim() {
            return Err(NeuralError::DimMismatch { expected: self.input_dim(), found: feat });
        }
        Ok((0..steps).map(|t| inputs.index_axis(Axis(1), t).to_owned()).collect())
    }

    /// Forward pass keeping every layer's caches; returns the readout input
    /// and output.
    fn forward_cached(&self, xs: Vec<Array2<f64>>) -> (Vec<Vec<StepCache>>, Array2<f64>, Array2<f64>) {
        let mut seq = xs;
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (hs, c) = layer_forward(layer, &seq);
            caches.push(c);
            seq = hs;
        }
        let last = seq.pop().expect("nonempty sequence");
        let out = self.head.forward(last.view());
        (caches, last, out)
    }

    /// Batched prediction, `B x horizon`.
    pub fn predict(&self, inputs: ArrayView3<f64>) -> Result<Array2<f64>> {
        let xs = self.split_steps(inputs)?;
        let mut seq = xs;
        for layer in &self.layers {
            seq = layer_forward(layer, &seq).0;
        }
        Ok(self.head.forward(seq.last().expect("nonempty sequence").view()))
    }

    /// Single-sequence forward pass.
    pub fn forward(&self, sequence: &[Vec<f64>]) -> Result<Vec<f64>> {
        if sequence.is_empty() {
            return Err(NeuralError::EmptySequence);
        }
        let feat = self.input_dim();
        let mut flat = Vec::with_capacity(sequence.len() * feat);
        for x in sequence {
            if x.len() != feat {
                return Err(NeuralError::DimMismatch { expected: feat, found: x.len() });
            }
            flat.extend_from_slice(x);
        }
        let inputs = Array3::from_shape_vec((1, sequence.len(), feat), flat).expect("sized above");
        Ok(self.predict(inputs.view())?.into_raw_vec_and_offset().0)
    }

    /// Mean squared error over the batch and its gradient for every
    /// parameter, by backpropagation through time.
    pub fn loss_and_gradients(&self, batch: &SeqBatch, loss: Loss) -> Result<(f64, Gradients)> {
        if loss != Loss::Mse {
            return Err(NeuralError::IncompatibleLoss { loss, model: "regression lstm" });
        }
        let xs = self.split_steps(batch.inputs.view())?;
        let bsz = xs[0].nrows();
        if batch.targets.dim() != (bsz, self.horizon()) {
            return Err(NeuralError::DimMismatch { expected: bsz * self.horizon(), found: batch.targets.len() });
        }
        let steps = xs.len();
        let (caches, last, pred) = self.forward_cached(xs);
        let resid = &pred - &batch.targets;
        let count = resid.len() as f64;
        let value = resid.iter().map(|r| r * r).sum::<f64>() / count;
        if !value.is_finite() {
            return Err(NeuralError::NonFiniteLoss);
        }
        let dpred = resid * (2.0 / count);

        let mut grads = Gradients::zeros_like(&self.param_lens());
        let nl = self.layers.len();
        let (layer_grads, head_grads) = grads.0.split_at_mut(2 * nl);
        let (hw, hb) = head_grads.split_at_mut(1);
        let dlast = self.head.backward(last.view(), dpred.view(), &mut hw[0], &mut hb[0]);

        let mut dh_above: Vec<Option<Array2<f64>>> = vec![None; steps];
        dh_above[steps - 1] = Some(to_standard(dlast));
        for l in (0..nl).rev() {
            let (gw, gb) = layer_grads[2 * l..2 * l + 2].split_at_mut(1);
            let dxs = layer_backward(&self.layers[l], &caches[l], &dh_above, &mut gw[0], &mut gb[0]);
            if l > 0 {
                dh_above = dxs.into_iter().map(Some).collect();
            }
        }
        Ok((value, grads))
    }
}

impl Params for LstmNet {
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in &self.layers {
            out.push(l.w.as_slice().expect("standard layout"));
            out.push(l.b.as_slice().expect("contiguous"));
        }
        out.extend(self.head.slices());
        out
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in &mut self.layers {
            out.push(l.w.as_slice_mut().expect("standard layout"));
            out.push(l.b.as_slice_mut().expect("contiguous"));
        }
        out.extend(self.head.slices_mut());
        out
    }
}

/// Runs `stack` over `sequence` from zero state and applies `head` to the
/// final top-layer hidden state.
pub fn lstm_forward(sequence: &[Vec<f64>], stack: &[LstmWeights], head: &Dense) -> Result<Vec<f64>> {
    LstmNet::new(stack.to_vec(), head.clone())?.forward(sequence)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_step(x: &[f64], h: &[f64], c: &[f64], w: &LstmWeights) -> (Vec<f64>, Vec<f64>) {
        let hid = w.hidden();
        let input: Vec<f64> = x.iter().chain(h).copied().collect();
        let pre = |row: usize| w.b[row] + (0..input.len()).map(|j| w.w[[row, j]] * input[j]).sum::<f64>();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h_out = vec![0.0; hid];
        let mut c_out = vec![0.0; hid];
        for k in 0..hid {
            let i = sig(pre(k));
            let f = sig(pre(hid + k));
            let o = sig(pre(2 * hid + k));
            let cand = pre(3 * hid + k).tanh();
            c_out[k] = f * c[k] + i * cand;
            h_out[k] = o * c_out[k].tanh();
        }
        (h_out, c_out)
    }

    #[test]
    fn zero_cell_is_half_gated() {
        let w = LstmWeights::zeros(2, 1);
        let s = lstm_step(&[0.3, -0.7], &LstmState::zeros(1), &w).unwrap();
        assert_eq!(s, LstmState::zeros(1));
        let s = lstm_step(&[0.0, 0.0], &LstmState { h: vec![0.0], c: vec![2.0] }, &w).unwrap();
        assert_eq!(s.c, vec![1.0]);
        assert!((s.h[0] - 0.5 * 1f64.tanh()).abs() < 1e-15);
        assert!((s.h[0] - 0.3808).abs() < 1e-4);
    }

    #[test]
    fn step_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut w = LstmWeights::init(3, 4, &mut rng);
        w.b.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        let x = [0.4, -1.2, 0.9];
        let state = LstmState { h: vec![0.1, -0.3, 0.5, 0.0], c: vec![1.5, -0.2, 0.0, 0.7] };
        let got = lstm_step(&x, &state, &w).unwrap();
        let (h, c) = naive_step(&x, &state.h, &state.c, &w);
        for k in 0..4 {
            assert!((got.h[k] - h[k]).abs() < 1e-12);
            assert!((got.c[k] - c[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn step_rejects_bad_dims() {
        let w = LstmWeights::zeros(3, 2);
        assert!(matches!(lstm_step(&[1.0], &LstmState::zeros(2), &w), Err(NeuralError::DimMismatch { .. })));
        assert!(matches!(lstm_step(&[1.0; 3], &LstmState::zeros(3), &w), Err(NeuralError::DimMismatch { .. })));
    }

    #[test]
    fn zero_net_returns_readout_bias() {
        let mut net = LstmNet::zeros(2, &[3], 2).unwrap();
        net.head.b = array![0.25, -4.0];
        assert_eq!(net.forward(&[vec![1.0, 2.0]]).unwrap(), vec![0.25, -4.0]);
        assert_eq!(net.forward(&[]).unwrap_err(), NeuralError::EmptySequence);
    }

    #[test]
    fn two_steps_equal_chained_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = LstmNet::init(2, &[3, 2], 1, &mut rng).unwrap();
        let seq = vec![vec![0.5, -0.5], vec![1.0, 0.25]];
        let mut s0 = LstmState::zeros(3);
        let mut s1 = LstmState::zeros(2);
        for x in &seq {
            s0 = lstm_step(x, &s0, &net.layers[0]).unwrap();
            s1 = lstm_step(&s0.h, &s1, &net.layers[1]).unwrap();
        }
        let manual = net.head.b[0] + (0..2).map(|k| net.head.w[[0, k]] * s1.h[k]).sum::<f64>();
        let got = net.forward(&seq).unwrap();
        assert!((got[0] - manual).abs() < 1e-14);
        assert_eq!(got, lstm_forward(&seq, &net.layers, &net.head).unwrap());
    }

    #[test]
    fn batched_prediction_matches_per_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = LstmNet::init(2, &[5, 3], 2, &mut rng).unwrap();
        let inputs = Array3::from_shape_fn((4, 6, 2), |(b, t, i)| ((b * 7 + t * 3 + i) as f64).sin());
        let batch = net.predict(inputs.view()).unwrap();
        for b in 0..4 {
            let seq: Vec<Vec<f64>> = (0..6).map(|t| inputs.slice(s![b, t, ..]).to_vec()).collect();
            let single = net.forward(&seq).unwrap();
            for k in 0..2 {
                assert!((batch[[b, k]] - single[k]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn perfect_prediction_has_zero_loss_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = LstmNet::init(1, &[4], 1, &mut rng).unwrap();
        let inputs = Array3::from_shape_fn((3, 4, 1), |(b, t, _)| (b + t) as f64 * 0.1);
        let targets = net.predict(inputs.view()).unwrap();
        let (loss, grads) = net.loss_and_gradients(&SeqBatch { inputs, targets }, Loss::Mse).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grads.max_abs(), 0.0);
    }

    #[test]
    fn cross_entropy_is_rejected() {
        let net = LstmNet::zeros(1, &[2], 1).unwrap();
        let batch = SeqBatch { inputs: Array3::zeros((1, 2, 1)), targets: Array2::zeros((1, 1)) };
        assert!(matches!(
            net.loss_and_gradients(&batch, Loss::CrossEntropy),
            Err(NeuralError::IncompatibleLoss { .. })
        ));
    }

    #[test]
    fn non_finite_input_is_reported() {
        let net = LstmNet::zeros(1, &[2], 1).unwrap();
        let batch = SeqBatch { inputs: Array3::zeros((1, 2, 1)), targets: array![[f64::NAN]] };
        assert_eq!(net.loss_and_gradients(&batch, Loss::Mse).unwrap_err(), NeuralError::NonFiniteLoss);
    }

    fn finite_difference_check(seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = LstmNet::init(3, &[4], 1, &mut rng).unwrap();
        let inputs = Array3::from_shape_simple_fn((2, 5, 3), || rng.random_range(-1.0..1.0));
        let targets = Array2::from_shape_simple_fn((2, 1), || rng.random_range(-1.0..1.0));
        let batch = SeqBatch { inputs, targets };
        let (_, grads) = net.loss_and_gradients(&batch, Loss::Mse).unwrap();
        let eps = 1e-4;
        let mut worst: f64 = 0.0;
        for (p, g) in grads.0.iter().enumerate() {
            for j in 0..g.len() {
                let mut plus = net.clone();
                plus.param_slices_mut()[p][j] += eps;
                let mut minus = net.clone();
                minus.param_slices_mut()[p][j] -= eps;
                let lp = plus.loss_and_gradients(&batch, Loss::Mse).unwrap().0;
                let lm = minus.loss_and_gradients(&batch, Loss::Mse).unwrap().0;
                let numeric = (lp - lm) / (2.0 * eps);
                let denom = g[j].abs().max(numeric.abs()).max(1e-6);
                worst = worst.max((g[j] - numeric).abs() / denom);
            }
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let err = finite_difference_check(seed);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn hidden_state_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut w = LstmWeights::init(2, 3, &mut rng);
        w.w.mapv_inplace(|v| v * 50.0);
        let mut s = LstmState::zeros(3);
        for t in 0..50 {
            s = lstm_step(&[t as f64, -(t as f64)], &s, &w).unwrap();
            assert!(s.h.iter().all(|h| h.abs() <= 1.0));
            assert!(s.c.iter().all(|c| c.is_finite()));
        }
    }
}
