//! RMSprop and Adam.

use serde::{Deserialize, Serialize};

use super::{Gradients, NeuralError, Params, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptKind {
    #[serde(rename = "rmsprop", alias = "rms_prop")]
    RmsProp,
    Adam,
}

impl std::str::FromStr for OptKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "rmsprop" | "rms_prop" => Ok(OptKind::RmsProp),
            "adam" => Ok(OptKind::Adam),
            _ => Err(format!("unknown optimizer `{s}` (expected rmsprop or adam)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptConfig {
    pub kind: OptKind,
    pub lr: f64,
    /// RMSprop decay.
    pub rho: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptConfig {
    pub fn rmsprop(lr: f64) -> Self {
        OptConfig { kind: OptKind::RmsProp, lr, ..OptConfig::default() }
    }

    pub fn adam(lr: f64) -> Self {
        OptConfig { kind: OptKind::Adam, lr, ..OptConfig::default() }
    }
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig { kind: OptKind::RmsProp, lr: 1e-3, rho: 0.9, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Accumulators shaped like the model's parameter slices.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub config: OptConfig,
    pub step: u64,
    /// Adam first moment; unused by RMSprop.
    pub m: Vec<Vec<f64>>,
    /// Squared-gradient average.
    pub v: Vec<Vec<f64>>,
}

impl OptState {
    pub fn new(config: OptConfig, lens: &[usize]) -> Self {
        let zeros = || lens.iter().map(|&n| vec![0.0; n]).collect();
        OptState { config, step: 0, m: zeros(), v: zeros() }
    }

    pub fn for_model<P: Params + ?Sized>(config: OptConfig, model: &P) -> Self {
        Self::new(config, &model.param_lens())
    }

    pub fn step<P: Params + ?Sized>(&mut self, model: &mut P, grads: &Gradients) -> Result<()> {
        self.apply(model.param_slices_mut(), grads)
    }

    /// Updates `params` in place.
    pub fn apply(&mut self, mut params: Vec<&mut [f64]>, grads: &Gradients) -> Result<()> {
        let shapes_ok = params.len() == grads.0.len()
            && params.len() == self.v.len()
            && params.iter().zip(&grads.0).zip(&self.v).all(|((p, g), v)| p.len() == g.len() && p.len() == v.len());
        if !shapes_ok {
            return Err(NeuralError::ShapeMismatch);
        }
        self.step += 1;
        let c = self.config;
        match c.kind {
            OptKind::RmsProp => {
                for ((p, g), s) in params.iter_mut().zip(&grads.0).zip(&mut self.v) {
                    for ((p, &g), s) in p.iter_mut().zip(g).zip(s.iter_mut()) {
                        *s = c.rho * *s + (1.0 - c.rho) * g * g;
                        *p -= c.lr * g / (*s + c.eps).sqrt();
                    }
                }
            }
            OptKind::Adam => {
                let t = self.step as i32;
                let bc1 = 1.0 - c.beta1.powi(t);
                let bc2 = 1.0 - c.beta2.powi(t);
                for (((p, g), m), v) in params.iter_mut().zip(&grads.0).zip(&mut self.m).zip(&mut self.v) {
                    for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                        *p -= c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_step(state: &mut OptState, p: &mut f64, g: f64) {
        let mut v = [*p];
        state.apply(vec![&mut v[..]], &Gradients(vec![vec![g]])).unwrap();
        *p = v[0];
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        for cfg in [OptConfig::rmsprop(0.01), OptConfig::adam(0.01)] {
            let mut st = OptState::new(cfg, &[3]);
            let mut p = [1.0, -2.0, 0.5];
            for _ in 0..5 {
                st.apply(vec![&mut p[..]], &Gradients(vec![vec![0.0; 3]])).unwrap();
            }
            assert_eq!(p, [1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn rmsprop_first_step() {
        let mut st = OptState::new(OptConfig::rmsprop(0.001), &[1]);
        let mut p = 0.0;
        scalar_step(&mut st, &mut p, 1.0);
        assert!((p + 0.001 / (0.1f64 + 1e-8).sqrt()).abs() < 1e-15);
        assert!((p + 0.0031623).abs() < 1e-7);
    }

    #[test]
    fn adam_descends_parabola() {
        // independent textbook reimplementation alongside
        let mut st = OptState::new(OptConfig::adam(0.1), &[1]);
        let (mut p, mut q) = (1.0, 1.0);
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=100 {
            let g = 2.0 * p;
            scalar_step(&mut st, &mut p, g);
            let g = 2.0 * q;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            q -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        assert!(p.abs() < 0.1, "{p}");
        assert!((p - q).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut st = OptState::new(OptConfig::default(), &[2]);
        let mut p = [0.0; 3];
        assert_eq!(
            st.apply(vec![&mut p[..]], &Gradients(vec![vec![0.0; 3]])).unwrap_err(),
            NeuralError::ShapeMismatch
        );
        assert_eq!(st.step, 0);
    }

    #[test]
    fn parse_kind() {
        assert_eq!("adam".parse::<OptKind>().unwrap(), OptKind::Adam);
        assert_eq!("rmsprop".parse::<OptKind>().unwrap(), OptKind::RmsProp);
        assert!("sgd".parse::<OptKind>().is_err());
    }
}
