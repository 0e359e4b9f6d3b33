//! JSON checkpoints: dims, a layout tag and the flat parameter arrays.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{LstmNet, MlpNet, NeuralError, Params, Result};

pub const FORMAT: &str = "smartcampus-net";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub layout: String,
    pub dims: Vec<usize>,
    pub params: Vec<Vec<f64>>,
    /// Free-form numeric side data such as normalisation statistics.
    #[serde(default)]
    pub meta: BTreeMap<String, Vec<f64>>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        if self.params.iter().flatten().chain(self.meta.values().flatten()).any(|v| !v.is_finite()) {
            return Err(NeuralError::Checkpoint("non-finite value".into()));
        }
        let mut s = serde_json::to_string(self).map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s).map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
        if ck.format != FORMAT || ck.version != VERSION {
            return Err(NeuralError::Checkpoint(format!("unsupported {} v{}", ck.format, ck.version)));
        }
        Ok(ck)
    }
}

pub trait Checkpointable: Params + Sized {
    const LAYOUT: &'static str;

    fn dims(&self) -> Vec<usize>;

    /// Builds a zero model with the given dims.
    fn with_dims(dims: &[usize]) -> Result<Self>;

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            layout: Self::LAYOUT.into(),
            dims: self.dims(),
            params: self.param_slices().into_iter().map(<[f64]>::to_vec).collect(),
            meta: BTreeMap::new(),
        }
    }

    fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.layout != Self::LAYOUT {
            return Err(NeuralError::Checkpoint(format!("layout `{}`, expected `{}`", ck.layout, Self::LAYOUT)));
        }
        let mut model = Self::with_dims(&ck.dims)?;
        let mut slots = model.param_slices_mut();
        if slots.len() != ck.params.len() || slots.iter().zip(&ck.params).any(|(s, p)| s.len() != p.len()) {
            return Err(NeuralError::ShapeMismatch);
        }
        for (s, p) in slots.iter_mut().zip(&ck.params) {
            s.copy_from_slice(p);
        }
        Ok(model)
    }
}

impl Checkpointable for LstmNet {
    const LAYOUT: &'static str = "lstm-ifog-xh";

    /// Input, hidden sizes, horizon.
    fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.hidden_dims());
        d.push(self.horizon());
        d
    }

    fn with_dims(dims: &[usize]) -> Result<Self> {
        if dims.len() < 3 || dims.contains(&0) {
            return Err(NeuralError::Checkpoint(format!("lstm dims {dims:?}")));
        }
        LstmNet::zeros(dims[0], &dims[1..dims.len() - 1], dims[dims.len() - 1])
    }
}

impl Checkpointable for MlpNet {
    const LAYOUT: &'static str = "mlp-relu-softmax";

    fn dims(&self) -> Vec<usize> {
        MlpNet::dims(self)
    }

    fn with_dims(dims: &[usize]) -> Result<Self> {
        MlpNet::zeros(dims)
    }
}
