//! Parameter registration and the fully-connected layer shared by the
//! network modules.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    Zeros,
    Const(f64),
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    /// Zero-mean Gaussian with the given standard deviation.
    Normal(f64),
}

/// Registers fresh parameters (when seeded) or binds to existing ones by
/// name (when loading a checkpoint).
pub(crate) struct ParamBuilder<'a> {
    params: &'a mut ParamStore,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> ParamBuilder<'a> {
    pub(crate) fn init(params: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            params,
            rng: Some(rng),
        }
    }

    pub(crate) fn bind(params: &'a mut ParamStore) -> Self {
        Self { params, rng: None }
    }

    pub(crate) fn get(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        init: Init,
        trainable: bool,
    ) -> Result<ParamId> {
        match self.rng.as_deref_mut() {
            Some(rng) => {
                let data: Vec<f64> = match init {
                    Init::Zeros => vec![0.0; rows * cols],
                    Init::Const(c) => vec![c; rows * cols],
                    Init::Uniform(b) => (0..rows * cols).map(|_| rng.gen_range(-b..=b)).collect(),
                    Init::Normal(std) => {
                        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                        (0..rows * cols).map(|_| dist.sample(rng)).collect()
                    }
                };
                Ok(self
                    .params
                    .insert(name, Tensor::matrix(rows, cols, data), trainable))
            }
            None => {
                let id = self.params.id(name)?;
                let found = self.params.get(id).shape().to_vec();
                if found != [rows, cols] {
                    return Err(Error::ParamShape {
                        name: name.to_string(),
                        expected: vec![rows, cols],
                        found,
                    });
                }
                Ok(id)
            }
        }
    }

    pub(crate) fn linear(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        weight: Init,
        bias: Init,
    ) -> Result<Linear> {
        Ok(Linear {
            weight: self.get(&format!("{name}_w"), fan_in, fan_out, weight, true)?,
            bias: self.get(&format!("{name}_b"), 1, fan_out, bias, true)?,
        })
    }
}

/// Xavier/Glorot uniform bound.
pub(crate) fn xavier(fan_in: usize, fan_out: usize) -> Init {
    Init::Uniform((6.0 / (fan_in + fan_out) as f64).sqrt())
}

/// Dense layer `x · W + b` with `W: [fan_in, fan_out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        Ok(g.linear(x, w, b)?)
    }

    /// Pre-activation without the bias.
    pub fn forward_no_bias(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        Ok(g.matmul(x, w)?)
    }
}
