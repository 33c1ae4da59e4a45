//! Parameterized building blocks shared by the networks.

use rand::Rng;

use super::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;
use crate::Scalar;

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initializer.
pub fn uniform_init<S: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<S> {
    let a = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| S::of(rng.random_range(-a..=a)))
}

/// Affine map `x · W + b` for row-token inputs (`W` is `in × out`).
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), uniform_init(&[fan_in, fan_out], fan_in, rng))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?;
        Ok(Self { weight, bias })
    }

    /// Same layout, weights and bias all zero.
    pub fn zeros<S: Scalar>(store: &mut ParamStore<S>, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[fan_in, fan_out]))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?;
        Ok(Self { weight, bias })
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.weight))?;
        tape.add_row(y, p.var(self.bias))
    }
}

/// Learnable gain/bias for row layer normalization.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Result<Self> {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[dim], S::one()))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]))?;
        Ok(Self { gain, bias })
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gain), p.var(self.bias))
    }
}
