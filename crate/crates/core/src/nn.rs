//! Small reusable layers: two-layer ReLU MLP and layer normalization.

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// `max(0, x W1 + b1) W2 + b2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            w1: store.add_uniform(format!("{prefix}.w1"), &[input, hidden], input, rng)?,
            b1: store.add_uniform(format!("{prefix}.b1"), &[hidden], input, rng)?,
            w2: store.add_uniform(format!("{prefix}.w2"), &[hidden, output], hidden, rng)?,
            b2: store.add_uniform(format!("{prefix}.b2"), &[output], hidden, rng)?,
        })
    }

    pub fn num_scalars(input: usize, hidden: usize, output: usize) -> usize {
        input * hidden + hidden + hidden * output + output
    }

    /// Applies the MLP over the last axis of `x`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (w1, b1) = (tape.param(store, self.w1), tape.param(store, self.b1));
        let (w2, b2) = (tape.param(store, self.w2), tape.param(store, self.b2));
        let hdn = tape.linear(x, w1, b1)?;
        let hdn = tape.relu(hdn);
        tape.linear(hdn, w2, b2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::full(&[dim], 1.0))?,
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn num_scalars(dim: usize) -> usize {
        2 * dim
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (g, b) = (tape.param(store, self.gamma), tape.param(store, self.beta));
        tape.layer_norm(x, g, b, LN_EPS)
    }

    /// `layer_norm(x + branch)`.
    pub fn residual(&self, tape: &mut Tape, store: &ParamStore, x: Var, branch: Var) -> Result<Var> {
        let s = tape.add(x, branch)?;
        self.forward(tape, store, s)
    }
}
