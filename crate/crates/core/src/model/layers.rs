//! Layer norm, position-wise FFN and the pre-norm residual wrapper.

use crate::autograd::{Graph, Var};
use crate::config::LN_EPS;
use crate::error::Result;
use crate::multiplex::{Init, ParamHandle, ParamRegistry};
use crate::tensor::Element;

#[derive(Clone, Debug)]
pub struct LayerNorm<T> {
    pub gamma: ParamHandle<T>,
    pub beta: ParamHandle<T>,
}

impl<T: Element> LayerNorm<T> {
    /// Binds `{prefix}.gamma` (ones) and `{prefix}.beta` (zeros).
    pub fn bind(reg: &mut ParamRegistry<T>, prefix: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: reg.get_or_bind(&format!("{prefix}.gamma"), &[d], Init::Ones)?,
            beta: reg.get_or_bind(&format!("{prefix}.beta"), &[d], Init::Zeros)?,
        })
    }

    pub fn forward(&self, g: &Graph<T>, x: Var) -> Result<Var> {
        g.layer_norm(x, g.param(&self.gamma), g.param(&self.beta), LN_EPS)
    }
}

/// `ReLU(x W1 + b1) W2 + b2`.
#[derive(Clone, Debug)]
pub struct Ffn<T> {
    pub w1: ParamHandle<T>,
    pub b1: ParamHandle<T>,
    pub w2: ParamHandle<T>,
    pub b2: ParamHandle<T>,
}

impl<T: Element> Ffn<T> {
    pub fn bind(reg: &mut ParamRegistry<T>, prefix: &str, d_model: usize, d_ff: usize) -> Result<Self> {
        let k = |n: &str| format!("{prefix}.{n}");
        Ok(Ffn {
            w1: reg.get_or_bind(&k("w1"), &[d_model, d_ff], Init::Uniform { fan_in: d_model })?,
            b1: reg.get_or_bind(&k("b1"), &[d_ff], Init::Uniform { fan_in: d_model })?,
            w2: reg.get_or_bind(&k("w2"), &[d_ff, d_model], Init::Uniform { fan_in: d_ff })?,
            b2: reg.get_or_bind(&k("b2"), &[d_model], Init::Uniform { fan_in: d_ff })?,
        })
    }

    pub fn forward(&self, g: &Graph<T>, x: Var) -> Result<Var> {
        let h = g.add_bias(g.matmul(x, g.param(&self.w1))?, g.param(&self.b1))?;
        let h = g.relu(h);
        g.add_bias(g.matmul(h, g.param(&self.w2))?, g.param(&self.b2))
    }
}

/// `x + dropout(y)`.
pub fn residual<T: Element>(g: &Graph<T>, x: Var, y: Var, p: f64) -> Result<Var> {
    let y = g.dropout(y, p)?;
    g.add(x, y)
}
