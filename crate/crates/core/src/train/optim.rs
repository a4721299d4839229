//! Warmup / inverse-square-root learning rate and Adam.

use crate::autograd::Param;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// `scale · d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn lr_schedule(step: usize, d_model: usize, warmup: usize, scale: f64) -> Result<f64> {
    if step == 0 {
        return Err(Error::contract("learning-rate steps start at 1"));
    }
    if warmup == 0 || d_model == 0 {
        return Err(Error::contract("warmup and d_model must be positive"));
    }
    let s = step as f64;
    Ok(scale * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5)))
}

/// Scale that makes the schedule peak at `peak` (reached at `step = warmup`).
pub fn scale_for_peak(peak: f64, d_model: usize, warmup: usize) -> f64 {
    peak * (d_model as f64).sqrt() * (warmup as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// First and second moments per parameter, in the order the parameters are
/// passed to [`OptimState::step`].
#[derive(Clone, Debug)]
pub struct OptimState<T> {
    pub config: AdamConfig,
    pub step: usize,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Element> OptimState<T> {
    pub fn new(params: &[Param<T>], config: AdamConfig) -> Self {
        OptimState {
            config,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(&p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(&p.shape())).collect(),
        }
    }

    /// One bias-corrected Adam update with learning rate `lr`.
    pub fn step(&mut self, params: &[Param<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} parameters, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || m.shape() != g.shape() {
                return Err(Error::contract(format!(
                    "gradient shape {:?} does not match parameter shape {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, p) in params.iter().enumerate() {
            let (m, v, g) = (self.m[i].data_mut(), self.v[i].data_mut(), grads[i].data());
            p.update(|w, _| {
                for j in 0..w.len() {
                    let gj = g[j].as_f64();
                    let mj = beta1 * m[j].as_f64() + (1.0 - beta1) * gj;
                    let vj = beta2 * v[j].as_f64() + (1.0 - beta2) * gj * gj;
                    m[j] = T::of(mj);
                    v[j] = T::of(vj);
                    let delta = lr * (mj / c1) / ((vj / c2).sqrt() + eps);
                    w[j] = T::of(w[j].as_f64() - delta);
                }
            });
        }
        Ok(())
    }

    /// [`Self::step`] using the gradients accumulated in the parameters.
    pub fn step_accumulated(&mut self, params: &[Param<T>], lr: f64) -> Result<()> {
        let grads: Vec<_> = params.iter().map(|p| p.grad()).collect();
        self.step(params, &grads, lr)
    }
}
