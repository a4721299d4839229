//! Convolutional 4× subsampling and sinusoidal positional encoding.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::multiplex::{Init, ParamHandle, ParamRegistry};
use crate::tensor::{Element, Tensor};

const KERNEL: usize = 3;
const STRIDE: usize = 2;

/// Output length of one kernel-3, stride-2, unpadded convolution.
pub fn conv_out_len(n: usize) -> usize {
    if n < KERNEL {
        0
    } else {
        (n - KERNEL) / STRIDE + 1
    }
}

/// Output length after both convolutions.
pub fn subsampled_len(n: usize) -> usize {
    conv_out_len(conv_out_len(n))
}

/// Two 3×3 stride-2 convolutions over (time, feature) with ReLU, the second
/// with `d_model` input channels, then a linear map of the flattened
/// (feature, channel) axis to `d_model`.
#[derive(Clone, Debug)]
pub struct Frontend<T> {
    pub d_model: usize,
    pub feature_dim: usize,
    conv1_w: ParamHandle<T>,
    conv1_b: ParamHandle<T>,
    conv2_w: ParamHandle<T>,
    conv2_b: ParamHandle<T>,
    proj_w: ParamHandle<T>,
    proj_b: ParamHandle<T>,
}

impl<T: Element> Frontend<T> {
    pub fn bind(reg: &mut ParamRegistry<T>, d_model: usize, feature_dim: usize) -> Result<Self> {
        let f2 = subsampled_len(feature_dim);
        if f2 == 0 {
            return Err(Error::config("feature_dim", "too small for two stride-2 convolutions"));
        }
        let k2 = KERNEL * KERNEL;
        let uni = |fan_in| Init::Uniform { fan_in };
        Ok(Frontend {
            d_model,
            feature_dim,
            conv1_w: reg.get_or_bind("frontend.conv1.w", &[KERNEL, KERNEL, 1, d_model], uni(k2))?,
            conv1_b: reg.get_or_bind("frontend.conv1.b", &[d_model], uni(k2))?,
            conv2_w: reg.get_or_bind("frontend.conv2.w", &[KERNEL, KERNEL, d_model, d_model], uni(k2 * d_model))?,
            conv2_b: reg.get_or_bind("frontend.conv2.b", &[d_model], uni(k2 * d_model))?,
            proj_w: reg.get_or_bind("frontend.proj.w", &[f2 * d_model, d_model], uni(f2 * d_model))?,
            proj_b: reg.get_or_bind("frontend.proj.b", &[d_model], uni(f2 * d_model))?,
        })
    }

    /// `[T, feature_dim]` → `([T', d_model], valid')` where `T'` and
    /// `valid'` follow [`subsampled_len`].
    pub fn conv_subsample(&self, g: &Graph<T>, features: Var, valid_len: usize) -> Result<(Var, usize)> {
        let sh = g.shape(features);
        if sh.len() != 2 || sh[1] != self.feature_dim {
            return Err(Error::dim("conv_subsample", &sh, &[0, self.feature_dim]));
        }
        let t = sh[0];
        if subsampled_len(t) == 0 {
            return Err(Error::contract(format!("{t} frames is too short to subsample (need at least 7)")));
        }
        if valid_len > t {
            return Err(Error::contract(format!("valid length {valid_len} exceeds {t} frames")));
        }
        let d = self.d_model;
        let (idx, t1, f1) = im2col(t, self.feature_dim, 1);
        let cols = g.gather(features, idx, &[t1 * f1, KERNEL * KERNEL])?;
        let w1 = g.reshape(g.param(&self.conv1_w), &[KERNEL * KERNEL, d])?;
        let h = g.add_bias(g.matmul(cols, w1)?, g.param(&self.conv1_b))?;
        let h = g.relu(h);

        let (idx, t2, f2) = im2col(t1, f1, d);
        let cols = g.gather(h, idx, &[t2 * f2, KERNEL * KERNEL * d])?;
        let w2 = g.reshape(g.param(&self.conv2_w), &[KERNEL * KERNEL * d, d])?;
        let h = g.add_bias(g.matmul(cols, w2)?, g.param(&self.conv2_b))?;
        let h = g.relu(h);

        let h = g.reshape(h, &[t2, f2 * d])?;
        let out = g.add_bias(g.matmul(h, g.param(&self.proj_w))?, g.param(&self.proj_b))?;
        Ok((out, subsampled_len(valid_len)))
    }
}

/// Gather indices turning a `[t, f, c]` map into `[t'·f', 9·c]` patches,
/// columns ordered (kernel row, kernel col, channel).
fn im2col(t: usize, f: usize, c: usize) -> (Vec<usize>, usize, usize) {
    let (to, fo) = (conv_out_len(t), conv_out_len(f));
    let mut idx = Vec::with_capacity(to * fo * KERNEL * KERNEL * c);
    for i in 0..to {
        for j in 0..fo {
            for kh in 0..KERNEL {
                for kw in 0..KERNEL {
                    let base = ((STRIDE * i + kh) * f + STRIDE * j + kw) * c;
                    idx.extend(base..base + c);
                }
            }
        }
    }
    (idx, to, fo)
}

/// `PE[t, 2i] = sin(t / 10000^(2i/d))`, `PE[t, 2i+1] = cos(t / 10000^(2i/d))`.
pub fn positional_encoding<T: Element>(len: usize, d_model: usize) -> Result<Tensor<T>> {
    if d_model % 2 != 0 {
        return Err(Error::config("d_model", "positional encoding needs an even d_model"));
    }
    Ok(Tensor::from_fn(&[len, d_model], |k| {
        let (t, c) = (k / d_model, k % d_model);
        let i2 = (c - c % 2) as f64;
        let angle = t as f64 / 10000f64.powf(i2 / d_model as f64);
        T::of(if c % 2 == 0 { angle.sin() } else { angle.cos() })
    }))
}
