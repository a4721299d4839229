//! Multi-head attention in three forms: the score-producing Pre-MHA, the
//! score-consuming Post-MHA, and the standard MHA that discards its scores.
//!
//! Projections are stored fused (`[d_model, d_model]`); heads are views
//! obtained by splitting the last dim into `heads × d_k`.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::multiplex::{Init, ParamHandle, ParamRegistry};
use crate::tensor::{Element, Tensor};

/// Logit offset applied to disallowed query/key pairs before the softmax.
pub const MASK_SENTINEL: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    None,
    Padding,
    Causal,
    Both,
}

/// Which (query, key) pairs may interact. Query `q` sees key `k` iff
/// `k < valid_keys` and, when causal, `k <= q`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub query_len: usize,
    pub key_len: usize,
    pub valid_keys: usize,
    pub causal: bool,
}

impl AttentionMask {
    pub fn none(query_len: usize, key_len: usize) -> Self {
        AttentionMask {
            query_len,
            key_len,
            valid_keys: key_len,
            causal: false,
        }
    }

    pub fn causal(len: usize) -> Self {
        AttentionMask {
            causal: true,
            ..Self::none(len, len)
        }
    }

    pub fn kind(&self) -> MaskKind {
        match (self.valid_keys < self.key_len, self.causal) {
            (false, false) => MaskKind::None,
            (true, false) => MaskKind::Padding,
            (false, true) => MaskKind::Causal,
            (true, true) => MaskKind::Both,
        }
    }

    pub fn allows(&self, q: usize, k: usize) -> bool {
        k < self.valid_keys && (!self.causal || k <= q)
    }

    /// True when query row `q` has no allowed key; its scores are all zero.
    pub fn row_masked(&self, q: usize) -> bool {
        !(0..self.key_len).any(|k| self.allows(q, k))
    }

    fn logit_bias<T: Element>(&self) -> Option<Tensor<T>> {
        if self.kind() == MaskKind::None {
            return None;
        }
        let (tq, tk) = (self.query_len, self.key_len);
        Some(Tensor::from_fn(&[tq, tk], |i| {
            if self.allows(i / tk, i % tk) {
                T::zero()
            } else {
                T::of(MASK_SENTINEL)
            }
        }))
    }

    fn row_keep<T: Element>(&self, heads: usize) -> Option<Tensor<T>> {
        let masked: Vec<bool> = (0..self.query_len).map(|q| self.row_masked(q)).collect();
        if !masked.iter().any(|&m| m) {
            return None;
        }
        let (tq, tk) = (self.query_len, self.key_len);
        Some(Tensor::from_fn(&[heads, tq, tk], |i| {
            if masked[(i / tk) % tq] {
                T::zero()
            } else {
                T::one()
            }
        }))
    }
}

/// Builds a mask; `valid_keys` is the unpadded key length.
pub fn make_mask(kind: MaskKind, query_len: usize, key_len: usize, valid_keys: usize) -> Result<AttentionMask> {
    if valid_keys > key_len {
        return Err(Error::contract(format!(
            "key length {valid_keys} exceeds extent {key_len}"
        )));
    }
    let causal = matches!(kind, MaskKind::Causal | MaskKind::Both);
    if causal && query_len != key_len {
        return Err(Error::contract(format!(
            "causal mask needs square extents, got {query_len}x{key_len}"
        )));
    }
    let valid_keys = match kind {
        MaskKind::Padding | MaskKind::Both => valid_keys,
        _ => key_len,
    };
    Ok(AttentionMask {
        query_len,
        key_len,
        valid_keys,
        causal,
    })
}

/// Per-head row-stochastic scores `[heads, T_q, T_k]` bound to a graph.
#[derive(Clone, Copy, Debug)]
pub struct AttentionScores {
    pub values: Var,
    pub mask: AttentionMask,
    pub heads: usize,
}

impl AttentionScores {
    pub fn query_len(&self) -> usize {
        self.mask.query_len
    }

    pub fn key_len(&self) -> usize {
        self.mask.key_len
    }
}

#[derive(Clone, Debug)]
pub struct MhaWeights<T> {
    pub heads: usize,
    pub d_model: usize,
    pub w_q: ParamHandle<T>,
    pub b_q: ParamHandle<T>,
    pub w_k: ParamHandle<T>,
    pub b_k: ParamHandle<T>,
    pub w_v: ParamHandle<T>,
    pub b_v: ParamHandle<T>,
    pub w_o: ParamHandle<T>,
    pub b_o: ParamHandle<T>,
}

impl<T: Element> MhaWeights<T> {
    /// Binds (or aliases) `{prefix}.w_q` … `{prefix}.b_o`.
    pub fn bind(reg: &mut ParamRegistry<T>, prefix: &str, d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::config("heads", format!("d_model {d_model} not divisible by {heads} heads")));
        }
        let mat = |reg: &mut ParamRegistry<T>, n: &str| {
            reg.get_or_bind(&format!("{prefix}.{n}"), &[d_model, d_model], Init::Uniform { fan_in: d_model })
        };
        let vec = |reg: &mut ParamRegistry<T>, n: &str| {
            reg.get_or_bind(&format!("{prefix}.{n}"), &[d_model], Init::Uniform { fan_in: d_model })
        };
        Ok(MhaWeights {
            heads,
            d_model,
            w_q: mat(reg, "w_q")?,
            b_q: vec(reg, "b_q")?,
            w_k: mat(reg, "w_k")?,
            b_k: vec(reg, "b_k")?,
            w_v: mat(reg, "w_v")?,
            b_v: vec(reg, "b_v")?,
            w_o: mat(reg, "w_o")?,
            b_o: vec(reg, "b_o")?,
        })
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }
}

fn linear<T: Element>(g: &Graph<T>, x: Var, w: &ParamHandle<T>, b: &ParamHandle<T>) -> Result<Var> {
    let y = g.matmul(x, g.param(w))?;
    g.add_bias(y, g.param(b))
}

/// `[T, d]` → `[heads, T, d_k]`.
fn split_heads<T: Element>(g: &Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let sh = g.shape(x);
    let (t, d) = (sh[0], sh[1]);
    let x = g.reshape(x, &[t, heads, d / heads])?;
    g.permute(x, &[1, 0, 2])
}

/// `[heads, T, d_k]` → `[T, heads·d_k]`.
fn merge_heads<T: Element>(g: &Graph<T>, x: Var) -> Result<Var> {
    let sh = g.shape(x);
    let (h, t, dk) = (sh[0], sh[1], sh[2]);
    let x = g.permute(x, &[1, 0, 2])?;
    g.reshape(x, &[t, h * dk])
}

fn check_rows<T: Element>(g: &Graph<T>, x: Var, d: usize, op: &'static str) -> Result<usize> {
    let sh = g.shape(x);
    if sh.len() != 2 || sh[1] != d {
        return Err(Error::dim(op, &sh, &[0, d]));
    }
    Ok(sh[0])
}

/// Returns the per-head scores `softmax(QKᵀ/√d_k)` and the projected output
/// `Concat(S·V per head)·W_o`. The scores are recorded in the graph's
/// score log as produced.
pub fn pre_mha<T: Element>(
    g: &Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    w: &MhaWeights<T>,
    mask: &AttentionMask,
) -> Result<(AttentionScores, Var)> {
    attend(g, q, k, v, w, mask, true)
}

fn attend<T: Element>(
    g: &Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    w: &MhaWeights<T>,
    mask: &AttentionMask,
    log: bool,
) -> Result<(AttentionScores, Var)> {
    let d = w.d_model;
    let tq = check_rows(g, q, d, "pre_mha query")?;
    let tk = check_rows(g, k, d, "pre_mha key")?;
    let tv = check_rows(g, v, d, "pre_mha value")?;
    if tk != tv || mask.query_len != tq || mask.key_len != tk {
        return Err(Error::dim("pre_mha mask", &[tq, tk, tv], &[mask.query_len, mask.key_len]));
    }
    let qh = split_heads(g, linear(g, q, &w.w_q, &w.b_q)?, w.heads)?;
    let kh = split_heads(g, linear(g, k, &w.w_k, &w.b_k)?, w.heads)?;
    let logits = g.matmul(qh, g.transpose(kh)?)?;
    let mut logits = g.scale(logits, T::of(1.0 / (w.d_k() as f64).sqrt()));
    if let Some(bias) = mask.logit_bias::<T>() {
        logits = g.add_bias(logits, g.constant(bias))?;
    }
    let mut s = g.softmax(logits)?;
    if let Some(keep) = mask.row_keep::<T>(w.heads) {
        s = g.mul_const(s, &keep)?;
    }
    if log {
        g.log_scores_produced(s);
    }
    let scores = AttentionScores {
        values: s,
        mask: *mask,
        heads: w.heads,
    };
    let vh = split_heads(g, linear(g, v, &w.w_v, &w.b_v)?, w.heads)?;
    let heads = merge_heads(g, g.matmul(s, vh)?)?;
    let out = linear(g, heads, &w.w_o, &w.b_o)?;
    Ok((scores, out))
}

/// Reuses externally produced scores: per head `S_n · (v W_v + b_v)_n`,
/// concatenated. The output projection `W_o` is applied only when
/// `output_proj` is set.
pub fn post_mha<T: Element>(
    g: &Graph<T>,
    scores: &AttentionScores,
    v: Var,
    w: &MhaWeights<T>,
    output_proj: bool,
) -> Result<Var> {
    let tv = check_rows(g, v, w.d_model, "post_mha value")?;
    if tv != scores.key_len() || scores.heads != w.heads {
        return Err(Error::dim(
            "post_mha scores",
            &[scores.heads, scores.query_len(), scores.key_len()],
            &[w.heads, tv],
        ));
    }
    g.log_scores_consumed(scores.values);
    let vh = split_heads(g, linear(g, v, &w.w_v, &w.b_v)?, w.heads)?;
    let heads = merge_heads(g, g.matmul(scores.values, vh)?)?;
    if output_proj {
        linear(g, heads, &w.w_o, &w.b_o)
    } else {
        Ok(heads)
    }
}

/// Standard multi-head attention; the scores are neither exposed nor logged.
pub fn mha<T: Element>(
    g: &Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    w: &MhaWeights<T>,
    mask: &AttentionMask,
) -> Result<Var> {
    attend(g, q, k, v, w, mask, false).map(|(_, out)| out)
}
