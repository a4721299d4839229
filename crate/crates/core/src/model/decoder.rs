//! Label decoder: the score-reusing variant and the plain stacked decoder.

use crate::attention::{make_mask, mha, post_mha, pre_mha, AttentionMask, AttentionScores, MaskKind, MhaWeights};
use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::multiplex::{DecoderAttnSharing, DecoderMode, FfnScope, Init, LnSharing, ParamHandle, ParamRegistry};
use crate::tensor::Element;

use super::frontend::positional_encoding;
use super::layers::{residual, Ffn, LayerNorm};

/// Layer norms of a score-reusing decoder layer, in application order.
#[derive(Clone, Debug)]
pub struct SimtDecoderNorms<T> {
    pub pre: LayerNorm<T>,
    pub src: LayerNorm<T>,
    pub ffn1: LayerNorm<T>,
    pub post: LayerNorm<T>,
    pub ffn2: LayerNorm<T>,
}

/// Pre-MHA over the labels, cross attention into the encoder output, FFN,
/// Post-MHA over the first layer's label scores, then the same FFN again.
#[derive(Clone, Debug)]
pub struct SimtDecoderLayer<T> {
    /// Pre-MHA weights; Post-MHA uses the same value projection.
    pub self_att: MhaWeights<T>,
    /// Aliases `self_att` when decoder attention is shared.
    pub cross_att: MhaWeights<T>,
    pub ffn: Ffn<T>,
    pub ln: SimtDecoderNorms<T>,
}

#[derive(Clone, Debug)]
pub struct BaselineDecoderLayer<T> {
    pub self_att: MhaWeights<T>,
    pub src_att: MhaWeights<T>,
    pub ffn: Ffn<T>,
    pub ln_self: LayerNorm<T>,
    pub ln_src: LayerNorm<T>,
    pub ln_ffn: LayerNorm<T>,
}

#[derive(Clone, Debug)]
pub enum DecoderStack<T> {
    Simt(Vec<SimtDecoderLayer<T>>),
    Baseline(Vec<BaselineDecoderLayer<T>>),
}

#[derive(Clone, Debug)]
pub struct Decoder<T> {
    pub embed: ParamHandle<T>,
    /// `None` when the output projection is tied to `embed`.
    pub out_w: Option<ParamHandle<T>>,
    pub out_b: ParamHandle<T>,
    pub stack: DecoderStack<T>,
    pub norm: LayerNorm<T>,
    d_model: usize,
    vocab: usize,
    max_len: usize,
    dropout: f64,
    post_mha_proj: bool,
}

impl<T: Element> Decoder<T> {
    pub fn bind(reg: &mut ParamRegistry<T>, cfg: &ModelConfig) -> Result<Self> {
        let (d, h, ff, v) = (cfg.d_model, cfg.heads, cfg.d_ff, cfg.vocab_size);
        let stack = match cfg.sharing.decoder {
            DecoderMode::Simt => {
                let mut layers = Vec::with_capacity(cfg.dec_layers);
                for i in 0..cfg.dec_layers {
                    let p = format!("dec.l{i}");
                    let (self_att, cross_att) = match cfg.sharing.decoder_attn {
                        DecoderAttnSharing::Shared => {
                            let a = MhaWeights::bind(reg, &format!("{p}.att"), d, h)?;
                            (a.clone(), a)
                        }
                        DecoderAttnSharing::Separate => (
                            MhaWeights::bind(reg, &format!("{p}.self_att"), d, h)?,
                            MhaWeights::bind(reg, &format!("{p}.src_att"), d, h)?,
                        ),
                    };
                    let ffn = match cfg.sharing.ffn_scope {
                        FfnScope::PerGroup => Ffn::bind(reg, &format!("{p}.ffn"), d, ff)?,
                        FfnScope::Global => Ffn::bind(reg, "dec.ffn", d, ff)?,
                    };
                    let mut ln = |name: &str| LayerNorm::bind(reg, &format!("{p}.{name}"), d);
                    let norms = match cfg.sharing.ln {
                        LnSharing::PerModule => SimtDecoderNorms {
                            pre: ln("ln_pre")?,
                            src: ln("ln_src")?,
                            ffn1: ln("ln_ffn1")?,
                            post: ln("ln_post")?,
                            ffn2: ln("ln_ffn2")?,
                        },
                        LnSharing::Shared => {
                            let att = ln("ln_att")?;
                            let f = ln("ln_ffn")?;
                            SimtDecoderNorms {
                                pre: att.clone(),
                                src: att.clone(),
                                ffn1: f.clone(),
                                post: att,
                                ffn2: f,
                            }
                        }
                    };
                    layers.push(SimtDecoderLayer {
                        self_att,
                        cross_att,
                        ffn,
                        ln: norms,
                    });
                }
                DecoderStack::Simt(layers)
            }
            DecoderMode::Baseline => {
                let mut layers = Vec::with_capacity(cfg.dec_layers);
                for i in 0..cfg.dec_layers {
                    let p = format!("dec.l{i}");
                    layers.push(BaselineDecoderLayer {
                        self_att: MhaWeights::bind(reg, &format!("{p}.self_att"), d, h)?,
                        src_att: MhaWeights::bind(reg, &format!("{p}.src_att"), d, h)?,
                        ffn: Ffn::bind(reg, &format!("{p}.ffn"), d, ff)?,
                        ln_self: LayerNorm::bind(reg, &format!("{p}.ln_self"), d)?,
                        ln_src: LayerNorm::bind(reg, &format!("{p}.ln_src"), d)?,
                        ln_ffn: LayerNorm::bind(reg, &format!("{p}.ln_ffn"), d)?,
                    });
                }
                DecoderStack::Baseline(layers)
            }
        };
        let embed = reg.get_or_bind("dec.embed", &[v, d], Init::Uniform { fan_in: d })?;
        let out_w = if cfg.tie_embeddings {
            None
        } else {
            Some(reg.get_or_bind("dec.out.w", &[d, v], Init::Uniform { fan_in: d })?)
        };
        Ok(Decoder {
            embed,
            out_w,
            out_b: reg.get_or_bind("dec.out.b", &[v], Init::Zeros)?,
            stack,
            norm: LayerNorm::bind(reg, "dec.norm", d)?,
            d_model: d,
            vocab: v,
            max_len: cfg.max_len,
            dropout: cfg.dropout,
            post_mha_proj: cfg.post_mha_proj,
        })
    }

    /// Logits `[T2, vocab]` for decoder input `tokens` (starting with the
    /// start symbol) attending to `memory` `[T1, d]`, of which the first
    /// `memory_valid` rows are real frames.
    pub fn forward(&self, g: &Graph<T>, memory: Var, memory_valid: usize, tokens: &[usize]) -> Result<Var> {
        let t2 = tokens.len();
        if t2 == 0 {
            return Err(Error::contract("decoder input is empty"));
        }
        if t2 > self.max_len {
            return Err(Error::contract(format!("decoder input length {t2} exceeds max_len {}", self.max_len)));
        }
        let msh = g.shape(memory);
        if msh.len() != 2 || msh[1] != self.d_model {
            return Err(Error::dim("decoder memory", &msh, &[0, self.d_model]));
        }
        let causal = AttentionMask::causal(t2);
        let src_mask = make_mask(MaskKind::Padding, t2, msh[0], memory_valid)?;
        let p = self.dropout;

        let table = g.param(&self.embed);
        let e = g.embedding(table, tokens)?;
        let e = g.scale(e, T::of((self.d_model as f64).sqrt()));
        let e = g.add(e, g.constant(positional_encoding(t2, self.d_model)?))?;
        let mut x = g.dropout(e, p)?;

        match &self.stack {
            DecoderStack::Simt(layers) => {
                let mut first: Option<AttentionScores> = None;
                for layer in layers {
                    let xn = layer.ln.pre.forward(g, x)?;
                    let (s, o) = pre_mha(g, xn, xn, xn, &layer.self_att, &causal)?;
                    let s1 = *first.get_or_insert(s);
                    x = residual(g, x, o, p)?;
                    let xn = layer.ln.src.forward(g, x)?;
                    x = residual(g, x, mha(g, xn, memory, memory, &layer.cross_att, &src_mask)?, p)?;
                    let xn = layer.ln.ffn1.forward(g, x)?;
                    x = residual(g, x, layer.ffn.forward(g, xn)?, p)?;
                    let xn = layer.ln.post.forward(g, x)?;
                    x = residual(g, x, post_mha(g, &s1, xn, &layer.self_att, self.post_mha_proj)?, p)?;
                    let xn = layer.ln.ffn2.forward(g, x)?;
                    x = residual(g, x, layer.ffn.forward(g, xn)?, p)?;
                }
            }
            DecoderStack::Baseline(layers) => {
                for layer in layers {
                    let xn = layer.ln_self.forward(g, x)?;
                    x = residual(g, x, mha(g, xn, xn, xn, &layer.self_att, &causal)?, p)?;
                    let xn = layer.ln_src.forward(g, x)?;
                    x = residual(g, x, mha(g, xn, memory, memory, &layer.src_att, &src_mask)?, p)?;
                    let xn = layer.ln_ffn.forward(g, x)?;
                    x = residual(g, x, layer.ffn.forward(g, xn)?, p)?;
                }
            }
        }
        let x = self.norm.forward(g, x)?;
        let w = match &self.out_w {
            Some(w) => g.param(w),
            None => g.transpose(table)?,
        };
        g.add_bias(g.matmul(x, w)?, g.param(&self.out_b))
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }
}

