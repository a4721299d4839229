//! Grouped encoder with attention-score reuse, and the plain stacked encoder.

use crate::attention::{mha, post_mha, pre_mha, AttentionMask, MhaWeights};
use crate::autograd::{Graph, Var};
use crate::config::{ModelConfig, Variant};
use crate::error::Result;
use crate::multiplex::{plan_groups, FfnScope, LnSharing, ParamRegistry};
use crate::tensor::Element;

use super::layers::{residual, Ffn, LayerNorm};

/// One weight-sharing group. Position 0 runs full attention and produces
/// the group's scores; positions `1..=reuse` reuse them through Post-MHA
/// with the same value projection.
#[derive(Clone, Debug)]
pub struct EncoderGroup<T> {
    pub att: MhaWeights<T>,
    pub ffn: Ffn<T>,
    /// One entry per position (per-module) or a single entry (shared).
    pub ln_att: Vec<LayerNorm<T>>,
    pub ln_ffn: Vec<LayerNorm<T>>,
    pub reuse: usize,
}

impl<T> EncoderGroup<T> {
    fn ln(v: &[LayerNorm<T>], pos: usize) -> &LayerNorm<T> {
        &v[pos.min(v.len() - 1)]
    }
}

#[derive(Clone, Debug)]
pub struct BaselineEncoderLayer<T> {
    pub att: MhaWeights<T>,
    pub ffn: Ffn<T>,
    pub ln_att: LayerNorm<T>,
    pub ln_ffn: LayerNorm<T>,
}

#[derive(Clone, Debug)]
pub enum EncoderStack<T> {
    Simt(Vec<EncoderGroup<T>>),
    Baseline(Vec<BaselineEncoderLayer<T>>),
}

#[derive(Clone, Debug)]
pub struct Encoder<T> {
    pub stack: EncoderStack<T>,
    pub norm: LayerNorm<T>,
    dropout: f64,
    post_mha_proj: bool,
}

impl<T: Element> Encoder<T> {
    pub fn bind(reg: &mut ParamRegistry<T>, cfg: &ModelConfig) -> Result<Self> {
        let (d, h, ff) = (cfg.d_model, cfg.heads, cfg.d_ff);
        let stack = match cfg.variant {
            Variant::Simt => {
                let plan = plan_groups(cfg.enc_layers, cfg.groups)?;
                let mut groups = Vec::with_capacity(plan.groups);
                for gi in 0..plan.groups {
                    let p = format!("enc.g{gi}");
                    let att = MhaWeights::bind(reg, &format!("{p}.att"), d, h)?;
                    let ffn = match cfg.sharing.ffn_scope {
                        FfnScope::PerGroup => Ffn::bind(reg, &format!("{p}.ffn"), d, ff)?,
                        FfnScope::Global => Ffn::bind(reg, "enc.ffn", d, ff)?,
                    };
                    let (ln_att, ln_ffn) = match cfg.sharing.ln {
                        LnSharing::PerModule => {
                            let mut a = Vec::new();
                            let mut f = Vec::new();
                            for j in 0..plan.layers_per_group() {
                                a.push(LayerNorm::bind(reg, &format!("{p}.l{j}.ln_att"), d)?);
                                f.push(LayerNorm::bind(reg, &format!("{p}.l{j}.ln_ffn"), d)?);
                            }
                            (a, f)
                        }
                        LnSharing::Shared => (
                            vec![LayerNorm::bind(reg, &format!("{p}.ln_att"), d)?],
                            vec![LayerNorm::bind(reg, &format!("{p}.ln_ffn"), d)?],
                        ),
                    };
                    groups.push(EncoderGroup {
                        att,
                        ffn,
                        ln_att,
                        ln_ffn,
                        reuse: plan.reuse,
                    });
                }
                EncoderStack::Simt(groups)
            }
            Variant::Baseline => {
                // Same keys as a one-layer-per-group grouped encoder, so weights
                // copy across by name.
                let mut layers = Vec::with_capacity(cfg.enc_layers);
                for l in 0..cfg.enc_layers {
                    let p = format!("enc.g{l}");
                    layers.push(BaselineEncoderLayer {
                        att: MhaWeights::bind(reg, &format!("{p}.att"), d, h)?,
                        ffn: Ffn::bind(reg, &format!("{p}.ffn"), d, ff)?,
                        ln_att: LayerNorm::bind(reg, &format!("{p}.l0.ln_att"), d)?,
                        ln_ffn: LayerNorm::bind(reg, &format!("{p}.l0.ln_ffn"), d)?,
                    });
                }
                EncoderStack::Baseline(layers)
            }
        };
        Ok(Encoder {
            stack,
            norm: LayerNorm::bind(reg, "enc.norm", d)?,
            dropout: cfg.dropout,
            post_mha_proj: cfg.post_mha_proj,
        })
    }

    /// `[T1, d]` → `[T1, d]`, ending with the final layer norm.
    pub fn forward(&self, g: &Graph<T>, x: Var, mask: &AttentionMask) -> Result<Var> {
        let p = self.dropout;
        let mut x = x;
        match &self.stack {
            EncoderStack::Simt(groups) => {
                for grp in groups {
                    let xn = EncoderGroup::ln(&grp.ln_att, 0).forward(g, x)?;
                    let (scores, o) = pre_mha(g, xn, xn, xn, &grp.att, mask)?;
                    x = residual(g, x, o, p)?;
                    let xn = EncoderGroup::ln(&grp.ln_ffn, 0).forward(g, x)?;
                    x = residual(g, x, grp.ffn.forward(g, xn)?, p)?;
                    for j in 1..=grp.reuse {
                        let xn = EncoderGroup::ln(&grp.ln_att, j).forward(g, x)?;
                        let o = post_mha(g, &scores, xn, &grp.att, self.post_mha_proj)?;
                        x = residual(g, x, o, p)?;
                        let xn = EncoderGroup::ln(&grp.ln_ffn, j).forward(g, x)?;
                        x = residual(g, x, grp.ffn.forward(g, xn)?, p)?;
                    }
                }
            }
            EncoderStack::Baseline(layers) => {
                for layer in layers {
                    let xn = layer.ln_att.forward(g, x)?;
                    x = residual(g, x, mha(g, xn, xn, xn, &layer.att, mask)?, p)?;
                    let xn = layer.ln_ffn.forward(g, x)?;
                    x = residual(g, x, layer.ffn.forward(g, xn)?, p)?;
                }
            }
        }
        self.norm.forward(g, x)
    }
}
