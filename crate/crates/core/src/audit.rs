//! Parameter accounting: closed-form counts per category, enumeration over a
//! built registry, reductions, and fitting an unknown size field to a target.

use std::fmt::{self, Write as _};

use crate::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::model::subsampled_len;
use crate::multiplex::{DecoderAttnSharing, DecoderMode, FfnScope, LnSharing, ParamInfo};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Frontend,
    EncAttention,
    EncFfn,
    EncLn,
    DecAttention,
    DecFfn,
    DecLn,
    Embeddings,
    OutputHead,
}

impl Category {
    pub const ALL: [Category; 9] = [
        Category::Frontend,
        Category::EncAttention,
        Category::EncFfn,
        Category::EncLn,
        Category::DecAttention,
        Category::DecFfn,
        Category::DecLn,
        Category::Embeddings,
        Category::OutputHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Frontend => "frontend",
            Category::EncAttention => "encoder_attention",
            Category::EncFfn => "encoder_ffn",
            Category::EncLn => "encoder_layer_norm",
            Category::DecAttention => "decoder_attention",
            Category::DecFfn => "decoder_ffn",
            Category::DecLn => "decoder_layer_norm",
            Category::Embeddings => "embeddings",
            Category::OutputHead => "output_head",
        }
    }

    /// Category of a registry key.
    pub fn of_key(key: &str) -> Result<Category> {
        let leaf = key.rsplit('.').nth(1).unwrap_or("");
        let cat = if key.starts_with("frontend.") {
            Category::Frontend
        } else if key == "dec.embed" {
            Category::Embeddings
        } else if key.starts_with("dec.out.") {
            Category::OutputHead
        } else if let Some(enc) = key.strip_prefix("enc.") {
            if leaf.starts_with("ln") || enc.starts_with("norm.") {
                Category::EncLn
            } else if leaf == "att" {
                Category::EncAttention
            } else if leaf == "ffn" {
                Category::EncFfn
            } else {
                return Err(Error::Registry(format!("unclassified key `{key}`")));
            }
        } else if let Some(dec) = key.strip_prefix("dec.") {
            if leaf.starts_with("ln") || dec.starts_with("norm.") {
                Category::DecLn
            } else if leaf.ends_with("att") {
                Category::DecAttention
            } else if leaf == "ffn" {
                Category::DecFfn
            } else {
                return Err(Error::Registry(format!("unclassified key `{key}`")));
            }
        } else {
            return Err(Error::Registry(format!("unclassified key `{key}`")));
        };
        Ok(cat)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamReport {
    counts: [usize; 9],
}

impl ParamReport {
    pub fn get(&self, c: Category) -> usize {
        self.counts[c as usize]
    }

    pub fn categories(&self) -> impl Iterator<Item = (Category, usize)> + '_ {
        Category::ALL.iter().map(|&c| (c, self.get(c)))
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn millions(&self) -> f64 {
        self.total() as f64 / 1e6
    }

    /// `category,count` rows, a `total` row and, given a reference, a
    /// `reduction_percent` row.
    pub fn to_csv(&self, reference: Option<&ParamReport>) -> String {
        let mut s = String::from("category,count\n");
        for (c, n) in self.categories() {
            let _ = writeln!(s, "{c},{n}");
        }
        let _ = writeln!(s, "total,{}", self.total());
        if let Some(r) = reference {
            let _ = writeln!(s, "reduction_percent,{:.2}", reduction(self.total(), r.total()));
        }
        s
    }
}

/// Model-size table with reductions against the first row.
pub fn markdown_table(rows: &[(&str, &ParamReport)]) -> String {
    let mut s = String::from("| Model | Params | Size (M) | Reduction |\n|---|---:|---:|---:|\n");
    let base = rows.first().map(|(_, r)| r.total());
    for (name, r) in rows {
        let red = match base {
            Some(b) if b != r.total() => format!("{}%", round_half_up(reduction(r.total(), b))),
            _ => "-".into(),
        };
        let _ = writeln!(s, "| {name} | {} | {:.2} | {red} |", r.total(), r.millions());
    }
    s
}

fn mha(d: usize) -> usize {
    4 * (d * d + d)
}

fn ffn(d: usize, ff: usize) -> usize {
    d * ff + ff + ff * d + d
}

fn ln(d: usize) -> usize {
    2 * d
}

/// Closed-form distinct-parameter count; equals the total a built model's
/// registry reports.
pub fn count(cfg: &ModelConfig) -> ParamReport {
    let (d, ff, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let s = &cfg.sharing;
    let mut c = [0usize; 9];
    let f2 = subsampled_len(cfg.feature_dim);
    c[Category::Frontend as usize] = (9 * d + d) + (9 * d * d + d) + (f2 * d * d + d);

    let l = cfg.enc_layers;
    let (enc_att, enc_ffn, enc_ln) = match cfg.variant {
        Variant::Baseline => (l, l, 2 * l),
        Variant::Simt => {
            let g = cfg.groups;
            let ffns = match s.ffn_scope {
                FfnScope::PerGroup => g,
                FfnScope::Global => 1,
            };
            let lns = match s.ln {
                LnSharing::PerModule => 2 * l,
                LnSharing::Shared => 2 * g,
            };
            (g, ffns, lns)
        }
    };
    c[Category::EncAttention as usize] = enc_att * mha(d);
    c[Category::EncFfn as usize] = enc_ffn * ffn(d, ff);
    c[Category::EncLn as usize] = (enc_ln + 1) * ln(d);

    let m = cfg.dec_layers;
    let (dec_att, dec_ffn, dec_ln) = match s.decoder {
        DecoderMode::Baseline => (2 * m, m, 3 * m),
        DecoderMode::Simt => {
            let att = match s.decoder_attn {
                DecoderAttnSharing::Shared => m,
                DecoderAttnSharing::Separate => 2 * m,
            };
            let ffns = match s.ffn_scope {
                FfnScope::PerGroup => m,
                FfnScope::Global => 1,
            };
            let lns = match s.ln {
                LnSharing::PerModule => 5 * m,
                LnSharing::Shared => 2 * m,
            };
            (att, ffns, lns)
        }
    };
    c[Category::DecAttention as usize] = dec_att * mha(d);
    c[Category::DecFfn as usize] = dec_ffn * ffn(d, ff);
    c[Category::DecLn as usize] = (dec_ln + 1) * ln(d);

    c[Category::Embeddings as usize] = v * d;
    c[Category::OutputHead as usize] = v + if cfg.tie_embeddings { 0 } else { d * v };
    ParamReport { counts: c }
}

/// Report built from a registry listing.
pub fn enumerate(params: &[ParamInfo]) -> Result<ParamReport> {
    let mut c = [0usize; 9];
    for p in params {
        c[Category::of_key(&p.key)? as usize] += p.count;
    }
    Ok(ParamReport { counts: c })
}

/// `(1 − total / reference) · 100`.
pub fn reduction(total: usize, reference: usize) -> f64 {
    (1.0 - total as f64 / reference as f64) * 100.0
}

pub fn round_half_up(x: f64) -> i64 {
    (x + 0.5).floor() as i64
}

/// Size field that [`fit_unknown`] may vary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FitField {
    VocabSize,
    DModel,
    DFf,
    EncLayers,
    Groups,
    DecLayers,
}

impl FitField {
    fn set(self, cfg: &mut ModelConfig, v: usize) {
        match self {
            FitField::VocabSize => cfg.vocab_size = v,
            FitField::DModel => cfg.d_model = v,
            FitField::DFf => cfg.d_ff = v,
            FitField::EncLayers => cfg.enc_layers = v,
            FitField::Groups => cfg.groups = v,
            FitField::DecLayers => cfg.dec_layers = v,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fit {
    pub value: usize,
    pub count: usize,
    /// `count − target`.
    pub residual: i64,
}

/// Picks the candidate whose count is closest to `target` (smaller value
/// on ties). Every candidate must give a valid config, and counts over the
/// sorted candidates must be monotone.
pub fn fit_unknown(target: usize, template: &ModelConfig, field: FitField, candidates: &[usize]) -> Result<Fit> {
    fit_by(target, candidates, |v| {
        let mut cfg = template.clone();
        field.set(&mut cfg, v);
        cfg.validate()?;
        Ok(count(&cfg).total())
    })
}

fn fit_by(target: usize, candidates: &[usize], mut f: impl FnMut(usize) -> Result<usize>) -> Result<Fit> {
    if candidates.is_empty() {
        return Err(Error::contract("no candidates to fit"));
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let counts = sorted.iter().map(|&v| f(v)).collect::<Result<Vec<_>>>()?;
    let up = counts.windows(2).all(|w| w[0] <= w[1]);
    let down = counts.windows(2).all(|w| w[0] >= w[1]);
    if !up && !down {
        return Err(Error::contract("parameter count is not monotone in the fitted field"));
    }
    let (i, _) = counts
        .iter()
        .enumerate()
        .min_by_key(|(_, &c)| c.abs_diff(target))
        .expect("non-empty");
    Ok(Fit {
        value: sorted[i],
        count: counts[i],
        residual: counts[i] as i64 - target as i64,
    })
}

/// A stack of encoder layers used as a language model, with optional
/// grouping of attention and FFN weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LmShape {
    pub d_model: usize,
    pub d_ff: usize,
    pub layers: usize,
    /// Weight-sharing groups; equal to `layers` for an unshared stack.
    pub groups: usize,
    pub vocab: usize,
}

/// Embedding, grouped layers with per-layer norms, final norm and an untied
/// output projection.
pub fn lm_count(s: &LmShape) -> usize {
    let d = s.d_model;
    s.vocab * d + s.groups * (mha(d) + ffn(d, s.d_ff)) + s.layers * 2 * ln(d) + ln(d) + d * s.vocab + s.vocab
}

/// Best `d_model` among `candidates` for an LM of the given shape.
pub fn fit_lm_width(target: usize, template: &LmShape, candidates: &[usize]) -> Result<Fit> {
    fit_by(target, candidates, |d| Ok(lm_count(&LmShape { d_model: d, ..*template })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::multiplex::SharingMode;

    #[test]
    fn block_sizes() {
        assert_eq!(mha(256), 263_168);
        assert_eq!(ffn(256, 2048), 1_050_880);
    }

    #[test]
    fn categories_of_keys() {
        let cases = [
            ("frontend.conv1.w", Category::Frontend),
            ("enc.g3.att.w_q", Category::EncAttention),
            ("enc.ffn.b1", Category::EncFfn),
            ("enc.g0.l1.ln_ffn.gamma", Category::EncLn),
            ("enc.norm.beta", Category::EncLn),
            ("dec.l0.src_att.w_o", Category::DecAttention),
            ("dec.l1.att.b_v", Category::DecAttention),
            ("dec.ffn.w2", Category::DecFfn),
            ("dec.l0.ln_post.gamma", Category::DecLn),
            ("dec.embed", Category::Embeddings),
            ("dec.out.b", Category::OutputHead),
        ];
        for (k, c) in cases {
            assert_eq!(Category::of_key(k).unwrap(), c, "{k}");
        }
        assert!(Category::of_key("misc.w").is_err());
    }

    #[test]
    fn reduction_and_rounding() {
        assert_eq!(reduction(10, 10), 0.0);
        assert_eq!(round_half_up(47.5), 48);
        assert_eq!(round_half_up(47.49), 47);
        assert_eq!(round_half_up(-0.5), 0);
    }

    #[test]
    fn exact_fit_has_zero_residual() {
        let t = ModelConfig::defaults(Variant::Simt);
        let target = count(&ModelConfig { vocab_size: 1234, ..t.clone() }).total();
        let fit = fit_unknown(target, &t, FitField::VocabSize, &(4..5000).collect::<Vec<_>>()).unwrap();
        assert_eq!((fit.value, fit.residual), (1234, 0));
    }

    #[test]
    fn non_monotone_field_is_rejected() {
        let r = fit_by(10, &[1, 2, 3], |v| Ok([5, 9, 7][v - 1]));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn csv_lists_every_category() {
        let r = count(&ModelConfig {
            sharing: SharingMode::SIMT_II,
            ..ModelConfig::defaults(Variant::Simt)
        });
        let csv = r.to_csv(Some(&count(&ModelConfig::defaults(Variant::Baseline))));
        assert_eq!(csv.lines().count(), 1 + 9 + 2);
        assert!(csv.contains(&format!("total,{}", r.total())));
        assert!(csv.lines().last().unwrap().starts_with("reduction_percent,69."));
    }
}
