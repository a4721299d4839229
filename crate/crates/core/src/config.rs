//! Model configuration and its flat `key = value` text form.
//!
//! The text form is what preset files and checkpoints carry. Every key except
//! `variant` has a default; unknown keys are rejected.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::multiplex::{DecoderAttnSharing, DecoderMode, FfnScope, LnSharing, SharingMode};

/// Vocabulary size that makes the reference baseline count to 30.36M
/// parameters (see `audit::fit_unknown`).
pub const FITTED_BASELINE_VOCAB: usize = 6369;

/// Layer-norm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Simt,
    Baseline,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Simt => "simt",
            Variant::Baseline => "baseline",
        })
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "simt" => Ok(Variant::Simt),
            "baseline" => Ok(Variant::Baseline),
            _ => Err("expected one of: simt, baseline".into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub enc_layers: usize,
    /// Encoder groups; ignored by the baseline encoder.
    pub groups: usize,
    pub dec_layers: usize,
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub sharing: SharingMode,
    pub dropout: f64,
    pub max_len: usize,
    pub tie_embeddings: bool,
    /// Apply the producing module's output projection after Post-MHA.
    pub post_mha_proj: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// Defaults for `variant`: the full-scale recipe (d_model 256, d_ff 2048,
    /// 4 heads, 12 encoder layers; baseline 6 decoder layers, Sim-T 6 groups
    /// and 2 decoder layers).
    pub fn defaults(variant: Variant) -> Self {
        let simt = variant == Variant::Simt;
        ModelConfig {
            variant,
            d_model: 256,
            d_ff: 2048,
            heads: 4,
            enc_layers: 12,
            groups: if simt { 6 } else { 12 },
            dec_layers: if simt { 2 } else { 6 },
            vocab_size: FITTED_BASELINE_VOCAB,
            feature_dim: 80,
            sharing: SharingMode {
                decoder: if simt { DecoderMode::Simt } else { DecoderMode::Baseline },
                ..SharingMode::SIMT_I
            },
            dropout: 0.1,
            max_len: 512,
            tie_embeddings: false,
            post_mha_proj: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonzero = [
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("heads", self.heads),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("max_len", self.max_len),
        ];
        for (k, v) in nonzero {
            if v == 0 {
                return Err(Error::config(k, "must be positive"));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::config(
                "heads",
                format!("d_model {} not divisible by {} heads", self.d_model, self.heads),
            ));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::config("d_model", "positional encoding needs an even d_model"));
        }
        if self.variant == Variant::Simt {
            if self.groups == 0 || self.groups > self.enc_layers || self.enc_layers % self.groups != 0 {
                return Err(Error::config(
                    "groups",
                    format!("{} encoder layers cannot form {} equal groups", self.enc_layers, self.groups),
                ));
            }
        }
        if self.vocab_size < 4 {
            return Err(Error::config("vocab_size", "needs room for pad/sos/eos plus one token"));
        }
        if crate::model::frontend::subsampled_len(self.feature_dim) == 0 {
            return Err(Error::config("feature_dim", "must be at least 7 for two stride-2 convolutions"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must be in [0, 1)"));
        }
        Ok(())
    }

    /// Encoder group count actually used by the model.
    pub fn effective_groups(&self) -> usize {
        match self.variant {
            Variant::Simt => self.groups,
            Variant::Baseline => self.enc_layers,
        }
    }

    /// Parses the `key = value` text form.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::ConfigParse {
                    line: i + 1,
                    message: format!("expected `key = value`, got `{line}`"),
                });
            };
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(Error::ConfigParse {
                    line: i + 1,
                    message: format!("unknown key `{k}`"),
                });
            }
            if pairs.iter().any(|(_, pk, _): &(usize, &str, &str)| *pk == k) {
                return Err(Error::ConfigParse {
                    line: i + 1,
                    message: format!("duplicate key `{k}`"),
                });
            }
            pairs.push((i + 1, k, v));
        }
        let Some(&(vline, _, vtext)) = pairs.iter().find(|p| p.1 == "variant") else {
            return Err(Error::config("variant", "required key missing"));
        };
        let variant = parse_value(vline, "variant", vtext)?;
        let mut cfg = Self::defaults(variant);
        for &(line, k, v) in &pairs {
            match k {
                "variant" => {}
                "d_model" => cfg.d_model = parse_value(line, k, v)?,
                "d_ff" => cfg.d_ff = parse_value(line, k, v)?,
                "heads" => cfg.heads = parse_value(line, k, v)?,
                "enc_layers" => cfg.enc_layers = parse_value(line, k, v)?,
                "groups" => cfg.groups = parse_value(line, k, v)?,
                "dec_layers" => cfg.dec_layers = parse_value(line, k, v)?,
                "vocab_size" => cfg.vocab_size = parse_value(line, k, v)?,
                "feature_dim" => cfg.feature_dim = parse_value(line, k, v)?,
                "ln_sharing" => cfg.sharing.ln = parse_value::<LnSharing>(line, k, v)?,
                "ffn_scope" => cfg.sharing.ffn_scope = parse_value::<FfnScope>(line, k, v)?,
                "decoder_mode" => cfg.sharing.decoder = parse_value::<DecoderMode>(line, k, v)?,
                "dec_attn_sharing" => cfg.sharing.decoder_attn = parse_value::<DecoderAttnSharing>(line, k, v)?,
                "dropout" => cfg.dropout = parse_value(line, k, v)?,
                "seed" => cfg.seed = parse_value(line, k, v)?,
                "tie_embeddings" => cfg.tie_embeddings = parse_value(line, k, v)?,
                "post_mha_proj" => cfg.post_mha_proj = parse_value(line, k, v)?,
                "max_len" => cfg.max_len = parse_value(line, k, v)?,
                _ => unreachable!("key list checked above"),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form: every key, fixed order, one per line.
    pub fn to_canonical(&self) -> String {
        let s = &self.sharing;
        let rows = [
            ("variant", self.variant.to_string()),
            ("d_model", self.d_model.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("heads", self.heads.to_string()),
            ("enc_layers", self.enc_layers.to_string()),
            ("groups", self.groups.to_string()),
            ("dec_layers", self.dec_layers.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("feature_dim", self.feature_dim.to_string()),
            ("ln_sharing", s.ln.to_string()),
            ("ffn_scope", s.ffn_scope.to_string()),
            ("decoder_mode", s.decoder.to_string()),
            ("dec_attn_sharing", s.decoder_attn.to_string()),
            ("dropout", self.dropout.to_string()),
            ("seed", self.seed.to_string()),
            ("tie_embeddings", self.tie_embeddings.to_string()),
            ("post_mha_proj", self.post_mha_proj.to_string()),
            ("max_len", self.max_len.to_string()),
        ];
        rows.iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

/// Accepted configuration keys.
pub const KEYS: &[&str] = &[
    "variant",
    "d_model",
    "d_ff",
    "heads",
    "enc_layers",
    "groups",
    "dec_layers",
    "vocab_size",
    "feature_dim",
    "ln_sharing",
    "ffn_scope",
    "decoder_mode",
    "dec_attn_sharing",
    "dropout",
    "seed",
    "tie_embeddings",
    "post_mha_proj",
    "max_len",
];

fn parse_value<V: FromStr>(line: usize, key: &str, text: &str) -> Result<V>
where
    V::Err: fmt::Display,
{
    text.parse().map_err(|e| Error::ConfigParse {
        line,
        message: format!("bad value `{text}` for `{key}`: {e}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_need_only_variant() {
        let c = ModelConfig::parse("variant = simt\n").unwrap();
        assert_eq!(c, ModelConfig::defaults(Variant::Simt));
        assert_eq!(c.groups, 6);
        assert_eq!(c.dec_layers, 2);
        let b = ModelConfig::parse("# reference\nvariant = baseline # trailing\n").unwrap();
        assert_eq!(b.dec_layers, 6);
        assert_eq!(b.sharing.decoder, DecoderMode::Baseline);
    }

    #[test]
    fn canonical_round_trip() {
        let mut c = ModelConfig::defaults(Variant::Simt);
        c.sharing = SharingMode::SIMT_II;
        c.groups = 4;
        c.dropout = 0.25;
        c.tie_embeddings = true;
        let back = ModelConfig::parse(&c.to_canonical()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn errors_name_line_or_field() {
        match ModelConfig::parse("variant = simt\nbogus = 3\n") {
            Err(Error::ConfigParse { line: 2, message }) => assert!(message.contains("bogus")),
            other => panic!("{other:?}"),
        }
        match ModelConfig::parse("variant = simt\nd_model 3\n") {
            Err(Error::ConfigParse { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        match ModelConfig::parse("d_model = 8\n") {
            Err(Error::Config { field, .. }) => assert_eq!(field, "variant"),
            other => panic!("{other:?}"),
        }
        match ModelConfig::parse("variant = simt\ngroups = 5\n") {
            Err(Error::Config { field, .. }) => assert_eq!(field, "groups"),
            other => panic!("{other:?}"),
        }
        match ModelConfig::parse("variant = simt\nheads = 3\n") {
            Err(Error::Config { field, .. }) => assert_eq!(field, "heads"),
            other => panic!("{other:?}"),
        }
        assert!(ModelConfig::parse("variant = simt\nvariant = baseline\n").is_err());
        assert!(ModelConfig::parse("variant = simt\nffn_scope = everywhere\n").is_err());
    }

    #[test]
    fn baseline_ignores_groups() {
        let c = ModelConfig::parse("variant = baseline\ngroups = 5\n").unwrap();
        assert_eq!(c.effective_groups(), 12);
    }
}
