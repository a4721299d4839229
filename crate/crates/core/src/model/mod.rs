//! Full speech-to-label network: convolutional front end, encoder, decoder.

pub mod decoder;
pub mod encoder;
pub mod frontend;
pub mod layers;

use crate::attention::{make_mask, AttentionMask, MaskKind};
use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::multiplex::{ParamHandle, ParamInfo, ParamRegistry};
use crate::tensor::{Element, Tensor};

pub use decoder::Decoder;
pub use encoder::Encoder;
pub use frontend::{conv_out_len, positional_encoding, subsampled_len, Frontend};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
/// Smallest id of an ordinary label token.
pub const FIRST_TOKEN: usize = 3;

/// Encoder output for one utterance.
#[derive(Clone, Copy, Debug)]
pub struct Memory {
    pub x: Var,
    /// Rows of `x` that correspond to real input frames.
    pub valid: usize,
}

#[derive(Debug)]
pub struct Model<T> {
    config: ModelConfig,
    registry: ParamRegistry<T>,
    pub frontend: Frontend<T>,
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
}

impl<T: Element> Model<T> {
    /// Validates `config` and binds every module's weights in a fresh
    /// registry initialised from `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut registry = ParamRegistry::new(seed);
        let frontend = Frontend::bind(&mut registry, config.d_model, config.feature_dim)?;
        let encoder = Encoder::bind(&mut registry, config)?;
        let decoder = Decoder::bind(&mut registry, config)?;
        Ok(Model {
            config: config.clone(),
            registry,
            frontend,
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn registry(&self) -> &ParamRegistry<T> {
        &self.registry
    }

    pub fn distinct_params(&self) -> Vec<ParamInfo> {
        self.registry.distinct_params()
    }

    /// Total number of distinct trainable scalars.
    pub fn num_params(&self) -> usize {
        self.registry.total()
    }

    pub fn params(&self) -> Vec<ParamHandle<T>> {
        self.registry.handles().collect()
    }

    pub fn zero_grads(&self) {
        self.registry.zero_grads();
    }

    /// Copies every parameter of `other` into the same-named parameter here.
    /// Both models must have exactly the same keys and shapes.
    pub fn copy_params_from(&self, other: &Model<T>) -> Result<()> {
        let mine: Vec<_> = self.registry.handles().collect();
        let theirs: Vec<_> = other.registry.handles().collect();
        let keys = |v: &[ParamHandle<T>]| v.iter().map(|h| h.key().to_string()).collect::<Vec<_>>();
        if keys(&mine) != keys(&theirs) {
            return Err(Error::Registry("models have different parameter keys".into()));
        }
        for (a, b) in mine.iter().zip(&theirs) {
            a.set_value((*b.value()).clone())?;
        }
        Ok(())
    }

    /// Front end, input scaling and positional encoding, then the encoder.
    /// `features` is `[T, feature_dim]` with every frame valid.
    pub fn encode(&self, g: &Graph<T>, features: &Tensor<T>) -> Result<Memory> {
        let t = features.shape().first().copied().unwrap_or(0);
        let (x, valid) = self.frontend.conv_subsample(g, g.constant(features.clone()), t)?;
        let t1 = g.shape(x)[0];
        if t1 > self.config.max_len {
            return Err(Error::contract(format!(
                "{t1} encoder positions exceed max_len {}",
                self.config.max_len
            )));
        }
        let d = self.config.d_model;
        let x = g.scale(x, T::of((d as f64).sqrt()));
        let x = g.add(x, g.constant(positional_encoding(t1, d)?))?;
        let x = g.dropout(x, self.config.dropout)?;
        let mask = make_mask(MaskKind::Padding, t1, t1, valid)?;
        let x = self.encoder_forward(g, x, &mask)?;
        Ok(Memory { x, valid })
    }

    /// Encoder stack on already embedded input `[T1, d_model]`.
    pub fn encoder_forward(&self, g: &Graph<T>, x: Var, mask: &AttentionMask) -> Result<Var> {
        self.encoder.forward(g, x, mask)
    }

    /// Logits `[T2, vocab]` for the decoder input `tokens`.
    pub fn decoder_forward(&self, g: &Graph<T>, memory: Memory, tokens: &[usize]) -> Result<Var> {
        self.decoder.forward(g, memory.x, memory.valid, tokens)
    }

    /// Teacher-forced label-smoothed loss for one utterance with `labels`
    /// (ordinary tokens only; start and end symbols are added here).
    pub fn loss(&self, g: &Graph<T>, features: &Tensor<T>, labels: &[usize], smoothing: f64) -> Result<Var> {
        let mem = self.encode(g, features)?;
        let (input, target) = teacher_forcing(labels);
        let logits = self.decoder_forward(g, mem, &input)?;
        g.cross_entropy(logits, &target, smoothing, PAD)
    }
}

/// `([SOS, y…], [y…, EOS])`.
pub fn teacher_forcing(labels: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut input = Vec::with_capacity(labels.len() + 1);
    input.push(SOS);
    input.extend_from_slice(labels);
    let mut target = labels.to_vec();
    target.push(EOS);
    (input, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;
    use crate::multiplex::{DecoderMode, SharingMode};

    fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            d_ff: 16,
            heads: 2,
            enc_layers: 4,
            groups: 2,
            dec_layers: 2,
            vocab_size: 10,
            feature_dim: 8,
            dropout: 0.0,
            max_len: 64,
            ..ModelConfig::defaults(variant)
        }
    }

    fn feats(t: usize, f: usize, salt: usize) -> Tensor<f64> {
        Tensor::from_fn(&[t, f], |i| (((i + salt) * 7919 % 101) as f64 - 50.0) / 50.0)
    }

    #[test]
    fn full_scale_counts() {
        let base = Model::<f32>::build(&ModelConfig::defaults(Variant::Baseline), 0).unwrap();
        assert_eq!(base.num_params(), 27_092_480 + 513 * crate::config::FITTED_BASELINE_VOCAB);
        let simt = Model::<f32>::build(&ModelConfig::defaults(Variant::Simt), 0).unwrap();
        let total = simt.num_params() as f64 / 1e6;
        assert!((total - 15.636).abs() < 0.01, "{total}");
    }

    #[test]
    fn shapes_and_score_counts() {
        let m = Model::<f64>::build(&tiny(Variant::Simt), 3).unwrap();
        let g = Graph::new();
        let mem = m.encode(&g, &feats(20, 8, 0)).unwrap();
        assert_eq!(g.shape(mem.x), vec![subsampled_len(20), 8]);
        assert_eq!(g.score_log().produced.len(), 2);
        let logits = m.decoder_forward(&g, mem, &[SOS, 4, 5, 6]).unwrap();
        assert_eq!(g.shape(logits), vec![4, 10]);
        let log = g.score_log();
        assert_eq!(log.produced.len(), 2 + 2);
        assert_eq!(log.consumed.len(), 2 + 2);
        assert!(log.consumed[2..].iter().all(|&v| v == log.produced[2]));
    }

    #[test]
    fn build_is_deterministic() {
        let c = tiny(Variant::Simt);
        let a = Model::<f32>::build(&c, 11).unwrap();
        let b = Model::<f32>::build(&c, 11).unwrap();
        for (x, y) in a.params().iter().zip(b.params()) {
            assert_eq!(x.key(), y.key());
            assert_eq!(x.value().data(), y.value().data());
        }
    }

    #[test]
    fn token_out_of_range_is_index_error() {
        let m = Model::<f64>::build(&tiny(Variant::Baseline), 0).unwrap();
        let g = Graph::new();
        let mem = m.encode(&g, &feats(12, 8, 1)).unwrap();
        assert!(matches!(m.decoder_forward(&g, mem, &[SOS, 10]), Err(Error::Index { .. })));
    }

    #[test]
    fn one_layer_groups_match_plain_encoder() {
        let mut sc = tiny(Variant::Simt);
        sc.groups = sc.enc_layers;
        sc.sharing = SharingMode {
            decoder: DecoderMode::Baseline,
            ..SharingMode::SIMT_I
        };
        let simt = Model::<f64>::build(&sc, 1).unwrap();
        let base = Model::<f64>::build(&tiny(Variant::Baseline), 2).unwrap();
        simt.copy_params_from(&base).unwrap();
        let f = feats(24, 8, 5);
        let (ga, gb) = (Graph::new(), Graph::new());
        let la = simt.loss(&ga, &f, &[3, 4, 5], 0.1).unwrap();
        let lb = base.loss(&gb, &f, &[3, 4, 5], 0.1).unwrap();
        assert_eq!(ga.value(la).item().unwrap(), gb.value(lb).item().unwrap());
    }

    #[test]
    fn tied_embeddings_drop_output_matrix() {
        let mut c = tiny(Variant::Simt);
        let untied = Model::<f32>::build(&c, 0).unwrap().num_params();
        c.tie_embeddings = true;
        let m = Model::<f32>::build(&c, 0).unwrap();
        assert_eq!(untied - m.num_params(), 8 * 10);
        let g = Graph::new();
        let l = m.loss(&g, &feats(12, 8, 0).cast(), &[3], 0.0).unwrap();
        assert!(g.value(l).all_finite());
    }
}
