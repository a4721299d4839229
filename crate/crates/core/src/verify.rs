//! Self-checks shared by the command line and the test suites: finite
//! differences on the full loss, equivalence with the plain Transformer, and
//! structural invariants of score reuse.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{grad_check_params, Graph, Param};
use crate::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::model::{Model, FIRST_TOKEN, SOS};
use crate::multiplex::{DecoderMode, FfnScope, LnSharing};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Measured quantity (error, difference or count) and its bound.
    pub value: f64,
    pub bound: f64,
}

impl Check {
    fn at_most(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Check {
            name: name.into(),
            passed: value <= bound,
            value,
            bound,
        }
    }

    fn exact(name: impl Into<String>, value: usize, expected: usize) -> Self {
        Check {
            name: name.into(),
            passed: value == expected,
            value: value as f64,
            bound: expected as f64,
        }
    }
}

/// Random utterance features `[frames, feature_dim]` in `[-1, 1)`.
pub fn random_features<T: Element>(rng: &mut impl Rng, frames: usize, feature_dim: usize) -> Tensor<T> {
    Tensor::from_fn(&[frames, feature_dim], |_| T::of(rng.random_range(-1.0..1.0)))
}

/// Random ordinary label tokens.
pub fn random_labels(rng: &mut impl Rng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(FIRST_TOKEN..vocab)).collect()
}

/// Finite-difference check (64-bit) of the label-smoothed loss against
/// every parameter coordinate, or an evenly strided subset of at most
/// `max_coords` per parameter.
pub fn gradcheck(cfg: &ModelConfig, seed: u64, max_coords: Option<usize>, tol: f64) -> Result<Check> {
    let cfg = ModelConfig { dropout: 0.0, ..cfg.clone() };
    let model = Model::<f64>::build(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feats = random_features::<f64>(&mut rng, 12, cfg.feature_dim);
    let labels = random_labels(&mut rng, 3, cfg.vocab_size);
    let params: Vec<Param<f64>> = model.params().iter().map(|h| h.param().clone()).collect();
    let report = grad_check_params(|g| model.loss(g, &feats, &labels, 0.1), &params, 1e-4, max_coords)?;
    model.zero_grads();
    Ok(Check::at_most(
        format!("gradcheck ({} coordinates)", report.checked),
        report.max_rel_err,
        tol,
    ))
}

/// The plain Transformer with the same weight layout as `cfg`, which must
/// use one layer per group, per-module norms, per-group FFNs and the plain
/// decoder.
pub fn baseline_counterpart(cfg: &ModelConfig) -> Result<ModelConfig> {
    let s = &cfg.sharing;
    if cfg.variant == Variant::Simt && cfg.groups != cfg.enc_layers {
        return Err(Error::config("groups", "equivalence needs one layer per group"));
    }
    if s.decoder != DecoderMode::Baseline {
        return Err(Error::config("decoder_mode", "equivalence needs the baseline decoder"));
    }
    if s.ln != LnSharing::PerModule || s.ffn_scope != FfnScope::PerGroup {
        return Err(Error::config("ln_sharing", "equivalence needs per-module norms and per-group FFNs"));
    }
    let mut b = cfg.clone();
    b.variant = Variant::Baseline;
    Ok(b)
}

/// Copies baseline weights into the grouped model and compares 32-bit
/// outputs (encoder output and decoder logits) on `trials` random inputs.
/// Returns the largest absolute difference.
pub fn equivalence(cfg: &ModelConfig, trials: usize, seed: u64) -> Result<f64> {
    let cfg = ModelConfig { dropout: 0.0, ..cfg.clone() };
    let base_cfg = baseline_counterpart(&cfg)?;
    let simt = Model::<f32>::build(&cfg, seed)?;
    let base = Model::<f32>::build(&base_cfg, seed.wrapping_add(1))?;
    simt.copy_params_from(&base)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let frames = rng.random_range(8..40);
        let feats = random_features::<f32>(&mut rng, frames, cfg.feature_dim);
        let mut tokens = vec![SOS];
        let len = rng.random_range(1..8);
        tokens.extend(random_labels(&mut rng, len, cfg.vocab_size));
        let run = |m: &Model<f32>| -> Result<(Tensor<f32>, Tensor<f32>)> {
            let g = Graph::new();
            let mem = m.encode(&g, &feats)?;
            let logits = m.decoder_forward(&g, mem, &tokens)?;
            Ok(((*g.value(mem.x)).clone(), (*g.value(logits)).clone()))
        };
        let (ea, la) = run(&simt)?;
        let (eb, lb) = run(&base)?;
        worst = worst.max(ea.max_abs_diff(&eb)?).max(la.max_abs_diff(&lb)?);
    }
    Ok(worst)
}

/// Structural checks on one forward pass of a grouped model: score counts
/// per stack, that every Post-MHA reuses the producing scores, row sums of
/// the produced scores, causality of the logits, and weight aliasing.
pub fn invariants(cfg: &ModelConfig, seed: u64) -> Result<Vec<Check>> {
    let cfg = ModelConfig { dropout: 0.0, ..cfg.clone() };
    let model = Model::<f64>::build(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feats = random_features::<f64>(&mut rng, 24, cfg.feature_dim);
    let mut tokens = vec![SOS];
    tokens.extend(random_labels(&mut rng, 6, cfg.vocab_size));
    let mut checks = Vec::new();

    let g = Graph::new();
    let mem = model.encode(&g, &feats)?;
    let enc_log = g.score_log();
    let logits = model.decoder_forward(&g, mem, &tokens)?;
    let log = g.score_log();
    let groups = cfg.effective_groups();
    let simt_enc = cfg.variant == Variant::Simt;
    let simt_dec = cfg.sharing.decoder == DecoderMode::Simt;

    checks.push(Check::exact(
        "encoder score tensors",
        enc_log.produced.len(),
        if simt_enc { groups } else { 0 },
    ));
    let reuse = cfg.enc_layers / groups - 1;
    let enc_consumed_ok = if simt_enc {
        enc_log.consumed.len() == groups * reuse
            && enc_log
                .consumed
                .chunks(reuse.max(1))
                .zip(&enc_log.produced)
                .all(|(c, p)| c.iter().all(|v| v == p))
    } else {
        enc_log.consumed.is_empty()
    };
    checks.push(Check::exact("encoder reuse of group scores", usize::from(enc_consumed_ok), 1));

    let dec_produced = &log.produced[enc_log.produced.len()..];
    let dec_consumed = &log.consumed[enc_log.consumed.len()..];
    if simt_dec {
        checks.push(Check::exact("decoder score tensors", dec_produced.len(), cfg.dec_layers));
        let s1 = dec_produced.first().copied();
        let feeds = dec_consumed.iter().filter(|&&v| Some(v) == s1).count();
        checks.push(Check::exact("decoder post-attention fed by first scores", feeds, cfg.dec_layers));
        checks.push(Check::exact("decoder post-attention total", dec_consumed.len(), cfg.dec_layers));
    }

    let mut worst_row = 0.0f64;
    for &s in &log.produced {
        for row in g.value(s).rows() {
            let sum: f64 = row.iter().sum();
            worst_row = worst_row.max((sum - 1.0).abs());
        }
    }
    checks.push(Check::at_most("score rows sum to one", worst_row, 1e-9));

    let base = (*g.value(logits)).clone();
    let mut causal_diff = 0.0f64;
    for pos in 1..tokens.len() {
        let mut altered = tokens.clone();
        for t in altered.iter_mut().skip(pos) {
            *t = FIRST_TOKEN + (*t + 1 - FIRST_TOKEN) % (cfg.vocab_size - FIRST_TOKEN);
        }
        let g2 = Graph::new();
        let mem2 = model.encode(&g2, &feats)?;
        let l2 = g2.value(model.decoder_forward(&g2, mem2, &altered)?);
        for (a, b) in base.rows().zip(l2.rows()).take(pos) {
            for (x, y) in a.iter().zip(b) {
                causal_diff = causal_diff.max((x - y).abs());
            }
        }
    }
    checks.push(Check::at_most("earlier logits ignore later tokens", causal_diff, 0.0));

    let closed = crate::audit::count(&cfg).total();
    checks.push(Check::exact("distinct parameters match closed form", model.num_params(), closed));
    let binds: usize = model.distinct_params().iter().map(|p| p.binds).sum();
    checks.push(Check::exact(
        "module bindings",
        binds,
        model.distinct_params().len() + expected_aliases(&cfg),
    ));
    Ok(checks)
}

/// Extra `get_or_bind` calls that resolve to an existing entry.
fn expected_aliases(cfg: &ModelConfig) -> usize {
    let mut extra = 0;
    let m = cfg.dec_layers;
    if cfg.variant == Variant::Simt && cfg.sharing.ffn_scope == FfnScope::Global {
        extra += 4 * (cfg.groups - 1);
    }
    if cfg.sharing.decoder == DecoderMode::Simt && cfg.sharing.ffn_scope == FfnScope::Global {
        extra += 4 * (m - 1);
    }
    extra
}
