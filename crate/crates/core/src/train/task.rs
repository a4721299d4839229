//! Synthetic speech-like task: each label token is rendered as a fixed
//! random feature template held for four frames.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::model::FIRST_TOKEN;
use crate::tensor::{Element, Tensor};

/// Frames per label token; matches the front end's 4× subsampling.
pub const FRAMES_PER_TOKEN: usize = 4;

/// Shortest label sequence; two tokens give eight frames, the minimum the
/// front end accepts.
pub const MIN_LABEL_LEN: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub features: Tensor<T>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyTask<T> {
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub seed: u64,
    pub samples: Vec<Sample<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskSpec {
    pub seed: u64,
    pub n_samples: usize,
    pub max_label_len: usize,
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub noise_sd: f64,
}

/// Generates `n_samples` utterances. Templates are drawn first from the
/// seed, so every sample of a task shares them; label lengths are uniform
/// in `MIN_LABEL_LEN..=max_label_len` and tokens uniform over ordinary ids.
pub fn gen_toy_task<T: Element>(spec: &TaskSpec) -> Result<ToyTask<T>> {
    if spec.vocab_size <= FIRST_TOKEN {
        return Err(Error::config("vocab_size", "needs at least one token besides pad/sos/eos"));
    }
    if spec.max_label_len < MIN_LABEL_LEN {
        return Err(Error::config("max_label_len", format!("must be at least {MIN_LABEL_LEN}")));
    }
    if spec.feature_dim == 0 {
        return Err(Error::config("feature_dim", "must be positive"));
    }
    let noise = Normal::new(0.0, spec.noise_sd).map_err(|e| Error::config("noise_sd", e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let templates: Vec<Vec<f64>> = (0..spec.vocab_size)
        .map(|_| (0..spec.feature_dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let mut samples = Vec::with_capacity(spec.n_samples);
    for _ in 0..spec.n_samples {
        let len = rng.random_range(MIN_LABEL_LEN..=spec.max_label_len);
        let labels: Vec<usize> = (0..len).map(|_| rng.random_range(FIRST_TOKEN..spec.vocab_size)).collect();
        let mut data = Vec::with_capacity(len * FRAMES_PER_TOKEN * spec.feature_dim);
        for &tok in &labels {
            for _ in 0..FRAMES_PER_TOKEN {
                for &v in &templates[tok] {
                    let n = if spec.noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    data.push(T::of(v + n));
                }
            }
        }
        samples.push(Sample {
            features: Tensor::new(&[len * FRAMES_PER_TOKEN, spec.feature_dim], data)?,
            labels,
        });
    }
    Ok(ToyTask {
        vocab_size: spec.vocab_size,
        feature_dim: spec.feature_dim,
        seed: spec.seed,
        samples,
    })
}

impl<T: Element> ToyTask<T> {
    /// First `n` samples and the rest.
    pub fn split(&self, n: usize) -> (&[Sample<T>], &[Sample<T>]) {
        self.samples.split_at(n.min(self.samples.len()))
    }
}
