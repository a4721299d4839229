//! Desk-scale training and evaluation on the synthetic task.

pub mod decode;
pub mod metrics;
pub mod optim;
pub mod task;

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Mode, Param};
use crate::error::{Error, Result};
use crate::model::{teacher_forcing, Model};
use crate::tensor::Element;

pub use decode::{beam_search, greedy_decode, Hypothesis, ModelScorer, StepScorer};
pub use metrics::{cer, corpus_cer, levenshtein};
pub use optim::{lr_schedule, scale_for_peak, AdamConfig, OptimState};
pub use task::{gen_toy_task, Sample, TaskSpec, ToyTask};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub smoothing: f64,
    pub peak_lr: f64,
    pub warmup: usize,
    pub adam: AdamConfig,
    /// Drives batch sampling and dropout.
    pub seed: u64,
    /// Use the first `batch_size` samples as the batch at every step
    /// instead of sampling.
    pub fixed_batch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 8,
            smoothing: 0.1,
            peak_lr: 2e-3,
            warmup: 400,
            adam: AdamConfig::default(),
            seed: 0,
            fixed_batch: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Teacher-forced training with batches drawn uniformly from `samples`.
/// Each step averages the per-utterance losses of one batch. Dropout uses
/// the model's configured rate.
pub fn train<T: Element>(model: &Model<T>, samples: &[Sample<T>], cfg: &TrainConfig) -> Result<Vec<StepLog>> {
    if samples.is_empty() && cfg.steps > 0 {
        return Err(Error::contract("no training samples"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::contract("batch size must be positive"));
    }
    if cfg.fixed_batch && samples.len() < cfg.batch_size {
        return Err(Error::contract("fixed batch is larger than the sample set"));
    }
    let params: Vec<Param<T>> = model.params().iter().map(|h| h.param().clone()).collect();
    let mut opt = OptimState::new(&params, cfg.adam);
    let d = model.config().d_model;
    let scale = scale_for_peak(cfg.peak_lr, d, cfg.warmup);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.steps);
    let inv = T::of(1.0 / cfg.batch_size as f64);
    for step in 1..=cfg.steps {
        model.zero_grads();
        let mut total = 0.0;
        for b in 0..cfg.batch_size {
            let s = if cfg.fixed_batch {
                &samples[b]
            } else {
                &samples[rng.random_range(0..samples.len())]
            };
            let mode = if model.config().dropout > 0.0 {
                Mode::Train {
                    seed: cfg.seed ^ ((step as u64) << 20) ^ b as u64,
                }
            } else {
                Mode::Eval
            };
            let g = Graph::with_mode(mode);
            let loss = match model.loss(&g, &s.features, &s.labels, cfg.smoothing) {
                Ok(l) => l,
                Err(Error::Numeric(_)) => return Err(Error::Diverged { step, loss: f64::NAN }),
                Err(e) => return Err(e),
            };
            let value = g.value(loss).item()?.as_f64();
            if !value.is_finite() {
                return Err(Error::Diverged { step, loss: value });
            }
            total += value;
            g.backward(g.scale(loss, inv))?;
        }
        let lr = lr_schedule(step, d, cfg.warmup, scale)?;
        opt.step_accumulated(&params, lr)?;
        log.push(StepLog {
            step,
            loss: total / cfg.batch_size as f64,
            lr,
        });
    }
    Ok(log)
}

/// Mean loss over `samples` without dropout.
pub fn eval_loss<T: Element>(model: &Model<T>, samples: &[Sample<T>], smoothing: f64) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let g = Graph::new();
        total += g.value(model.loss(&g, &s.features, &s.labels, smoothing)?).item()?.as_f64();
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Fraction of teacher-forced positions (including the end symbol) whose
/// argmax equals the target.
pub fn token_accuracy<T: Element>(model: &Model<T>, samples: &[Sample<T>]) -> Result<f64> {
    let (mut hit, mut n) = (0usize, 0usize);
    for s in samples {
        let g = Graph::new();
        let mem = model.encode(&g, &s.features)?;
        let (input, target) = teacher_forcing(&s.labels);
        let logits = g.value(model.decoder_forward(&g, mem, &input)?);
        for (row, &t) in logits.rows().zip(&target) {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
            hit += usize::from(best == t);
            n += 1;
        }
    }
    Ok(hit as f64 / n.max(1) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub sample_id: usize,
    pub reference: Vec<usize>,
    pub hypothesis: Vec<usize>,
    pub cer: f64,
}

/// Decodes every sample (beam 1 is plain greedy search). Work is spread
/// over threads; results come back in sample order.
pub fn decode_samples<T: Element>(model: &Model<T>, samples: &[Sample<T>], beam: usize) -> Result<Vec<Decoded>> {
    if beam == 0 {
        return Err(Error::contract("beam size must be at least 1"));
    }
    let max_len = model.config().max_len;
    let one = |i: usize| -> Result<Decoded> {
        let s = &samples[i];
        let scorer = ModelScorer::new(model, &s.features)?;
        let limit = max_len.min(2 * s.labels.len() + 10);
        let h = if beam == 1 {
            greedy_decode(&scorer, limit)?
        } else {
            beam_search(&scorer, beam, limit, 0.0)?
        };
        Ok(Decoded {
            sample_id: i,
            cer: cer(&s.labels, &h.tokens)?,
            reference: s.labels.clone(),
            hypothesis: h.tokens,
        })
    };
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(samples.len().max(1));
    let chunk = samples.len().div_ceil(threads).max(1);
    let idx: Vec<usize> = (0..samples.len()).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = idx
            .chunks(chunk)
            .map(|c| scope.spawn(move || c.iter().map(|&i| one(i)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(samples.len());
        for h in handles {
            out.extend(h.join().expect("decode worker panicked")?);
        }
        Ok(out)
    })
}

pub fn decoded_corpus_cer(decoded: &[Decoded]) -> Result<f64> {
    let pairs: Vec<(&[usize], &[usize])> = decoded
        .iter()
        .map(|d| (d.reference.as_slice(), d.hypothesis.as_slice()))
        .collect();
    corpus_cer(&pairs)
}

/// `step,loss,lr` rows.
pub fn loss_csv(log: &[StepLog]) -> String {
    let mut s = String::from("step,loss,lr\n");
    for l in log {
        let _ = writeln!(s, "{},{},{}", l.step, l.loss, l.lr);
    }
    s
}

/// `sample_id,cer,reference,hypothesis` rows; token lists are
/// space-separated ids.
pub fn decode_csv(decoded: &[Decoded]) -> String {
    let join = |v: &[usize]| v.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
    let mut s = String::from("sample_id,cer,reference,hypothesis\n");
    for d in decoded {
        let _ = writeln!(s, "{},{},{},{}", d.sample_id, d.cer, join(&d.reference), join(&d.hypothesis));
    }
    s
}
