//! Greedy and beam-search decoding over any next-token scorer.

use std::cmp::Ordering;

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::model::{Memory, Model, EOS, PAD, SOS};
use crate::tensor::{Element, Tensor};

/// Next-token log-probabilities given a prefix that starts with `SOS`.
pub trait StepScorer {
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Emitted tokens, without start or end symbols.
    pub tokens: Vec<usize>,
    /// Sum of log-probabilities, including the end symbol when emitted.
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Number of scored steps.
    pub fn steps(&self) -> usize {
        self.tokens.len() + usize::from(self.finished)
    }

    /// `log_prob / steps^length_penalty`.
    pub fn score(&self, length_penalty: f64) -> f64 {
        if length_penalty == 0.0 {
            return self.log_prob;
        }
        self.log_prob / (self.steps().max(1) as f64).powf(length_penalty)
    }
}

fn selectable(tok: usize) -> bool {
    tok != PAD && tok != SOS
}

/// Highest-scoring selectable token; the lower id wins ties.
fn argmax(lp: &[f64]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (t, &v) in lp.iter().enumerate() {
        if !selectable(t) {
            continue;
        }
        if v.is_nan() {
            return Err(Error::Numeric("decoder log-probabilities"));
        }
        if best.is_none_or(|b| v > lp[b]) {
            best = Some(t);
        }
    }
    best.ok_or_else(|| Error::contract("no selectable tokens"))
}

pub fn greedy_decode(scorer: &impl StepScorer, max_len: usize) -> Result<Hypothesis> {
    let mut prefix = vec![SOS];
    let mut log_prob = 0.0;
    for _ in 0..max_len {
        let lp = scorer.log_probs(&prefix)?;
        let t = argmax(&lp)?;
        log_prob += lp[t];
        if t == EOS {
            return Ok(Hypothesis {
                tokens: prefix[1..].to_vec(),
                log_prob,
                finished: true,
            });
        }
        prefix.push(t);
    }
    Ok(Hypothesis {
        tokens: prefix[1..].to_vec(),
        log_prob,
        finished: false,
    })
}

/// Higher score first; equal scores fall back to lexicographic token order.
fn rank(a: &(f64, Vec<usize>), b: &(f64, Vec<usize>)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(&b.1))
}

/// Beam search keeping the `beam_size` best partial hypotheses by raw
/// log-probability; finished hypotheses are compared by
/// [`Hypothesis::score`]. The greedy hypothesis is always among the
/// final candidates, so the result never scores below it.
pub fn beam_search(
    scorer: &impl StepScorer,
    beam_size: usize,
    max_len: usize,
    length_penalty: f64,
) -> Result<Hypothesis> {
    if beam_size == 0 {
        return Err(Error::contract("beam size must be at least 1"));
    }
    let mut live: Vec<(f64, Vec<usize>)> = vec![(0.0, vec![SOS])];
    let mut done: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let mut cand = Vec::new();
        for (score, prefix) in &live {
            let lp = scorer.log_probs(prefix)?;
            for (t, &v) in lp.iter().enumerate() {
                if !selectable(t) {
                    continue;
                }
                if v.is_nan() {
                    return Err(Error::Numeric("decoder log-probabilities"));
                }
                let mut p = prefix.clone();
                p.push(t);
                cand.push((score + v, p));
            }
        }
        cand.sort_by(rank);
        cand.truncate(beam_size);
        live.clear();
        for (score, mut p) in cand {
            if p.last() == Some(&EOS) {
                p.pop();
                done.push(Hypothesis {
                    tokens: p[1..].to_vec(),
                    log_prob: score,
                    finished: true,
                });
            } else {
                live.push((score, p));
            }
        }
        if live.is_empty() {
            break;
        }
    }
    done.extend(live.into_iter().map(|(score, p)| Hypothesis {
        tokens: p[1..].to_vec(),
        log_prob: score,
        finished: false,
    }));
    done.push(greedy_decode(scorer, max_len)?);
    let best = done
        .into_iter()
        .min_by(|a, b| {
            let (sa, sb) = (a.score(length_penalty), b.score(length_penalty));
            sb.partial_cmp(&sa).unwrap_or(Ordering::Equal).then_with(|| a.tokens.cmp(&b.tokens))
        })
        .expect("greedy candidate present");
    Ok(best)
}

/// Scores prefixes with a model's decoder against a fixed encoder output.
pub struct ModelScorer<'a, T: Element> {
    model: &'a Model<T>,
    memory: Tensor<T>,
    valid: usize,
}

impl<'a, T: Element> ModelScorer<'a, T> {
    pub fn new(model: &'a Model<T>, features: &Tensor<T>) -> Result<Self> {
        let g = Graph::new();
        let mem = model.encode(&g, features)?;
        Ok(ModelScorer {
            model,
            memory: (*g.value(mem.x)).clone(),
            valid: mem.valid,
        })
    }
}

impl<T: Element> StepScorer for ModelScorer<'_, T> {
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let g = Graph::new();
        let mem = Memory {
            x: g.constant(self.memory.clone()),
            valid: self.valid,
        };
        let logits = g.value(self.model.decoder_forward(&g, mem, prefix)?);
        let last = logits.rows().last().expect("non-empty logits");
        Ok(log_softmax(last))
    }
}

pub fn log_softmax<T: Element>(row: &[T]) -> Vec<f64> {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v.as_f64() - lse).collect()
}
