//! Edit distance and character error rate.

use crate::error::{Error, Result};

/// Levenshtein distance with unit insert, delete and substitute costs.
pub fn levenshtein<A: PartialEq>(a: &[A], b: &[A]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `levenshtein(reference, hypothesis) / len(reference)`.
pub fn cer<A: PartialEq>(reference: &[A], hypothesis: &[A]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::contract("reference is empty"));
    }
    Ok(levenshtein(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Total edits over total reference length.
pub fn corpus_cer<A: PartialEq>(pairs: &[(&[A], &[A])]) -> Result<f64> {
    let (mut edits, mut len) = (0, 0);
    for (r, h) in pairs {
        if r.is_empty() {
            return Err(Error::contract("reference is empty"));
        }
        edits += levenshtein(r, h);
        len += r.len();
    }
    if len == 0 {
        return Err(Error::contract("no references"));
    }
    Ok(edits as f64 / len as f64)
}
