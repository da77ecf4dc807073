//! Sentence-level ROUGE on whitespace tokens of normalized text.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::corpus::normalize;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub const ZERO: Prf = Prf {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };

    fn from_counts(hits: usize, cand: usize, reference: usize) -> Prf {
        if hits == 0 || cand == 0 || reference == 0 {
            return Prf::ZERO;
        }
        let p = hits as f64 / cand as f64;
        let r = hits as f64 / reference as f64;
        Prf {
            precision: p,
            recall: r,
            f1: 2.0 * p * r / (p + r),
        }
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    normalize(text).split(' ').filter(|t| !t.is_empty()).map(str::to_owned).collect()
}

fn ngram_counts<T: Eq + Hash>(toks: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if n > 0 && toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram overlap for any `n >= 1`.
pub fn rouge_n_tokens<T: Eq + Hash>(cand: &[T], reference: &[T], n: usize) -> Prf {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    let hits: usize = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    let total = |m: &HashMap<&[T], usize>| m.values().sum::<usize>();
    Prf::from_counts(hits, total(&c), total(&r))
}

pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> Result<Prf> {
    if n != 1 && n != 2 {
        return Err(Error::Config(format!("rouge_n supports n = 1 or 2, got {n}")));
    }
    Ok(rouge_n_tokens(&tokenize(candidate), &tokenize(reference), n))
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_tokens<T: Eq>(cand: &[T], reference: &[T]) -> Prf {
    Prf::from_counts(lcs_len(cand, reference), cand.len(), reference.len())
}

pub fn rouge_l(candidate: &str, reference: &str) -> Prf {
    rouge_l_tokens(&tokenize(candidate), &tokenize(reference))
}
