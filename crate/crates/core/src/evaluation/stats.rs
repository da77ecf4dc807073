//! Corpus statistics and paired significance testing.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use super::rouge::tokenize;
use crate::corpus::{cell_key, AttributedExample, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub total: usize,
    pub per_split: BTreeMap<Split, usize>,
    pub per_strategy: BTreeMap<String, usize>,
    pub per_emotion: BTreeMap<String, usize>,
    /// Keyed `STRATEGY/EMOTION/target`.
    pub per_cell: BTreeMap<String, usize>,
    /// Mean counterspeech token length.
    pub mean_len_per_emotion: BTreeMap<String, f64>,
    pub mean_len_per_target: BTreeMap<String, f64>,
}

const NO_TARGET: &str = "unspecified";

pub fn corpus_stats(dataset: &[AttributedExample]) -> Result<CorpusStats> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut s = CorpusStats {
        total: dataset.len(),
        per_split: BTreeMap::new(),
        per_strategy: BTreeMap::new(),
        per_emotion: BTreeMap::new(),
        per_cell: BTreeMap::new(),
        mean_len_per_emotion: BTreeMap::new(),
        mean_len_per_target: BTreeMap::new(),
    };
    let mut len_e: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut len_t: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for ex in dataset {
        let target = ex.target_group.as_deref().unwrap_or(NO_TARGET);
        let len = tokenize(&ex.counterspeech).len();
        *s.per_split.entry(ex.split).or_default() += 1;
        *s.per_strategy.entry(ex.strategy.word().to_string()).or_default() += 1;
        *s.per_emotion.entry(ex.emotion.word().to_string()).or_default() += 1;
        *s.per_cell
            .entry(format!("{}/{target}", cell_key(ex.strategy, ex.emotion)))
            .or_default() += 1;
        for (m, k) in [(&mut len_e, ex.emotion.word()), (&mut len_t, target)] {
            let e = m.entry(k.to_string()).or_default();
            e.0 += len;
            e.1 += 1;
        }
    }
    let mean = |m: BTreeMap<String, (usize, usize)>| {
        m.into_iter().map(|(k, (sum, n))| (k, sum as f64 / n as f64)).collect()
    };
    s.mean_len_per_emotion = mean(len_e);
    s.mean_len_per_target = mean(len_t);
    Ok(s)
}

/// Largest degrees of freedom for which the exact t-distribution is used.
pub const T_EXACT_MAX_DF: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t_statistic: f64,
    pub p_value: f64,
    pub df: usize,
    pub n: usize,
    pub mean_difference: f64,
    /// `student_t` for `df <= 30`, `normal_approximation` above.
    pub p_method: String,
}

/// Paired two-sided t-test on `b - a`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Degenerate("a paired t-test needs at least 2 observations".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    if !d.iter().all(|v| v.is_finite()) {
        return Err(Error::Domain("non-finite sample value".into()));
    }
    if d.iter().all(|&v| v == 0.0) {
        return Err(Error::Degenerate("identical samples".into()));
    }
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Err(Error::Degenerate("zero-variance differences".into()));
    }
    let t = mean / (var / n as f64).sqrt();
    let df = n - 1;
    let (tail, method) = if df <= T_EXACT_MAX_DF {
        let dist = StudentsT::new(0.0, 1.0, df as f64).expect("df >= 1");
        (dist.sf(t.abs()), "student_t")
    } else {
        let dist = Normal::new(0.0, 1.0).expect("unit normal");
        (dist.sf(t.abs()), "normal_approximation")
    };
    Ok(TTest {
        t_statistic: t,
        p_value: (2.0 * tail).min(1.0),
        df,
        n,
        mean_difference: mean,
        p_method: method.to_string(),
    })
}
