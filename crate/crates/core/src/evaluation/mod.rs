//! Lexical overlap, attribute conformity, preference margins and reports.

mod rouge;
mod stats;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    cell_key, emotion_marker, serialize_prompt, strategy_marker, target_ids, AttributedExample, Emotion,
    PreferencePair, Strategy, Vocabulary, EOS,
};
use crate::error::{Error, Result};
use crate::model::{greedy_decode, sequence_logprob, SeqModel};
use crate::prefix::HierarchicalPrefixStack;

pub use rouge::{lcs_len, rouge_l, rouge_l_tokens, rouge_n, rouge_n_tokens, tokenize, Prf};
pub use stats::{corpus_stats, paired_ttest, CorpusStats, TTest, T_EXACT_MAX_DF};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Strategy(Strategy),
    Emotion(Emotion),
}

/// Judges whether a text expresses an attribute. Implementations must be
/// pure and return values in `[0, 1]`.
pub trait Scorer: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, text: &str, attribute: Attribute) -> f64;
}

/// 1 when the attribute's marker word sits in its slot (first token for a
/// strategy, last token for an emotion), else 0.
#[derive(Debug, Clone, Copy, Default)]
pub struct MarkerScorer;

impl Scorer for MarkerScorer {
    fn name(&self) -> &str {
        "marker"
    }

    fn score(&self, text: &str, attribute: Attribute) -> f64 {
        let toks = tokenize(text);
        let hit = match attribute {
            Attribute::Strategy(s) => toks.first().map(String::as_str) == Some(strategy_marker(s)),
            Attribute::Emotion(e) => toks.last().map(String::as_str) == Some(emotion_marker(e)),
        };
        if hit {
            1.0
        } else {
            0.0
        }
    }
}

pub fn scorer_by_name(name: &str) -> Result<Box<dyn Scorer>> {
    match name {
        "marker" => Ok(Box::new(MarkerScorer)),
        other => Err(Error::UnknownScorer(other.to_string())),
    }
}

/// Fraction of outputs scoring at least `threshold`.
pub fn conformity(outputs: &[(String, Attribute)], scorer: &dyn Scorer, threshold: f64) -> Result<f64> {
    if outputs.is_empty() {
        return Err(Error::EmptyInput("outputs"));
    }
    let hits = outputs
        .iter()
        .filter(|(text, a)| scorer.score(text, *a) >= threshold)
        .count();
    Ok(hits as f64 / outputs.len() as f64)
}

fn pair_margin(model: &SeqModel, stack: &HierarchicalPrefixStack, p: &PreferencePair) -> Result<f64> {
    let inj = stack.injection();
    let s = sequence_logprob(model, &p.prompt, &p.chosen, &inj)?;
    let r = sequence_logprob(model, &p.prompt, &p.rejected, &inj)?;
    Ok(s.mean - r.mean)
}

/// Mean of `mean_logprob(chosen) - mean_logprob(rejected)` over `pairs`.
pub fn preference_margin(model: &SeqModel, stack: &HierarchicalPrefixStack, pairs: &[PreferencePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("pairs"));
    }
    let margins: Vec<Result<f64>> = pairs.par_iter().map(|p| pair_margin(model, stack, p)).collect();
    let mut total = 0.0;
    for m in margins {
        total += m?;
    }
    Ok(total / pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub n: usize,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub strategy_conformity: f64,
    pub emotion_conformity: f64,
    pub mean_margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub strategy_conformity: f64,
    pub emotion_conformity: f64,
    pub mean_margin: f64,
    /// Keyed by cell (`IN/JO`).
    pub per_cell: BTreeMap<String, CellMetrics>,
    pub scorer: String,
    pub threshold: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// One generated response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub index: usize,
    pub strategy: Strategy,
    pub emotion: Emotion,
    pub hate_speech: String,
    pub reference: String,
    pub output: String,
}

#[derive(Debug, Clone, Copy)]
struct Row {
    rouge1: f64,
    rouge2: f64,
    rouge_l: f64,
    sc: f64,
    ec: f64,
    margin: f64,
}

/// Greedy generations for `examples`. The prompt includes the emotion exactly
/// when the stack carries emotion adapters.
pub fn generate(
    model: &SeqModel,
    stack: &HierarchicalPrefixStack,
    examples: &[AttributedExample],
    vocab: &Vocabulary,
    max_new: usize,
) -> Result<Vec<(Generation, PreferencePair)>> {
    let with_emotion = stack.has_stage2();
    let inj = stack.injection();
    let results: Vec<Result<_>> = examples
        .par_iter()
        .enumerate()
        .map(|(index, ex)| {
            let prompt = serialize_prompt(&ex.hate_speech, ex.strategy, with_emotion.then_some(ex.emotion), vocab)?;
            let mut out = greedy_decode(model, &prompt, &inj, max_new)?;
            let output = vocab.decode_text(&out)?;
            if out.len() < max_new || out.is_empty() {
                out.push(EOS);
            }
            let pair = PreferencePair::new(prompt, target_ids(&ex.counterspeech, vocab)?, out);
            Ok((
                Generation {
                    index,
                    strategy: ex.strategy,
                    emotion: ex.emotion,
                    hate_speech: ex.hate_speech.clone(),
                    reference: ex.counterspeech.clone(),
                    output,
                },
                pair,
            ))
        })
        .collect();
    results.into_iter().collect()
}

/// Generates for every example and scores the outputs against references,
/// per cell and overall. Aggregates are count-weighted means of the cells.
pub fn evaluate(
    model: &SeqModel,
    stack: &HierarchicalPrefixStack,
    examples: &[AttributedExample],
    vocab: &Vocabulary,
    scorer: &dyn Scorer,
    threshold: f64,
    max_new: usize,
) -> Result<(EvalReport, Vec<Generation>)> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let gens = generate(model, stack, examples, vocab, max_new)?;
    let rows: Vec<Result<Row>> = gens
        .par_iter()
        .map(|(g, pair)| {
            let cand = tokenize(&g.output);
            let reference = tokenize(&g.reference);
            Ok(Row {
                rouge1: rouge_n_tokens(&cand, &reference, 1).f1,
                rouge2: rouge_n_tokens(&cand, &reference, 2).f1,
                rouge_l: rouge_l_tokens(&cand, &reference).f1,
                sc: f64::from(scorer.score(&g.output, Attribute::Strategy(g.strategy)) >= threshold),
                ec: f64::from(scorer.score(&g.output, Attribute::Emotion(g.emotion)) >= threshold),
                margin: pair_margin(model, stack, pair)?,
            })
        })
        .collect();

    let mut sums: BTreeMap<String, (usize, [f64; 6])> = BTreeMap::new();
    for ((g, _), row) in gens.iter().zip(rows) {
        let row = row?;
        let e = sums.entry(cell_key(g.strategy, g.emotion)).or_default();
        e.0 += 1;
        for (acc, v) in e.1.iter_mut().zip([row.rouge1, row.rouge2, row.rouge_l, row.sc, row.ec, row.margin]) {
            *acc += v;
        }
    }
    let per_cell: BTreeMap<String, CellMetrics> = sums
        .into_iter()
        .map(|(k, (n, s))| {
            let m = |i: usize| s[i] / n as f64;
            (
                k,
                CellMetrics {
                    n,
                    rouge1: m(0),
                    rouge2: m(1),
                    rouge_l: m(2),
                    strategy_conformity: m(3),
                    emotion_conformity: m(4),
                    mean_margin: m(5),
                },
            )
        })
        .collect();
    let report = aggregate(per_cell, scorer.name(), threshold);
    Ok((report, gens.into_iter().map(|(g, _)| g).collect()))
}

/// Builds a report whose aggregates are the count-weighted means of `per_cell`.
pub fn aggregate(per_cell: BTreeMap<String, CellMetrics>, scorer: &str, threshold: f64) -> EvalReport {
    let n: usize = per_cell.values().map(|c| c.n).sum();
    let w = |f: fn(&CellMetrics) -> f64| per_cell.values().map(|c| c.n as f64 * f(c)).sum::<f64>() / n as f64;
    EvalReport {
        n,
        rouge1: w(|c| c.rouge1),
        rouge2: w(|c| c.rouge2),
        rouge_l: w(|c| c.rouge_l),
        strategy_conformity: w(|c| c.strategy_conformity),
        emotion_conformity: w(|c| c.emotion_conformity),
        mean_margin: w(|c| c.mean_margin),
        per_cell,
        scorer: scorer.to_string(),
        threshold,
    }
}
