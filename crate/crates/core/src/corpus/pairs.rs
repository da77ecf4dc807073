//! Preference pairs: ground truth as the chosen side, the stage-one model's
//! greedy generation as the rejected side.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{serialize_prompt, target_ids, AttributedExample, Vocabulary, EOS};
use crate::error::Result;
use crate::model::{greedy_decode, SeqModel};
use crate::prefix::HierarchicalPrefixStack;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: Vec<usize>,
    pub chosen: Vec<usize>,
    pub rejected: Vec<usize>,
    pub degenerate: bool,
}

impl PreferencePair {
    pub fn new(prompt: Vec<usize>, chosen: Vec<usize>, rejected: Vec<usize>) -> Self {
        let degenerate = chosen == rejected;
        PreferencePair {
            prompt,
            chosen,
            rejected,
            degenerate,
        }
    }

    /// A prompt/target example with no rejected side.
    pub fn supervised(prompt: Vec<usize>, target: Vec<usize>) -> Self {
        PreferencePair {
            prompt,
            chosen: target,
            rejected: Vec::new(),
            degenerate: false,
        }
    }
}

/// An example that produced no pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skip {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairBuild {
    pub pairs: Vec<PreferencePair>,
    pub skips: Vec<Skip>,
}

impl PairBuild {
    pub fn degenerate_count(&self) -> usize {
        self.pairs.iter().filter(|p| p.degenerate).count()
    }
}

fn build_one(
    ex: &AttributedExample,
    model: &SeqModel,
    stack: &HierarchicalPrefixStack,
    vocab: &Vocabulary,
    max_new: usize,
) -> Result<std::result::Result<PreferencePair, String>> {
    let prompt = serialize_prompt(&ex.hate_speech, ex.strategy, Some(ex.emotion), vocab)?;
    let chosen = target_ids(&ex.counterspeech, vocab)?;
    let mut rejected = greedy_decode(model, &prompt, &stack.injection(), max_new)?;
    if rejected.len() < max_new {
        rejected.push(EOS);
    }
    if rejected.is_empty() {
        return Ok(Err("generation produced an empty sequence".into()));
    }
    Ok(Ok(PreferencePair::new(prompt, chosen, rejected)))
}

/// One pair per example (in input order) with greedy generations from the
/// stage-one stack. Examples that fail are reported in `skips`, so
/// `pairs.len() + skips.len() == examples.len()`.
pub fn build_preference_pairs(
    examples: &[AttributedExample],
    model: &SeqModel,
    stack: &HierarchicalPrefixStack,
    vocab: &Vocabulary,
    max_new: usize,
) -> PairBuild {
    let results: Vec<_> = examples
        .par_iter()
        .map(|ex| build_one(ex, model, stack, vocab, max_new))
        .collect();
    let mut pairs = Vec::with_capacity(examples.len());
    let mut skips = Vec::new();
    for (index, r) in results.into_iter().enumerate() {
        let reason = match r {
            Ok(Ok(p)) => {
                pairs.push(p);
                continue;
            }
            Ok(Err(reason)) => reason,
            Err(e) => e.to_string(),
        };
        log::warn!("skipping example {index} during pair building: {reason}");
        skips.push(Skip { index, reason });
    }
    PairBuild { pairs, skips }
}
