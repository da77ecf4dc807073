//! Central finite-difference verification of the analytic prefix gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{PreferencePair, Vocabulary, EOS, SEP};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SeqModel};
use crate::objectives::{evaluate_objective, Objective};
use crate::prefix::{init_stage1, init_stage2, HierarchicalPrefixStack, Slot};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub objective: String,
    pub checked: usize,
    pub trainable: usize,
    pub max_rel_error: f64,
    /// Largest |analytic| seen at a frozen coordinate; must be exactly 0.
    pub max_frozen_grad: f64,
}

fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-8)
}

/// Generic check on a flat parameter vector. `loss` returns the value and
/// `grad` the analytic gradient. Checks every coordinate when `sample_size`
/// is `None` or at least the dimension, otherwise a seeded subset.
pub fn gradient_check_fn<L, G>(
    x: &[f64],
    loss: L,
    grad: G,
    h: f64,
    sample_size: Option<usize>,
    seed: u64,
) -> Result<f64>
where
    L: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    let g = grad(x);
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite analytic gradient".into()));
    }
    let coords = pick_coords(x.len(), sample_size, seed);
    let mut worst = 0.0f64;
    let mut p = x.to_vec();
    for i in coords {
        let orig = p[i];
        p[i] = orig + h;
        let up = loss(&p);
        p[i] = orig - h;
        let down = loss(&p);
        p[i] = orig;
        let fd = (up - down) / (2.0 * h);
        worst = worst.max(rel_err(g[i], fd));
    }
    Ok(worst)
}

fn pick_coords(n: usize, sample_size: Option<usize>, seed: u64) -> Vec<usize> {
    match sample_size {
        Some(k) if k < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v = sample(&mut rng, n, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..n).collect(),
    }
}

/// Checks the gradient of `objective` with respect to every trainable
/// adapter entry (or a seeded subset of `sample_size`).
pub fn gradient_check(
    objective: Objective,
    model: &SeqModel,
    stack: &HierarchicalPrefixStack,
    reference: Option<&HierarchicalPrefixStack>,
    pair: &PreferencePair,
    h: f64,
    sample_size: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport> {
    let out = evaluate_objective(model, stack, reference, pair, objective, true)?;
    let grads = out.grads.expect("requested");
    if !grads.all_finite() {
        return Err(Error::Domain("non-finite analytic gradient".into()));
    }

    let mut coords: Vec<(Slot, usize, usize)> = Vec::new();
    let mut max_frozen = 0.0f64;
    for (slot, a) in stack.adapters() {
        let g = grads.get(slot);
        for ((r, c), _) in a.params.indexed_iter() {
            if a.trainable {
                coords.push((slot, r, c));
            } else if let Some(g) = g {
                max_frozen = max_frozen.max(g[[r, c]].abs());
            }
        }
    }
    let picked = pick_coords(coords.len(), sample_size, seed);
    let loss_at = |s: &HierarchicalPrefixStack| -> Result<f64> {
        Ok(evaluate_objective(model, s, reference, pair, objective, false)?.loss)
    };
    let mut worst = 0.0f64;
    let mut probe = stack.clone();
    for &i in &picked {
        let (slot, r, c) = coords[i];
        let orig = stack.adapter(slot).expect("present").params[[r, c]];
        probe.adapter_mut(slot).expect("present").params[[r, c]] = orig + h;
        let up = loss_at(&probe)?;
        probe.adapter_mut(slot).expect("present").params[[r, c]] = orig - h;
        let down = loss_at(&probe)?;
        probe.adapter_mut(slot).expect("present").params[[r, c]] = orig;
        let fd = (up - down) / (2.0 * h);
        let a = grads.get(slot).map(|g| g[[r, c]]).unwrap_or(0.0);
        worst = worst.max(rel_err(a, fd));
    }
    Ok(GradCheckReport {
        objective: objective.name().to_string(),
        checked: picked.len(),
        trainable: coords.len(),
        max_rel_error: worst,
        max_frozen_grad: max_frozen,
    })
}

/// A tiny seeded problem for gradient checks: vocab 16, d 8, 2 heads,
/// 2 layers, two virtual tokens per adapter.
#[derive(Debug, Clone)]
pub struct TinyInstance {
    pub model: SeqModel,
    /// Emotion-stage stack: strategy adapters frozen.
    pub stack: HierarchicalPrefixStack,
    /// A perturbed frozen copy, used as the DPO reference.
    pub reference: HierarchicalPrefixStack,
    pub pair: PreferencePair,
    pub vocab: Vocabulary,
}

pub fn tiny_instance(seed: u64) -> Result<TinyInstance> {
    let words: Vec<String> = (0..12).map(|i| format!("w{i}")).collect();
    let vocab = Vocabulary::from_words(words.iter().map(String::as_str));
    let cfg = ModelConfig::new(vocab.len(), 8, 2, 2, 16);
    let model = SeqModel::init(cfg.clone(), seed)?;
    let mut s1 = init_stage1(2, &cfg, seed.wrapping_add(1))?;
    s1.lineage.stage1 = Some("tiny".into());
    let mut stack = init_stage2(&s1, 2, seed.wrapping_add(2))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
    // move the emotion blocks away from their copy initialisation
    for slot in [Slot::Gamma, Slot::Delta] {
        let a = stack.adapter_mut(slot).expect("stage two");
        a.params.mapv_inplace(|x| x + rng.random_range(-0.5..0.5));
    }
    let mut reference = stack.clone();
    for slot in Slot::ALL {
        let a = reference.adapter_mut(slot).expect("stage two");
        a.params.mapv_inplace(|x| x + rng.random_range(-0.1..0.1));
    }
    reference.set_all_trainable(false);
    let mut word = |n: usize| -> Vec<usize> { (0..n).map(|_| rng.random_range(SEP + 1..vocab.len())).collect() };
    let mut prompt = word(5);
    prompt.push(EOS);
    let mut chosen = word(4);
    chosen.push(EOS);
    let mut rejected = word(3);
    rejected.push(EOS);
    let pair = PreferencePair::new(prompt, chosen, rejected);
    Ok(TinyInstance {
        model,
        stack,
        reference,
        pair,
        vocab,
    })
}
