//! Denoising pretraining of the base model on unlabeled corpus text.
//!
//! Each text is corrupted by token deletion and random replacement and the
//! model learns to reconstruct it. No attribute labels are seen, so all
//! attribute control still has to come from the prefixes.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Adam;
use crate::autograd::Tape;
use crate::corpus::{target_ids, AttributedExample, Vocabulary, EOS, SEP};
use crate::error::{Error, Result};
use crate::model::{decode_graph, encode_graph, round_f32, shift_right, SeqModel, ThetaVars};

fn d_epochs() -> usize {
    20
}
fn d_lr() -> f64 {
    3e-3
}
fn d_batch() -> usize {
    8
}
fn d_drop() -> f64 {
    0.1
}
fn d_replace() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_drop")]
    pub drop_prob: f64,
    #[serde(default = "d_replace")]
    pub replace_prob: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: d_epochs(),
            learning_rate: d_lr(),
            batch_size: d_batch(),
            drop_prob: d_drop(),
            replace_prob: d_replace(),
            seed: 0,
        }
    }
}

fn corrupt(clean: &[usize], vocab_size: usize, cfg: &PretrainConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(clean.len() + 1);
    for &t in clean {
        if rng.random_bool(cfg.drop_prob) {
            continue;
        }
        out.push(if rng.random_bool(cfg.replace_prob) { rng.random_range(SEP + 1..vocab_size) } else { t });
    }
    if out.is_empty() {
        out.push(clean[0]);
    }
    out.push(EOS);
    out
}

fn reconstruction_grad(
    model: &SeqModel,
    input: &[usize],
    target: &[usize],
) -> (f64, BTreeMap<String, Array2<f64>>) {
    let mut t = Tape::new();
    let th = ThetaVars::bind(&mut t, model, true);
    let mem = encode_graph(&mut t, model, &th, input, &[]);
    let lp = decode_graph(&mut t, model, &th, mem, &shift_right(target), &[]);
    let picked = t.pick(lp, target);
    let sum = t.sum(picked);
    let loss = t.scale(sum, -1.0 / target.len() as f64);
    let value = t.scalar_value(loss);
    let g = t.backward(loss);
    let grads = th
        .iter()
        .map(|(name, &v)| {
            let shape = model.theta()[name].raw_dim();
            (name.clone(), g.get(v).cloned().unwrap_or_else(|| Array2::zeros(shape)))
        })
        .collect();
    (value, grads)
}

/// Trains every base tensor to reconstruct the hate-speech and counterspeech
/// texts of `examples` from corrupted copies. Returns the model with values
/// rounded to checkpoint precision and the per-epoch mean loss.
pub fn pretrain_base(
    model: &SeqModel,
    examples: &[AttributedExample],
    vocab: &Vocabulary,
    cfg: &PretrainConfig,
) -> Result<(SeqModel, Vec<f64>)> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Config("pretraining needs a positive batch size and learning rate".into()));
    }
    if !(0.0..1.0).contains(&cfg.drop_prob) || !(0.0..1.0).contains(&cfg.replace_prob) {
        return Err(Error::Config("corruption probabilities must lie in [0, 1)".into()));
    }
    let mut texts = Vec::with_capacity(examples.len() * 2);
    for ex in examples {
        texts.push(target_ids(&ex.hate_speech, vocab)?);
        texts.push(target_ids(&ex.counterspeech, vocab)?);
    }
    let vocab_size = model.config().vocab_size;
    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..texts.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let inputs: Vec<Vec<usize>> = chunk
                .iter()
                .map(|&i| {
                    let clean = &texts[i][..texts[i].len() - 1];
                    corrupt(clean, vocab_size, cfg, &mut rng)
                })
                .collect();
            let results: Vec<_> = chunk
                .par_iter()
                .zip(inputs.par_iter())
                .map(|(&i, input)| reconstruction_grad(&model, input, &texts[i]))
                .collect();
            let mut sum: Option<BTreeMap<String, Array2<f64>>> = None;
            for (loss, g) in results {
                if !loss.is_finite() {
                    return Err(Error::NonFinite {
                        epoch,
                        batch: b,
                        detail: format!("pretraining texts {chunk:?}"),
                    });
                }
                total += loss;
                match &mut sum {
                    Some(s) => s.iter_mut().for_each(|(k, a)| *a += &g[k]),
                    None => sum = Some(g),
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            adam.tick();
            for (i, (name, g)) in sum.expect("non-empty batch").into_iter().enumerate() {
                let g = g * scale;
                adam.update(i, model.theta_mut().get_mut(&name).expect("known tensor"), &g);
            }
        }
        let mean = total / texts.len() as f64;
        log::info!("stage=base epoch={epoch} train_loss={mean:.6}");
        log.push(mean);
    }
    for a in model.theta_mut().values_mut() {
        a.mapv_inplace(round_f32);
    }
    Ok((model, log))
}
