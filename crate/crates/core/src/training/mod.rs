//! Three-stage orchestration: strategy prefixes, then emotion prefixes on
//! top of frozen strategy prefixes, then preference tuning of all four.

mod checkpoint;
mod gradcheck;
mod optim;
mod pretrain;


use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{serialize_prompt, target_ids, AttributedExample, PreferencePair, Vocabulary};
use crate::error::{Error, Result};
use crate::model::SeqModel;
use crate::objectives::{evaluate_objective, Objective};
use crate::prefix::{HierarchicalPrefixStack, StackGrads};

pub use checkpoint::{
    load_checkpoint, load_checkpoint_with_parent, save_checkpoint, Checkpoint, CheckpointMeta, CheckpointStage,
    MAGIC, VERSION,
};
pub use gradcheck::{gradient_check, gradient_check_fn, tiny_instance, GradCheckReport, TinyInstance};
pub use optim::Adam;
pub use pretrain::{pretrain_base, PretrainConfig};


/// Which training stage to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Strategy,
    StrategyEmotion,
    Orpo,
    Dpo,
}

impl StageKind {
    pub fn name(self) -> &'static str {
        match self {
            StageKind::Strategy => "strategy",
            StageKind::StrategyEmotion => "strategy_emotion",
            StageKind::Orpo => "orpo",
            StageKind::Dpo => "dpo",
        }
    }

    pub fn is_preference(self) -> bool {
        matches!(self, StageKind::Orpo | StageKind::Dpo)
    }
}

impl FromStr for StageKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strategy" => Ok(StageKind::Strategy),
            "emotion" | "strategy_emotion" => Ok(StageKind::StrategyEmotion),
            "orpo" => Ok(StageKind::Orpo),
            "dpo" => Ok(StageKind::Dpo),
            other => Err(Error::Config(format!("unknown stage `{other}`"))),
        }
    }
}

fn d_batch() -> usize {
    4
}
fn d_lr() -> f64 {
    1e-4
}
fn d_epochs() -> usize {
    50
}
fn d_patience() -> usize {
    3
}
fn d_vt() -> usize {
    3
}
fn d_eps() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_epochs")]
    pub max_epochs: usize,
    #[serde(default = "d_patience")]
    pub early_stop_patience: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_vt")]
    pub vt: usize,
    /// Emotion-stage virtual tokens; `None` means equal to `vt`.
    #[serde(default)]
    pub vt_e: Option<usize>,
    #[serde(default = "d_eps")]
    pub epsilon: f64,
    #[serde(default = "d_eps")]
    pub beta_dpo: f64,
    pub stage: StageKind,
}

impl TrainConfig {
    pub fn new(stage: StageKind) -> Self {
        TrainConfig {
            batch_size: d_batch(),
            learning_rate: d_lr(),
            max_epochs: d_epochs(),
            early_stop_patience: d_patience(),
            seed: 0,
            vt: d_vt(),
            vt_e: None,
            epsilon: d_eps(),
            beta_dpo: d_eps(),
            stage,
        }
    }

    pub fn vt_emotion(&self) -> usize {
        self.vt_e.unwrap_or(self.vt)
    }

    pub fn objective(&self) -> Objective {
        match self.stage {
            StageKind::Strategy | StageKind::StrategyEmotion => Objective::Finetuned,
            StageKind::Orpo => Objective::Final { epsilon: self.epsilon },
            StageKind::Dpo => Objective::Dpo { beta: self.beta_dpo },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.vt == 0 || self.vt_emotion() == 0 {
            return Err(Error::Config("batch_size, max_epochs, vt and vt_e must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.epsilon >= 0.0) || !(self.beta_dpo >= 0.0) {
            return Err(Error::Config("learning_rate must be > 0; epsilon and beta_dpo >= 0".into()));
        }
        Ok(())
    }
}

/// Prompt/target pairs for the supervised stages. With `with_emotion` the
/// prompt carries the emotion as well as the strategy.
pub fn supervised_pairs(
    examples: &[AttributedExample],
    vocab: &Vocabulary,
    with_emotion: bool,
) -> Result<Vec<PreferencePair>> {
    examples
        .iter()
        .map(|ex| {
            let prompt = serialize_prompt(&ex.hate_speech, ex.strategy, with_emotion.then_some(ex.emotion), vocab)?;
            Ok(PreferencePair::supervised(prompt, target_ids(&ex.counterspeech, vocab)?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
}

/// Patience-based stopping on a loss that should decrease.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    bad: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            bad: 0,
        }
    }

    /// Records a dev loss; returns true when it is the best so far.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.bad = 0;
            true
        } else {
            self.bad += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.patience > 0 && self.bad >= self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-dev stack, rounded to checkpoint precision.
    pub stack: HierarchicalPrefixStack,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

fn check_stage(stage: StageKind, stack: &HierarchicalPrefixStack) -> Result<()> {
    match stage {
        StageKind::Strategy => {
            if stack.has_stage2() {
                return Err(Error::Stage("strategy stage expects a stack without emotion adapters".into()));
            }
            if !stack.alpha.trainable || !stack.beta.trainable {
                return Err(Error::Stage("strategy stage expects trainable alpha and beta".into()));
            }
        }
        StageKind::StrategyEmotion => {
            if !stack.has_stage2() {
                return Err(Error::Stage("emotion stage needs gamma and delta adapters".into()));
            }
            if stack.lineage.stage1.is_none() {
                return Err(Error::Lineage("emotion stage needs strategy adapters from a strategy checkpoint".into()));
            }
            if stack.alpha.trainable || stack.beta.trainable {
                return Err(Error::Stage("emotion stage requires frozen alpha and beta".into()));
            }
        }
        StageKind::Orpo | StageKind::Dpo => {
            if !stack.has_stage2() || stack.lineage.stage2.is_none() {
                return Err(Error::Lineage(format!(
                    "{} stage needs a stack trained through the emotion stage",
                    stage.name()
                )));
            }
        }
    }
    Ok(())
}

/// Mean loss (and summed gradients) over `items`, combined in input order.
fn batch_eval(
    model: &SeqModel,
    stack: &HierarchicalPrefixStack,
    reference: Option<&HierarchicalPrefixStack>,
    items: &[&PreferencePair],
    objective: Objective,
    want_grad: bool,
) -> Result<(Vec<f64>, Option<StackGrads>)> {
    let outs: Vec<Result<_>> = items
        .par_iter()
        .map(|p| evaluate_objective(model, stack, reference, p, objective, want_grad))
        .collect();
    let mut losses = Vec::with_capacity(items.len());
    let mut total: Option<StackGrads> = None;
    for out in outs {
        let out = out?;
        losses.push(out.loss);
        if let Some(g) = out.grads {
            match &mut total {
                Some(t) => t.accumulate(&g),
                None => total = Some(g),
            }
        }
    }
    Ok((losses, total))
}

/// Mean stage loss of `stack` over `data`.
pub fn dataset_loss(
    model: &SeqModel,
    stack: &HierarchicalPrefixStack,
    reference: Option<&HierarchicalPrefixStack>,
    data: &[PreferencePair],
    objective: Objective,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let refs: Vec<&PreferencePair> = data.iter().collect();
    let (losses, _) = batch_eval(model, stack, reference, &refs, objective, false)?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Runs one stage. Only the stage's trainable adapters change; the base
/// model is borrowed immutably. Returns the best-dev stack.
pub fn train_stage(
    config: &TrainConfig,
    train: &[PreferencePair],
    dev: &[PreferencePair],
    stack: HierarchicalPrefixStack,
    model: &SeqModel,
) -> Result<TrainOutcome> {
    train_stage_with(config, train, dev, stack, model, |_| {})
}

/// [`train_stage`] with a per-epoch callback.
pub fn train_stage_with<F: FnMut(&EpochRecord)>(
    config: &TrainConfig,
    train: &[PreferencePair],
    dev: &[PreferencePair],
    mut stack: HierarchicalPrefixStack,
    model: &SeqModel,
    mut on_epoch: F,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_stage(config.stage, &stack)?;
    stack.check_compatible(model.config())?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if config.stage.is_preference() && train.iter().chain(dev).any(|p| p.rejected.is_empty()) {
        return Err(Error::Stage("preference stages need pairs with a rejected sequence".into()));
    }
    let reference = match config.stage {
        StageKind::Dpo => {
            let mut r = stack.clone();
            r.set_all_trainable(false);
            Some(r)
        }
        _ => None,
    };
    if config.stage.is_preference() {
        stack.set_all_trainable(true);
    }
    let objective = config.objective();
    let mut adam = Adam::new(config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stopper = EarlyStopping::new(config.early_stop_patience);
    let mut best = stack.clone();
    let mut log = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_losses = Vec::with_capacity(train.len());
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let items: Vec<&PreferencePair> = chunk.iter().map(|&i| &train[i]).collect();
            let (losses, grads) = batch_eval(model, &stack, reference.as_ref(), &items, objective, true)?;
            let mut grads = grads.expect("gradients requested");
            if losses.iter().any(|l| !l.is_finite()) || !grads.all_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: b,
                    detail: format!("examples {chunk:?} losses {losses:?}"),
                });
            }
            grads.scale(1.0 / items.len() as f64);
            adam.step(&mut stack, &grads);
            epoch_losses.extend(losses);
        }
        let train_loss = epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64;
        let dev_loss = dataset_loss(model, &stack, reference.as_ref(), dev, objective)?;
        if !dev_loss.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                batch: usize::MAX,
                detail: "dev loss".into(),
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            dev_loss,
        };
        log::info!(
            "stage={} epoch={} train_loss={:.6} dev_loss={:.6}",
            config.stage.name(),
            epoch,
            train_loss,
            dev_loss
        );
        on_epoch(&record);
        log.push(record);
        if stopper.observe(epoch, dev_loss) {
            best = stack.clone();
        }
        if stopper.should_stop() {
            stopped_early = epoch < config.max_epochs;
            break;
        }
    }
    best.round_to_f32();
    Ok(TrainOutcome {
        stack: best,
        log,
        best_epoch: stopper.best_epoch(),
        stopped_early,
    })
}
