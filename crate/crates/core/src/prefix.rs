//! Hierarchical prefix adapters.
//!
//! Stage one trains a strategy block per side (`alpha` on the encoder, `beta`
//! on the decoder). Stage two freezes them and stacks emotion blocks (`gamma`,
//! `delta`) after them. Each adapter stores `n_virtual x n_layers x 2d` reals:
//! for virtual token `v` and layer `l`, the first `d` entries are the key and
//! the next `d` the value.

use ndarray::{concatenate, s, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{Injection, InjectionVars, LayerPrefix, ModelConfig, PrefixVar};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Encoder,
    Decoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrefixStage {
    Strategy,
    Emotion,
}

/// Names the four adapters of a stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    Alpha,
    Beta,
    Gamma,
    Delta,
}

impl Slot {
    pub const ALL: [Slot; 4] = [Slot::Alpha, Slot::Beta, Slot::Gamma, Slot::Delta];

    pub fn name(self) -> &'static str {
        match self {
            Slot::Alpha => "alpha",
            Slot::Beta => "beta",
            Slot::Gamma => "gamma",
            Slot::Delta => "delta",
        }
    }

    pub fn side(self) -> Side {
        match self {
            Slot::Alpha | Slot::Gamma => Side::Encoder,
            Slot::Beta | Slot::Delta => Side::Decoder,
        }
    }

    pub fn stage(self) -> PrefixStage {
        match self {
            Slot::Alpha | Slot::Beta => PrefixStage::Strategy,
            Slot::Gamma | Slot::Delta => PrefixStage::Emotion,
        }
    }
}

/// Trainable per-parameter count of one adapter: `vt * l * 2d`.
pub fn param_count(vt: usize, layers: usize, d: usize) -> usize {
    vt * layers * 2 * d
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefixAdapter {
    pub side: Side,
    pub stage: PrefixStage,
    pub n_virtual: usize,
    pub n_layers: usize,
    pub d_model: usize,
    /// `n_virtual x (n_layers * 2 * d_model)`, row-major equal to the flat
    /// `n_virtual x n_layers x 2d` layout.
    pub params: Array2<f64>,
    pub trainable: bool,
}

impl PrefixAdapter {
    fn random(side: Side, stage: PrefixStage, n_virtual: usize, n_layers: usize, d: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, INIT_STD).expect("positive std");
        let params = Array2::from_shape_simple_fn((n_virtual, n_layers * 2 * d), || normal.sample(rng));
        PrefixAdapter {
            side,
            stage,
            n_virtual,
            n_layers,
            d_model: d,
            params,
            trainable: true,
        }
    }

    pub fn from_params(
        side: Side,
        stage: PrefixStage,
        n_layers: usize,
        d_model: usize,
        params: Array2<f64>,
        trainable: bool,
    ) -> Result<Self> {
        if params.ncols() != n_layers * 2 * d_model || params.nrows() == 0 {
            return Err(Error::Shape(format!(
                "adapter params {:?} do not match {n_layers} layers x 2*{d_model}",
                params.dim()
            )));
        }
        Ok(PrefixAdapter {
            side,
            stage,
            n_virtual: params.nrows(),
            n_layers,
            d_model,
            params,
            trainable,
        })
    }

    /// `[n_virtual, n_layers, 2d]`
    pub fn shape(&self) -> [usize; 3] {
        [self.n_virtual, self.n_layers, 2 * self.d_model]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Entry `(v, l, k)` of the 3-D view.
    pub fn at(&self, v: usize, l: usize, k: usize) -> f64 {
        self.params[[v, l * 2 * self.d_model + k]]
    }

    fn layer_block(&self, layer: usize) -> (Array2<f64>, Array2<f64>) {
        let d = self.d_model;
        let base = layer * 2 * d;
        (
            self.params.slice(s![.., base..base + d]).to_owned(),
            self.params.slice(s![.., base + d..base + 2 * d]).to_owned(),
        )
    }

    /// Little-endian `f32` bytes, the checkpoint serialization of the params.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.params.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect()
    }
}

/// Which checkpoint supplied the frozen stage-one and stage-two blocks.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub stage1: Option<String>,
    pub stage2: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalPrefixStack {
    pub alpha: PrefixAdapter,
    pub beta: PrefixAdapter,
    pub gamma: Option<PrefixAdapter>,
    pub delta: Option<PrefixAdapter>,
    pub lineage: Lineage,
}

/// Strategy blocks for every encoder (`alpha`) and decoder (`beta`) layer.
pub fn init_stage1(vt: usize, cfg: &ModelConfig, seed: u64) -> Result<HierarchicalPrefixStack> {
    if vt < 1 {
        return Err(Error::Config("vt must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alpha = PrefixAdapter::random(Side::Encoder, PrefixStage::Strategy, vt, cfg.n_layers_enc, cfg.d_model, &mut rng);
    let beta = PrefixAdapter::random(Side::Decoder, PrefixStage::Strategy, vt, cfg.n_layers_dec, cfg.d_model, &mut rng);
    Ok(HierarchicalPrefixStack {
        alpha,
        beta,
        gamma: None,
        delta: None,
        lineage: Lineage::default(),
    })
}

/// Adds emotion blocks on top of frozen strategy blocks. With `vt_e` equal
/// to the stage-one width the new blocks start as copies of `alpha`/`beta`.
pub fn init_stage2(stack: &HierarchicalPrefixStack, vt_e: usize, seed: u64) -> Result<HierarchicalPrefixStack> {
    if stack.lineage.stage1.is_none() {
        return Err(Error::Lineage("stage-one adapters have no recorded source checkpoint".into()));
    }
    if stack.gamma.is_some() || stack.delta.is_some() {
        return Err(Error::Stage("stack already carries emotion adapters".into()));
    }
    if vt_e < 1 {
        return Err(Error::Config("vt_e must be at least 1".into()));
    }
    let mut out = stack.clone();
    out.alpha.trainable = false;
    out.beta.trainable = false;
    let (gamma, delta) = if vt_e == stack.alpha.n_virtual && vt_e == stack.beta.n_virtual {
        let mut g = stack.alpha.clone();
        let mut d = stack.beta.clone();
        for a in [&mut g, &mut d] {
            a.stage = PrefixStage::Emotion;
            a.trainable = true;
        }
        (g, d)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            PrefixAdapter::random(Side::Encoder, PrefixStage::Emotion, vt_e, stack.alpha.n_layers, stack.alpha.d_model, &mut rng),
            PrefixAdapter::random(Side::Decoder, PrefixStage::Emotion, vt_e, stack.beta.n_layers, stack.beta.d_model, &mut rng),
        )
    };
    out.gamma = Some(gamma);
    out.delta = Some(delta);
    Ok(out)
}

impl HierarchicalPrefixStack {
    pub fn adapter(&self, slot: Slot) -> Option<&PrefixAdapter> {
        match slot {
            Slot::Alpha => Some(&self.alpha),
            Slot::Beta => Some(&self.beta),
            Slot::Gamma => self.gamma.as_ref(),
            Slot::Delta => self.delta.as_ref(),
        }
    }

    pub fn adapter_mut(&mut self, slot: Slot) -> Option<&mut PrefixAdapter> {
        match slot {
            Slot::Alpha => Some(&mut self.alpha),
            Slot::Beta => Some(&mut self.beta),
            Slot::Gamma => self.gamma.as_mut(),
            Slot::Delta => self.delta.as_mut(),
        }
    }

    /// Present adapters in slot order.
    pub fn adapters(&self) -> impl Iterator<Item = (Slot, &PrefixAdapter)> {
        Slot::ALL.into_iter().filter_map(|s| self.adapter(s).map(|a| (s, a)))
    }

    pub fn has_stage2(&self) -> bool {
        self.gamma.is_some() && self.delta.is_some()
    }

    pub fn trainable_count(&self) -> usize {
        self.adapters().filter(|(_, a)| a.trainable).map(|(_, a)| a.len()).sum()
    }

    pub fn set_trainable(&mut self, slot: Slot, trainable: bool) {
        if let Some(a) = self.adapter_mut(slot) {
            a.trainable = trainable;
        }
    }

    /// Marks every present adapter trainable or frozen.
    pub fn set_all_trainable(&mut self, trainable: bool) {
        for s in Slot::ALL {
            self.set_trainable(s, trainable);
        }
    }

    /// Rounds every adapter to `f32` precision.
    pub fn round_to_f32(&mut self) {
        for s in Slot::ALL {
            if let Some(a) = self.adapter_mut(s) {
                a.params.mapv_inplace(crate::model::round_f32);
            }
        }
    }

    fn side_adapters(&self, side: Side) -> (&PrefixAdapter, Option<&PrefixAdapter>) {
        match side {
            Side::Encoder => (&self.alpha, self.gamma.as_ref()),
            Side::Decoder => (&self.beta, self.delta.as_ref()),
        }
    }

    /// Key/value block for one attention layer: stage-one rows first, then
    /// stage-two rows.
    pub fn inject(&self, layer: usize, side: Side) -> Result<LayerPrefix> {
        let (first, second) = self.side_adapters(side);
        if layer >= first.n_layers {
            return Err(Error::Shape(format!(
                "layer {layer} out of range for {side:?} side with {} layers",
                first.n_layers
            )));
        }
        let (mut keys, mut values) = first.layer_block(layer);
        if let Some(second) = second {
            let (k2, v2) = second.layer_block(layer);
            keys = concatenate(Axis(0), &[keys.view(), k2.view()]).expect("same width");
            values = concatenate(Axis(0), &[values.view(), v2.view()]).expect("same width");
        }
        Ok(LayerPrefix {
            keys,
            values,
            visible: true,
        })
    }

    /// Blocks for every layer of both sides.
    pub fn injection(&self) -> Injection {
        let collect = |side: Side, layers: usize| {
            (0..layers)
                .map(|l| self.inject(l, side).expect("layer in range"))
                .collect()
        };
        Injection {
            encoder: collect(Side::Encoder, self.alpha.n_layers),
            decoder: collect(Side::Decoder, self.beta.n_layers),
        }
    }

    pub fn check_compatible(&self, cfg: &ModelConfig) -> Result<()> {
        for (slot, a) in self.adapters() {
            let layers = match a.side {
                Side::Encoder => cfg.n_layers_enc,
                Side::Decoder => cfg.n_layers_dec,
            };
            if a.n_layers != layers || a.d_model != cfg.d_model {
                return Err(Error::Shape(format!(
                    "{} adapter is {:?}, model expects {layers} layers of width {}",
                    slot.name(),
                    a.shape(),
                    cfg.d_model
                )));
            }
        }
        Ok(())
    }

    /// Places the stack on a tape. Trainable adapters become watched leaves;
    /// frozen ones are constants and never receive a gradient.
    pub(crate) fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> BoundStack {
        let mut leaves = Vec::new();
        for (slot, a) in self.adapters() {
            let v = if a.trainable {
                tape.param(&a.params)
            } else {
                tape.constant(&a.params)
            };
            leaves.push((slot, v));
        }
        let var_of = |slot: Slot| leaves.iter().find(|(s, _)| *s == slot).map(|(_, v)| *v);
        let mut side_vars = |first: Slot, second: Slot, layers: usize, d: usize| -> Vec<PrefixVar> {
            (0..layers)
                .map(|l| {
                    let base = l * 2 * d;
                    let mut keys = Vec::new();
                    let mut values = Vec::new();
                    let mut len = 0;
                    for s in [first, second] {
                        if let (Some(v), Some(a)) = (var_of(s), self.adapter(s)) {
                            keys.push(tape.slice_cols(v, base, base + d));
                            values.push(tape.slice_cols(v, base + d, base + 2 * d));
                            len += a.n_virtual;
                        }
                    }
                    let (keys, values) = if keys.len() == 1 {
                        (keys[0], values[0])
                    } else {
                        (tape.concat_rows(&keys), tape.concat_rows(&values))
                    };
                    PrefixVar {
                        keys,
                        values,
                        len,
                        visible: true,
                    }
                })
                .collect()
        };
        let encoder = side_vars(Slot::Alpha, Slot::Gamma, self.alpha.n_layers, self.alpha.d_model);
        let decoder = side_vars(Slot::Beta, Slot::Delta, self.beta.n_layers, self.beta.d_model);
        BoundStack {
            vars: InjectionVars { encoder, decoder },
            leaves,
        }
    }
}

pub(crate) struct BoundStack {
    pub vars: InjectionVars,
    leaves: Vec<(Slot, Var)>,
}

impl BoundStack {
    /// Gradient for every present adapter; frozen adapters get exact zeros.
    pub fn gradients(&self, stack: &HierarchicalPrefixStack, grads: &Gradients) -> StackGrads {
        let mut out = StackGrads::default();
        for &(slot, v) in &self.leaves {
            let a = stack.adapter(slot).expect("bound adapter exists");
            let g = match (a.trainable, grads.get(v)) {
                (true, Some(g)) => g.clone(),
                _ => Array2::zeros(a.params.raw_dim()),
            };
            out.set(slot, g);
        }
        out
    }
}

/// Per-adapter gradient arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StackGrads {
    pub grads: [Option<Array2<f64>>; 4],
}

fn slot_index(slot: Slot) -> usize {
    Slot::ALL.iter().position(|&s| s == slot).expect("slot listed")
}

impl StackGrads {
    pub fn get(&self, slot: Slot) -> Option<&Array2<f64>> {
        self.grads[slot_index(slot)].as_ref()
    }

    pub fn set(&mut self, slot: Slot, g: Array2<f64>) {
        self.grads[slot_index(slot)] = Some(g);
    }

    /// `self += other`
    pub fn accumulate(&mut self, other: &StackGrads) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => *m += t,
                (None, Some(t)) => *mine = Some(t.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            *g *= c;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|x| x.is_finite()))
    }
}
