//! Binary checkpoint files.
//!
//! Layout: `HPX1`, version (`u32` LE), a length-prefixed JSON metadata block,
//! tensor records (`u32` name length, name, `u32` rank, `u32` dims, `f32` LE
//! payload), and a trailing SHA-256 over everything before it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EpochRecord, PretrainConfig, StageKind, TrainConfig};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SeqModel};
use crate::prefix::{HierarchicalPrefixStack, Lineage, PrefixAdapter, Slot};

pub const MAGIC: &[u8; 4] = b"HPX1";
pub const VERSION: u32 = 1;
const HASH_LEN: usize = 32;

/// What produced a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointStage {
    /// Base model only, no adapters.
    Base,
    Strategy,
    StrategyEmotion,
    Orpo,
    Dpo,
}

impl CheckpointStage {
    pub fn name(self) -> &'static str {
        match self {
            CheckpointStage::Base => "base",
            CheckpointStage::Strategy => "strategy",
            CheckpointStage::StrategyEmotion => "strategy_emotion",
            CheckpointStage::Orpo => "orpo",
            CheckpointStage::Dpo => "dpo",
        }
    }

    /// Stages a checkpoint of this kind may descend from.
    fn allowed_parents(self) -> &'static [CheckpointStage] {
        match self {
            CheckpointStage::Base => &[],
            CheckpointStage::Strategy => &[CheckpointStage::Base],
            CheckpointStage::StrategyEmotion => &[CheckpointStage::Strategy],
            CheckpointStage::Orpo | CheckpointStage::Dpo => &[CheckpointStage::StrategyEmotion],
        }
    }
}

impl From<StageKind> for CheckpointStage {
    fn from(s: StageKind) -> Self {
        match s {
            StageKind::Strategy => CheckpointStage::Strategy,
            StageKind::StrategyEmotion => CheckpointStage::StrategyEmotion,
            StageKind::Orpo => CheckpointStage::Orpo,
            StageKind::Dpo => CheckpointStage::Dpo,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AdapterMeta {
    slot: Slot,
    n_layers: usize,
    d_model: usize,
    trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: CheckpointStage,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    /// Denoising settings and per-epoch loss, for base checkpoints.
    pub pretrain: Option<(PretrainConfig, Vec<f64>)>,
    pub vocab: Vocabulary,
    /// Integrity hash of the checkpoint this one was trained from.
    pub parent: Option<String>,
    pub lineage: Lineage,
    pub theta_hash: String,
    pub log: Vec<EpochRecord>,
    adapters: Vec<AdapterMeta>,
    tensors: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: SeqModel,
    pub stack: Option<HierarchicalPrefixStack>,
}

impl Checkpoint {
    /// Base-model checkpoint with no adapters.
    pub fn base(model: SeqModel, vocab: Vocabulary, pretrain: Option<(PretrainConfig, Vec<f64>)>) -> Self {
        let mut ck = Self::assemble(CheckpointStage::Base, model, vocab, None, None, None, Vec::new());
        ck.meta.pretrain = pretrain;
        ck
    }

    /// Checkpoint for a finished stage, chained to `parent` when given.
    pub fn from_stage(
        config: &TrainConfig,
        model: SeqModel,
        vocab: Vocabulary,
        stack: HierarchicalPrefixStack,
        parent: Option<&Checkpoint>,
        log: Vec<EpochRecord>,
    ) -> Result<Self> {
        let stage = CheckpointStage::from(config.stage);
        let parent_hash = parent.map(|p| p.hash());
        let ck = Self::assemble(stage, model, vocab, Some(stack), Some(config.clone()), parent_hash, log);
        if let Some(p) = parent {
            ck.verify_parent(p)?;
        } else if stage != CheckpointStage::Strategy {
            return Err(Error::Lineage(format!("a {} checkpoint needs a parent", stage.name())));
        }
        Ok(ck)
    }

    fn assemble(
        stage: CheckpointStage,
        model: SeqModel,
        vocab: Vocabulary,
        stack: Option<HierarchicalPrefixStack>,
        train: Option<TrainConfig>,
        parent: Option<String>,
        log: Vec<EpochRecord>,
    ) -> Self {
        let adapters: Vec<AdapterMeta> = stack
            .iter()
            .flat_map(|s| s.adapters())
            .map(|(slot, a)| AdapterMeta {
                slot,
                n_layers: a.n_layers,
                d_model: a.d_model,
                trainable: a.trainable,
            })
            .collect();
        let meta = CheckpointMeta {
            stage,
            model: model.config().clone(),
            train,
            pretrain: None,
            vocab,
            parent,
            lineage: stack.as_ref().map(|s| s.lineage.clone()).unwrap_or_default(),
            theta_hash: model.theta_hash(),
            log,
            tensors: model.theta().len() + adapters.len(),
            adapters,
        };
        Checkpoint { meta, model, stack }
    }

    /// The stack ready for the next stage: lineage points at this checkpoint.
    pub fn stack_for_next_stage(&self) -> Result<HierarchicalPrefixStack> {
        let mut stack = self
            .stack
            .clone()
            .ok_or_else(|| Error::Lineage("base checkpoint carries no adapters".into()))?;
        match self.meta.stage {
            CheckpointStage::Strategy => stack.lineage.stage1 = Some(self.hash()),
            CheckpointStage::StrategyEmotion => stack.lineage.stage2 = Some(self.hash()),
            other => {
                return Err(Error::Lineage(format!("no stage follows a {} checkpoint", other.name())));
            }
        }
        Ok(stack)
    }

    /// Checks that this checkpoint descends directly from `parent`.
    pub fn verify_parent(&self, parent: &Checkpoint) -> Result<()> {
        let expected = parent.hash();
        match &self.meta.parent {
            Some(h) if *h == expected => {}
            Some(h) => {
                return Err(Error::Lineage(format!(
                    "{} checkpoint names parent {h}, expected {expected}",
                    self.meta.stage.name()
                )))
            }
            None => {
                return Err(Error::Lineage(format!("{} checkpoint records no parent", self.meta.stage.name())));
            }
        }
        if !self.meta.stage.allowed_parents().contains(&parent.meta.stage) {
            return Err(Error::Lineage(format!(
                "a {} checkpoint cannot descend from a {} checkpoint",
                self.meta.stage.name(),
                parent.meta.stage.name()
            )));
        }
        if self.meta.theta_hash != parent.meta.theta_hash {
            return Err(Error::Lineage("base parameters differ from the parent checkpoint".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        for (name, arr) in self.model.theta() {
            write_record(&mut out, &format!("theta/{name}"), &[arr.nrows(), arr.ncols()], arr.iter());
        }
        if let Some(stack) = &self.stack {
            for (slot, a) in stack.adapters() {
                write_record(&mut out, &format!("prefix/{}", slot.name()), &a.shape(), a.params.iter());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    /// Hex SHA-256 integrity hash, as stored at the end of the file.
    pub fn hash(&self) -> String {
        let bytes = self.to_bytes().expect("metadata serializes");
        hex::encode(&bytes[bytes.len() - HASH_LEN..])
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        if bytes.len() < 12 + HASH_LEN {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
        }
        let body_end = bytes.len() - HASH_LEN;
        let mut r = Reader {
            buf: &bytes[..body_end],
            pos: 8,
        };
        let meta_len = r.u32("metadata length")? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)?;
        let mut tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
        let mut count = 0;
        while r.pos < r.buf.len() {
            let (name, dims, data) = r.record(count)?;
            tensors.insert(name, (dims, data));
            count += 1;
        }
        let digest = Sha256::digest(&bytes[..body_end]);
        if digest.as_slice() != &bytes[body_end..] {
            if count < meta.tensors {
                return Err(Error::Checkpoint(format!(
                    "truncated: {count} of {} tensor records present",
                    meta.tensors
                )));
            }
            return Err(Error::Checkpoint("integrity hash mismatch".into()));
        }
        if count != meta.tensors {
            return Err(Error::Checkpoint(format!("expected {} tensor records, found {count}", meta.tensors)));
        }

        let mut theta = BTreeMap::new();
        for (name, _) in meta.model.theta_shapes() {
            let (dims, data) = tensors
                .remove(&format!("theta/{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor theta/{name}")))?;
            theta.insert(name, to_array2(&dims, data)?);
        }
        let model = SeqModel::from_theta(meta.model.clone(), theta)?;
        let stack = if meta.adapters.is_empty() {
            None
        } else {
            let mut found: BTreeMap<Slot, PrefixAdapter> = BTreeMap::new();
            for a in &meta.adapters {
                let key = format!("prefix/{}", a.slot.name());
                let (dims, data) = tensors
                    .remove(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
                if dims.len() != 3 || dims[1] != a.n_layers || dims[2] != 2 * a.d_model {
                    return Err(Error::Checkpoint(format!("{key}: unexpected dims {dims:?}")));
                }
                let params = to_array2(&[dims[0], dims[1] * dims[2]], data)?;
                let adapter =
                    PrefixAdapter::from_params(a.slot.side(), a.slot.stage(), a.n_layers, a.d_model, params, a.trainable)?;
                found.insert(a.slot, adapter);
            }
            let alpha = found.remove(&Slot::Alpha).ok_or_else(|| Error::Checkpoint("missing alpha".into()))?;
            let beta = found.remove(&Slot::Beta).ok_or_else(|| Error::Checkpoint("missing beta".into()))?;
            Some(HierarchicalPrefixStack {
                alpha,
                beta,
                gamma: found.remove(&Slot::Gamma),
                delta: found.remove(&Slot::Delta),
                lineage: meta.lineage.clone(),
            })
        };
        if let Some(name) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
        }
        if model.theta_hash() != meta.theta_hash {
            return Err(Error::Checkpoint("base parameter hash does not match metadata".into()));
        }
        Ok(Checkpoint { meta, model, stack })
    }
}

fn write_record<'a>(out: &mut Vec<u8>, name: &str, dims: &[usize], data: impl Iterator<Item = &'a f64>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in data {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

fn to_array2(dims: &[usize], data: Vec<f64>) -> Result<Array2<f64>> {
    match dims {
        [r, c] => Array2::from_shape_vec((*r, *c), data).map_err(|e| Error::Checkpoint(e.to_string())),
        _ => Err(Error::Checkpoint(format!("expected a rank-2 tensor, found dims {dims:?}"))),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn record(&mut self, index: usize) -> Result<(String, Vec<usize>, Vec<f64>)> {
        let at = format!("tensor record {index}");
        let name_len = self.u32(&at)? as usize;
        let name = String::from_utf8(self.take(name_len, &at)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{at}: name is not UTF-8")))?;
        let at = format!("tensor record `{name}`");
        let rank = self.u32(&at)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u32(&at)? as usize);
        }
        let n: usize = dims.iter().product();
        let payload = self.take(n * 4, &at)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok((name, dims, data))
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    fs::write(path, checkpoint.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Loads a checkpoint and checks that it descends from `parent`.
pub fn load_checkpoint_with_parent(path: &Path, parent: &Checkpoint) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    ck.verify_parent(parent)?;
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, Vocabulary};
    use crate::prefix::{init_stage1, init_stage2};

    fn fixture() -> (SeqModel, Vocabulary) {
        let data = synth_corpus(20, 3).unwrap();
        let vocab = Vocabulary::from_examples(&data);
        let cfg = ModelConfig::new(vocab.len(), 8, 2, 1, 16);
        (SeqModel::init(cfg, 1).unwrap(), vocab)
    }

    fn strategy_ck() -> Checkpoint {
        let (model, vocab) = fixture();
        let mut stack = init_stage1(2, model.config(), 5).unwrap();
        stack.round_to_f32();
        Checkpoint::from_stage(&TrainConfig::new(StageKind::Strategy), model, vocab, stack, None, Vec::new()).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = strategy_ck();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn truncation_names_the_record() {
        let bytes = strategy_ck().to_bytes().unwrap();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err().to_string();
        assert!(err.contains("prefix/beta"), "{err}");
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = strategy_ck().to_bytes().unwrap();
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong).unwrap_err().to_string().contains("magic"));
        bytes[4] = 9;
        assert!(Checkpoint::from_bytes(&bytes).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn flipped_payload_bit_fails_integrity() {
        let mut bytes = strategy_ck().to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 40] ^= 1;
        assert!(Checkpoint::from_bytes(&bytes).unwrap_err().to_string().contains("integrity"));
    }

    #[test]
    fn lineage_chain() {
        let s1 = strategy_ck();
        let stack = init_stage2(&s1.stack_for_next_stage().unwrap(), 2, 0).unwrap();
        let cfg = TrainConfig::new(StageKind::StrategyEmotion);
        let s2 = Checkpoint::from_stage(&cfg, s1.model.clone(), s1.meta.vocab.clone(), stack, Some(&s1), Vec::new())
            .unwrap();
        s2.verify_parent(&s1).unwrap();
        let next = s2.stack_for_next_stage().unwrap();
        let orpo = TrainConfig::new(StageKind::Orpo);
        // an orpo checkpoint cannot hang off a strategy checkpoint
        let bad = Checkpoint::from_stage(&orpo, s1.model.clone(), s1.meta.vocab.clone(), next.clone(), Some(&s1), Vec::new());
        assert!(matches!(bad, Err(Error::Lineage(_))));
        let good = Checkpoint::from_stage(&orpo, s1.model.clone(), s1.meta.vocab.clone(), next, Some(&s2), Vec::new())
            .unwrap();
        let other = strategy_ck();
        let mut other_stack = other.stack.clone().unwrap();
        other_stack.alpha.params[[0, 0]] += 1.0;
        let other = Checkpoint::from_stage(
            &TrainConfig::new(StageKind::Strategy),
            other.model.clone(),
            other.meta.vocab.clone(),
            other_stack,
            None,
            Vec::new(),
        )
        .unwrap();
        assert!(matches!(good.verify_parent(&other), Err(Error::Lineage(_))));
    }
}
