//! Batch command-line interface.
//!
//! Every command that writes files also writes `<out>.manifest.json`
//! recording its inputs, outputs, seed and checkpoint hashes. Outputs are
//! never overwritten unless `--force` is given.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_preference_pairs, load_dataset, split_of, synth_corpus, validate_splits, write_dataset, PreferencePair,
    Split,
};
use crate::error::{Error, Result};
use crate::evaluation::{corpus_stats, evaluate, generate, paired_ttest, scorer_by_name, DEFAULT_THRESHOLD};
use crate::model::{ModelConfig, SeqModel, DEFAULT_MAX_LEN};
use crate::objectives::Objective;
use crate::prefix::{init_stage1, init_stage2};
use crate::training::{
    gradient_check, load_checkpoint, pretrain_base, save_checkpoint, supervised_pairs, tiny_instance, train_stage,
    Checkpoint, CheckpointStage, PretrainConfig, StageKind, TrainConfig,
};

#[derive(Debug, Parser)]
#[command(name = "hippro", version, about = "Hierarchical prefix tuning with preference optimization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic corpus as JSONL.
    Synth(SynthArgs),
    /// Check split counts of a corpus.
    Validate(ValidateArgs),
    /// Initialise the base model and optionally pretrain it by denoising.
    Pretrain(PretrainArgs),
    /// Run one training stage on top of a checkpoint.
    Train(TrainArgs),
    /// Build preference pairs from an emotion-stage checkpoint.
    Pairs(PairsArgs),
    /// Greedy generations for one split.
    Generate(GenerateArgs),
    /// Score generations for one split and write an evaluation report.
    Evaluate(EvaluateArgs),
    /// Corpus statistics.
    Stats(StatsArgs),
    /// Paired t-test on two files of numbers.
    Ttest(TtestArgs),
    /// Finite-difference gradient check on a tiny seeded instance.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output file.
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Expected counts, e.g. `train=8801,dev=2201,test=2971`.
    #[arg(long)]
    pub expected: Option<String>,
    /// Write the split report here as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Strategy,
    Emotion,
    Orpo,
    Dpo,
}

impl From<StageArg> for StageKind {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Strategy => StageKind::Strategy,
            StageArg::Emotion => StageKind::StrategyEmotion,
            StageArg::Orpo => StageKind::Orpo,
            StageArg::Dpo => StageKind::Dpo,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub stage: StageArg,
    /// Input checkpoint: base for `strategy`, strategy for `emotion`,
    /// emotion for `orpo` and `dpo`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Require the input checkpoint to descend from this one.
    #[arg(long)]
    pub parent: Option<PathBuf>,
    /// Corpus JSONL (supervised stages).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Pairs JSONL from `pairs` (preference stages).
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub vt: Option<usize>,
    #[arg(long = "vt-emotion")]
    pub vt_emotion: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct PairsArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Dev,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Dev => Split::Dev,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Attribute scorer; overrides the config file.
    #[arg(long)]
    pub scorer: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct TtestArgs {
    /// One number per line.
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    JFinetuned,
    JOr,
    JFinal,
    Dpo,
    All,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = LossArg::All)]
    pub loss: LossArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Coordinates sampled per loss.
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub h: f64,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[command(flatten)]
    pub out: OutArgs,
}

fn d_d_model() -> usize {
    32
}
fn d_heads() -> usize {
    2
}
fn d_layers() -> usize {
    2
}
fn d_ffn() -> usize {
    64
}
fn d_max_len() -> usize {
    DEFAULT_MAX_LEN
}
fn d_max_new() -> usize {
    40
}
fn d_scorer() -> String {
    "marker".into()
}
fn d_threshold() -> f64 {
    DEFAULT_THRESHOLD
}
fn d_pretrain_epochs() -> usize {
    20
}

/// `[model]` section; the vocabulary size comes from the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "d_d_model")]
    pub d_model: usize,
    #[serde(default = "d_heads")]
    pub n_heads: usize,
    #[serde(default = "d_layers")]
    pub n_layers_enc: usize,
    #[serde(default = "d_layers")]
    pub n_layers_dec: usize,
    #[serde(default = "d_ffn")]
    pub ffn_dim: usize,
    #[serde(default = "d_max_len")]
    pub max_len: usize,
    #[serde(default)]
    pub cross_attention_prefix: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        toml::from_str("").expect("all fields default")
    }
}

/// `[pretrain]` section. `epochs = 0` keeps the random initialisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    #[serde(default = "d_pretrain_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub drop_prob: Option<f64>,
    #[serde(default)]
    pub replace_prob: Option<f64>,
}

impl Default for PretrainSection {
    fn default() -> Self {
        toml::from_str("").expect("all fields default")
    }
}

/// `[eval]` section, also used for pair building.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Generation budget in tokens.
    #[serde(default = "d_max_new")]
    pub max_new: usize,
    #[serde(default = "d_scorer")]
    pub scorer: String,
    #[serde(default = "d_threshold")]
    pub threshold: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        toml::from_str("").expect("all fields default")
    }
}

/// Config file layout. Precedence: built-in defaults, then the file, then
/// command-line flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    /// `TrainConfig` fields other than `stage`.
    #[serde(default)]
    pub train: toml::Table,
    #[serde(default)]
    pub eval: EvalSection,
}

pub fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else { return Ok(FileConfig::default()) };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), one_line(&e.to_string()))))
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Default, Clone, Copy)]
pub struct TrainOverrides {
    pub seed: Option<u64>,
    pub vt: Option<usize>,
    pub vt_e: Option<usize>,
    pub epsilon: Option<f64>,
}

/// Resolves the train section of `file` for `stage` with flag overrides.
pub fn train_config(file: &FileConfig, stage: StageKind, o: TrainOverrides) -> Result<TrainConfig> {
    let mut t = file.train.clone();
    if t.contains_key("stage") {
        return Err(Error::Config("`stage` is set on the command line, not in [train]".into()));
    }
    t.insert("stage".into(), toml::Value::String(stage.name().into()));
    if let Some(seed) = o.seed.or(file.seed) {
        t.insert("seed".into(), toml::Value::Integer(seed as i64));
    }
    if let Some(vt) = o.vt {
        t.insert("vt".into(), toml::Value::Integer(vt as i64));
    }
    if let Some(vt_e) = o.vt_e {
        t.insert("vt_e".into(), toml::Value::Integer(vt_e as i64));
    }
    if let Some(eps) = o.epsilon {
        t.insert("epsilon".into(), toml::Value::Float(eps));
    }
    let cfg: TrainConfig = toml::Value::Table(t)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("[train]: {}", one_line(&e.to_string()))))?;
    cfg.validate()?;
    Ok(cfg)
}

fn pretrain_config(file: &FileConfig, seed: u64) -> PretrainConfig {
    let p = &file.pretrain;
    let d = PretrainConfig::default();
    PretrainConfig {
        epochs: p.epochs,
        learning_rate: p.learning_rate.unwrap_or(d.learning_rate),
        batch_size: p.batch_size.unwrap_or(d.batch_size),
        drop_prob: p.drop_prob.unwrap_or(d.drop_prob),
        replace_prob: p.replace_prob.unwrap_or(d.replace_prob),
        seed,
    }
}

/// Record of one command run, written next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<PathBuf>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    /// Hashes of the checkpoints read and written, in that order.
    pub lineage: Vec<String>,
    pub notes: BTreeMap<String, String>,
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(OsString::from).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

struct Run {
    manifest: RunManifest,
    force: bool,
}

impl Run {
    fn new(command: &str, config: Option<&Path>, seed: Option<u64>, force: bool) -> Self {
        Run {
            manifest: RunManifest {
                command: command.into(),
                config: config.map(Path::to_path_buf),
                inputs: config.map(Path::to_path_buf).into_iter().collect(),
                outputs: Vec::new(),
                seed,
                started_unix_ms: now_ms(),
                finished_unix_ms: 0,
                lineage: Vec::new(),
                notes: BTreeMap::new(),
            },
            force,
        }
    }

    fn input(&mut self, p: &Path) {
        self.manifest.inputs.push(p.to_path_buf());
    }

    fn note(&mut self, k: &str, v: impl ToString) {
        self.manifest.notes.insert(k.into(), v.to_string());
    }

    /// Fails before any work is done when an output already exists.
    fn claim(&mut self, out: &Path) -> Result<()> {
        for p in [out.to_path_buf(), manifest_path(out)] {
            if p.exists() && !self.force {
                return Err(Error::Exists(p));
            }
        }
        self.manifest.outputs.push(out.to_path_buf());
        Ok(())
    }

    fn write(&self, out: &Path, bytes: &[u8]) -> Result<()> {
        fs::write(out, bytes).map_err(|e| Error::io(out, e))
    }

    fn finish(mut self, out: &Path) -> Result<()> {
        self.manifest.finished_unix_ms = now_ms();
        let path = manifest_path(out);
        let json = serde_json::to_string_pretty(&self.manifest)? + "\n";
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}

fn parse_expected(s: &str) -> Result<BTreeMap<Split, usize>> {
    let mut m = BTreeMap::new();
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected `split=count`, got `{part}`")))?;
        let split = match k.trim() {
            "train" => Split::Train,
            "dev" => Split::Dev,
            "test" => Split::Test,
            other => return Err(Error::Config(format!("unknown split `{other}`"))),
        };
        let n = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad count `{v}` for {k}")))?;
        m.insert(split, n);
    }
    Ok(m)
}

/// One line of a pairs file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub split: Split,
    /// Hash of the checkpoint whose generations form the rejected side.
    pub source: String,
    #[serde(flatten)]
    pub pair: PreferencePair,
}

pub fn read_pairs(path: &Path) -> Result<Vec<PairRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::MalformedLine {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

fn required_input(stage: StageKind) -> CheckpointStage {
    match stage {
        StageKind::Strategy => CheckpointStage::Base,
        StageKind::StrategyEmotion => CheckpointStage::Strategy,
        StageKind::Orpo | StageKind::Dpo => CheckpointStage::StrategyEmotion,
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut run = Run::new("synth", None, Some(a.seed), a.out.force);
    run.claim(&a.out.out)?;
    let data = synth_corpus(a.n, a.seed)?;
    run.write(&a.out.out, write_dataset(&data).as_bytes())?;
    run.note("examples", data.len());
    run.finish(&a.out.out)
}

fn cmd_validate(a: &ValidateArgs) -> Result<()> {
    let mut run = Run::new("validate", None, None, a.force);
    if let Some(out) = &a.out {
        run.claim(out)?;
    }
    run.input(&a.data);
    let data = load_dataset(&a.data)?;
    let expected = a.expected.as_deref().map(parse_expected).transpose()?;
    let report = validate_splits(&data, expected.as_ref())?;
    match &a.out {
        Some(out) => {
            run.write(out, (serde_json::to_string_pretty(&report)? + "\n").as_bytes())?;
            run.finish(out)
        }
        None => {
            let counts: Vec<String> = report.per_split.iter().map(|(s, n)| format!("{s}={n}")).collect();
            println!("ok total={} {}", report.total, counts.join(" "));
            Ok(())
        }
    }
}

fn cmd_pretrain(a: &PretrainArgs) -> Result<()> {
    let file = load_config(a.config.as_deref())?;
    let seed = a.seed.or(file.seed).unwrap_or(0);
    let mut run = Run::new("pretrain", a.config.as_deref(), Some(seed), a.out.force);
    run.claim(&a.out.out)?;
    run.input(&a.data);
    let data = load_dataset(&a.data)?;
    let vocab = crate::corpus::Vocabulary::from_examples(&data);
    let m = &file.model;
    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        d_model: m.d_model,
        n_heads: m.n_heads,
        n_layers_enc: m.n_layers_enc,
        n_layers_dec: m.n_layers_dec,
        ffn_dim: m.ffn_dim,
        max_len: m.max_len,
        cross_attention_prefix: m.cross_attention_prefix,
    };
    let model = SeqModel::init(cfg, seed)?;
    let pc = pretrain_config(&file, seed);
    let ck = if pc.epochs == 0 {
        Checkpoint::base(model, vocab, None)
    } else {
        let (model, log) = pretrain_base(&model, &split_of(&data, Split::Train), &vocab, &pc)?;
        Checkpoint::base(model, vocab, Some((pc, log)))
    };
    save_checkpoint(&a.out.out, &ck)?;
    run.manifest.lineage.push(ck.hash());
    run.note("theta_hash", &ck.meta.theta_hash);
    run.finish(&a.out.out)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let stage = StageKind::from(a.stage);
    let file = load_config(a.config.as_deref())?;
    let over = TrainOverrides {
        seed: a.seed,
        vt: a.vt,
        vt_e: a.vt_emotion,
        epsilon: a.epsilon,
    };
    let tc = train_config(&file, stage, over)?;
    let mut run = Run::new("train", a.config.as_deref(), Some(tc.seed), a.out.force);
    run.note("stage", stage.name());
    run.claim(&a.out.out)?;
    run.input(&a.checkpoint);
    let ck = load_checkpoint(&a.checkpoint)?;
    if let Some(p) = &a.parent {
        run.input(p);
        let parent = load_checkpoint(p)?;
        ck.verify_parent(&parent)?;
        run.manifest.lineage.push(parent.hash());
    }
    run.manifest.lineage.push(ck.hash());
    let need = required_input(stage);
    if ck.meta.stage != need {
        return Err(Error::Lineage(format!(
            "stage {} needs a {} checkpoint as input, got {}",
            stage.name(),
            need.name(),
            ck.meta.stage.name()
        )));
    }
    let vocab = &ck.meta.vocab;
    let (train, dev) = match stage {
        StageKind::Strategy | StageKind::StrategyEmotion => {
            let path = a
                .data
                .as_ref()
                .ok_or_else(|| Error::Config(format!("stage {} needs --data", stage.name())))?;
            run.input(path);
            let data = load_dataset(path)?;
            let emo = stage == StageKind::StrategyEmotion;
            (
                supervised_pairs(&split_of(&data, Split::Train), vocab, emo)?,
                supervised_pairs(&split_of(&data, Split::Dev), vocab, emo)?,
            )
        }
        StageKind::Orpo | StageKind::Dpo => {
            let path = a
                .pairs
                .as_ref()
                .ok_or_else(|| Error::Config(format!("stage {} needs --pairs", stage.name())))?;
            run.input(path);
            let records = read_pairs(path)?;
            let hash = ck.hash();
            if let Some(r) = records.iter().find(|r| r.source != hash) {
                return Err(Error::Lineage(format!(
                    "pairs were generated by checkpoint {}, not the input checkpoint {hash}",
                    r.source
                )));
            }
            let pick = |s: Split| records.iter().filter(|r| r.split == s).map(|r| r.pair.clone()).collect::<Vec<_>>();
            (pick(Split::Train), pick(Split::Dev))
        }
    };
    let stack = match stage {
        StageKind::Strategy => init_stage1(tc.vt, ck.model.config(), tc.seed)?,
        StageKind::StrategyEmotion => init_stage2(&ck.stack_for_next_stage()?, tc.vt_emotion(), tc.seed)?,
        StageKind::Orpo | StageKind::Dpo => ck.stack_for_next_stage()?,
    };
    let out = train_stage(&tc, &train, &dev, stack, &ck.model)?;
    run.note("epochs", out.log.len());
    run.note("best_epoch", out.best_epoch);
    run.note("stopped_early", out.stopped_early);
    let new = Checkpoint::from_stage(&tc, ck.model.clone(), vocab.clone(), out.stack, Some(&ck), out.log)?;
    save_checkpoint(&a.out.out, &new)?;
    run.manifest.lineage.push(new.hash());
    run.finish(&a.out.out)
}

fn emotion_checkpoint(path: &Path, what: &str) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if ck.stack.is_none() {
        return Err(Error::Lineage(format!("{what} needs a checkpoint with prefix adapters")));
    }
    Ok(ck)
}

fn cmd_pairs(a: &PairsArgs) -> Result<()> {
    let file = load_config(a.config.as_deref())?;
    let mut run = Run::new("pairs", a.config.as_deref(), None, a.out.force);
    run.claim(&a.out.out)?;
    run.input(&a.data);
    run.input(&a.checkpoint);
    let ck = load_checkpoint(&a.checkpoint)?;
    if ck.meta.stage != CheckpointStage::StrategyEmotion {
        return Err(Error::Lineage(format!(
            "pairs need an emotion-stage checkpoint, got {}",
            ck.meta.stage.name()
        )));
    }
    let hash = ck.hash();
    run.manifest.lineage.push(hash.clone());
    let data = load_dataset(&a.data)?;
    let stack = ck.stack.as_ref().expect("emotion checkpoint has adapters");
    let mut text = String::new();
    for split in [Split::Train, Split::Dev] {
        let built = build_preference_pairs(&split_of(&data, split), &ck.model, stack, &ck.meta.vocab, file.eval.max_new);
        run.note(&format!("{split}_pairs"), built.pairs.len());
        run.note(&format!("{split}_degenerate"), built.degenerate_count());
        run.note(&format!("{split}_skipped"), built.skips.len());
        for pair in built.pairs {
            let rec = PairRecord {
                split,
                source: hash.clone(),
                pair,
            };
            text.push_str(&serde_json::to_string(&rec)?);
            text.push('\n');
        }
    }
    run.write(&a.out.out, text.as_bytes())?;
    run.finish(&a.out.out)
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let file = load_config(a.config.as_deref())?;
    let mut run = Run::new("generate", a.config.as_deref(), None, a.out.force);
    run.claim(&a.out.out)?;
    run.input(&a.data);
    run.input(&a.checkpoint);
    let ck = emotion_checkpoint(&a.checkpoint, "generate")?;
    run.manifest.lineage.push(ck.hash());
    let data = split_of(&load_dataset(&a.data)?, a.split.into());
    let gens = generate(&ck.model, ck.stack.as_ref().expect("checked"), &data, &ck.meta.vocab, file.eval.max_new)?;
    let mut text = String::new();
    for (g, _) in gens {
        text.push_str(&serde_json::to_string(&g)?);
        text.push('\n');
    }
    run.write(&a.out.out, text.as_bytes())?;
    run.finish(&a.out.out)
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let file = load_config(a.config.as_deref())?;
    let scorer = scorer_by_name(a.scorer.as_deref().unwrap_or(&file.eval.scorer))?;
    let mut run = Run::new("evaluate", a.config.as_deref(), None, a.out.force);
    run.claim(&a.out.out)?;
    run.input(&a.data);
    run.input(&a.checkpoint);
    let ck = emotion_checkpoint(&a.checkpoint, "evaluate")?;
    run.manifest.lineage.push(ck.hash());
    let data = split_of(&load_dataset(&a.data)?, a.split.into());
    let (report, _) = evaluate(
        &ck.model,
        ck.stack.as_ref().expect("checked"),
        &data,
        &ck.meta.vocab,
        scorer.as_ref(),
        file.eval.threshold,
        file.eval.max_new,
    )?;
    run.write(&a.out.out, report.to_json()?.as_bytes())?;
    run.finish(&a.out.out)
}

fn cmd_stats(a: &StatsArgs) -> Result<()> {
    let mut run = Run::new("stats", None, None, a.out.force);
    run.claim(&a.out.out)?;
    run.input(&a.data);
    let stats = corpus_stats(&load_dataset(&a.data)?)?;
    run.write(&a.out.out, (serde_json::to_string_pretty(&stats)? + "\n").as_bytes())?;
    run.finish(&a.out.out)
}

fn read_numbers(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse().map_err(|_| Error::MalformedLine {
                line: i + 1,
                msg: format!("`{}` is not a number", l.trim()),
            })
        })
        .collect()
}

fn cmd_ttest(a: &TtestArgs) -> Result<()> {
    let mut run = Run::new("ttest", None, None, a.out.force);
    run.claim(&a.out.out)?;
    run.input(&a.a);
    run.input(&a.b);
    let r = paired_ttest(&read_numbers(&a.a)?, &read_numbers(&a.b)?)?;
    run.note("p_method", &r.p_method);
    run.write(&a.out.out, (serde_json::to_string_pretty(&r)? + "\n").as_bytes())?;
    run.finish(&a.out.out)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    let mut run = Run::new("gradcheck", None, Some(a.seed), a.out.force);
    run.claim(&a.out.out)?;
    let t = tiny_instance(a.seed)?;
    let eps = a.epsilon.unwrap_or(0.1);
    let objectives: Vec<Objective> = match a.loss {
        LossArg::JFinetuned => vec![Objective::Finetuned],
        LossArg::JOr => vec![Objective::OddsRatio],
        LossArg::JFinal => vec![Objective::Final { epsilon: eps }],
        LossArg::Dpo => vec![Objective::Dpo { beta: 0.1 }],
        LossArg::All => vec![
            Objective::Finetuned,
            Objective::OddsRatio,
            Objective::Final { epsilon: eps },
            Objective::Dpo { beta: 0.1 },
        ],
    };
    let mut open = t.stack.clone();
    open.set_all_trainable(true);
    let mut reports = Vec::new();
    for obj in objectives {
        let mut r = gradient_check(obj, &t.model, &open, Some(&t.reference), &t.pair, a.h, Some(a.samples), a.seed)?;
        let frozen = gradient_check(obj, &t.model, &t.stack, Some(&t.reference), &t.pair, a.h, Some(1), a.seed)?;
        r.max_frozen_grad = frozen.max_frozen_grad;
        reports.push(r);
    }
    run.write(&a.out.out, (serde_json::to_string_pretty(&reports)? + "\n").as_bytes())?;
    run.finish(&a.out.out)
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Validate(a) => cmd_validate(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Train(a) => cmd_train(a),
        Command::Pairs(a) => cmd_pairs(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Ttest(a) => cmd_ttest(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
/// Failures print one `error[kind]: message` line to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(std::io::stdout(), "{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            return 2;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), one_line(&e.to_string()));
            1
        }
    }
}
