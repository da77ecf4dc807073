//! Dataset schema, JSON-lines loading, split validation and prompt
//! serialization.

mod pairs;
mod synth;
mod vocab;

use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use pairs::{build_preference_pairs, PairBuild, PreferencePair, Skip};
pub use synth::{emotion_marker, strategy_marker, synth_corpus, GROUPS};
pub use vocab::{normalize, Vocabulary, BOS, EOS, PAD, SEP, SEP_TOKEN};

/// Counterspeech strategy (intent).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Informative,
    Denouncing,
    Positive,
    Questioning,
}

/// Emotion carried by the counterspeech.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Emotion {
    Anger,
    Disgust,
    Joy,
    Sadness,
    Surprise,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Informative,
        Strategy::Denouncing,
        Strategy::Positive,
        Strategy::Questioning,
    ];

    /// Lowercase full word used in prompts.
    pub fn word(self) -> &'static str {
        match self {
            Strategy::Informative => "informative",
            Strategy::Denouncing => "denouncing",
            Strategy::Positive => "positive",
            Strategy::Questioning => "questioning",
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Strategy::Informative => "IN",
            Strategy::Denouncing => "DE",
            Strategy::Positive => "PO",
            Strategy::Questioning => "QU",
        }
    }
}

impl Emotion {
    pub const ALL: [Emotion; 5] = [
        Emotion::Anger,
        Emotion::Disgust,
        Emotion::Joy,
        Emotion::Sadness,
        Emotion::Surprise,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Emotion::Anger => "anger",
            Emotion::Disgust => "disgust",
            Emotion::Joy => "joy",
            Emotion::Sadness => "sadness",
            Emotion::Surprise => "surprise",
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Emotion::Anger => "AN",
            Emotion::Disgust => "DI",
            Emotion::Joy => "JO",
            Emotion::Sadness => "SA",
            Emotion::Surprise => "SU",
        }
    }
}

impl FromStr for Strategy {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        let s = s.trim();
        Strategy::ALL
            .into_iter()
            .find(|v| s.eq_ignore_ascii_case(v.code()) || s.eq_ignore_ascii_case(v.word()))
            .ok_or(())
    }
}

impl FromStr for Emotion {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        let s = s.trim();
        Emotion::ALL
            .into_iter()
            .find(|v| s.eq_ignore_ascii_case(v.code()) || s.eq_ignore_ascii_case(v.word()))
            .ok_or(())
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "dev" | "valid" | "validation" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(()),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One (hate speech, strategy, emotion, counterspeech) record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributedExample {
    pub hate_speech: String,
    pub strategy: Strategy,
    pub emotion: Emotion,
    pub counterspeech: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_group: Option<String>,
    pub split: Split,
}

#[derive(Deserialize)]
struct RawRecord {
    hate_speech: Option<String>,
    strategy: Option<String>,
    emotion: Option<String>,
    counterspeech: Option<String>,
    #[serde(default)]
    target_group: Option<String>,
    split: Option<String>,
}

fn parse_record(line: &str, lineno: usize) -> Result<AttributedExample> {
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| Error::MalformedLine {
        line: lineno,
        msg: e.to_string(),
    })?;
    let required = |v: Option<String>, field: &'static str| -> Result<String> {
        match v {
            Some(s) if !s.trim().is_empty() => Ok(s),
            _ => Err(Error::EmptyField { field, line: lineno }),
        }
    };
    let hate_speech = required(raw.hate_speech, "hate_speech")?;
    let counterspeech = required(raw.counterspeech, "counterspeech")?;
    let strategy_code = required(raw.strategy, "strategy")?;
    let emotion_code = required(raw.emotion, "emotion")?;
    let split_name = required(raw.split, "split")?;
    let strategy = strategy_code.parse().map_err(|_| Error::UnknownStrategy {
        code: strategy_code.clone(),
        line: lineno,
    })?;
    let emotion = emotion_code.parse().map_err(|_| Error::UnknownEmotion {
        code: emotion_code.clone(),
        line: lineno,
    })?;
    let split = split_name.parse().map_err(|_| Error::MalformedLine {
        line: lineno,
        msg: format!("unknown split `{split_name}`"),
    })?;
    Ok(AttributedExample {
        hate_speech,
        strategy,
        emotion,
        counterspeech,
        target_group: raw.target_group.filter(|g| !g.trim().is_empty()),
        split,
    })
}

/// Parses JSON-lines dataset text. Blank lines are ignored; line numbers are
/// 1-based.
pub fn parse_dataset(text: &str) -> Result<Vec<AttributedExample>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_record(l, i + 1))
        .collect()
}

/// Loads a JSON-lines dataset file.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<AttributedExample>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(&line, i + 1)?);
    }
    Ok(out)
}

/// Writes examples as JSON lines with attributes in their canonical codes.
pub fn write_dataset(examples: &[AttributedExample]) -> String {
    let mut out = String::new();
    for ex in examples {
        let mut obj = serde_json::Map::new();
        obj.insert("hate_speech".into(), ex.hate_speech.clone().into());
        obj.insert("strategy".into(), ex.strategy.code().into());
        obj.insert("emotion".into(), ex.emotion.code().into());
        obj.insert("counterspeech".into(), ex.counterspeech.clone().into());
        if let Some(g) = &ex.target_group {
            obj.insert("target_group".into(), g.clone().into());
        }
        obj.insert("split".into(), ex.split.name().into());
        out.push_str(&serde_json::Value::Object(obj).to_string());
        out.push('\n');
    }
    out
}

/// Examples of one split, in input order.
pub fn split_of(dataset: &[AttributedExample], split: Split) -> Vec<AttributedExample> {
    dataset.iter().filter(|e| e.split == split).cloned().collect()
}

/// Exact counts per split and per strategy x emotion cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SplitReport {
    pub total: usize,
    pub per_split: BTreeMap<Split, usize>,
    pub per_cell: BTreeMap<String, usize>,
}

pub fn cell_key(s: Strategy, e: Emotion) -> String {
    format!("{}/{}", s.code(), e.code())
}

/// Counts the dataset and compares against `expected` split sizes. Every
/// mismatching split is named in the error.
pub fn validate_splits(
    dataset: &[AttributedExample],
    expected: Option<&BTreeMap<Split, usize>>,
) -> Result<SplitReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut per_split: BTreeMap<Split, usize> = Split::ALL.iter().map(|&s| (s, 0)).collect();
    let mut per_cell: BTreeMap<String, usize> = BTreeMap::new();
    for s in Strategy::ALL {
        for e in Emotion::ALL {
            per_cell.insert(cell_key(s, e), 0);
        }
    }
    for ex in dataset {
        *per_split.entry(ex.split).or_default() += 1;
        *per_cell.entry(cell_key(ex.strategy, ex.emotion)).or_default() += 1;
    }
    if let Some(expected) = expected {
        let mismatches: Vec<String> = expected
            .iter()
            .filter(|(s, &n)| per_split.get(s).copied().unwrap_or(0) != n)
            .map(|(s, &n)| format!("{s}: expected {n}, found {}", per_split.get(s).copied().unwrap_or(0)))
            .collect();
        if !mismatches.is_empty() {
            return Err(Error::SplitMismatch(mismatches.join("; ")));
        }
    }
    Ok(SplitReport {
        total: dataset.len(),
        per_split,
        per_cell,
    })
}

/// Token ids of `h </s> strategy [</s> emotion] <eos>`.
pub fn serialize_prompt(
    hate_speech: &str,
    strategy: Strategy,
    emotion: Option<Emotion>,
    vocab: &Vocabulary,
) -> Result<Vec<usize>> {
    if hate_speech.trim().is_empty() {
        return Err(Error::EmptyInput("hate speech"));
    }
    let mut ids = vocab.encode(hate_speech)?;
    ids.push(SEP);
    ids.push(vocab.id(strategy.word())?);
    if let Some(e) = emotion {
        ids.push(SEP);
        ids.push(vocab.id(e.word())?);
    }
    ids.push(EOS);
    Ok(ids)
}

/// Teacher-forcing target: counterspeech tokens followed by EOS.
pub fn target_ids(counterspeech: &str, vocab: &Vocabulary) -> Result<Vec<usize>> {
    let mut ids = vocab.encode(counterspeech)?;
    if ids.is_empty() {
        return Err(Error::EmptyInput("counterspeech"));
    }
    ids.push(EOS);
    Ok(ids)
}
