//! Deterministic desk-scale corpus.
//!
//! Every counterspeech starts with a strategy marker word and ends with an
//! emotion marker word, so attribute conformity is exactly checkable.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AttributedExample, Emotion, Split, Strategy};
use crate::error::{Error, Result};

/// (surface word, target-group label)
pub const GROUPS: [(&str, &str); 6] = [
    ("muslims", "Muslim"),
    ("women", "Women"),
    ("gays", "LGBT+"),
    ("jews", "Jews"),
    ("refugees", "Refugee"),
    ("migrants", "IMGT"),
];

const INSULTS: [&str; 6] = ["dangerous", "lazy", "criminals", "parasites", "worthless", "violent"];
const ACTIONS: [&str; 5] = ["leave", "go home", "be banned", "disappear", "stay away"];

pub fn strategy_marker(s: Strategy) -> &'static str {
    match s {
        Strategy::Informative => "actually",
        Strategy::Denouncing => "shame",
        Strategy::Positive => "wonderfully",
        Strategy::Questioning => "why",
    }
}

pub fn emotion_marker(e: Emotion) -> &'static str {
    match e {
        Emotion::Anger => "outrageous",
        Emotion::Disgust => "disgusting",
        Emotion::Joy => "delightful",
        Emotion::Sadness => "heartbreaking",
        Emotion::Surprise => "astonishing",
    }
}

/// One interchangeable word per strategy body, so a target is not a
/// deterministic function of its prompt.
const VARIANTS: [[&str; 3]; 4] = [
    ["economy", "society", "country"],
    ["hatred", "lies", "bigotry"],
    ["communities", "neighbourhoods", "cities"],
    ["believe", "think", "claim"],
];

fn body(s: Strategy, group: &str, insult: &str, variant: &str) -> String {
    match s {
        Strategy::Informative => format!("{group} contribute to the {variant} and pay taxes"),
        Strategy::Denouncing => format!("on you for spreading {variant} about {group}"),
        Strategy::Positive => format!("{group} enrich our {variant} every day"),
        Strategy::Questioning => format!("do you {variant} all {group} are {insult}"),
    }
}

fn split_sizes(n: usize) -> [(Split, usize); 3] {
    let train = n * 8 / 10;
    let dev = n / 10;
    [(Split::Train, train), (Split::Dev, dev), (Split::Test, n - train - dev)]
}

/// Generates `n >= 20` examples split 80/10/10. Attribute cells are assigned
/// round-robin within each split, so each split covers all 20 cells once it
/// holds 20 or more examples.
pub fn synth_corpus(n: usize, seed: u64) -> Result<Vec<AttributedExample>> {
    if n < 20 {
        return Err(Error::Config(format!("synthetic corpus needs n >= 20, got {n}")));
    }
    if n < 100 {
        log::warn!("n = {n} is too small for every split to cover all 20 attribute cells");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for (split, count) in split_sizes(n) {
        for j in 0..count {
            let strategy = Strategy::ALL[(j / Emotion::ALL.len()) % Strategy::ALL.len()];
            let emotion = Emotion::ALL[j % Emotion::ALL.len()];
            let &(group, label) = GROUPS.choose(&mut rng).expect("non-empty");
            let insult = *INSULTS.choose(&mut rng).expect("non-empty");
            let action = *ACTIONS.choose(&mut rng).expect("non-empty");
            let variant = *VARIANTS[strategy as usize].choose(&mut rng).expect("non-empty");
            let hate_speech = format!("{group} are {insult} and should {action}");
            let counterspeech = format!(
                "{} {} {}",
                strategy_marker(strategy),
                body(strategy, group, insult, variant),
                emotion_marker(emotion)
            );
            out.push(AttributedExample {
                hate_speech,
                strategy,
                emotion,
                counterspeech,
                target_group: Some(label.to_string()),
                split,
            });
        }
    }
    Ok(out)
}
