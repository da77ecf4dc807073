//! Acceptance suite. Runs without the libtest harness so the per-criterion
//! status lines always reach the console; exits nonzero if any criterion
//! fails.
//!
//! Set `HIPPRO_MULTICONAN` to a JSONL file of the real corpus to run the
//! data contract; otherwise it reports SKIPPED.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use hippro::cli::read_pairs;
use hippro::corpus::{load_dataset, split_of, synth_corpus, Split};
use hippro::evaluation::{preference_margin, rouge_l_tokens, rouge_n_tokens, EvalReport, Prf};
use hippro::objectives::{odds_ratio, or_loss, Objective};
use hippro::prefix::{init_stage2, param_count, Slot};
use hippro::training::{
    gradient_check, load_checkpoint, supervised_pairs, tiny_instance, train_stage, Checkpoint, StageKind, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BIN: &str = env!("CARGO_BIN_EXE_hippro");

/// Pipeline settings shared by the end-to-end criteria.
const CONFIG: &str = "\
seed = 1

[model]
d_model = 32
n_heads = 2
n_layers_enc = 2
n_layers_dec = 2
ffn_dim = 64

[pretrain]
epochs = 20
learning_rate = 0.003

[train]
learning_rate = 0.03
max_epochs = 200
early_stop_patience = 3
vt = 3
epsilon = 0.1
beta_dpo = 0.1

[eval]
max_new = 30
threshold = 0.5
";

const CONFORMITY_MIN: f64 = 0.90;
const ROUGE1_MIN: f64 = 0.80;
const CONFORMITY_DROP_MAX: f64 = 0.05;
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_SAMPLES: usize = 200;
const IDENTITY_TOL: f64 = 1e-12;

enum Status {
    Pass,
    Fail,
    Skipped,
}

struct Outcome {
    status: Status,
    detail: String,
}

fn pass(detail: impl Into<String>) -> Outcome {
    Outcome {
        status: Status::Pass,
        detail: detail.into(),
    }
}

fn fail(detail: impl Into<String>) -> Outcome {
    Outcome {
        status: Status::Fail,
        detail: detail.into(),
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        pass(detail)
    } else {
        fail(detail)
    }
}

fn hippro(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| format!("spawn: {e}"))?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

/// Files whose bytes must match across identical runs.
const ARTIFACTS: [&str; 11] = [
    "data.jsonl",
    "base.ckpt",
    "strategy.ckpt",
    "emotion.ckpt",
    "pairs.jsonl",
    "orpo.ckpt",
    "dpo.ckpt",
    "eval_strategy.json",
    "eval_emotion.json",
    "eval_orpo.json",
    "eval_dpo.json",
];

fn run_pipeline(dir: &Path) -> Result<(), String> {
    fs::write(dir.join("config.toml"), CONFIG).map_err(|e| e.to_string())?;
    let c = ["--config", "config.toml"];
    let steps: Vec<Vec<&str>> = vec![
        vec!["synth", "--n", "200", "--seed", "1", "--out", "data.jsonl"],
        vec!["pretrain", "--data", "data.jsonl", "--out", "base.ckpt"],
        vec!["train", "--stage", "strategy", "--checkpoint", "base.ckpt", "--data", "data.jsonl", "--out", "strategy.ckpt"],
        vec!["evaluate", "--data", "data.jsonl", "--checkpoint", "strategy.ckpt", "--split", "test", "--out", "eval_strategy.json"],
        vec![
            "train", "--stage", "emotion", "--checkpoint", "strategy.ckpt", "--parent", "base.ckpt", "--data", "data.jsonl",
            "--out", "emotion.ckpt",
        ],
        vec!["evaluate", "--data", "data.jsonl", "--checkpoint", "emotion.ckpt", "--split", "test", "--out", "eval_emotion.json"],
        vec!["pairs", "--data", "data.jsonl", "--checkpoint", "emotion.ckpt", "--out", "pairs.jsonl"],
        vec!["train", "--stage", "orpo", "--checkpoint", "emotion.ckpt", "--pairs", "pairs.jsonl", "--out", "orpo.ckpt"],
        vec!["evaluate", "--data", "data.jsonl", "--checkpoint", "orpo.ckpt", "--split", "test", "--out", "eval_orpo.json"],
        vec!["train", "--stage", "dpo", "--checkpoint", "emotion.ckpt", "--pairs", "pairs.jsonl", "--out", "dpo.ckpt"],
        vec!["evaluate", "--data", "data.jsonl", "--checkpoint", "dpo.ckpt", "--split", "test", "--out", "eval_dpo.json"],
    ];
    for mut step in steps {
        if step[0] != "synth" {
            step.extend(c);
        }
        hippro(dir, &step)?;
    }
    Ok(())
}

fn report(dir: &Path, name: &str) -> EvalReport {
    let text = fs::read_to_string(dir.join(name)).expect("report written");
    serde_json::from_str(&text).expect("report parses")
}

fn ckpt(dir: &Path, name: &str) -> Checkpoint {
    load_checkpoint(&dir.join(name)).expect("checkpoint loads")
}

fn c1_parameter_accounting() -> Outcome {
    let n = param_count(3, 24, 4096);
    let share = n as f64 / 11.27e9 * 100.0;
    let rounded = (share * 1e4).round() / 1e4;
    check(
        n == 589_824 && rounded == 0.0052,
        format!("param_count(3, 24, 4096) = {n}; {n} / 11.27e9 = {share:.5}% (one adapter; an alpha+beta pair is {})", 2 * n),
    )
}

fn c2_objective_identities() -> Outcome {
    let mut worst = 0.0f64;
    for pi in [0.1, 0.5, 0.9] {
        worst = worst.max((or_loss(pi, pi).unwrap() - std::f64::consts::LN_2).abs());
    }
    let e18 = (or_loss(0.8, 0.5).unwrap() - 1.25f64.ln()).abs();
    worst = worst.max(e18);
    let mut inv = 0.0f64;
    for i in 0..20 {
        let a = 0.02 + 0.96 * i as f64 / 19.0;
        let b = 0.97 - 0.9 * ((i * 7) % 20) as f64 / 19.0;
        inv = inv.max((odds_ratio(a, b).unwrap() * odds_ratio(b, a).unwrap() - 1.0).abs());
    }
    check(
        worst <= IDENTITY_TOL && inv <= IDENTITY_TOL,
        format!("max |or_loss - closed form| = {worst:.2e}, max |OR(a,b)OR(b,a) - 1| = {inv:.2e} (tol {IDENTITY_TOL:e})"),
    )
}

fn c3_gradient_fidelity() -> Outcome {
    let t = tiny_instance(11).unwrap();
    let mut open = t.stack.clone();
    open.set_all_trainable(true);
    let mut parts = Vec::new();
    let mut ok = true;
    for obj in [
        Objective::Finetuned,
        Objective::OddsRatio,
        Objective::Final { epsilon: 0.1 },
        Objective::Dpo { beta: 0.1 },
    ] {
        let r = gradient_check(obj, &t.model, &open, Some(&t.reference), &t.pair, 1e-5, Some(GRAD_SAMPLES), 5).unwrap();
        ok &= r.checked >= GRAD_SAMPLES && r.max_rel_error <= GRAD_REL_TOL;
        parts.push(format!("{} {:.1e} over {}", r.objective, r.max_rel_error, r.checked));
    }
    check(ok, format!("{} (tol {GRAD_REL_TOL:e})", parts.join(", ")))
}

fn c4_freeze_contracts(dir: &Path) -> Outcome {
    let s1 = ckpt(dir, "strategy.ckpt");
    let data = synth_corpus(200, 1).unwrap();
    let vocab = &s1.meta.vocab;
    // one batch per epoch for ten epochs: exactly ten optimizer steps
    let train: Vec<_> = split_of(&data, Split::Train).into_iter().take(4).collect();
    let dev: Vec<_> = split_of(&data, Split::Dev).into_iter().take(4).collect();
    let mut cfg = TrainConfig::new(StageKind::StrategyEmotion);
    cfg.learning_rate = 0.03;
    cfg.max_epochs = 10;
    cfg.early_stop_patience = 11;
    let start = init_stage2(&s1.stack_for_next_stage().unwrap(), 3, 1).unwrap();
    let out = train_stage(
        &cfg,
        &supervised_pairs(&train, vocab, true).unwrap(),
        &supervised_pairs(&dev, vocab, true).unwrap(),
        start,
        &s1.model,
    )
    .unwrap();
    let s1_stack = s1.stack.as_ref().unwrap();
    let frozen_same = [Slot::Alpha, Slot::Beta]
        .iter()
        .all(|&s| out.stack.adapter(s).unwrap().to_bytes() == s1_stack.adapter(s).unwrap().to_bytes());
    let gamma_moved = out.stack.adapter(Slot::Gamma).unwrap().params
        != init_stage2(&s1.stack_for_next_stage().unwrap(), 3, 1).unwrap().adapter(Slot::Gamma).unwrap().params;

    let base = ckpt(dir, "base.ckpt");
    let hashes: HashSet<String> = ["base.ckpt", "strategy.ckpt", "emotion.ckpt", "orpo.ckpt", "dpo.ckpt"]
        .iter()
        .flat_map(|n| {
            let c = ckpt(dir, n);
            [c.meta.theta_hash.clone(), c.model.theta_hash()]
        })
        .collect();
    let theta_same = hashes.len() == 1 && hashes.contains(&base.model.theta_hash());

    let t = tiny_instance(11).unwrap();
    let mut frozen = 0.0f64;
    for obj in [Objective::Finetuned, Objective::OddsRatio, Objective::Final { epsilon: 0.1 }, Objective::Dpo { beta: 0.1 }] {
        let r = gradient_check(obj, &t.model, &t.stack, Some(&t.reference), &t.pair, 1e-5, Some(1), 5).unwrap();
        frozen = frozen.max(r.max_frozen_grad);
    }
    check(
        frozen_same && gamma_moved && theta_same && out.log.len() == 10 && frozen == 0.0,
        format!(
            "alpha/beta bytes unchanged after 10 steps: {frozen_same} (gamma moved: {gamma_moved}); \
             one theta hash across 5 checkpoints: {theta_same}; max |grad| at frozen coords = {frozen}"
        ),
    )
}

fn c5_hierarchical(dir: &Path) -> Outcome {
    let s1 = report(dir, "eval_strategy.json");
    let s2 = report(dir, "eval_emotion.json");
    check(
        s1.strategy_conformity >= CONFORMITY_MIN
            && s2.strategy_conformity >= CONFORMITY_MIN
            && s2.emotion_conformity >= CONFORMITY_MIN
            && s2.rouge1 >= ROUGE1_MIN,
        format!(
            "after strategy stage SC {:.3}; after emotion stage SC {:.3} EC {:.3} ROUGE-1 {:.3} (min {CONFORMITY_MIN}, {ROUGE1_MIN})",
            s1.strategy_conformity, s2.strategy_conformity, s2.emotion_conformity, s2.rouge1
        ),
    )
}

fn train_pairs(dir: &Path) -> Vec<hippro::corpus::PreferencePair> {
    read_pairs(&dir.join("pairs.jsonl"))
        .unwrap()
        .into_iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| r.pair)
        .collect()
}

fn margin(dir: &Path, name: &str, pairs: &[hippro::corpus::PreferencePair]) -> f64 {
    let c = ckpt(dir, name);
    preference_margin(&c.model, c.stack.as_ref().unwrap(), pairs).unwrap()
}

fn c6_preference_effect(dir: &Path) -> Outcome {
    let pairs = train_pairs(dir);
    let before = margin(dir, "emotion.ckpt", &pairs);
    let after = margin(dir, "orpo.ckpt", &pairs);
    let r1 = report(dir, "eval_emotion.json");
    let r2 = report(dir, "eval_orpo.json");
    let drop = (r1.strategy_conformity - r2.strategy_conformity).max(r1.emotion_conformity - r2.emotion_conformity);
    check(
        after > before && drop <= CONFORMITY_DROP_MAX,
        format!(
            "train-pair margin {before:.4} -> {after:.4} over {} pairs; SC {:.3} -> {:.3}, EC {:.3} -> {:.3} (max drop {CONFORMITY_DROP_MAX})",
            pairs.len(),
            r1.strategy_conformity,
            r2.strategy_conformity,
            r1.emotion_conformity,
            r2.emotion_conformity
        ),
    )
}

fn c7_dpo_parity(dir: &Path) -> Outcome {
    let pairs = train_pairs(dir);
    let before = margin(dir, "emotion.ckpt", &pairs);
    let after = margin(dir, "dpo.ckpt", &pairs);
    check(after >= before, format!("train-pair margin {before:.4} -> {after:.4} with beta_dpo 0.1"))
}

fn brute_ngram_hits(c: &[u8], r: &[u8], n: usize) -> (usize, usize, usize) {
    let grams = |s: &[u8]| -> Vec<Vec<u8>> {
        if s.len() < n {
            Vec::new()
        } else {
            (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
        }
    };
    let (gc, gr) = (grams(c), grams(r));
    let mut seen: Vec<&Vec<u8>> = Vec::new();
    let mut hits = 0;
    for g in &gc {
        if seen.contains(&g) {
            continue;
        }
        seen.push(g);
        let in_c = gc.iter().filter(|x| *x == g).count();
        let in_r = gr.iter().filter(|x| *x == g).count();
        hits += in_c.min(in_r);
    }
    (hits, gc.len(), gr.len())
}

fn is_subsequence(sub: &[u8], s: &[u8]) -> bool {
    let mut it = s.iter();
    sub.iter().all(|x| it.any(|y| y == x))
}

fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
    (0u32..1 << a.len())
        .filter_map(|mask| {
            let sub: Vec<u8> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
            is_subsequence(&sub, b).then_some(sub.len())
        })
        .max()
        .unwrap_or(0)
}

fn prf(hits: usize, c: usize, r: usize) -> Prf {
    if hits == 0 {
        return Prf::ZERO;
    }
    let p = hits as f64 / c as f64;
    let rc = hits as f64 / r as f64;
    Prf {
        precision: p,
        recall: rc,
        f1: 2.0 * p * rc / (p + rc),
    }
}

fn c8_metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let mut seq = || -> Vec<u8> {
            let len = rng.random_range(0..=6);
            (0..len).map(|_| rng.random_range(0..4u8)).collect()
        };
        let (c, r) = (seq(), seq());
        for n in [1, 2] {
            let (h, lc, lr) = brute_ngram_hits(&c, &r, n);
            if rouge_n_tokens(&c, &r, n) != prf(h, lc, lr) {
                mismatches += 1;
            }
        }
        if rouge_l_tokens(&c, &r) != prf(brute_lcs(&c, &r), c.len(), r.len()) {
            mismatches += 1;
        }
    }
    check(mismatches == 0, format!("{mismatches} mismatches over 1000 pairs x (ROUGE-1, ROUGE-2, ROUGE-L)"))
}

fn c9_data_contract() -> Outcome {
    let Ok(path) = std::env::var("HIPPRO_MULTICONAN") else {
        return Outcome {
            status: Status::Skipped,
            detail: "HIPPRO_MULTICONAN not set; real corpus unavailable".into(),
        };
    };
    let data = match load_dataset(&path) {
        Ok(d) => d,
        Err(e) => return fail(format!("{path}: {e}")),
    };
    let expected = [(Split::Train, 8801), (Split::Dev, 2201), (Split::Test, 2971)].into_iter().collect();
    match hippro::corpus::validate_splits(&data, Some(&expected)) {
        Ok(r) => check(r.total == 13_973, format!("train/dev/test match, total {}", r.total)),
        Err(e) => fail(e.to_string()),
    }
}

fn c10_determinism(a: &Path, b: &Path) -> Outcome {
    let differing: Vec<&str> = ARTIFACTS
        .iter()
        .copied()
        .filter(|f| fs::read(a.join(f)).ok() != fs::read(b.join(f)).ok())
        .collect();
    check(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} artifacts byte-identical across two runs", ARTIFACTS.len())
        } else {
            format!("differ: {}", differing.join(", "))
        },
    )
}

fn main() {
    // libtest-style flags such as --nocapture are accepted and ignored
    let run_a = tempfile::tempdir().unwrap();
    let run_b = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let first = run_pipeline(run_a.path());
    let first_time = t0.elapsed();
    let second = first.clone().and_then(|_| run_pipeline(run_b.path()));
    let pipeline_time = t0.elapsed();

    let needs = |r: &Result<(), String>, f: &dyn Fn() -> Outcome| match r {
        Ok(()) => f(),
        Err(e) => fail(format!("pipeline: {e}")),
    };
    let (a, b) = (run_a.path(), run_b.path());
    type Crit<'a> = (&'a str, Duration, Box<dyn Fn() -> Outcome + 'a>);
    let criteria: Vec<Crit> = vec![
        ("1 parameter accounting", Duration::from_millis(1), Box::new(c1_parameter_accounting)),
        ("2 objective identities", Duration::from_secs(1), Box::new(c2_objective_identities)),
        ("3 gradient fidelity", Duration::from_secs(120), Box::new(c3_gradient_fidelity)),
        ("4 freeze contracts", Duration::from_secs(60), Box::new(|| needs(&first, &|| c4_freeze_contracts(a)))),
        ("5 hierarchical end-to-end", Duration::from_secs(900), Box::new(|| needs(&first, &|| c5_hierarchical(a)))),
        ("6 preference-phase effect", Duration::from_secs(600), Box::new(|| needs(&first, &|| c6_preference_effect(a)))),
        ("7 DPO ablation parity", Duration::from_secs(600), Box::new(|| needs(&first, &|| c7_dpo_parity(a)))),
        ("8 metric oracles", Duration::from_secs(30), Box::new(c8_metric_oracles)),
        ("9 data contract", Duration::from_secs(60), Box::new(c9_data_contract)),
        ("10 determinism", Duration::from_secs(1800), Box::new(|| needs(&second, &|| c10_determinism(a, b)))),
    ];

    println!("pipeline: first run {:.1?}, both runs {:.1?}", first_time, pipeline_time);
    let mut failed = 0;
    for (name, budget, f) in criteria {
        let start = Instant::now();
        let mut o = f();
        let mut took = start.elapsed();
        // criteria 5 to 7 consume the first pipeline run, 10 both
        match name.split(' ').next() {
            Some("5" | "6" | "7") => took += first_time,
            Some("10") => took += pipeline_time,
            _ => {}
        }
        if matches!(o.status, Status::Pass) && took > budget {
            o = fail(format!("{} [took {took:.1?}, budget {budget:?}]", o.detail));
        }
        let tag = match o.status {
            Status::Pass => "PASS",
            Status::Fail => {
                failed += 1;
                "FAIL"
            }
            Status::Skipped => "SKIPPED",
        };
        println!("criterion {name}: {tag} ({took:.1?}) {}", o.detail);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
