//! Objectives recomputed from raw teacher-forced log-probability rows.

use hippro::corpus::PreferencePair;
use hippro::model::{forward_logprobs, SeqModel};
use hippro::objectives::{evaluate_objective, Objective};
use hippro::prefix::HierarchicalPrefixStack;
use hippro::training::tiny_instance;
use proptest::prelude::*;

/// Summed and mean log-probability of `target`, read off the forward rows.
fn logprob(model: &SeqModel, stack: &HierarchicalPrefixStack, prompt: &[usize], target: &[usize]) -> (f64, f64) {
    let rows = forward_logprobs(model, prompt, target, &stack.injection()).unwrap();
    let sum: f64 = target.iter().enumerate().map(|(t, &tok)| rows[[t, tok]]).sum();
    (sum, sum / target.len() as f64)
}

fn log_odds(mean_logprob: f64) -> f64 {
    let p = mean_logprob.exp();
    (p / (1.0 - p)).ln()
}

fn neg_log_sigmoid(x: f64) -> f64 {
    -(1.0 / (1.0 + (-x).exp())).ln()
}

struct Expected {
    j_ft: f64,
    j_or: f64,
    dpo: f64,
}

fn expected(
    model: &SeqModel,
    stack: &HierarchicalPrefixStack,
    reference: &HierarchicalPrefixStack,
    pair: &PreferencePair,
    beta: f64,
) -> Expected {
    let (sum_s, mean_s) = logprob(model, stack, &pair.prompt, &pair.chosen);
    let (sum_r, mean_r) = logprob(model, stack, &pair.prompt, &pair.rejected);
    let (ref_s, _) = logprob(model, reference, &pair.prompt, &pair.chosen);
    let (ref_r, _) = logprob(model, reference, &pair.prompt, &pair.rejected);
    Expected {
        j_ft: -mean_s,
        j_or: neg_log_sigmoid(log_odds(mean_s) - log_odds(mean_r)),
        dpo: neg_log_sigmoid(beta * ((sum_s - ref_s) - (sum_r - ref_r))),
    }
}

fn loss(t: &hippro::training::TinyInstance, obj: Objective) -> (f64, Option<hippro::objectives::LossBreakdown>) {
    let out = evaluate_objective(&t.model, &t.stack, Some(&t.reference), &t.pair, obj, false).unwrap();
    (out.loss, out.breakdown)
}

#[test]
fn objectives_match_recomputation_from_rows() {
    for seed in 0..4 {
        let t = tiny_instance(seed).unwrap();
        let e = expected(&t.model, &t.stack, &t.reference, &t.pair, 0.1);
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-10 * b.abs().max(1.0);
        assert!(close(loss(&t, Objective::Finetuned).0, e.j_ft));
        assert!(close(loss(&t, Objective::OddsRatio).0, e.j_or));
        assert!(close(loss(&t, Objective::Final { epsilon: 0.25 }).0, e.j_ft + 0.25 * e.j_or));
        assert!(close(loss(&t, Objective::Dpo { beta: 0.1 }).0, e.dpo));
    }
}

#[test]
fn dpo_against_itself_is_ln2() {
    let t = tiny_instance(2).unwrap();
    let out = evaluate_objective(&t.model, &t.stack, Some(&t.stack), &t.pair, Objective::Dpo { beta: 0.3 }, false).unwrap();
    assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn final_is_finetuned_plus_weighted_or(seed in 0u64..1000, eps in 0.0f64..2.0) {
        let t = tiny_instance(seed).unwrap();
        let (j_final, b) = loss(&t, Objective::Final { epsilon: eps });
        let b = b.expect("breakdown");
        prop_assert!((b.j_final - (b.j_finetuned + eps * b.j_or)).abs() <= 1e-12);
        prop_assert!((j_final - b.j_final).abs() <= 1e-12);
        prop_assert!(b.j_or >= 0.0);
        prop_assert_eq!(b.epsilon, eps);
    }
}
