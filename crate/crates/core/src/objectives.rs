//! Training objectives: teacher-forced NLL, odds-ratio preference loss, their
//! weighted sum, and the DPO alternative.
//!
//! Sequence probabilities are length-normalised: `pi = exp(mean token
//! log-prob)`. Odds and odds ratios are handled as log-odds throughout,
//! `log odds = log pi - log(1 - pi)`, using a stable `log(1 - e^x)`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{log1mexp, softplus, Tape, Var};
use crate::corpus::{PreferencePair, PAD};
use crate::error::{Error, Result};
use crate::model::{
    check_injection_vars, check_inputs, decode_graph, encode_graph, shift_right, SeqModel, ThetaVars,
};
use crate::prefix::{HierarchicalPrefixStack, StackGrads};

/// Mean negative log-likelihood over non-PAD target positions.
pub fn nll_loss(rows: &Array2<f64>, target: &[usize]) -> Result<f64> {
    if rows.nrows() != target.len() {
        return Err(Error::Shape(format!(
            "{} log-prob rows for {} target tokens",
            rows.nrows(),
            target.len()
        )));
    }
    let picked: Vec<f64> = target
        .iter()
        .enumerate()
        .filter(|(_, &t)| t != PAD)
        .map(|(i, &t)| -rows[[i, t]])
        .collect();
    if picked.is_empty() {
        return Err(Error::EmptyInput("target has no non-PAD positions"));
    }
    Ok(picked.iter().sum::<f64>() / picked.len() as f64)
}

/// `exp(mean_logprob)`.
pub fn seq_prob(mean_logprob: f64) -> Result<f64> {
    if !(mean_logprob <= 0.0) {
        return Err(Error::Domain(format!(
            "mean log-probability {mean_logprob} must be <= 0"
        )));
    }
    Ok(mean_logprob.exp())
}

/// `log(pi / (1 - pi))` from `log pi`.
pub fn log_odds_from_logprob(log_pi: f64) -> Result<f64> {
    if !(log_pi < 0.0) {
        return Err(Error::Domain(format!("log-probability {log_pi} must be < 0 for finite odds")));
    }
    Ok(log_pi - log1mexp(log_pi))
}

fn check_prob(pi: f64) -> Result<()> {
    if pi > 0.0 && pi < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("probability {pi} outside (0, 1)")))
    }
}

fn log_odds(pi: f64) -> Result<f64> {
    check_prob(pi)?;
    log_odds_from_logprob(pi.ln())
}

/// `pi / (1 - pi)`
pub fn odds(pi: f64) -> Result<f64> {
    Ok(log_odds(pi)?.exp())
}

/// `odds(pi_s) / odds(pi_r)`
pub fn odds_ratio(pi_s: f64, pi_r: f64) -> Result<f64> {
    Ok((log_odds(pi_s)? - log_odds(pi_r)?).exp())
}

/// `-log sigmoid(log OR) = log(1 + 1/OR)`.
pub fn or_loss(pi_s: f64, pi_r: f64) -> Result<f64> {
    Ok(softplus(-(log_odds(pi_s)? - log_odds(pi_r)?)))
}

/// Odds-ratio loss from mean token log-probs of chosen and rejected.
pub fn or_loss_from_logprobs(mean_s: f64, mean_r: f64) -> Result<f64> {
    Ok(softplus(-(log_odds_from_logprob(mean_s)? - log_odds_from_logprob(mean_r)?)))
}

/// `-log sigmoid(beta * [(S_s - Sref_s) - (S_r - Sref_r)])` over summed log-probs.
pub fn dpo_from_logprobs(policy_s: f64, policy_r: f64, ref_s: f64, ref_r: f64, beta: f64) -> f64 {
    softplus(-beta * ((policy_s - ref_s) - (policy_r - ref_r)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub j_finetuned: f64,
    pub j_or: f64,
    pub epsilon: f64,
    pub j_final: f64,
    /// `mean_logprob(chosen) - mean_logprob(rejected)`
    pub margin: f64,
}

/// Which scalar to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// NLL of the chosen sequence.
    Finetuned,
    /// The odds-ratio term alone.
    OddsRatio,
    /// `j_finetuned + epsilon * j_or`
    Final { epsilon: f64 },
    Dpo { beta: f64 },
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::Finetuned => "j_finetuned",
            Objective::OddsRatio => "j_or",
            Objective::Final { .. } => "j_final",
            Objective::Dpo { .. } => "dpo",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveOutput {
    pub loss: f64,
    pub breakdown: Option<LossBreakdown>,
    pub grads: Option<StackGrads>,
}

/// Summed target log-prob on a tape.
fn target_logprob_sum(t: &mut Tape<'_>, logprobs: Var, target: &[usize]) -> Var {
    let picked = t.pick(logprobs, target);
    t.sum(picked)
}

/// Summed log-probabilities of chosen and rejected under a frozen policy.
fn reference_sums(
    model: &SeqModel,
    stack: &HierarchicalPrefixStack,
    pair: &PreferencePair,
) -> Result<(f64, f64)> {
    let inj = stack.injection();
    let s = crate::model::sequence_logprob(model, &pair.prompt, &pair.chosen, &inj)?;
    let r = crate::model::sequence_logprob(model, &pair.prompt, &pair.rejected, &inj)?;
    Ok((s.sum, r.sum))
}

/// Evaluates `objective` on one preference pair, with gradients for the
/// trainable adapters when `want_grad` is set.
pub fn evaluate_objective(
    model: &SeqModel,
    stack: &HierarchicalPrefixStack,
    reference: Option<&HierarchicalPrefixStack>,
    pair: &PreferencePair,
    objective: Objective,
    want_grad: bool,
) -> Result<ObjectiveOutput> {
    if pair.chosen.is_empty() {
        return Err(Error::EmptyInput("chosen"));
    }
    check_inputs(model, &pair.prompt, &pair.chosen)?;
    let needs_rejected = !matches!(objective, Objective::Finetuned);
    if needs_rejected {
        if pair.rejected.is_empty() {
            return Err(Error::EmptyInput("rejected"));
        }
        check_inputs(model, &pair.prompt, &pair.rejected)?;
    }
    stack.check_compatible(model.config())?;
    let ref_sums = match objective {
        Objective::Dpo { .. } => {
            let r = reference.ok_or_else(|| Error::Stage("DPO needs a frozen reference stack".into()))?;
            r.check_compatible(model.config())?;
            Some(reference_sums(model, r, pair)?)
        }
        _ => None,
    };

    let mut t = Tape::new();
    let th = ThetaVars::bind(&mut t, model, false);
    let bound = stack.bind(&mut t);
    check_injection_vars(model, &bound.vars)?;
    let mem = encode_graph(&mut t, model, &th, &pair.prompt, &bound.vars.encoder);
    let lp_s = decode_graph(&mut t, model, &th, mem, &shift_right(&pair.chosen), &bound.vars.decoder);
    let sum_s = target_logprob_sum(&mut t, lp_s, &pair.chosen);
    let mean_s = t.scale(sum_s, 1.0 / pair.chosen.len() as f64);
    let j_ft = t.scale(mean_s, -1.0);

    let (loss, breakdown) = if needs_rejected {
        let lp_r = decode_graph(&mut t, model, &th, mem, &shift_right(&pair.rejected), &bound.vars.decoder);
        let sum_r = target_logprob_sum(&mut t, lp_r, &pair.rejected);
        let mean_r = t.scale(sum_r, 1.0 / pair.rejected.len() as f64);
        let ms = t.scalar_value(mean_s);
        let mr = t.scalar_value(mean_r);
        let margin = ms - mr;
        match objective {
            Objective::Dpo { beta } => {
                let (ref_s, ref_r) = ref_sums.expect("computed above");
                let ref_diff = t.scalar(ref_s - ref_r);
                let diff = t.sub(sum_s, sum_r);
                let inner = t.sub(diff, ref_diff);
                let z = t.scale(inner, -beta);
                (t.softplus(z), None)
            }
            _ => {
                // log odds = m - log(1 - e^m)
                let l1s = t.log1mexp(mean_s);
                let lo_s = t.sub(mean_s, l1s);
                let l1r = t.log1mexp(mean_r);
                let lo_r = t.sub(mean_r, l1r);
                let log_or = t.sub(lo_s, lo_r);
                let neg = t.scale(log_or, -1.0);
                let j_or = t.softplus(neg);
                let epsilon = match objective {
                    Objective::Final { epsilon } => epsilon,
                    Objective::OddsRatio => 0.0,
                    _ => unreachable!(),
                };
                let weighted = t.scale(j_or, epsilon);
                let j_final = t.add(j_ft, weighted);
                let bd = LossBreakdown {
                    j_finetuned: t.scalar_value(j_ft),
                    j_or: t.scalar_value(j_or),
                    epsilon,
                    j_final: t.scalar_value(j_final),
                    margin,
                };
                let out = if matches!(objective, Objective::OddsRatio) { j_or } else { j_final };
                (out, Some(bd))
            }
        }
    } else {
        (j_ft, None)
    };

    let value = t.scalar_value(loss);
    let grads = want_grad.then(|| {
        let g = t.backward(loss);
        bound.gradients(stack, &g)
    });
    Ok(ObjectiveOutput {
        loss: value,
        breakdown,
        grads,
    })
}

/// Teacher-forced NLL of `target` given `prompt` (phase-one objective).
pub fn nll_objective(
    model: &SeqModel,
    stack: &HierarchicalPrefixStack,
    prompt: &[usize],
    target: &[usize],
    want_grad: bool,
) -> Result<(f64, Option<StackGrads>)> {
    let pair = PreferencePair::supervised(prompt.to_vec(), target.to_vec());
    let out = evaluate_objective(model, stack, None, &pair, Objective::Finetuned, want_grad)?;
    Ok((out.loss, out.grads))
}

/// Combined `J_final` with its breakdown and prefix gradients.
pub fn orpo_loss(
    model: &SeqModel,
    stack: &HierarchicalPrefixStack,
    pair: &PreferencePair,
    epsilon: f64,
) -> Result<(LossBreakdown, StackGrads)> {
    let out = evaluate_objective(model, stack, None, pair, Objective::Final { epsilon }, true)?;
    Ok((
        out.breakdown.expect("final objective has a breakdown"),
        out.grads.expect("requested"),
    ))
}

/// DPO loss against a frozen reference stack.
pub fn dpo_loss(
    model: &SeqModel,
    stack: &HierarchicalPrefixStack,
    reference: &HierarchicalPrefixStack,
    pair: &PreferencePair,
    beta: f64,
) -> Result<(f64, StackGrads)> {
    let out = evaluate_objective(model, stack, Some(reference), pair, Objective::Dpo { beta }, true)?;
    Ok((out.loss, out.grads.expect("requested")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    #[test]
    fn nll_cases() {
        let uniform = Array2::from_elem((3, 4), (0.25f64).ln());
        assert!((nll_loss(&uniform, &[5 % 4, 1, 3]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let certain = Array2::from_shape_fn((2, 4), |(i, j)| if j == i + 1 { 0.0 } else { f64::NEG_INFINITY });
        assert_eq!(nll_loss(&certain, &[1, 2]).unwrap(), 0.0);
        let rows = Array2::from_shape_fn((3, 4), |(i, j)| {
            if j == 1 {
                [0.5f64, 0.25, 0.125][i].ln()
            } else {
                -10.0
            }
        });
        let expected = -(0.5f64.ln() + 0.25f64.ln() + 0.125f64.ln()) / 3.0;
        assert!((expected - 2.0 * LN_2).abs() < 1e-12);
        assert!((nll_loss(&rows, &[1, 1, 1]).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn nll_skips_pad_and_rejects_all_pad() {
        let rows = Array2::from_shape_fn((2, 4), |(i, _)| if i == 0 { -1.0 } else { -7.0 });
        assert!((nll_loss(&rows, &[2, PAD]).unwrap() - 1.0).abs() < 1e-15);
        assert!(nll_loss(&rows, &[PAD, PAD]).is_err());
        assert!(nll_loss(&rows, &[1]).is_err());
    }

    #[test]
    fn seq_prob_cases() {
        assert!((seq_prob(0.25f64.ln()).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(seq_prob(0.0).unwrap(), 1.0);
        let mean = (0.5f64.ln() + 0.125f64.ln()) / 2.0;
        assert!((seq_prob(mean).unwrap() - 0.25).abs() < 1e-15);
        assert!(seq_prob(0.1).is_err());
        assert!(log_odds_from_logprob(0.0).is_err());
    }

    #[test]
    fn odds_cases() {
        assert!((odds(0.5).unwrap() - 1.0).abs() < 1e-15);
        assert!((odds(0.8).unwrap() - 4.0).abs() < 1e-12);
        assert!((odds(1e-6).unwrap() / 1.000001e-6 - 1.0).abs() < 1e-9);
        assert!(odds(0.0).is_err() && odds(1.0).is_err() && odds(1.5).is_err());
    }

    #[test]
    fn odds_ratio_cases() {
        assert!((odds_ratio(0.3, 0.3).unwrap() - 1.0).abs() < 1e-15);
        assert!((odds_ratio(0.8, 0.5).unwrap() - 4.0).abs() < 1e-12);
        assert!((odds_ratio(0.5, 0.8).unwrap() - 0.25).abs() < 1e-12);
        assert!(odds_ratio(0.5, 1.0).is_err());
    }

    #[test]
    fn or_loss_cases() {
        assert!((or_loss(0.4, 0.4).unwrap() - LN_2).abs() < 1e-12);
        assert!((or_loss(0.8, 0.5).unwrap() - 1.25f64.ln()).abs() < 1e-12);
        assert!((or_loss(0.8, 0.5).unwrap() - 0.223144).abs() < 1e-6);
        assert!((or_loss(0.5, 0.8).unwrap() - 5f64.ln()).abs() < 1e-12);
        assert!((or_loss(0.5, 0.8).unwrap() - 1.609438).abs() < 1e-6);
    }

    #[test]
    fn or_loss_monotone_on_grid() {
        let grid: Vec<f64> = (1..20).map(|i| i as f64 / 20.0).collect();
        for &r in &grid {
            for w in grid.windows(2) {
                assert!(or_loss(w[1], r).unwrap() < or_loss(w[0], r).unwrap());
                assert!(or_loss(r, w[1]).unwrap() > or_loss(r, w[0]).unwrap());
            }
        }
    }

    #[test]
    fn dpo_scalar_identities() {
        assert!((dpo_from_logprobs(-3.0, -5.0, -3.0, -5.0, 0.1) - LN_2).abs() < 1e-15);
        assert!((dpo_from_logprobs(-1.0, -9.0, -4.0, -2.0, 0.0) - LN_2).abs() < 1e-15);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn or_loss_at_equality_is_ln2(p in 1e-6f64..0.999_999) {
                prop_assert!((or_loss(p, p).unwrap() - LN_2).abs() < 1e-12);
            }

            #[test]
            fn odds_ratio_reciprocal(a in 1e-4f64..0.9999, b in 1e-4f64..0.9999) {
                let prod = odds_ratio(a, b).unwrap() * odds_ratio(b, a).unwrap();
                prop_assert!((prod - 1.0).abs() < 1e-12);
            }

            #[test]
            fn or_loss_nonnegative(a in 1e-6f64..0.999_999, b in 1e-6f64..0.999_999) {
                prop_assert!(or_loss(a, b).unwrap() >= 0.0);
                prop_assert_eq!(odds_ratio(a, b).unwrap() > 1.0, a > b);
            }
        }
    }
}
