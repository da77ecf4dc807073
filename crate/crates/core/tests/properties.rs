//! Property tests over the public invariants.

use hippro::corpus::{synth_corpus, Vocabulary};
use hippro::evaluation::{paired_ttest, rouge_l, rouge_n};
use hippro::model::{forward_logprobs, ModelConfig, SeqModel};
use hippro::prefix::{init_stage1, init_stage2, param_count};
use hippro::training::{Checkpoint, StageKind, TrainConfig};
use proptest::prelude::*;

fn words() -> impl Strategy<Value = String> {
    proptest::collection::vec(prop::sample::select(vec!["the", "cat", "sat", "on", "mat", "a"]), 0..8)
        .prop_map(|w| w.join(" "))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rouge_scores_are_bounded(c in words(), r in words()) {
        for prf in [rouge_n(&c, &r, 1).unwrap(), rouge_n(&c, &r, 2).unwrap(), rouge_l(&c, &r)] {
            for x in [prf.precision, prf.recall, prf.f1] {
                prop_assert!((0.0..=1.0).contains(&x));
            }
        }
        if !c.is_empty() {
            prop_assert_eq!(rouge_n(&c, &c, 1).unwrap().f1, 1.0);
            prop_assert_eq!(rouge_l(&c, &c).f1, 1.0);
        }
    }

    #[test]
    fn ttest_swapping_samples_negates_t(
        a in proptest::collection::vec(-10.0f64..10.0, 3..40),
        shift in proptest::collection::vec(-1.0f64..1.0, 40),
    ) {
        let b: Vec<f64> = a.iter().zip(&shift).map(|(x, s)| x + s).collect();
        if let Ok(fwd) = paired_ttest(&a, &b) {
            let back = paired_ttest(&b, &a).unwrap();
            prop_assert!((fwd.t_statistic + back.t_statistic).abs() <= 1e-9 * fwd.t_statistic.abs().max(1.0));
            prop_assert!((fwd.p_value - back.p_value).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(&fwd.p_value));
        }
    }

    #[test]
    fn adapter_shapes_follow_the_count(vt in 1usize..5, layers in 1usize..4, heads in 1usize..3, dh in 1usize..5) {
        let d = heads * dh;
        let mut cfg = ModelConfig::new(8, d, heads, layers, 4);
        cfg.n_layers_dec = layers + 1;
        let s = init_stage1(vt, &cfg, 0).unwrap();
        prop_assert_eq!(s.alpha.shape(), [vt, layers, 2 * d]);
        prop_assert_eq!(s.beta.shape(), [vt, layers + 1, 2 * d]);
        prop_assert_eq!(s.alpha.len(), param_count(vt, layers, d));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn checkpoints_round_trip_bit_exactly(seed in 0u64..10_000, vt in 1usize..4, vt_e in 1usize..4) {
        let data = synth_corpus(20, seed).unwrap();
        let vocab = Vocabulary::from_examples(&data);
        let model = SeqModel::init(ModelConfig::new(vocab.len(), 8, 2, 1, 8), seed).unwrap();
        let base = Checkpoint::base(model.clone(), vocab.clone(), None);
        let mut s1 = init_stage1(vt, model.config(), seed).unwrap();
        s1.round_to_f32();
        let mut c1 = TrainConfig::new(StageKind::Strategy);
        c1.vt = vt;
        let ck1 = Checkpoint::from_stage(&c1, model.clone(), vocab.clone(), s1, Some(&base), Vec::new()).unwrap();
        let mut s2 = init_stage2(&ck1.stack_for_next_stage().unwrap(), vt_e, seed + 1).unwrap();
        s2.round_to_f32();
        let mut c2 = TrainConfig::new(StageKind::StrategyEmotion);
        c2.vt = vt;
        c2.vt_e = Some(vt_e);
        let ck2 = Checkpoint::from_stage(&c2, model, vocab, s2, Some(&ck1), Vec::new()).unwrap();
        for ck in [&base, &ck1, &ck2] {
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back.stack, &ck.stack);
            prop_assert_eq!(back.model.theta(), ck.model.theta());
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
        ck2.verify_parent(&ck1).unwrap();
        prop_assert!(ck2.verify_parent(&base).is_err());
    }

    #[test]
    fn forward_rows_are_log_distributions(seed in 0u64..1000, plen in 1usize..6, tlen in 1usize..6) {
        let model = SeqModel::init(ModelConfig::new(12, 8, 2, 2, 8), seed).unwrap();
        let prompt: Vec<usize> = (0..plen).map(|i| 4 + (i * 5 + seed as usize) % 8).collect();
        let target: Vec<usize> = (0..tlen).map(|i| 4 + (i * 3 + seed as usize) % 8).collect();
        let stack = init_stage1(2, model.config(), seed).unwrap();
        let rows = forward_logprobs(&model, &prompt, &target, &stack.injection()).unwrap();
        let again = forward_logprobs(&model, &prompt, &target, &stack.injection()).unwrap();
        prop_assert_eq!(&rows, &again);
        for r in rows.rows() {
            let lse = r.iter().map(|x| x.exp()).sum::<f64>().ln();
            prop_assert!(lse.abs() <= 1e-6);
        }
    }
}
