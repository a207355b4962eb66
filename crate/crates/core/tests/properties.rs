//! Property tests for the invariants every component promises.

use std::sync::OnceLock;

use apollo_core::attack::{
    generate_adversarial, l2_distance, AttackConfig, Conjecture, EarlyStopRule, LossContext, StopReason, Variant,
};
use apollo_core::autodiff::{MlpArchitecture, ParamModel};
use apollo_core::baselines::{logit_transform, sigmoid, CONFIDENCE_CLAMP};
use apollo_core::checkpoint::{self, Provenance};
use apollo_core::datagen::{gen_quadrants, make_splits};
use apollo_core::metrics::{roc_curve, tpr_at_fpr};
use apollo_core::Tensor;
use proptest::prelude::*;

fn models() -> &'static Vec<ParamModel> {
    static MODELS: OnceLock<Vec<ParamModel>> = OnceLock::new();
    MODELS.get_or_init(|| (0..6).map(|s| ParamModel::init(MlpArchitecture::blocks(2, 12, 1, 4), s).unwrap()).collect())
}

fn mean_prob(shadows: &[&ParamModel], x: &[f64], y: usize) -> f64 {
    let batch = Tensor::new(vec![1, 2], x.to_vec()).unwrap();
    shadows.iter().map(|m| m.probabilities(&batch).unwrap().data()[y]).sum::<f64>() / shadows.len() as f64
}

fn variant() -> impl Strategy<Value = Variant> {
    prop_oneof![Just(Variant::Under), Just(Variant::Over), Just(Variant::UnderOffline), Just(Variant::OverOffline)]
}

prop_compose! {
    fn attack_case()(
        variant in variant(),
        steps in 0usize..25,
        epsilon in 0.01f64..2.0,
        tau in 0.0f64..=1.0,
        alpha in 0.0f64..5.0,
        beta in 0.01f64..5.0,
        inner_lr in proptest::option::of(0.01f64..3.0),
        invert in any::<bool>(),
        clip in any::<bool>(),
        x in proptest::collection::vec(-1.0f64..1.0, 2),
        y in 0usize..4,
        split in 1usize..5,
    ) -> (AttackConfig, Vec<f64>, usize, usize) {
        let cfg = AttackConfig {
            variant, steps, epsilon, tau, alpha, beta, inner_lr,
            early_stop: if invert { EarlyStopRule::InvertForOver } else { EarlyStopRule::BelowTau },
            domain: clip.then_some([-1.0, 1.0]),
            ..AttackConfig::default()
        };
        (cfg, x, y, split)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn search_respects_locality_and_early_stopping((cfg, x, y, split) in attack_case()) {
        let all: Vec<&ParamModel> = models().iter().collect();
        let ctx = LossContext { x: x.clone(), y, in_models: all[..split].to_vec(), out_models: all[split..].to_vec(), shadows: all.clone() };
        let out = generate_adversarial(&ctx, &cfg).unwrap();
        prop_assert!(l2_distance(&x, &out.x_prime) <= cfg.radius());
        prop_assert_eq!(out.trace.len(), out.steps_used);
        for step in &out.trace {
            prop_assert!(step.distance <= step.t as f64 * cfg.epsilon);
        }
        if cfg.domain.is_some() {
            prop_assert!(out.x_prime.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        if out.stop_reason == StopReason::EarlyStop {
            let p = mean_prob(&all, &out.x_prime, y);
            if cfg.early_stop == EarlyStopRule::InvertForOver && cfg.variant.conjecture() == Conjecture::Over {
                prop_assert!(p > 1.0 - cfg.tau);
            } else {
                prop_assert!(p < cfg.tau, "stopped with mean probability {} >= {}", p, cfg.tau);
            }
        } else {
            prop_assert_eq!(out.steps_used, cfg.steps);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn roc_is_monotone_and_bounded(scores in proptest::collection::vec(-5.0f64..5.0, 2..60), seed in any::<u64>()) {
        let truths: Vec<bool> = (0..scores.len()).map(|i| (seed >> (i % 64)) & 1 == 1 || i == 0).collect();
        prop_assume!(truths.iter().any(|t| !t));
        let roc = roc_curve(&scores, &truths).unwrap();
        prop_assert!((0.0..=1.0).contains(&roc.auc));
        for w in roc.points.windows(2) {
            prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
        }
        let last = roc.points.last().unwrap();
        prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        let (_, achieved) = tpr_at_fpr(&roc, 0.3);
        prop_assert!(achieved <= 0.3);
    }

    #[test]
    fn logit_round_trips(p in CONFIDENCE_CLAMP..(1.0 - CONFIDENCE_CLAMP)) {
        prop_assert!((sigmoid(logit_transform(p)) - p).abs() < 1e-12);
    }

    #[test]
    fn splits_partition_the_population(n in 20usize..200, frac in 0.0f64..=1.0, seed in any::<u64>()) {
        let train_n = n / 2;
        let split = make_splits(gen_quadrants(n, seed).unwrap(), train_n, frac, seed).unwrap();
        prop_assert_eq!(split.train.len(), train_n);
        prop_assert_eq!(split.unlearn.len() + split.retain.len(), train_n);
        prop_assert_eq!(split.test.len(), n - train_n);
        prop_assert!(split.unlearn.iter().all(|i| split.train.contains(i) && !split.retain.contains(i)));
        prop_assert!(split.test.iter().all(|i| !split.train.contains(i)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn checkpoints_round_trip(width in 1usize..16, blocks in 0usize..3, seed in any::<u64>()) {
        let model = ParamModel::init(MlpArchitecture::blocks(2, width, blocks, 4), seed).unwrap();
        let bytes = checkpoint::encode(&model, seed, Provenance::Shadow).unwrap();
        let (back, header) = checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(header.seed, seed);
        prop_assert_eq!(back.params(), model.params());
        prop_assert_eq!(checkpoint::encode(&back, seed, Provenance::Shadow).unwrap(), bytes);
    }
}
