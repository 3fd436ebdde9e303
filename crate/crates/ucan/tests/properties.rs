//! Property-based invariants for score calibration and attack budgets.

use proptest::prelude::*;
use rand::SeedableRng;
use ucan::attacks::{cw_linf, pgd, AttackConfig};
use ucan::backbone::{BackboneModel, BackboneSpec};
use ucan::detectors::calibrate_threshold;
use ucan::eval::{best_f1, pr_curve};
use ucan::tensor::Tensor;

/// Exhaustive max-F1 over every cut point, the oracle both implementations
/// must match.
fn exhaustive_best_f1(scores: &[f64], adv: &[bool]) -> f64 {
    let mut cuts: Vec<f64> = scores.to_vec();
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup();
    cuts.push(f64::INFINITY);
    let mut best = 0.0f64;
    for &t in &cuts {
        let tp = scores.iter().zip(adv).filter(|(&s, &a)| s >= t && a).count();
        let fp = scores.iter().zip(adv).filter(|(&s, &a)| s >= t && !a).count();
        let fneg = scores.iter().zip(adv).filter(|(&s, &a)| s < t && a).count();
        if 2 * tp + fp + fneg > 0 {
            best = best.max(2.0 * tp as f64 / (2 * tp + fp + fneg) as f64);
        }
    }
    best
}

fn score_sets() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    prop::collection::vec((0.0f64..1.0, any::<bool>()), 2..60)
        .prop_filter("needs both classes", |v| {
            v.iter().any(|(_, a)| *a) && v.iter().any(|(_, a)| !*a)
        })
        .prop_map(|v| v.into_iter().unzip())
}

proptest! {
    #[test]
    fn calibrate_threshold_is_optimal((scores, adv) in score_sets()) {
        let (thr, f1) = calibrate_threshold(&scores, &adv).unwrap();
        let oracle = exhaustive_best_f1(&scores, &adv);
        prop_assert!((f1 - oracle).abs() < 1e-12, "f1 {f1} vs oracle {oracle}");
        // the reported threshold must actually achieve the reported f1
        let tp = scores.iter().zip(&adv).filter(|(&s, &a)| s >= thr && a).count();
        let fp = scores.iter().zip(&adv).filter(|(&s, &a)| s >= thr && !a).count();
        let fneg = scores.iter().zip(&adv).filter(|(&s, &a)| s < thr && a).count();
        let achieved = 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64;
        prop_assert!((achieved - f1).abs() < 1e-12);
    }

    #[test]
    fn pr_curve_best_f1_matches_calibration((scores, adv) in score_sets()) {
        let curve = pr_curve(&scores, &adv).unwrap();
        let (_, f1_curve) = best_f1(&curve).unwrap();
        let (_, f1_cal) = calibrate_threshold(&scores, &adv).unwrap();
        prop_assert!((f1_curve - f1_cal).abs() < 1e-12);
    }

    #[test]
    fn pr_curve_precision_recall_bounds((scores, adv) in score_sets()) {
        let curve = pr_curve(&scores, &adv).unwrap();
        for p in &curve.points {
            prop_assert!((0.0..=1.0).contains(&p.precision));
            prop_assert!((0.0..=1.0).contains(&p.recall));
            prop_assert!((0.0..=1.0).contains(&p.f1));
        }
        // thresholds ascend, recall must not increase
        for w in curve.points.windows(2) {
            prop_assert!(w[0].threshold < w[1].threshold);
            prop_assert!(w[0].recall >= w[1].recall - 1e-12);
        }
    }
}

fn tiny_model(seed: u64) -> BackboneModel {
    BackboneModel::init(BackboneSpec::small_cnn([1, 8, 8], 3), seed).unwrap()
}

fn random_inputs(seed: u64, n: usize) -> (Vec<Tensor>, Vec<usize>) {
    use rand::Rng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let inputs = (0..n)
        .map(|_| {
            let data = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
            Tensor::new(vec![1, 8, 8], data).unwrap()
        })
        .collect();
    let labels = (0..n).map(|i| i % 3).collect();
    (inputs, labels)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn pgd_respects_budget_and_box(seed in 0u64..1000, eps_step in 1usize..8) {
        let eps = eps_step as f64 / 255.0;
        let model = tiny_model(seed);
        let (inputs, labels) = random_inputs(seed.wrapping_add(1), 4);
        let cfg = AttackConfig { epsilon: eps, steps: 10, seed, ..Default::default() };
        let batch = pgd(&model, &inputs, &labels, &cfg).unwrap();
        for (x, a) in inputs.iter().zip(&batch.adversarial) {
            for (&xi, &ai) in x.data.iter().zip(&a.data) {
                prop_assert!((ai - xi).abs() <= eps + 1e-9, "linf violated: {} vs {}", ai, xi);
                prop_assert!((0.0..=1.0).contains(&ai), "box violated: {ai}");
            }
        }
    }

    #[test]
    fn cw_respects_budget_and_box(seed in 0u64..1000) {
        let eps = 8.0 / 255.0;
        let model = tiny_model(seed);
        let (inputs, labels) = random_inputs(seed.wrapping_add(1), 3);
        let cfg = AttackConfig { epsilon: eps, steps: 15, seed, ..Default::default() };
        let batch = cw_linf(&model, &inputs, &labels, &cfg).unwrap();
        for (x, a) in inputs.iter().zip(&batch.adversarial) {
            for (&xi, &ai) in x.data.iter().zip(&a.data) {
                prop_assert!((ai - xi).abs() <= eps + 1e-9);
                prop_assert!((0.0..=1.0).contains(&ai));
            }
        }
    }
}
