use idcnet_core::metrics::{balanced_accuracy, confusion, f1_score, roc_auc, ConfusionMatrix};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tally(scores: &[f32], labels: &[u8], threshold: f64) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::default();
    for i in 0..scores.len() {
        let predicted = if f64::from(scores[i]) >= threshold { 1 } else { 0 };
        if predicted == 1 && labels[i] == 1 {
            cm.tp += 1;
        } else if predicted == 1 {
            cm.fp += 1;
        } else if labels[i] == 0 {
            cm.tn += 1;
        } else {
            cm.fn_ += 1;
        }
    }
    cm
}

/// Probability that a random positive outscores a random negative, ties ½.
fn mann_whitney(scores: &[f32], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Scores on a coarse grid so ties are common.
fn instance(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f32>, Vec<u8>) {
    loop {
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        if labels.contains(&0) && labels.contains(&1) {
            let scores = labels.iter().map(|&l| (rng.gen_range(0..20) as f32 + 4.0 * f32::from(l)) / 24.0).collect();
            return (scores, labels);
        }
    }
}

#[test]
fn confusion_matches_tally_on_a_thousand_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (scores, labels) = instance(&mut rng, 1000);
    for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let cm = confusion(&scores, &labels, t).unwrap();
        assert_eq!(cm, tally(&scores, &labels, t));
        assert_eq!(cm.total(), 1000);
    }
}

#[test]
fn auc_matches_mann_whitney_on_two_hundred_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let n = rng.gen_range(2..=500);
        let (scores, labels) = instance(&mut rng, n);
        let roc = roc_auc(&scores, &labels).unwrap();
        let want = mann_whitney(&scores, &labels);
        assert!((roc.auc - want).abs() < 1e-12, "n={n}: {} vs {want}", roc.auc);
        for w in roc.points.windows(2) {
            assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
        }
        let last = roc.points.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
    }
}

fn labelled(max: usize) -> impl Strategy<Value = (Vec<f32>, Vec<u8>)> {
    prop::collection::vec((0u8..40, 0u8..2), 2..max)
        .prop_filter("both classes", |v| v.iter().any(|p| p.1 == 0) && v.iter().any(|p| p.1 == 1))
        .prop_map(|v| v.into_iter().map(|(s, l)| (f32::from(s) / 40.0, l)).unzip())
}

proptest! {
    #[test]
    fn scalar_metrics_match_definitions((scores, labels) in labelled(500), t in 0.0f64..1.0) {
        let cm = confusion(&scores, &labels, t).unwrap();
        prop_assert_eq!(cm, tally(&scores, &labels, t));
        let sens = cm.tp as f64 / (cm.tp + cm.fn_) as f64;
        let spec = cm.tn as f64 / (cm.tn + cm.fp) as f64;
        prop_assert!((balanced_accuracy(&cm).unwrap() - (sens + spec) / 2.0).abs() < 1e-12);
        if cm.tp > 0 {
            let p = cm.tp as f64 / (cm.tp + cm.fp) as f64;
            prop_assert!((f1_score(&cm) - 2.0 * p * sens / (p + sens)).abs() < 1e-12);
        }
    }

    #[test]
    fn auc_is_invariant_under_monotone_rescaling((scores, labels) in labelled(300)) {
        let base = roc_auc(&scores, &labels).unwrap().auc;
        let squashed: Vec<f32> = scores.iter().map(|&s| 1.0 / (1.0 + (-(8.0 * s - 3.0)).exp())).collect();
        let cubed: Vec<f32> = scores.iter().map(|&s| s * s * s + 2.0).collect();
        prop_assert_eq!(roc_auc(&squashed, &labels).unwrap().auc, base);
        prop_assert_eq!(roc_auc(&cubed, &labels).unwrap().auc, base);
    }

    #[test]
    fn thresholded_metrics_follow_a_rescaled_threshold((scores, labels) in labelled(300), t in 0u8..40) {
        let t = f32::from(t) / 40.0;
        let f = |s: f32| s * s * 3.0 + 1.0;
        let a = confusion(&scores, &labels, f64::from(t)).unwrap();
        let mapped: Vec<f32> = scores.iter().map(|&s| f(s)).collect();
        let b = confusion(&mapped, &labels, f64::from(f(t))).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(balanced_accuracy(&a).unwrap(), balanced_accuracy(&b).unwrap());
        prop_assert_eq!(f1_score(&a), f1_score(&b));
    }

    #[test]
    fn reversed_scores_complement_auc((scores, labels) in labelled(300)) {
        let neg: Vec<f32> = scores.iter().map(|s| -s).collect();
        let sum = roc_auc(&scores, &labels).unwrap().auc + roc_auc(&neg, &labels).unwrap().auc;
        prop_assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn balanced_sets_make_balanced_accuracy_plain_accuracy(
        pos in prop::collection::vec(0u8..40, 1..100),
        neg_seed in any::<u64>(),
        t in 0.0f64..1.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(neg_seed);
        let mut scores: Vec<f32> = pos.iter().map(|&s| f32::from(s) / 40.0).collect();
        scores.extend((0..pos.len()).map(|_| rng.gen_range(0..40) as f32 / 40.0));
        let labels: Vec<u8> = (0..scores.len()).map(|i| u8::from(i < pos.len())).collect();
        let cm = confusion(&scores, &labels, t).unwrap();
        prop_assert!((balanced_accuracy(&cm).unwrap() - cm.accuracy()).abs() < 1e-15);
    }
}
