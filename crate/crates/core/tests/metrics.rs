#![allow(clippy::needless_range_loop)]
use cgmcl::diffcore::Tensor;
use cgmcl::trainkit::metrics::*;
use proptest::prelude::*;

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
fn pairwise_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &pi) in positive.iter().enumerate() {
        for (j, &pj) in positive.iter().enumerate() {
            if pi && !pj {
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

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn auc_equals_pairwise_ranking(data in prop::collection::vec((0u8..6, any::<bool>()), 2..40)) {
        let scores: Vec<f64> = data.iter().map(|(s, _)| f64::from(*s) / 5.0).collect();
        let positive: Vec<bool> = data.iter().map(|(_, p)| *p).collect();
        prop_assume!(positive.iter().any(|&p| p) && positive.iter().any(|&p| !p));
        prop_assert!((roc_auc(&scores, &positive) - pairwise_auc(&scores, &positive)).abs() < 1e-12);
    }

    #[test]
    fn multiclass_confusion_identities(
        pairs in prop::collection::vec((0usize..3, 0usize..3), 1..60)
    ) {
        let truth: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let pred: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let c = Confusion::from_predictions(3, &truth, &pred).unwrap();
        prop_assert_eq!(c.total(), pairs.len());
        let r = rates(&c);
        let correct = pairs.iter().filter(|p| p.0 == p.1).count();
        prop_assert_eq!(r.acc, correct as f64 / pairs.len() as f64);
        let mut sen = 0.0;
        for k in 0..3 {
            let (tp, fn_, tn, fp) = c.one_vs_rest(k);
            prop_assert_eq!(tp + fn_ + tn + fp, pairs.len());
            prop_assert_eq!(tp + fn_, truth.iter().filter(|&&t| t == k).count());
            sen += if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 } / 3.0;
        }
        prop_assert!((r.sen - sen).abs() < 1e-15);
    }
}

#[test]
fn reports_use_argmax_of_probabilities() {
    let probs = Tensor::from_rows(&[vec![0.2, 0.8], vec![0.6, 0.4], vec![0.5, 0.5]]).unwrap();
    let m = MetricsReport::from_probs(&probs, &[1, 1, 0]).unwrap();
    // the tied row goes to class 0
    assert_eq!(m.confusion.rows(), vec![vec![1, 0], vec![1, 1]]);
    // positives score 0.8 and 0.4 against a negative at 0.5
    assert_eq!(m.auc, 0.5);
}

#[test]
fn summary_over_runs() {
    let probs = Tensor::from_rows(&[vec![0.2, 0.8], vec![0.9, 0.1]]).unwrap();
    let good = MetricsReport::from_probs(&probs, &[1, 0]).unwrap();
    let bad = MetricsReport::from_probs(&probs, &[0, 1]).unwrap();
    let s = MetricsSummary::of(&[good, bad]);
    assert_eq!(s.runs, 2);
    let acc = s.get("acc").unwrap();
    assert_eq!((acc.mean, acc.std), (0.5, 0.5));
}
