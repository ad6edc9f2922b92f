use colearn_core::evalmetrics::{auc, auc_from_curve, confusion_matrix, roc_curve, youden_threshold};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Mann-Whitney concordance: fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half.
fn concordance(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / pairs
}

/// Scores on a coarse grid so ties are frequent, with both classes present.
fn seeded_set(seed: u64, n: usize) -> (Vec<f64>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.4))).collect();
    labels[0] = 0;
    labels[1] = 1;
    let scores = labels
        .iter()
        .map(|&l| (rng.random_range(0..12) as f64 + l as f64 * 2.0) / 10.0)
        .collect();
    (scores, labels)
}

#[test]
fn trapezoid_equals_concordance_on_100_sets() {
    for seed in 0..100 {
        let (s, y) = seeded_set(seed, 5 + (seed as usize * 7) % 60);
        let a = auc(&s, &y).unwrap();
        assert!((a - concordance(&s, &y)).abs() <= 1e-12, "seed {seed}");
    }
}

#[test]
fn hand_cases() {
    assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
    assert_eq!(auc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
    let rc = roc_curve(&[0.9, 0.1], &[1, 0]).unwrap();
    let pts: Vec<(f64, f64)> = rc.points.iter().map(|p| (p.fpr, p.tpr)).collect();
    assert_eq!(pts, vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]);
    let rc = roc_curve(&[0.3; 5], &[0, 1, 0, 1, 1]).unwrap();
    let pts: Vec<(f64, f64)> = rc.points.iter().map(|p| (p.fpr, p.tpr)).collect();
    assert_eq!(pts, vec![(0.0, 0.0), (1.0, 1.0)]);
    assert_eq!(youden_threshold(&rc), 0.3);
    assert!(auc(&[0.2, 0.3], &[1, 1]).is_err());
    assert!(roc_curve(&[0.2], &[1, 0]).is_err());
}

#[test]
fn youden_enumeration() {
    let rc = roc_curve(&[0.2, 0.6, 0.7, 0.9], &[0, 0, 1, 1]).unwrap();
    assert_eq!(youden_threshold(&rc), 0.7);
    let rc = roc_curve(&[0.1, 0.5, 0.6, 0.8], &[0, 1, 0, 1]).unwrap();
    // Thresholds 0.8 (tpr .5, fpr 0) and 0.5 (tpr 1, fpr .5) both give J = 0.5.
    assert_eq!(youden_threshold(&rc), 0.8);
}

/// Counts `(tp, fp, tn, fn)` with `score >= t` as positive.
fn count(scores: &[f64], labels: &[u8], t: f64) -> (usize, usize, usize, usize) {
    let mut c = (0, 0, 0, 0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= t, l == 1) {
            (true, true) => c.0 += 1,
            (true, false) => c.1 += 1,
            (false, false) => c.2 += 1,
            (false, true) => c.3 += 1,
        }
    }
    c
}

#[test]
fn every_roc_point_matches_brute_force_confusion() {
    for seed in 0..20 {
        let (s, y) = seeded_set(1000 + seed, 50);
        let rc = roc_curve(&s, &y).unwrap();
        let (p, n) = (rc.positives as f64, rc.negatives as f64);
        assert_eq!(rc.points.first().map(|q| (q.fpr, q.tpr)), Some((0.0, 0.0)));
        assert_eq!(rc.points.last().map(|q| (q.fpr, q.tpr)), Some((1.0, 1.0)));
        for w in rc.points.windows(2) {
            assert!(w[0].threshold > w[1].threshold);
            assert!(w[0].fpr <= w[1].fpr && w[0].tpr <= w[1].tpr);
        }
        for q in &rc.points {
            let (tp, fp, _, _) = count(&s, &y, q.threshold);
            assert_eq!(q.tpr, tp as f64 / p);
            assert_eq!(q.fpr, fp as f64 / n);
        }
        let distinct: std::collections::BTreeSet<u64> = s.iter().map(|v| v.to_bits()).collect();
        assert_eq!(rc.points.len(), distinct.len() + 1);
    }
}

#[test]
fn confusion_matches_counting_loop() {
    let c = confusion_matrix(&[0.9, 0.2], &[1, 0], 0.5).unwrap();
    assert_eq!((c.tp, c.fp, c.tn, c.fn_), (1, 0, 1, 0));
    assert_eq!(c.accuracy(), 1.0);
    let c = confusion_matrix(&[0.9, 0.2, 0.4], &[1, 0, 1], 0.95).unwrap();
    assert_eq!(c.tp + c.fp, 0);
    assert!(confusion_matrix(&[], &[], 0.5).is_err());
    for seed in 0..20 {
        let (s, y) = seeded_set(2000 + seed, 40);
        let t = seed as f64 / 15.0;
        let c = confusion_matrix(&s, &y, t).unwrap();
        assert_eq!((c.tp, c.fp, c.tn, c.fn_), count(&s, &y, t));
        assert_eq!(c.accuracy(), (c.tp + c.tn) as f64 / 40.0);
    }
}

#[test]
fn youden_confusion_reconstructs_its_roc_point() {
    for seed in 0..20 {
        let (s, y) = seeded_set(3000 + seed, 45);
        let rc = roc_curve(&s, &y).unwrap();
        let t = youden_threshold(&rc);
        let point = rc.points.iter().find(|q| q.threshold == t).expect("threshold is a curve point");
        let best = rc.points[1..].iter().map(|q| q.tpr - q.fpr).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(point.tpr - point.fpr, best);
        let c = confusion_matrix(&s, &y, t).unwrap();
        assert_eq!(c.tp as f64 / rc.positives as f64, point.tpr);
        assert_eq!(c.fp as f64 / rc.negatives as f64, point.fpr);
    }
}

proptest! {
    #[test]
    fn rank_invariance_and_reflection(raw in prop::collection::vec((0.0f64..1.0, any::<bool>()), 4..40)) {
        let mut labels: Vec<u8> = raw.iter().map(|r| u8::from(r.1)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores: Vec<f64> = raw.iter().map(|r| r.0).collect();
        let a = auc(&scores, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        prop_assert!((auc(&warped, &labels).unwrap() - a).abs() <= 1e-12);
        let distinct: std::collections::BTreeSet<u64> = scores.iter().map(|v| v.to_bits()).collect();
        if distinct.len() == scores.len() {
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            prop_assert!((auc(&neg, &labels).unwrap() + a - 1.0).abs() <= 1e-12);
        }
        let rc = roc_curve(&scores, &labels).unwrap();
        prop_assert!((auc_from_curve(&rc) - a).abs() == 0.0);
    }
}
