mod common;

use common::rng;
use m2anet::metrics::{pr_curve, roc_auc, Confusion, MetricsReport};
use rand::Rng;

/// Probability that a random positive outscores a random negative, ties ½,
/// as an exact fraction `(2·wins + ties, 2·P·N)`.
fn concordance(scores: &[f64], labels: &[usize]) -> (u64, u64) {
    let mut num = 0u64;
    let mut pairs = 0u64;
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li == 1 && lj == 0 {
                pairs += 1;
                if scores[i] > scores[j] {
                    num += 2;
                } else if scores[i] == scores[j] {
                    num += 1;
                }
            }
        }
    }
    (num, 2 * pairs)
}

#[test]
fn auc_equals_pairwise_concordance() {
    let mut r = rng(31);
    for case in 0..50 {
        let n = r.gen_range(2..=200);
        let mut labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        // coarse scores make ties common
        let levels = if case % 2 == 0 { 5 } else { 1000 };
        let scores: Vec<f64> = (0..n)
            .map(|_| r.gen_range(0..levels) as f64 / levels as f64)
            .collect();
        let (num, den) = concordance(&scores, &labels);
        assert_eq!(
            roc_auc(&scores, &labels).unwrap().auc,
            num as f64 / den as f64,
            "case {case}"
        );
    }
}

#[test]
fn auc_examples() {
    assert_eq!(
        roc_auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap().auc,
        1.0
    );
    assert_eq!(
        roc_auc(&[0.5; 8], &[0, 1, 0, 1, 0, 1, 1, 0]).unwrap().auc,
        0.5
    );
    assert_eq!(
        roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap().auc,
        0.75
    );
}

#[test]
fn average_precision_examples() {
    assert_eq!(
        pr_curve(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0])
            .unwrap()
            .average_precision,
        1.0
    );
    assert_eq!(
        pr_curve(&[0.9, 0.3, 0.2, 0.1], &[1, 0, 0, 0])
            .unwrap()
            .average_precision,
        1.0
    );
    let all_positive = pr_curve(&[1.0; 6], &[1, 0, 1, 0, 1, 0]).unwrap();
    assert_eq!(all_positive.points.last(), Some(&(1.0, 0.5)));
}

#[test]
fn kappa_hand_case_and_rates() {
    let c = Confusion {
        tp: 45,
        fn_: 5,
        fp: 10,
        tn: 40,
    };
    assert_eq!(c.kappa(), 0.70);
    let c = Confusion {
        tp: 40,
        fn_: 10,
        fp: 5,
        tn: 45,
    };
    assert_eq!((c.tpr(), c.tnr(), c.accuracy()), (0.80, 0.90, 0.85));
}

#[test]
fn kappa_is_zero_under_independence() {
    // rows ∝ (a, b), columns ∝ (c, d): every cell is a product of marginals
    let mut r = rng(5);
    for _ in 0..20 {
        let (a, b, c, d) = (
            r.gen_range(1..20u64),
            r.gen_range(1..20u64),
            r.gen_range(1..20u64),
            r.gen_range(1..20u64),
        );
        let m = Confusion {
            tp: a * c,
            fn_: a * d,
            fp: b * c,
            tn: b * d,
        };
        assert_eq!(m.kappa(), 0.0, "{m:?}");
    }
}

#[test]
fn perfect_agreement() {
    let labels = [0, 1, 1, 0, 1];
    let r = MetricsReport::from_scores(&labels, &[0.1, 0.9, 0.8, 0.2, 0.7], &labels).unwrap();
    assert_eq!(
        (r.accuracy, r.kappa, r.auc(), r.average_precision()),
        (1.0, 1.0, Some(1.0), Some(1.0))
    );
}

#[test]
fn single_class_report_omits_curves() {
    let r = MetricsReport::from_scores(&[1, 1], &[0.6, 0.7], &[1, 1]).unwrap();
    assert!(r.roc.is_none());
    assert!(r.pr.is_some());
    let dir = tempfile::tempdir().unwrap();
    r.write_curves(dir.path()).unwrap();
    assert!(!dir.path().join("roc.csv").exists());
    assert!(dir.path().join("pr.csv").exists());
}

#[test]
fn csv_outputs() {
    let labels = [0, 1, 1, 0];
    let r = MetricsReport::from_scores(&[0, 1, 0, 0], &[0.1, 0.9, 0.4, 0.3], &labels).unwrap();
    let dir = tempfile::tempdir().unwrap();
    r.write_csv(&dir.path().join("m.csv")).unwrap();
    r.write_curves(dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
    assert!(text.starts_with("tp,fp,fn,tn,accuracy"));
    let roc = std::fs::read_to_string(dir.path().join("roc.csv")).unwrap();
    assert_eq!(roc.lines().next(), Some("fpr,tpr"));
    assert_eq!(roc.lines().count(), 1 + r.roc.unwrap().points.len());
}
