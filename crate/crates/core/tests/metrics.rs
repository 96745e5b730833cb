use proptest::prelude::*;
use wap_core::metrics::{confusion, macro_f1, ua, wa, ConfusionMatrix, Scores};
use wap_core::Error;

fn cm(rows: &[&[u64]]) -> ConfusionMatrix {
    ConfusionMatrix::from_counts(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
}

#[test]
fn fixture_matrices() {
    let perfect = cm(&[&[5, 0], &[0, 5]]);
    assert_eq!(Scores::of(&perfect).unwrap(), Scores { ua: 1.0, wa: 1.0, f1: 1.0 });

    // Supports 9 and 1, everything predicted as class 0.
    let skewed = cm(&[&[9, 0], &[1, 0]]);
    assert_eq!(wa(&skewed).unwrap(), 0.9);
    assert_eq!(ua(&skewed).unwrap(), 0.5);
    // F1 of class 0 = 2*9 / (9 + 10) = 18/19; class 1 has 0/0 -> 0.
    assert!((macro_f1(&skewed).unwrap() - 9.0 / 19.0).abs() < 1e-12);
    assert!((skewed.f1(0) - 0.9474).abs() < 1e-4);
    assert_eq!(skewed.f1(1), 0.0);

    let flat = cm(&[&[1, 1], &[1, 1]]);
    assert_eq!(Scores::of(&flat).unwrap(), Scores { ua: 0.5, wa: 0.5, f1: 0.5 });
}

#[test]
fn counting_examples() {
    let m = confusion(&[0, 1], &[1, 1], 2).unwrap();
    assert_eq!(m.counts(), &[vec![0, 1], vec![0, 1]]);
    let truth: Vec<usize> = (0..10).map(|i| i % 3).collect();
    let m = confusion(&truth, &truth, 3).unwrap();
    assert_eq!(m.trace(), 10);
    assert_eq!(m.total(), 10);
    let empty = confusion(&[], &[], 4).unwrap();
    assert_eq!(empty.total(), 0);
    assert!(matches!(ua(&empty), Err(Error::EmptyConfusion)));
    assert!(matches!(confusion(&[0, 4], &[0, 0], 4), Err(Error::LabelOutOfRange { .. })));
    assert!(confusion(&[0], &[0, 1], 4).is_err());
}

#[test]
fn classes_without_support_score_zero_and_are_flagged() {
    let m = cm(&[&[3, 1, 0], &[0, 0, 0], &[1, 0, 2]]);
    assert_eq!(m.unsupported_classes(), vec![1]);
    assert_eq!(m.recall(1), 0.0);
    assert!((ua(&m).unwrap() - (0.75 + 0.0 + 2.0 / 3.0) / 3.0).abs() < 1e-15);
}

#[test]
fn display_is_a_tab_grid() {
    let text = cm(&[&[1, 2], &[3, 4]]).to_string();
    assert!(text.contains("1\t2"));
    assert!(text.contains("3\t4"));
}

fn labels(c: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    prop::collection::vec((0..c, 0..c), 1..120).prop_map(|v| v.into_iter().unzip())
}

proptest! {
    #[test]
    fn metric_invariants((truth, pred) in labels(4)) {
        let m = confusion(&truth, &pred, 4).unwrap();
        let s = Scores::of(&m).unwrap();
        for v in [s.ua, s.wa, s.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let correct = truth.iter().zip(&pred).filter(|(a, b)| a == b).count();
        prop_assert!((s.wa - correct as f64 / truth.len() as f64).abs() < 1e-15);
        let weighted: f64 = (0..4).map(|c| m.support(c) as f64 / m.total() as f64 * m.recall(c)).sum();
        prop_assert!((s.wa - weighted).abs() < 1e-12);

        // Perfect predictions: every present class scores 1, absent ones 0.
        let p = Scores::of(&confusion(&truth, &truth, 4).unwrap()).unwrap();
        let present = (0..4).filter(|&c| truth.contains(&c)).count() as f64;
        prop_assert_eq!(p.wa, 1.0);
        prop_assert!((p.ua - present / 4.0).abs() < 1e-15);
        prop_assert!((p.f1 - present / 4.0).abs() < 1e-15);
    }

    #[test]
    fn ua_ignores_class_duplication((truth, pred) in labels(3), class in 0usize..3, k in 2usize..5) {
        let base = ua(&confusion(&truth, &pred, 3).unwrap()).unwrap();
        let (mut t2, mut p2) = (truth.clone(), pred.clone());
        for (t, p) in truth.iter().zip(&pred) {
            if *t == class {
                for _ in 1..k {
                    t2.push(*t);
                    p2.push(*p);
                }
            }
        }
        let dup = ua(&confusion(&t2, &p2, 3).unwrap()).unwrap();
        prop_assert!((base - dup).abs() < 1e-12);
    }

    #[test]
    fn merging_adds_counts((a, b) in labels(3), (c, d) in labels(3)) {
        let mut m = confusion(&a, &b, 3).unwrap();
        m.merge(&confusion(&c, &d, 3).unwrap()).unwrap();
        let all = confusion(&[a, c].concat(), &[b, d].concat(), 3).unwrap();
        prop_assert_eq!(m, all);
    }
}

#[test]
fn mean_is_arithmetic() {
    let s = [Scores { ua: 0.5, wa: 0.25, f1: 1.0 }, Scores { ua: 1.0, wa: 0.75, f1: 0.0 }];
    assert_eq!(Scores::mean(&s), Scores { ua: 0.75, wa: 0.5, f1: 0.5 });
}
