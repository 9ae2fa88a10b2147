mod common;

use common::{labels, scores_from_counts, CRAFTED};
use dfen_core::metrics::{metrics, predict, Confusion};
use dfen_core::Tensor;
use proptest::prelude::*;

#[test]
fn crafted_pairs_match_hand_counts() {
    for (i, case) in CRAFTED.iter().enumerate() {
        let (pred, target) = (labels(case.pred), labels(case.target));
        let conf = Confusion::from_labels(&pred, &target, case.classes).unwrap();
        let mut mean = [0.0; 4];
        for (c, &counts) in case.counts.iter().enumerate() {
            assert_eq!([conf.tp[c], conf.fp[c], conf.fn_[c], conf.tn[c]], counts, "case {i} class {c}");
            let s = conf.class_scores(c);
            let want = scores_from_counts(counts);
            assert_eq!([s.dsc, s.se, s.sp, s.acc], want, "case {i} class {c}");
            for (m, w) in mean.iter_mut().zip(want) {
                *m += w / case.classes as f64;
            }
        }
        let got = metrics(&pred, &target, case.classes).unwrap();
        assert_eq!([got.dsc, got.se, got.sp, got.acc], mean, "case {i}");
    }
}

#[test]
fn crafted_scores_spot_values() {
    // Blob shifted down one row: foreground DSC 4/8, background DSC 20/24.
    let s = metrics(&labels(CRAFTED[4].pred), &labels(CRAFTED[4].target), 2).unwrap();
    assert_eq!(s.dsc, 0.5 / 2.0 + (20.0 / 24.0) / 2.0);
    // Nothing to find and nothing found scores perfectly.
    let s = metrics(&labels(CRAFTED[2].pred), &labels(CRAFTED[2].target), 2).unwrap();
    assert_eq!([s.dsc, s.se, s.sp, s.acc], [1.0; 4]);
}

#[test]
fn pooled_counts_add_up() {
    let mut pooled = Confusion::new(3);
    for case in CRAFTED.iter().filter(|c| c.classes == 3) {
        pooled += &Confusion::from_labels(&labels(case.pred), &labels(case.target), 3).unwrap();
    }
    assert_eq!(pooled.tp, vec![7 + 11 + 8, 3 + 3, 3]);
    assert_eq!(pooled.tn, vec![6 + 3 + 8, 11 + 11 + 8, 12 + 16 + 8]);
}

#[test]
fn predict_breaks_ties_low() {
    let logits = Tensor::new(&[3, 1, 4], vec![0.0, 1.0, 2.0, 5.0, 0.0, 3.0, 2.0, 5.0, 0.0, 1.0, 7.0, 5.0]).unwrap();
    assert_eq!(predict(&logits), vec![0, 1, 2, 0]);
}

proptest! {
    #[test]
    fn counts_partition_every_pixel(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..64)) {
        let (pred, target): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let conf = Confusion::from_labels(&pred, &target, 4).unwrap();
        for c in 0..4 {
            prop_assert_eq!(conf.tp[c] + conf.fp[c] + conf.fn_[c] + conf.tn[c], pred.len() as u64);
        }
        let s = metrics(&pred, &target, 4).unwrap();
        for v in [s.dsc, s.se, s.sp, s.acc] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let same = metrics(&target, &target, 4).unwrap();
        prop_assert_eq!([same.dsc, same.se, same.sp, same.acc], [1.0; 4]);
    }
}
