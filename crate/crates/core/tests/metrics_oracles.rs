mod common;

use common::masks::*;
use common::rng;
use hiformer::metrics::{boundary, dice, hd95, percentile, squared_distance_transform, Confusion, MetricsAccumulator};
use proptest::prelude::*;

const H: usize = 16;
const W: usize = 16;

#[test]
fn counting_metrics_match_brute_force() {
    let mut r = rng(100);
    for _ in 0..200 {
        let (p, g) = (random_mask(H, W, &mut r), random_mask(H, W, &mut r));
        assert_eq!(dice(&p, &g), brute_dice(&p, &g));
        let (tp, fp, fn_, tn) = brute_counts(&p, &g);
        let c = Confusion::of(&p, &g);
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (tp, fp, fn_, tn));
        let ratio = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
        assert_eq!(c.sensitivity(), ratio(tp, tp + fn_));
        assert_eq!(c.specificity(), ratio(tn, tn + fp));
        assert_eq!(c.accuracy(), ratio(tp + tn, H * W));
        assert_eq!(c.iou(), ratio(tp, tp + fp + fn_));
    }
}

#[test]
fn hd95_matches_exhaustive_search() {
    let mut r = rng(101);
    for _ in 0..200 {
        let (p, g) = (random_mask(H, W, &mut r), random_mask(H, W, &mut r));
        let (got, want) = (hd95(&p, &g, H, W), brute_hd95(&p, &g, H, W));
        if want.is_finite() {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        } else {
            assert_eq!(got, want);
        }
    }
}

#[test]
fn hd95_edge_cases() {
    let empty = vec![false; H * W];
    let mut dot = empty.clone();
    dot[5 * W + 5] = true;
    assert_eq!(hd95(&empty, &empty, H, W), 0.0);
    assert_eq!(hd95(&dot, &empty, H, W), f64::INFINITY);
    assert_eq!(hd95(&dot, &dot, H, W), 0.0);
    let mut other = empty.clone();
    other[5 * W + 9] = true;
    assert_eq!(hd95(&dot, &other, H, W), 4.0);
    // the outside counts as background, so only the centre of a full 3x3
    // image is interior
    let b = boundary(&[true; 9], 3, 3);
    assert_eq!(b.iter().filter(|&&v| v).count(), 8);
    assert!(!b[4]);
}

#[test]
fn percentile_interpolates_linearly() {
    assert_eq!(percentile(&mut [3.0, 1.0, 2.0], 50.0), 2.0);
    assert_eq!(percentile(&mut [0.0, 10.0], 95.0), 9.5);
    assert_eq!(percentile(&mut [4.0], 95.0), 4.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distance_transform_is_exact(h in 1usize..10, w in 1usize..10, bits in proptest::collection::vec(any::<bool>(), 100)) {
        let sites: Vec<bool> = bits[..h * w].to_vec();
        let got = squared_distance_transform(&sites, h, w);
        for i in 0..h {
            for j in 0..w {
                let mut best = f64::INFINITY;
                for k in 0..h {
                    for l in 0..w {
                        if sites[k * w + l] {
                            best = best.min((i as f64 - k as f64).powi(2) + (j as f64 - l as f64).powi(2));
                        }
                    }
                }
                prop_assert_eq!(got[i * w + j], best);
            }
        }
    }

    #[test]
    fn dice_is_symmetric_and_bounded(seed in 0u64..1000) {
        let mut r = rng(seed);
        let (p, g) = (random_mask(H, W, &mut r), random_mask(H, W, &mut r));
        let d = dice(&p, &g);
        prop_assert_eq!(d, dice(&g, &p));
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(dice(&p, &p), 1.0);
        prop_assert_eq!(hd95(&p, &g, H, W), hd95(&g, &p, H, W));
    }
}

#[test]
fn accumulator_averages_samples_then_classes() {
    let mut acc = MetricsAccumulator::new(3);
    let gt = [0u8, 1, 1, 2];
    acc.add(&[0, 1, 1, 2], &gt, 2, 2);
    acc.add(&[0, 1, 0, 0], &gt, 2, 2);
    let r = acc.finish();
    assert_eq!(r.samples, 2);
    let classes: Vec<u8> = r.per_class.iter().map(|(k, _)| *k).collect();
    assert_eq!(classes, vec![1, 2]);
    // class 1: dice 1 and 2/3; class 2: dice 1 and 0
    assert!((r.per_class[0].1.dsc - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    assert!((r.per_class[1].1.dsc - 0.5).abs() < 1e-15);
    assert!((r.mean.dsc - ((5.0 / 6.0) + 0.5) / 2.0).abs() < 1e-15);
    // the empty class-2 prediction has no finite hd95
    assert_eq!(r.hd95_excluded, 1);
    assert!(r.mean.hd95.is_finite());
}

#[test]
fn single_class_reports_the_background() {
    let mut acc = MetricsAccumulator::new(1);
    acc.add(&[0, 0], &[0, 0], 1, 2);
    let r = acc.finish();
    assert_eq!(r.per_class.len(), 1);
    assert_eq!(r.per_class[0].0, 0);
    assert_eq!(r.mean.dsc, 1.0);
}
