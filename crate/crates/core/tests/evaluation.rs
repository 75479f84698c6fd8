mod common;

use common::{double_loop_confusion, miou_from_counts, rng};
use ndarray::{Array2, Array4};
use proptest::prelude::*;
use rand::Rng;
use volcon::augment::{derive_rng, AugmentationPolicy};
use volcon::eval::*;
use volcon::models::*;
use volcon::nn::Parameterized;
use volcon::volume::*;

fn random_pair(r: &mut impl Rng, h: usize, w: usize, c: u32) -> (Array2<u32>, Array2<u32>) {
    let p = Array2::from_shape_fn((h, w), |_| r.random_range(0..c));
    let t = Array2::from_shape_fn((h, w), |_| r.random_range(0..c));
    (p, t)
}

fn pair_strategy() -> impl Strategy<Value = (Vec<(Array2<u32>, Array2<u32>)>, usize)> {
    (1usize..=16, 1usize..=16, 2u32..=5, 1usize..4, any::<u64>()).prop_map(|(h, w, c, n, seed)| {
        let mut r = rng(seed);
        ((0..n).map(|_| random_pair(&mut r, h, w, c)).collect(), c as usize)
    })
}

fn matrix(pairs: &[(Array2<u32>, Array2<u32>)], c: usize) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::new(c);
    for (p, t) in pairs {
        cm.update(p.view(), t.view()).unwrap();
    }
    cm
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matches_double_loop_oracle((pairs, c) in pair_strategy()) {
        let cm = matrix(&pairs, c);
        let oracle = double_loop_confusion(&pairs, c);
        for t in 0..c {
            for p in 0..c {
                prop_assert_eq!(cm.counts()[[t, p]], oracle[t][p]);
            }
        }
        let (ious, miou) = miou_from_counts(&oracle);
        prop_assert_eq!(cm.per_class_iou(), ious);
        prop_assert_eq!(cm.miou(), miou);
        let m = cm.miou().unwrap();
        prop_assert!((0.0..=1.0).contains(&m));
    }

    #[test]
    fn merging_equals_scoring_the_concatenation((pairs, c) in pair_strategy()) {
        let mut merged = ConfusionMatrix::new(c);
        for pair in &pairs {
            merged.merge(&matrix(std::slice::from_ref(pair), c)).unwrap();
        }
        let h = pairs[0].0.nrows();
        let views_p: Vec<_> = pairs.iter().map(|(p, _)| p.view()).collect();
        let views_t: Vec<_> = pairs.iter().map(|(_, t)| t.view()).collect();
        let cat_p = ndarray::concatenate(ndarray::Axis(1), &views_p).unwrap();
        let cat_t = ndarray::concatenate(ndarray::Axis(1), &views_t).unwrap();
        prop_assert_eq!(cat_p.nrows(), h);
        let mut whole = ConfusionMatrix::new(c);
        whole.update(cat_p.view(), cat_t.view()).unwrap();
        prop_assert_eq!(merged, whole);
    }

    #[test]
    fn pixel_order_does_not_matter((pairs, c) in pair_strategy(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let (p, t) = &pairs[0];
        let mut idx: Vec<usize> = (0..p.len()).collect();
        idx.shuffle(&mut rng(seed));
        let pf: Vec<u32> = p.iter().copied().collect();
        let tf: Vec<u32> = t.iter().copied().collect();
        let ps = Array2::from_shape_vec((1, idx.len()), idx.iter().map(|&i| pf[i]).collect()).unwrap();
        let ts = Array2::from_shape_vec((1, idx.len()), idx.iter().map(|&i| tf[i]).collect()).unwrap();
        prop_assert_eq!(matrix(&[(ps, ts)], c), matrix(&pairs[..1], c));
    }

    #[test]
    fn iou_is_invariant_to_duplicating_pixels((pairs, c) in pair_strategy()) {
        let once = matrix(&pairs, c);
        let doubled: Vec<_> = pairs.iter().chain(pairs.iter()).cloned().collect();
        prop_assert_eq!(matrix(&doubled, c).per_class_iou(), once.per_class_iou());
    }

    #[test]
    fn miou_is_one_iff_diagonal((pairs, c) in pair_strategy()) {
        let cm = matrix(&pairs, c);
        let off_diag: u64 = (0..c).flat_map(|i| (0..c).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|ix| cm.counts()[ix]).sum();
        prop_assert_eq!(cm.miou() == Some(1.0), off_diag == 0);
        let perfect = matrix(&pairs.iter().map(|(_, t)| (t.clone(), t.clone())).collect::<Vec<_>>(), c);
        prop_assert_eq!(perfect.miou(), Some(1.0));
    }
}

#[test]
fn random_eight_by_eight_three_classes() {
    let mut r = rng(8);
    let pair = random_pair(&mut r, 8, 8, 3);
    let oracle = double_loop_confusion(std::slice::from_ref(&pair), 3);
    let cm = update_confusion(ConfusionMatrix::new(3), pair.0.view(), pair.1.view()).unwrap();
    assert_eq!(cm.total(), 64);
    for t in 0..3 {
        for p in 0..3 {
            assert_eq!(cm.counts()[[t, p]], oracle[t][p]);
        }
    }
}

#[test]
fn perfect_splits_average_to_one() {
    let mut r = rng(1);
    let splits: Vec<Vec<_>> = (0..3)
        .map(|_| {
            (0..4)
                .map(|_| {
                    let (_, t) = random_pair(&mut r, 6, 5, 4);
                    (t.clone(), t)
                })
                .collect()
        })
        .collect();
    let (reports, avg) = score_splits(&splits, 4).unwrap();
    assert_eq!(avg, 1.0);
    assert!(reports.iter().all(|s| s.miou == 1.0 && s.pixel_count == 120));
}

/// Depth samples of class 0 at `(i, j)`: `z = d + 0.5` lies above the first boundary.
fn class0_depth(cfg: &SyntheticConfig, i: usize, j: usize) -> usize {
    let (ni, nc, nd) = cfg.dims;
    let shift = cfg.dip * (j as f64 - (nc as f64 - 1.0) / 2.0) + 0.5 * cfg.dip * (i as f64 - (ni as f64 - 1.0) / 2.0);
    let boundary = nd as f64 / 2.0 + shift;
    ((boundary - 0.5).ceil().max(0.0) as usize).min(nd)
}

#[test]
fn constant_predictor_scores_band_area_ratio() {
    let cfg = SyntheticConfig {
        layers: 2,
        dims: (8, 12, 32),
        dip: 0.7,
        noise: 0.0,
        seed: 3,
    };
    let (amp, labels) = generate_synthetic_volume::<f64>(&cfg).unwrap();
    let vols: Vec<TestVolume<f64>> = [0..6, 6..12]
        .into_iter()
        .map(|r| TestVolume {
            amplitude: amp.crossline_range(r.clone()).unwrap(),
            labels: labels.crossline_range(r).unwrap(),
        })
        .collect();
    let splits = build_test_splits(6, 6, 3).unwrap();

    let enc = EncoderSpec::tiny();
    let mut rng = derive_rng(0, 0);
    let mut model = SegmentationModel {
        encoder: Encoder::<f64>::new(&enc, &mut rng).unwrap(),
        head: SegmentationHead::new(&SegmentationHeadSpec::for_encoder(&enc, 2), &mut rng).unwrap(),
    };
    model.head.visit_mut("", &mut |name, p| {
        p.value.fill(0.0);
        if name.ends_with("bias") {
            p.value[[0]] = 10.0;
        }
    });

    let (reports, avg) = evaluate_splits(&model, &vols, &splits, &AugmentationPolicy::default()).unwrap();
    let per_split: Vec<f64> = splits
        .iter()
        .map(|s| {
            let class0: usize = s
                .crosslines
                .iter()
                .map(|&(v, k)| (0..8).map(|i| class0_depth(&cfg, i, v * 6 + k)).sum::<usize>())
                .sum();
            let total = s.crosslines.len() * 8 * 32;
            (class0 as f64 / total as f64) / 2.0
        })
        .collect();
    for (r, e) in reports.iter().zip(&per_split) {
        assert!((r.miou - e).abs() < 1e-12, "{} vs {e}", r.miou);
        assert_eq!(r.per_class_iou[1], Some(0.0));
    }
    let expected = per_split.iter().sum::<f64>() / 3.0;
    assert!((avg - expected).abs() < 1e-12);
    assert!(per_split.windows(2).any(|w| w[0] != w[1]), "dip should make split areas differ");
}

#[test]
fn empty_split_is_config_error() {
    let enc = EncoderSpec::tiny();
    let mut rng = derive_rng(0, 0);
    let model = SegmentationModel {
        encoder: Encoder::<f64>::new(&enc, &mut rng).unwrap(),
        head: SegmentationHead::new(&SegmentationHeadSpec::for_encoder(&enc, 2), &mut rng).unwrap(),
    };
    let split = SplitSpec { split_id: 0, crosslines: vec![] };
    let err = evaluate_splits(&model, &[], &[split], &AugmentationPolicy::default()).unwrap_err();
    assert!(matches!(err, volcon::Error::Config(_)));
    let _ = Array4::<f64>::zeros((1, 1, 1, 1));
}

#[test]
fn split_reports_serialize_absent_classes_as_null() {
    let cm = ConfusionMatrix::from_counts(ndarray::array![[3u64, 0, 0], [0, 0, 0], [1, 0, 2]]).unwrap();
    let r = SplitReport::from_confusion(0, &cm).unwrap();
    let json = serde_json::to_string(&r).unwrap();
    assert!(json.contains("null"));
    let back: SplitReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, r);
}
