mod common;

use common::{brute_force_supcon, labels_with_a_pair, nt_xent, rng, unit_rows};
use ndarray::{Array2, Axis};
use proptest::prelude::*;
use volcon::loss::*;
use volcon::Error;

fn batch(z: Array2<f64>, labels: Vec<usize>, tau: f64) -> EmbeddingBatch<f64> {
    EmbeddingBatch::new(z, labels, tau).unwrap()
}

fn case() -> impl Strategy<Value = (Array2<f64>, Vec<usize>, f64)> {
    (2usize..=8, 2usize..=4, prop::sample::select(vec![0.07, 0.5, 1.0]), any::<u64>()).prop_map(|(b, d, tau, s)| {
        let mut r = rng(s);
        let z = unit_rows(&mut r, b, d);
        let labels = labels_with_a_pair(&mut r, b);
        (z, labels, tau)
    })
}

/// Anchor `i`'s term with a single positive `p`.
fn anchor_term(z: &Array2<f64>, i: usize, p: usize, tau: f64) -> f64 {
    let s: Vec<f64> = (0..z.nrows()).map(|a| z.row(i).dot(&z.row(a)) / tau).collect();
    let lse = (0..z.nrows())
        .filter(|&a| a != i)
        .map(|a| s[a].exp())
        .sum::<f64>()
        .ln();
    lse - s[p]
}

fn slerp(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    let cos = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0);
    let omega = cos.acos();
    if omega < 1e-9 {
        return a.to_vec();
    }
    let (wa, wb) = (((1.0 - t) * omega).sin() / omega.sin(), (t * omega).sin() / omega.sin());
    a.iter().zip(b).map(|(x, y)| wa * x + wb * y).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn vectorized_matches_triple_loop((z, labels, tau) in case()) {
        let expected = brute_force_supcon(&z, &labels, tau).unwrap();
        let got = supcon_loss(&batch(z, labels, tau)).unwrap();
        prop_assert!((got.value - expected).abs() < 1e-6, "{} vs {}", got.value, expected);
    }

    #[test]
    fn used_plus_skipped_is_batch_size((z, labels, tau) in case()) {
        let b = labels.len();
        let r = supcon_loss(&batch(z, labels, tau)).unwrap();
        prop_assert_eq!(r.num_anchors_used + r.num_anchors_skipped, b);
        prop_assert!(r.value.is_finite());
        prop_assert!(r.value >= -1e-12);
    }

    #[test]
    fn permutation_equivariance((z, labels, tau) in case(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let b = labels.len();
        let mut perm: Vec<usize> = (0..b).collect();
        perm.shuffle(&mut rng(seed));
        let zp = z.select(Axis(0), &perm);
        let lp: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let (r, g) = supcon_value_and_gradient(&batch(z, labels, tau), Reduction::Mean).unwrap();
        let (rp, gp) = supcon_value_and_gradient(&batch(zp, lp, tau), Reduction::Mean).unwrap();
        prop_assert!((r.value - rp.value).abs() < 1e-12);
        for (k, &src) in perm.iter().enumerate() {
            for d in 0..g.ncols() {
                prop_assert!((gp[[k, d]] - g[[src, d]]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn simclr_is_supcon_with_instance_labels(k in 1usize..=6, d in 2usize..=8, seed in any::<u64>(), tau in prop::sample::select(vec![0.07, 0.2, 1.0])) {
        let z = unit_rows(&mut rng(seed), 2 * k, d);
        let a = simclr_loss(z.clone(), tau).unwrap();
        let b = supcon_loss(&batch(z.clone(), instance_labels(2 * k).unwrap(), tau)).unwrap();
        prop_assert_eq!(a.value.to_bits(), b.value.to_bits());
        prop_assert!((a.value - nt_xent(&z, tau)).abs() < 1e-6);
    }

    #[test]
    fn simclr_ignores_source_order(k in 2usize..=5, seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let z = unit_rows(&mut rng(seed), 2 * k, 4);
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(&mut rng(seed ^ 1));
        let rows: Vec<usize> = order.iter().flat_map(|&j| [2 * j, 2 * j + 1]).collect();
        let a = simclr_loss(z.clone(), 0.1).unwrap().value;
        let b = simclr_loss(z.select(Axis(0), &rows), 0.1).unwrap().value;
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn all_same_label_is_non_negative(b in 2usize..=8, d in 2usize..=4, seed in any::<u64>()) {
        let z = unit_rows(&mut rng(seed), b, d);
        let r = supcon_loss(&batch(z, vec![3; b], 0.07)).unwrap();
        prop_assert!(r.value >= 0.0);
    }

    #[test]
    fn single_positive_moving_closer_never_raises_its_anchor_term(b in 3usize..=8, d in 2usize..=4, seed in any::<u64>(), t in 0.05f64..1.0) {
        let mut z = unit_rows(&mut rng(seed), b, d);
        let tau = 0.5;
        let before = anchor_term(&z, 0, 1, tau);
        let moved = slerp(z.row(1).as_slice().unwrap(), z.row(0).as_slice().unwrap(), t);
        z.row_mut(1).assign(&ndarray::Array1::from(moved));
        let after = anchor_term(&z, 0, 1, tau);
        prop_assert!(after <= before + 1e-12, "{after} > {before}");
        let mut labels: Vec<usize> = (0..b).map(|k| k + 10).collect();
        labels[0] = 0;
        labels[1] = 0;
        let r = supcon_loss_with(&batch(z.clone(), labels, tau), Reduction::Sum).unwrap();
        prop_assert!((r.value - (anchor_term(&z, 0, 1, tau) + anchor_term(&z, 1, 0, tau))).abs() < 1e-9);
    }
}

#[test]
fn multi_positive_term_can_rise_when_a_dominant_positive_moves_closer() {
    let deg = |a: f64| [a.to_radians().cos(), a.to_radians().sin()];
    let build = |p1: f64| {
        let rows: Vec<f64> = [0.0, p1, 120.0, 180.0].iter().flat_map(|&a| deg(a)).collect();
        Array2::from_shape_vec((4, 2), rows).unwrap()
    };
    let labels = vec![0, 0, 0, 1];
    let term0 = |z: &Array2<f64>| {
        let tau = 0.1;
        let s: Vec<f64> = (0..4).map(|a| z.row(0).dot(&z.row(a)) / tau).collect();
        let lse = (1..4).map(|a| s[a].exp()).sum::<f64>().ln();
        lse - (s[1] + s[2]) / 2.0
    };
    let far = build(30.0);
    let near = build(5.0);
    assert!(term0(&near) > term0(&far));
    let l_far = supcon_loss(&batch(far, labels.clone(), 0.1)).unwrap().value;
    assert!(l_far.is_finite());
}

#[test]
fn analytic_gradient_matches_central_differences_on_six_by_four() {
    let h = 1e-5;
    for seed in 0..20 {
        let mut r = rng(seed);
        let z = unit_rows(&mut r, 6, 4);
        let labels = labels_with_a_pair(&mut r, 6);
        let tau = 0.5;
        let g = supcon_gradient(&batch(z.clone(), labels.clone(), tau)).unwrap();
        for i in 0..6 {
            for d in 0..4 {
                let mut p = z.clone();
                p[[i, d]] += h;
                let mut m = z.clone();
                m[[i, d]] -= h;
                let fd = (brute_force_supcon(&p, &labels, tau).unwrap() - brute_force_supcon(&m, &labels, tau).unwrap())
                    / (2.0 * h);
                let rel = (fd - g[[i, d]]).abs() / fd.abs().max(g[[i, d]].abs()).max(1e-8);
                assert!(rel < 1e-4 || (fd - g[[i, d]]).abs() < 1e-8, "seed {seed} ({i},{d}): {fd} vs {}", g[[i, d]]);
            }
        }
    }
}

#[test]
fn dividing_tau_equals_scaling_similarities() {
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let z = unit_rows(&mut r, 6, 3);
        let labels = labels_with_a_pair(&mut r, 6);
        let (tau, c) = (0.4, 2.5);
        let (res, grad) = supcon_value_and_gradient(&batch(z.clone(), labels.clone(), tau / c), Reduction::Mean).unwrap();
        let scaled = z.dot(&z.t()) * (c / tau);
        let (res_s, dlogits) = supcon_from_logits(scaled.view(), &labels, Reduction::Mean).unwrap();
        let grad_s = (&dlogits + &dlogits.t()).dot(&z) * (c / tau);
        assert!((res.value - res_s.value).abs() < 1e-12);
        assert!(grad.iter().zip(grad_s.iter()).all(|(a, b)| (a - b).abs() < 1e-10));
    }
}

#[test]
fn distinct_single_view_labels_are_degenerate() {
    let z = unit_rows(&mut rng(5), 5, 3);
    let err = supcon_loss(&batch(z, vec![0, 1, 2, 3, 4], 0.07)).unwrap_err();
    assert!(matches!(err, Error::DegenerateBatch(_)));
    assert_eq!(err.exit_code(), 5);
}

#[test]
fn projected_embeddings_feed_the_loss() {
    use volcon::augment::derive_rng;
    use volcon::models::{ProjectionHead, ProjectionHeadSpec};
    let spec = ProjectionHeadSpec { in_dim: 16, hidden_dim: 16, out_dim: 8 };
    let mut head = ProjectionHead::<f32>::new(&spec, &mut derive_rng(1, 1)).unwrap();
    let pooled = Array2::from_shape_fn((6, 16), |(i, j)| ((i * 16 + j) as f32 * 0.37).sin());
    let z = head.project(&pooled).unwrap();
    let b = EmbeddingBatch::new(z, vec![0, 0, 1, 1, 2, 2], 0.07f32).unwrap();
    assert!(supcon_loss(&b).unwrap().value.is_finite());
}
