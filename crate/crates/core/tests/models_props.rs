use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsefed_core::models::{
    empirical_coord_lipschitz, softmax_closed_form_gradient, Batch, GradientOracle, ModelKind,
};
use sparsefed_core::numkit::ParamVector;

fn random_batch(rng: &mut ChaCha8Rng, n: usize, m: usize, c: usize) -> Batch {
    let feats: Vec<f64> = (0..n * m).map(|_| rng.random::<f64>()).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    Batch::new(feats, labels, m).unwrap()
}

fn random_oracle(rng: &mut ChaCha8Rng, kind: ModelKind, scale: f64) -> GradientOracle {
    let p: Vec<f64> = (0..kind.param_count())
        .map(|_| scale * (2.0 * rng.random::<f64>() - 1.0))
        .collect();
    GradientOracle::new(kind, ParamVector::new(p).unwrap()).unwrap()
}

fn finite_difference_check(kind: ModelKind, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    for _ in 0..100 {
        let model = random_oracle(&mut rng, kind, 1.0);
        let n = rng.random_range(1..6);
        let batch = random_batch(&mut rng, n, kind.inputs(), kind.classes());
        let g = model.gradient(&batch).unwrap();
        for i in 0..model.dim() {
            let mut plus = model.params().clone().into_vec();
            let mut minus = plus.clone();
            plus[i] += h;
            minus[i] -= h;
            let lp = model.with_params(ParamVector::new(plus).unwrap()).unwrap().loss(&batch).unwrap();
            let lm = model.with_params(ParamVector::new(minus).unwrap()).unwrap().loss(&batch).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            // relative error, with an absolute floor for near-zero coordinates
            let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-3);
            assert!(err <= 1e-4, "coord {i}: analytic {} vs fd {fd}", g[i]);
        }
    }
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    finite_difference_check(ModelKind::SoftmaxLinear { inputs: 4, classes: 3 }, 1);
}

#[test]
fn mlp_gradient_matches_finite_differences() {
    finite_difference_check(ModelKind::Mlp { inputs: 3, hidden: 5, classes: 4 }, 2);
}

#[test]
fn closed_form_matches_backprop() {
    let kind = ModelKind::SoftmaxLinear { inputs: 5, classes: 4 };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let model = random_oracle(&mut rng, kind, 2.0);
        let batch = random_batch(&mut rng, 6, 5, 4);
        let mut avg = vec![0.0; model.dim()];
        for (x, y) in batch.iter() {
            let g = softmax_closed_form_gradient(&model, x, y).unwrap();
            avg.iter_mut().zip(g.as_slice()).for_each(|(a, b)| *a += b / 6.0);
        }
        let g = model.gradient(&batch).unwrap();
        for (a, b) in avg.iter().zip(g.as_slice()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn forward_matches_log_sum_exp_reference() {
    let (m, c) = (6, 5);
    let kind = ModelKind::SoftmaxLinear { inputs: m, classes: c };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let model = random_oracle(&mut rng, kind, 5.0);
        let x: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
        let theta = model.params().as_slice();
        let z: Vec<f64> = (0..c)
            .map(|i| {
                let mut s = 0.0;
                for j in 0..m {
                    s += theta[i * m + j] * x[j];
                }
                s
            })
            .collect();
        let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut acc = 0.0;
        for zi in &z {
            acc += (zi - zmax).exp();
        }
        let lse = zmax + acc.ln();
        let p = model.forward(&x).unwrap();
        for (pi, zi) in p.iter().zip(&z) {
            assert!((pi - (zi - lse).exp()).abs() <= 1e-12);
        }
    }
}

/// tau = 2, batch 1, two points: four SGD steps written out.
#[test]
fn local_update_unrolled_four_steps() {
    let kind = ModelKind::SoftmaxLinear { inputs: 2, classes: 3 };
    let data = Batch::new(vec![0.2, 0.9, 0.7, 0.1], vec![2, 0], 2).unwrap();
    let start = GradientOracle::new(kind, ParamVector::new(vec![0.1, -0.2, 0.3, 0.0, -0.1, 0.4]).unwrap()).unwrap();
    let lr = 0.3;
    let mut theta = start.params().clone().into_vec();
    for (x, y) in [(&[0.2, 0.9], 2), (&[0.7, 0.1], 0), (&[0.2, 0.9], 2), (&[0.7, 0.1], 0)] {
        let cur = start.with_params(ParamVector::new(theta.clone()).unwrap()).unwrap();
        let g = softmax_closed_form_gradient(&cur, x, y).unwrap();
        for (t, gi) in theta.iter_mut().zip(g.as_slice()) {
            *t -= lr * gi;
        }
    }
    let expected: Vec<f64> = theta.iter().zip(start.params().as_slice()).map(|(a, b)| a - b).collect();
    let got = start.local_update(&data, 2, lr, 1, f64::INFINITY).unwrap();
    for (a, b) in got.as_slice().iter().zip(&expected) {
        assert!((a - b).abs() <= 1e-15);
    }
    assert_eq!(start.params().as_slice(), &[0.1, -0.2, 0.3, 0.0, -0.1, 0.4]);
}

#[test]
fn lipschitz_ratio_near_quarter_at_half_probability() {
    let kind = ModelKind::SoftmaxLinear { inputs: 1, classes: 2 };
    let batch = Batch::new(vec![1.0], vec![0], 1).unwrap();
    let eps = 1e-6;
    let a = GradientOracle::zeros(kind).unwrap();
    let b = GradientOracle::new(kind, ParamVector::new(vec![eps, 0.0]).unwrap()).unwrap();
    let ga = a.gradient(&batch).unwrap();
    let gb = b.gradient(&batch).unwrap();
    let ratio = (ga[0] - gb[0]).abs() / eps;
    // the difference quotient carries ~1e-10 of rounding
    assert!((ratio - 0.25).abs() < 1e-6, "{ratio}");
}

#[test]
fn lipschitz_single_class_is_zero() {
    let kind = ModelKind::SoftmaxLinear { inputs: 3, classes: 1 };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = random_batch(&mut rng, 10, 3, 1);
    assert_eq!(empirical_coord_lipschitz(kind, &batch, 100, 9).unwrap(), 0.0);
}

proptest! {
    #[test]
    fn forward_is_simplex(seed in any::<u64>(), scale in 0.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for kind in [
            ModelKind::SoftmaxLinear { inputs: 4, classes: 6 },
            ModelKind::Mlp { inputs: 4, hidden: 3, classes: 6 },
        ] {
            let model = random_oracle(&mut rng, kind, scale);
            let x: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
            let p = model.forward(&x).unwrap();
            prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn lipschitz_estimate_below_quarter(seed in any::<u64>(), m in 1usize..6, c in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = random_batch(&mut rng, 12, m, c);
        let kind = ModelKind::SoftmaxLinear { inputs: m, classes: c };
        prop_assert!(empirical_coord_lipschitz(kind, &batch, 50, seed).unwrap() <= 0.25 + 1e-9);
    }

    #[test]
    fn local_update_within_clip(seed in any::<u64>(), clip in 0.0f64..2.0, tau in 1usize..4) {
        let kind = ModelKind::SoftmaxLinear { inputs: 3, classes: 3 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_oracle(&mut rng, kind, 1.0);
        let batch = random_batch(&mut rng, 7, 3, 3);
        let u = model.local_update(&batch, tau, 5.0, 3, clip).unwrap();
        prop_assert!(u.l2_norm() <= clip + 1e-12);
    }
}
