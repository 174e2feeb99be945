use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sparsefed_core::attacks::{
    adaptive_topk_attack, byzantine_update, craft, model_replacement, targeted_pgd, AttackKind,
    AttackSpec, RoundView,
};
use sparsefed_core::data::AuxiliarySet;
use sparsefed_core::defenses::ClipMode;
use sparsefed_core::models::{softmax_closed_form_gradient, Batch, GradientOracle, ModelKind};
use sparsefed_core::numkit::{l2_clip, ParamVector};

fn pv(v: Vec<f64>) -> ParamVector {
    ParamVector::new(v).unwrap()
}

fn kind() -> ModelKind {
    ModelKind::SoftmaxLinear { inputs: 2, classes: 3 }
}

fn aux() -> AuxiliarySet {
    AuxiliarySet {
        examples: Batch::new(vec![0.9, 0.2, 0.1, 0.8, 0.5, 0.5], vec![1, 2, 0], 2).unwrap(),
        true_labels: vec![0, 1, 2],
        source_indices: vec![0, 1, 2],
    }
}

fn view(model: &GradientOracle, lambda_t: f64) -> RoundView<'_> {
    RoundView { model, round: 1, lambda_t, topk_indices: None }
}

fn mean_grad(theta: &[f64], aux: &AuxiliarySet) -> Vec<f64> {
    let m = GradientOracle::new(kind(), pv(theta.to_vec())).unwrap();
    let mut g = vec![0.0; theta.len()];
    for (x, y) in aux.examples.iter() {
        let gi = softmax_closed_form_gradient(&m, x, y).unwrap();
        g.iter_mut().zip(gi.as_slice()).for_each(|(a, b)| *a += b / aux.len() as f64);
    }
    g
}

/// PGD written out: each epoch takes one full-batch step, optionally masks,
/// then projects the delta from the start point.
fn unrolled(start: &[f64], step: f64, epochs: usize, bound: f64, mask: Option<&[usize]>) -> Vec<f64> {
    let mut theta = start.to_vec();
    let mut delta = vec![0.0; start.len()];
    for _ in 0..epochs {
        let g = mean_grad(&theta, &aux());
        for i in 0..theta.len() {
            delta[i] = theta[i] - step * g[i] - start[i];
        }
        if let Some(keep) = mask {
            for (i, v) in delta.iter_mut().enumerate() {
                if !keep.contains(&i) {
                    *v = 0.0;
                }
            }
        }
        delta = l2_clip(&pv(delta), bound).unwrap().into_vec();
        theta = start.iter().zip(&delta).map(|(a, b)| a + b).collect();
    }
    delta
}

fn spec(epochs: usize, bound: f64) -> AttackSpec {
    AttackSpec {
        pgd_epochs: epochs,
        batch: 3,
        lr: 0.1,
        boost: 4.0,
        ..AttackSpec::pgd(ClipMode::Fixed(bound))
    }
}

const START: [f64; 6] = [0.3, -0.1, 0.0, 0.2, -0.2, 0.1];

#[test]
fn pgd_two_epochs_matches_unrolled_trace() {
    let model = GradientOracle::new(kind(), pv(START.to_vec())).unwrap();
    for bound in [0.05, 0.3, 10.0] {
        let got = targeted_pgd(&view(&model, 1.0), &spec(2, bound), &aux()).unwrap();
        let want = unrolled(&START, 0.4, 2, bound, None);
        for (a, b) in got.as_slice().iter().zip(&want) {
            assert!((a - b).abs() <= 1e-14, "bound {bound}: {a} vs {b}");
        }
    }
}

#[test]
fn masked_pgd_matches_unrolled_trace() {
    let model = GradientOracle::new(kind(), pv(START.to_vec())).unwrap();
    let keep = [0, 3, 5];
    let v = RoundView { topk_indices: Some(&keep), ..view(&model, 1.0) };
    let got = adaptive_topk_attack(&v, &spec(3, 0.2), &aux()).unwrap();
    let want = unrolled(&START, 0.4, 3, 0.2, Some(&keep));
    for (a, b) in got.as_slice().iter().zip(&want) {
        assert!((a - b).abs() <= 1e-14);
    }
    for i in [1, 2, 4] {
        assert_eq!(got[i], 0.0);
    }
}

#[test]
fn adaptive_with_every_coordinate_is_pgd() {
    let model = GradientOracle::new(kind(), pv(START.to_vec())).unwrap();
    let all: Vec<usize> = (0..6).collect();
    let v = RoundView { topk_indices: Some(&all), ..view(&model, 1.0) };
    assert_eq!(
        adaptive_topk_attack(&v, &spec(3, 0.5), &aux()).unwrap(),
        targeted_pgd(&view(&model, 1.0), &spec(3, 0.5), &aux()).unwrap()
    );
}

/// Aux features vanish on input 1, so the gradient has no mass on that
/// column and a mask restricted to it leaves nothing.
#[test]
fn adaptive_disjoint_from_gradient_support_is_zero() {
    let aux = AuxiliarySet {
        examples: Batch::new(vec![0.9, 0.0, 0.4, 0.0], vec![1, 2], 2).unwrap(),
        true_labels: vec![0, 0],
        source_indices: vec![0, 1],
    };
    let model = GradientOracle::new(kind(), pv(START.to_vec())).unwrap();
    let keep = [1, 3, 5];
    let v = RoundView { topk_indices: Some(&keep), ..view(&model, 1.0) };
    assert!(adaptive_topk_attack(&v, &spec(2, 1.0), &aux).unwrap().is_zero());
}

#[test]
fn pgd_saturated_model_gives_zero_delta() {
    // logits differ by far more than the softmax resolves, flipped labels
    // already have probability exactly 1
    let k = ModelKind::SoftmaxLinear { inputs: 1, classes: 2 };
    let model = GradientOracle::new(k, pv(vec![-1000.0, 1000.0])).unwrap();
    let aux = AuxiliarySet {
        examples: Batch::new(vec![1.0, 0.5], vec![1, 1], 1).unwrap(),
        true_labels: vec![0, 0],
        source_indices: vec![0, 1],
    };
    let v = RoundView { model: &model, round: 1, lambda_t: 1.0, topk_indices: None };
    let s = AttackSpec { batch: 2, ..AttackSpec::pgd(ClipMode::Fixed(1.0)) };
    assert!(targeted_pgd(&v, &s, &aux).unwrap().is_zero());
}

/// One attacker among n = 4, benign updates summing to zero, no clip:
/// the averaged server step lands exactly on the target.
#[test]
fn model_replacement_lands_on_target() {
    let k = ModelKind::SoftmaxLinear { inputs: 1, classes: 2 };
    let model = GradientOracle::new(k, pv(vec![0.5, -1.5])).unwrap();
    let target = pv(vec![2.0, 0.25]);
    let lambda = 0.5;
    let n = 4.0;
    let s = AttackSpec { kind: AttackKind::ModelReplacement, ..AttackSpec::pgd(ClipMode::None) };
    let v = RoundView { model: &model, round: 1, lambda_t: lambda, topk_indices: None };
    let u = model_replacement(&v, &s, &target, 1.0 / n).unwrap();
    let benign = [pv(vec![0.3, -0.2]), pv(vec![-0.3, 0.2]), pv(vec![0.0, 0.0])];
    let mut sum = u.clone();
    benign.iter().for_each(|b| sum.add_assign(b).unwrap());
    let mut theta = model.params().clone();
    theta.axpy(lambda / n, &sum).unwrap();
    for (a, b) in theta.as_slice().iter().zip(target.as_slice()) {
        assert!((a - b).abs() <= 1e-12);
    }
    let same = model_replacement(&v, &s, model.params(), 1.0 / n).unwrap();
    assert!(same.is_zero());
    let clipped = AttackSpec { known_clip: ClipMode::Fixed(0.1), ..s };
    let c = model_replacement(&v, &clipped, &target, 1.0 / n).unwrap();
    assert!((c.l2_norm() - 0.1).abs() <= 1e-12);
}

#[test]
fn byzantine_directions_look_uniform() {
    let model = GradientOracle::zeros(kind()).unwrap();
    let s = AttackSpec { kind: AttackKind::Byzantine, ..AttackSpec::pgd(ClipMode::Fixed(1.0)) };
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let trials = 10_000;
    let mut sum = ParamVector::zeros(6);
    for _ in 0..trials {
        sum.add_assign(&byzantine_update(&view(&model, 1.0), &s, &mut rng).unwrap()).unwrap();
    }
    sum.scale(1.0 / trials as f64).unwrap();
    assert!(sum.l2_norm() < 5.0 / (trials as f64).sqrt());
}

proptest! {
    #[test]
    fn every_attack_respects_known_bound(
        seed in any::<u64>(),
        bound in 0.01f64..3.0,
        lambda in 0.05f64..2.0,
        adaptive in any::<bool>(),
        theta in prop::collection::vec(-2.0f64..2.0, 6),
    ) {
        let model = GradientOracle::new(kind(), pv(theta)).unwrap();
        let keep = [0usize, 2, 4];
        for kind in [AttackKind::TargetedPgd, AttackKind::Byzantine, AttackKind::ModelReplacement, AttackKind::AdaptiveTopk] {
            let clip = if adaptive { ClipMode::Adaptive(bound) } else { ClipMode::Fixed(bound) };
            let s = AttackSpec { kind, ..AttackSpec::pgd(clip) };
            let v = RoundView {
                model: &model, round: 3, lambda_t: lambda,
                topk_indices: (kind == AttackKind::AdaptiveTopk).then_some(&keep[..]),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = craft(&v, &s, &aux(), 0.1, &mut rng).unwrap();
            let limit = if adaptive { bound * lambda } else { bound };
            prop_assert!(u.l2_norm() <= limit + 1e-12);
        }
    }
}
