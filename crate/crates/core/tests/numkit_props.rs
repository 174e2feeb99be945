use proptest::prelude::*;
use sparsefed_core::numkit::{l2_clip, top_k, CountSketch, ParamVector, SketchShape, SparseUpdate};

fn pv(v: Vec<f64>) -> ParamVector {
    ParamVector::new(v).unwrap()
}

fn vec_strategy(max_d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-100.0f64..100.0, 1..=max_d)
}

/// Every k-subset of `0..d`, as bitmasks.
fn subsets(d: usize, k: usize) -> impl Iterator<Item = u32> {
    (0u32..(1 << d)).filter(move |m| m.count_ones() as usize == k)
}

proptest! {
    #[test]
    fn clip_bounded_and_idempotent(v in vec_strategy(20), bound in 0.0f64..50.0) {
        let once = l2_clip(&pv(v), bound).unwrap();
        prop_assert!(once.l2_norm() <= bound + 1e-12);
        let twice = l2_clip(&once, bound).unwrap();
        for (a, b) in once.as_slice().iter().zip(twice.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn topk_beats_every_subset(v in vec_strategy(12), kf in 0.0f64..1.0) {
        let d = v.len();
        let k = 1 + ((d - 1) as f64 * kf) as usize;
        let s = top_k(&pv(v.clone()), k).unwrap();
        prop_assert_eq!(s.len(), k);
        let best = subsets(d, k)
            .map(|m| (0..d).filter(|i| m >> i & 1 == 1).map(|i| v[i].abs()).sum::<f64>())
            .fold(0.0, f64::max);
        prop_assert!(s.l1_norm() >= best);
    }

    #[test]
    fn topk_repeatable_and_resparsifies(v in vec_strategy(30), kf in 0.0f64..1.0) {
        let d = v.len();
        let k = 1 + ((d - 1) as f64 * kf) as usize;
        let x = pv(v);
        let a = top_k(&x, k).unwrap();
        prop_assert_eq!(&a, &top_k(&x, k).unwrap());
        let mut idx = a.indices().to_vec();
        idx.sort_unstable();
        idx.dedup();
        prop_assert_eq!(idx.len(), a.len());
        let dense = a.densify();
        let nonzero = dense.as_slice().iter().filter(|v| **v != 0.0).count();
        let again = top_k(&dense, nonzero.max(1)).unwrap().densify();
        prop_assert_eq!(again, dense);
    }

    #[test]
    fn sketch_linear_on_integers(
        pair in (1usize..40).prop_flat_map(|d| (
            prop::collection::vec(-1000i32..1000, d),
            prop::collection::vec(-1000i32..1000, d),
        )),
        rows in 1usize..6,
        cols in 1usize..20,
        seed in any::<u64>(),
    ) {
        let (x, y) = pair;
        let shape = SketchShape { rows, cols, seed };
        let xs = pv(x.iter().map(|&v| v as f64).collect());
        let ys = pv(y.iter().map(|&v| v as f64).collect());
        let mut sum = CountSketch::sketch(&xs, shape).unwrap();
        sum.add_assign(&CountSketch::sketch(&ys, shape).unwrap()).unwrap();
        let mut joint = xs.clone();
        joint.add_assign(&ys).unwrap();
        let direct = CountSketch::sketch(&joint, shape).unwrap();
        prop_assert_eq!(sum.table(), direct.table());
    }

    #[test]
    fn sketch_linear_on_reals(
        pair in (1usize..40).prop_flat_map(|d| (
            prop::collection::vec(-10.0f64..10.0, d),
            prop::collection::vec(-10.0f64..10.0, d),
        )),
        seed in any::<u64>(),
    ) {
        let (x, y) = pair;
        let shape = SketchShape { rows: 3, cols: 7, seed };
        let (xs, ys) = (pv(x), pv(y));
        let mut sum = CountSketch::sketch(&xs, shape).unwrap();
        sum.add_assign(&CountSketch::sketch(&ys, shape).unwrap()).unwrap();
        let mut joint = xs.clone();
        joint.add_assign(&ys).unwrap();
        let direct = CountSketch::sketch(&joint, shape).unwrap();
        for (a, b) in sum.table().iter().zip(direct.table()) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }
}

#[test]
fn sparse_densify_roundtrip() {
    assert!(SparseUpdate::new(vec![4, 1], vec![-2.0, 0.5], 6).is_err());
    let s = SparseUpdate::new(vec![1, 4], vec![0.5, -2.0], 6).unwrap();
    let back = top_k(&s.densify(), 2).unwrap();
    assert_eq!(back.densify(), s.densify());
}

#[test]
fn zero_sketch_table() {
    for seed in 0..20 {
        let shape = SketchShape { rows: 4, cols: 9, seed };
        assert!(CountSketch::sketch(&ParamVector::zeros(30), shape).unwrap().is_zero());
    }
}

/// One planted coordinate in a wide sketch: the estimate is exact unless
/// another coordinate shares its bucket, in which case the error equals
/// the colliding mass in the median row.
#[test]
fn single_heavy_coordinate_recovered_up_to_collisions() {
    let d = 50;
    let shape = SketchShape { rows: 5, cols: 64, seed: 11 };
    let mut v = vec![0.0; d];
    v[17] = 3.0;
    for (i, x) in v.iter_mut().enumerate() {
        if i != 17 {
            *x = 0.001 * (i as f64 - 25.0);
        }
    }
    let x = pv(v.clone());
    let s = CountSketch::sketch(&x, shape).unwrap();
    // brute-force the per-row collision error
    let mut row_est: Vec<f64> = (0..shape.rows)
        .map(|r| {
            let b = s.bucket(r, 17);
            let mass: f64 = (0..d)
                .filter(|&j| s.bucket(r, j) == b)
                .map(|j| s.sign(r, j) * v[j])
                .sum();
            s.sign(r, 17) * mass
        })
        .collect();
    row_est.sort_by(f64::total_cmp);
    let median = row_est[shape.rows / 2];
    assert!((s.estimate(17) - median).abs() < 1e-15);
    let out = s.unsketch_topk(1, d).unwrap();
    assert_eq!(out.indices(), &[17]);
    assert!((out.values()[0] - 3.0).abs() <= (median - 3.0).abs() + 1e-15);
}
