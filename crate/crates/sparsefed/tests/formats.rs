use std::path::Path;

use proptest::prelude::*;
use sparsefed::config::parse_config;
use sparsefed::io::{load_csv, load_idx, LoadError};
use sparsefed::record::{read_rounds, write_rounds};
use sparsefed_core::simulator::RoundRow;

fn idx(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    dims.iter().for_each(|d| out.extend(d.to_be_bytes()));
    out.extend(payload);
    out
}

fn four_images(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let images: Vec<u8> = (0..16).map(|i| (i * 17) as u8).collect();
    let (ip, lp) = (dir.join("img.idx"), dir.join("lab.idx"));
    std::fs::write(&ip, idx(0x803, &[4, 2, 2], &images)).unwrap();
    std::fs::write(&lp, idx(0x801, &[4], &[3, 1, 4, 1])).unwrap();
    (ip, lp)
}

#[test]
fn idx_four_image_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    let (ip, lp) = four_images(tmp.path());
    let b = load_idx(&ip, &lp).unwrap();
    assert_eq!(b.len(), 4);
    assert_eq!(b.dim(), 4);
    assert_eq!(b.labels(), &[3, 1, 4, 1]);
    let expect: Vec<f64> = (0..16).map(|i| (i * 17) as f64 / 255.0).collect();
    for i in 0..4 {
        assert_eq!(b.features(i), &expect[4 * i..4 * i + 4]);
    }
}

#[test]
fn idx_wrong_magic_reports_offset_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let (ip, lp) = four_images(tmp.path());
    match load_idx(&lp, &ip) {
        Err(LoadError::Format(e)) => {
            assert_eq!(e.offset, 0);
            assert!(e.message.contains("magic"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn idx_count_mismatch_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let (ip, lp) = four_images(tmp.path());
    std::fs::write(&lp, idx(0x801, &[3], &[3, 1, 4])).unwrap();
    match load_idx(&ip, &lp) {
        Err(LoadError::Format(e)) => assert_eq!(e.offset, 4),
        other => panic!("{other:?}"),
    }
}

#[test]
fn idx_truncated_payload() {
    let tmp = tempfile::tempdir().unwrap();
    let (ip, lp) = four_images(tmp.path());
    let mut bytes = std::fs::read(&ip).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&ip, &bytes).unwrap();
    match load_idx(&ip, &lp) {
        Err(LoadError::Format(e)) => assert_eq!(e.offset, bytes.len() as u64),
        other => panic!("{other:?}"),
    }
}

#[test]
fn csv_loader_reads_and_validates() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("d.csv");
    std::fs::write(&p, "feature_0,feature_1,label\n0.5,1,2\n0,0.25,0\n").unwrap();
    let b = load_csv(&p).unwrap();
    assert_eq!((b.len(), b.dim()), (2, 2));
    assert_eq!((b.features(0), b.features(1)), (&[0.5, 1.0][..], &[0.0, 0.25][..]));
    assert_eq!(b.labels(), &[2, 0]);

    std::fs::write(&p, "x,y,label\n0,0,0\n").unwrap();
    assert!(load_csv(&p).unwrap_err().to_string().contains("header"));
    std::fs::write(&p, "feature_0,label\n0.5,1\nabc,0\n").unwrap();
    let e = load_csv(&p).unwrap_err().to_string();
    assert!(e.contains("line 3") && e.contains("byte offset 22"), "{e}");
    std::fs::write(&p, "feature_0,label\n0.5,-1\n").unwrap();
    assert!(load_csv(&p).is_err());
}

#[test]
fn csv_dataset_drives_a_run() {
    let tmp = tempfile::tempdir().unwrap();
    let mut train = String::from("feature_0,feature_1,label\n");
    for i in 0..60 {
        let c = i % 2;
        train.push_str(&format!("{},{},{c}\n", c as f64 * 0.8 + 0.1, (i % 7) as f64 / 7.0));
    }
    std::fs::write(tmp.path().join("train.csv"), &train).unwrap();
    std::fs::write(tmp.path().join("test.csv"), &train).unwrap();
    let cfg = parse_config(
        "[data]\nsource = \"csv\"\ntrain = \"train.csv\"\ntest = \"test.csv\"\nn_devices = 5\naux_size = 2\n",
        &[],
    )
    .unwrap();
    let text = cfg.to_toml();
    std::fs::write(tmp.path().join("c.toml"), text).unwrap();
    let cfg = sparsefed::config::load_config(&tmp.path().join("c.toml"), &[]).unwrap();
    let fed = cfg.federation().unwrap();
    assert_eq!(fed.devices.len(), 5);
    assert_eq!(fed.initial.dim(), 4);
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![any::<f64>().prop_filter("finite", |x| x.is_finite()), Just(0.0), Just(-0.0), Just(5e-324)]
}

fn row() -> impl Strategy<Value = RoundRow> {
    (
        (1usize..10_000, finite(), 0.0..=1.0f64, 0.0..=1.0f64, proptest::option::of(finite())),
        (finite(), finite(), prop_oneof![finite(), Just(f64::INFINITY)], 0usize..100),
        (
            proptest::option::of(finite()),
            proptest::option::of(finite()),
            proptest::option::of(finite()),
            proptest::option::of(finite()),
        ),
    )
        .prop_map(|((round, lambda, test_acc, attack_acc, train_loss), (a, b, c, attackers), (l1, w, lf, gap))| {
            RoundRow {
                round,
                lambda,
                test_acc,
                attack_acc,
                train_loss,
                norm_min: a,
                norm_mean: b,
                norm_max: c,
                attackers,
                l1_drift: l1,
                w_l1: w,
                loss_fraction: lf,
                sparsity_gap: gap,
            }
        })
}

fn bits(r: &RoundRow) -> Vec<Option<u64>> {
    let f = |x: f64| Some(x.to_bits());
    let o = |x: Option<f64>| x.map(f64::to_bits);
    vec![
        f(r.lambda),
        f(r.test_acc),
        f(r.attack_acc),
        o(r.train_loss),
        f(r.norm_min),
        f(r.norm_mean),
        f(r.norm_max),
        o(r.l1_drift),
        o(r.w_l1),
        o(r.loss_fraction),
        o(r.sparsity_gap),
    ]
}

proptest! {
    #[test]
    fn rounds_csv_roundtrips_losslessly(rows in proptest::collection::vec(row(), 0..20)) {
        let back = read_rounds(&write_rounds(&rows), Path::new("r.csv")).unwrap();
        prop_assert_eq!(back.len(), rows.len());
        for (a, b) in rows.iter().zip(&back) {
            prop_assert_eq!((a.round, a.attackers), (b.round, b.attackers));
            prop_assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn normalization_is_idempotent(
        seed in 0u64..=i64::MAX as u64,
        t in 1usize..500,
        k in 1usize..64,
        lr in 0.001f64..10.0,
        sampling in proptest::option::of(0u64..=i64::MAX as u64),
    ) {
        let mut text = format!(
            "seed = {seed}\n[protocol]\nT = {t}\nlocal_lr = {lr:?}\n[defense]\nrule = \"sparsefed\"\nk = {k}\n"
        );
        if let Some(s) = sampling {
            text.push_str(&format!("[seeds]\nsampling = {s}\n"));
        }
        let once = parse_config(&text, &[]).unwrap().normalized();
        let twice = parse_config(&once.to_toml(), &[]).unwrap();
        prop_assert_eq!(&twice, &once);
        prop_assert_eq!(twice.normalized(), once.clone());
        prop_assert_eq!(twice.hash(), once.hash());
        if let Some(s) = sampling {
            prop_assert_eq!(once.seeds.sampling, Some(s));
        }
    }
}
