use std::f64::consts::PI;
use std::fs;

use proptest::prelude::*;

use vitae::data::{
    batches, gen_synthetic, load_idx, rasterize, subset, write_idx, Dataset, Normalization, ShapeKind, SyntheticSpec,
};
use vitae::{Error, Tensor};

/// Big-endian IDX writer kept independent of the library's own.
fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for d in dims {
        out.extend(d.to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

#[test]
fn loads_handcrafted_idx_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let pixels: Vec<u8> = (0..4 * 3 * 2).map(|i| (i * 11) as u8).collect();
    let img = dir.path().join("images.idx");
    let lbl = dir.path().join("labels.idx");
    fs::write(&img, idx_bytes(0x0803, &[4, 3, 2], &pixels)).unwrap();
    fs::write(&lbl, idx_bytes(0x0801, &[4], &[2, 0, 1, 2])).unwrap();

    let ds = load_idx(&img, &lbl).unwrap();
    assert_eq!(ds.len(), 4);
    assert_eq!(ds.images.shape(), &[4, 1, 3, 2]);
    assert_eq!(ds.labels, vec![2, 0, 1, 2]);
    assert_eq!(ds.num_classes(), 3);
    for (v, p) in ds.images.data().iter().zip(&pixels) {
        assert_eq!(*v, *p as f32 / 255.0);
    }
}

#[test]
fn idx_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    fs::write(p("img"), idx_bytes(0x0803, &[2, 2, 2], &[0; 8])).unwrap();
    fs::write(p("lbl3"), idx_bytes(0x0801, &[3], &[0, 1, 0])).unwrap();
    fs::write(p("lbl2"), idx_bytes(0x0801, &[2], &[0, 1])).unwrap();
    fs::write(p("bad_magic"), idx_bytes(0x0802, &[2, 2, 2], &[0; 8])).unwrap();
    fs::write(p("short"), idx_bytes(0x0803, &[2, 2, 2], &[0; 7])).unwrap();
    fs::write(p("empty_img"), idx_bytes(0x0803, &[0, 2, 2], &[])).unwrap();
    fs::write(p("empty_lbl"), idx_bytes(0x0801, &[0], &[])).unwrap();

    assert!(matches!(load_idx(p("img"), p("lbl3")), Err(Error::Format(_))));
    assert!(matches!(load_idx(p("bad_magic"), p("lbl2")), Err(Error::Format(_))));
    assert!(matches!(load_idx(p("short"), p("lbl2")), Err(Error::Format(_))));
    assert!(matches!(load_idx(p("empty_img"), p("empty_lbl")), Err(Error::Data(_))));
    assert!(matches!(load_idx(p("missing"), p("lbl2")), Err(Error::Io { .. })));
}

#[test]
fn synthetic_round_trips_through_idx() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen_synthetic(&SyntheticSpec::new(16, 4, 3)).unwrap();
    let (img, lbl) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
    write_idx(&ds, &img, &lbl).unwrap();
    let back = load_idx(&img, &lbl).unwrap();
    assert_eq!(back.labels, ds.labels);
    let err = back.images.max_abs_diff(&ds.images);
    assert!(err <= 0.5 / 255.0 + 1e-7, "{err}");
}

#[test]
fn synthetic_is_deterministic_and_balanced() {
    let spec = SyntheticSpec::new(32, 7, 11);
    let a = gen_synthetic(&spec).unwrap();
    let b = gen_synthetic(&spec).unwrap();
    let bits = |d: &Dataset| d.images.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.labels, b.labels);
    assert_eq!(a.class_histogram(), vec![7, 7, 7]);
    assert_eq!(a.class_names, vec!["disk", "square", "triangle"]);
    assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let c = gen_synthetic(&SyntheticSpec { seed: 12, ..spec }).unwrap();
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn disk_area_matches_closed_form() {
    let canvas = 64;
    let size = 0.9 * canvas as f64;
    let cov = rasterize(ShapeKind::Disk, canvas, 32.0, 32.0, size);
    let expected = PI * (size / 2.0).powi(2);
    let sum: f64 = cov.iter().map(|&v| v as f64).sum();
    let count = cov.iter().filter(|&&v| v >= 0.5).count() as f64;
    assert!((sum - expected).abs() / expected < 0.05, "{sum} vs {expected}");
    assert!((count - expected).abs() / expected < 0.05, "{count} vs {expected}");

    let spec = SyntheticSpec {
        scale_range: (0.8999, 0.9),
        noise_std: 0.0,
        ..SyntheticSpec::new(canvas, 3, 5)
    };
    let ds = gen_synthetic(&spec).unwrap();
    for i in (0..ds.len()).filter(|&i| ds.labels[i] == 0) {
        let img = &ds.images.data()[i * canvas * canvas..(i + 1) * canvas * canvas];
        let fg = img.iter().filter(|&&v| v >= 0.5).count() as f64;
        assert!((fg - expected).abs() / expected < 0.05, "sample {i}: {fg}");
    }
}

#[test]
fn other_shapes_have_expected_areas() {
    let s = 40.0;
    let area = |k| rasterize(k, 64, 32.0, 32.0, s).iter().map(|&v| v as f64).sum::<f64>();
    assert!((area(ShapeKind::Square) - s * s).abs() / (s * s) < 0.05);
    assert!((area(ShapeKind::Triangle) - s * s / 2.0).abs() / (s * s / 2.0) < 0.05);
}

#[test]
fn synthetic_spec_validation() {
    let too_small = SyntheticSpec {
        scale_range: (0.05, 0.5),
        ..SyntheticSpec::new(16, 1, 0)
    };
    assert!(matches!(gen_synthetic(&too_small), Err(Error::Config(_))));
    let inverted = SyntheticSpec {
        scale_range: (0.6, 0.5),
        ..SyntheticSpec::new(16, 1, 0)
    };
    assert!(matches!(gen_synthetic(&inverted), Err(Error::Config(_))));
}

#[test]
fn dataset_invariants() {
    let img = Tensor::<f32>::zeros(&[2, 1, 4, 4]);
    assert!(matches!(Dataset::new(img.clone(), vec![0], vec!["a".into()]), Err(Error::Data(_))));
    assert!(matches!(Dataset::new(img.clone(), vec![0, 2], vec!["a".into(), "b".into()]), Err(Error::Data(_))));
    assert!(Dataset::new(img, vec![0, 1], vec!["a".into(), "b".into()]).is_ok());
}

#[test]
fn batch_plan_examples() {
    let sizes: Vec<usize> = batches(10, 4, 0, 0, 1.0).unwrap().iter().map(|b| b.indices.len()).collect();
    assert_eq!(sizes, vec![4, 4, 2]);

    let members = |epoch| {
        let mut m: Vec<usize> = batches(10, 4, 7, epoch, 0.2).unwrap().iter().flat_map(|b| b.indices.clone()).collect();
        m.sort();
        m
    };
    assert_eq!(members(0).len(), 2);
    for e in 1..5 {
        assert_eq!(members(e), members(0));
    }
    assert_eq!(subset(10, 7, 0.2).unwrap().len(), 2);

    let order = |epoch| batches(100, 8, 3, epoch, 0.5).unwrap().iter().flat_map(|b| b.indices.clone()).collect::<Vec<_>>();
    assert_ne!(order(0), order(1));
    let (mut a, mut b) = (order(0), order(1));
    a.sort();
    b.sort();
    assert_eq!(a, b);

    assert!(matches!(batches(10, 4, 0, 0, 0.05), Err(Error::Data(_))));
    assert!(matches!(batches(10, 0, 0, 0, 1.0), Err(Error::Config(_))));
}

proptest! {
    #[test]
    fn subset_membership_is_epoch_independent(n in 1usize..200, frac in 0.01f64..=1.0, seed in any::<u64>(), e in 0usize..50) {
        let want = (frac * n as f64).floor() as usize;
        prop_assume!(want > 0);
        let sorted = |epoch| {
            let mut m: Vec<usize> = batches(n, 7, seed, epoch, frac).unwrap().iter().flat_map(|b| b.indices.clone()).collect();
            m.sort();
            m
        };
        let first = sorted(0);
        prop_assert_eq!(first.len(), want);
        prop_assert_eq!(sorted(e), first);
    }

    #[test]
    fn normalization_is_invertible(seed in any::<u64>(), c in 1usize..4) {
        let x = Tensor::from_fn(&[3, c, 5, 4], |i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f32 / 999.0);
        let norm = Normalization::fit(&x);
        let back = norm.denormalize(&norm.normalize(&x).unwrap()).unwrap();
        prop_assert!(back.max_abs_diff(&x) < 1e-6);
    }
}
