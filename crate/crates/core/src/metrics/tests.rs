use super::*;
use crate::model::{init_model, ArchConfig};
use crate::phantom::{generate_phantom_client, AppearanceProfile, SplitCounts};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> BinaryMask {
    let mut m = BinaryMask::empty(h, w);
    for &(r, c) in on {
        m.set(r, c, true);
    }
    m
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-12)
}

#[test]
fn dice_examples() {
    let e = BinaryMask::empty(4, 4);
    assert_eq!(dice(&e, &e).unwrap(), 1.0);
    let a = mask(4, 4, &[(0, 0), (0, 1)]);
    let b = mask(4, 4, &[(0, 1), (1, 1)]);
    assert_eq!(dice(&a, &a).unwrap(), 1.0);
    assert_eq!(dice(&a, &b).unwrap(), 0.5);
    assert_eq!(dice(&a, &e).unwrap(), 0.0);
    assert!(matches!(dice(&a, &BinaryMask::empty(3, 4)), Err(Error::Shape(_))));
}

#[test]
fn ssim_identical_and_constant_images() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<f64> = (0..24 * 24).map(|_| rng.random()).collect();
    assert!(rel_close(ssim(&x, &x, 24, 24).unwrap(), 1.0, 1e-9));

    // constant images a and b: (2ab + C1) / (a² + b² + C1)
    let (a, b) = (0.3, 0.7);
    let c1 = (0.01f64).powi(2);
    let want = (2.0 * a * b + c1) / (a * a + b * b + c1);
    let got = ssim(&vec![a; 16 * 16], &vec![b; 16 * 16], 16, 16).unwrap();
    assert!(rel_close(got, want, 1e-6), "{got} vs {want}");

    assert!(matches!(ssim(&x[..100], &x[..100], 10, 10), Err(Error::Config(_))));
    assert!(matches!(ssim(&x, &x[..10], 24, 24), Err(Error::Shape(_))));
}

#[test]
fn ssim_drops_under_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x: Vec<f64> = (0..32 * 32).map(|i| (i % 32) as f64 / 31.0).collect();
    let y: Vec<f64> = x.iter().map(|v| v + rng.random_range(-0.2..0.2)).collect();
    assert!(ssim(&x, &y, 32, 32).unwrap() < 0.9);
}

#[test]
fn relative_improvement_examples() {
    assert!(rel_close(relative_improvement(0.42, 0.30).unwrap(), 0.4, 1e-9));
    assert_eq!(relative_improvement(0.5, 0.5).unwrap(), 0.0);
    assert!(matches!(relative_improvement(0.5, 0.0), Err(Error::Input(_))));
}

/// Brute-force D: maximum ECDF gap over every observed value.
fn ks_oracle(a: &[f64], b: &[f64]) -> f64 {
    let ecdf = |s: &[f64], v: f64| s.iter().filter(|&&x| x <= v).count() as f64 / s.len() as f64;
    a.iter()
        .chain(b)
        .map(|&v| (ecdf(a, v) - ecdf(b, v)).abs())
        .fold(0.0, f64::max)
}

#[test]
fn ks_statistic_examples() {
    let r = ks_test(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
    assert_eq!(r.statistic, 0.0);
    assert_eq!(r.p_value, 1.0);
    let r = ks_test(&[0.0, 1.0], &[5.0, 6.0, 7.0]).unwrap();
    assert_eq!(r.statistic, 1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let a: Vec<f64> = (0..40).map(|_| rng.random_range(0.0f64..10.0).floor()).collect();
        let b: Vec<f64> = (0..25).map(|_| rng.random_range(1.0f64..12.0).floor()).collect();
        let r = ks_test(&a, &b).unwrap();
        assert!(rel_close(r.statistic, ks_oracle(&a, &b), 1e-12));
        assert!((0.0..=1.0).contains(&r.p_value));
    }
    assert!(matches!(ks_test::<f64>(&[], &[1.0]), Err(Error::Input(_))));
}

#[test]
fn kolmogorov_tail_reference_values() {
    // tabulated Q(λ): Q(1.36) ≈ 0.0494, Q(1.63) ≈ 0.0098, Q(0.5) ≈ 0.9639
    assert!((kolmogorov_sf(1.36) - 0.0494).abs() < 5e-4);
    assert!((kolmogorov_sf(1.63) - 0.0098).abs() < 5e-4);
    assert!((kolmogorov_sf(0.5) - 0.9639).abs() < 5e-4);
    // both series agree at the switch point
    let (lo, hi) = (kolmogorov_sf(1.18 - 1e-9), kolmogorov_sf(1.18));
    assert!((lo - hi).abs() < 1e-9);
}

#[test]
fn cosine_examples() {
    assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]), Some(0.0));
    assert!(rel_close(
        cosine_similarity(&[1.0, 2.0], &[2.0, 4.0]).unwrap(),
        1.0,
        1e-12
    ));
    assert!(rel_close(
        cosine_similarity(&[1.0, 2.0], &[-1.0, -2.0]).unwrap(),
        -1.0,
        1e-12
    ));
    assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]), None);
}

fn rec(slice: &str, kind: EmbeddingKind, v: Vec<f64>) -> EmbeddingRecord {
    EmbeddingRecord {
        client_id: "c0".into(),
        slice_id: slice.into(),
        kind,
        vector: v,
    }
}

#[test]
fn similarity_summary_averages_and_excludes_zero_vectors() {
    use EmbeddingKind::*;
    let records = vec![
        rec("a", Shape, vec![1.0, 0.0]),
        rec("a", Appearance, vec![0.0, 1.0]),
        rec("a", ShapeGamma, vec![1.0, 0.0]),
        rec("b", Shape, vec![1.0, 1.0]),
        rec("b", Appearance, vec![0.0, 0.0]),
        rec("b", ShapeGamma, vec![1.0, 0.0]),
    ];
    let s = shape_appearance_similarity(&records).unwrap();
    assert_eq!(s.sas, 0.0);
    assert!(rel_close(s.scs, (1.0 + 0.5f64.sqrt()) / 2.0, 1e-12));
    assert_eq!(s.excluded, 1);

    assert!(shape_appearance_similarity(&records[..2]).is_err());
}

#[test]
fn stratified_dice_matches_group_by() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let results: Vec<(BinaryMask, BinaryMask)> = (0..30)
        .map(|_| {
            let gen = |rng: &mut ChaCha8Rng, p: f64| {
                BinaryMask::from_vec(8, 8, (0..64).map(|_| rng.random::<f64>() < p).collect()).unwrap()
            };
            let p = rng.random_range(0.0..0.5);
            (gen(&mut rng, 0.2), gen(&mut rng, p))
        })
        .collect();
    let thresholds = [0.0, 20.0, 60.0];
    let got = stratified_dice(&results, &thresholds, 4.0).unwrap();
    for (i, b) in got.iter().enumerate() {
        let hi = thresholds.get(i + 1).copied().unwrap_or(f64::INFINITY);
        let mut vals = Vec::new();
        for (p, g) in &results {
            let area = g.count() as f64 * 4.0;
            if area >= thresholds[i] && area < hi {
                vals.push(dice(p, g).unwrap());
            }
        }
        match (&b.dice, vals.is_empty()) {
            (None, true) => {}
            (Some(s), false) => {
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                assert_eq!(s.n, vals.len());
                assert!(rel_close(s.mean, mean, 1e-12));
            }
            other => panic!("bucket {i} mismatch: {other:?}"),
        }
    }
    assert!(stratified_dice(&results, &[5.0, 1.0], 4.0).is_err());
}

#[test]
fn embeddings_export_round_trips_through_csv() {
    let arch = ArchConfig {
        base_filters: 4,
        max_filters: 8,
        bottleneck_channels: 8,
        input_size: (32, 32),
        ..ArchConfig::default()
    };
    let params = init_model::<f32>(&arch, 1, true).unwrap();
    let counts = SplitCounts {
        train: 1,
        val: 1,
        test: 2,
    };
    let data = generate_phantom_client::<f32>("c0", 3, &AppearanceProfile::default(), counts, (32, 32)).unwrap();
    let recs = export_embeddings(&params, &[data], (0.5, 2.0), 7).unwrap();
    assert_eq!(recs.len(), 6);
    assert!(recs.iter().all(|r| r.vector.len() == 4 * 2 * 2));
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("emb.csv");
    write_embeddings_csv(&recs, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("client_id,slice_id,kind,v0,"));
    assert_eq!(read_embeddings_csv(&path).unwrap(), recs);
    assert_eq!(export_embeddings(&params, &[], (0.5, 2.0), 7).unwrap(), vec![]);
}

proptest! {
    #[test]
    fn dice_is_symmetric_and_bounded(
        a in proptest::collection::vec(any::<bool>(), 36),
        b in proptest::collection::vec(any::<bool>(), 36),
    ) {
        let (a, b) = (BinaryMask::from_vec(6, 6, a).unwrap(), BinaryMask::from_vec(6, 6, b).unwrap());
        let d = dice(&a, &b).unwrap();
        prop_assert_eq!(d, dice(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn cosine_is_scale_invariant(
        a in proptest::collection::vec(-5.0f64..5.0, 6),
        b in proptest::collection::vec(-5.0f64..5.0, 6),
        s in 0.1f64..10.0,
    ) {
        if let (Some(c1), Some(c2)) = (
            cosine_similarity(&a, &b),
            cosine_similarity(&a.iter().map(|v| v * s).collect::<Vec<_>>(), &b),
        ) {
            prop_assert!((c1 - c2).abs() < 1e-9);
            prop_assert!(c1.abs() <= 1.0 + 1e-12);
        }
    }
}

#[test]
fn dice_partial_overlap() {
    let p = mask(4, 4, &[(0, 0), (0, 1)]);
    let g = mask(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
    assert!(rel_close(dice(&p, &g).unwrap(), 2.0 / 3.0, 1e-12));
}

#[test]
fn dice_matches_pixel_count_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let pa = rng.random_range(0.0..0.6);
        let pb = rng.random_range(0.0..0.6);
        let a: Vec<bool> = (0..256).map(|_| rng.random::<f64>() < pa).collect();
        let b: Vec<bool> = (0..256).map(|_| rng.random::<f64>() < pb).collect();
        let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
        for i in 0..256 {
            na += a[i] as usize;
            nb += b[i] as usize;
            inter += (a[i] && b[i]) as usize;
        }
        let want = if na + nb == 0 {
            1.0
        } else {
            2.0 * inter as f64 / (na + nb) as f64
        };
        let got = dice(
            &BinaryMask::from_vec(16, 16, a).unwrap(),
            &BinaryMask::from_vec(16, 16, b).unwrap(),
        )
        .unwrap();
        assert!(rel_close(got, want, 1e-12));
    }
}

#[test]
fn relative_improvement_signs() {
    assert!(rel_close(relative_improvement(1.4, 1.0).unwrap(), 0.4, 1e-12));
    assert!(rel_close(relative_improvement(0.5, 1.0).unwrap(), -0.5, 1e-12));
}

#[test]
fn ks_disjoint_samples_and_calibration() {
    let r = ks_test(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
    assert_eq!(r.statistic, 1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let reps = 200;
    let accepted = (0..reps)
        .filter(|_| {
            let a: Vec<f64> = (0..200).map(|_| rng.random()).collect();
            let b: Vec<f64> = (0..200).map(|_| rng.random()).collect();
            ks_test(&a, &b).unwrap().p_value > 0.05
        })
        .count();
    assert!(accepted as f64 >= 0.9 * reps as f64, "{accepted}/{reps}");
}

#[test]
fn ks_is_invariant_under_monotone_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..20 {
        let a: Vec<f64> = (0..50).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..3.0)).collect();
        let f = |v: &f64| v.exp() * 3.0 + 1.0;
        let base = ks_test(&a, &b).unwrap();
        let mapped = ks_test(
            &a.iter().map(f).collect::<Vec<_>>(),
            &b.iter().map(f).collect::<Vec<_>>(),
        )
        .unwrap();
        assert_eq!(base.statistic, mapped.statistic);
        assert_eq!(base.p_value, mapped.p_value);
    }
}

#[test]
fn cosine_of_random_high_dimensional_vectors_is_small() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let a: Vec<f64> = (0..4096).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..4096).map(|_| rng.random_range(-1.0..1.0)).collect();
        assert!(cosine_similarity(&a, &b).unwrap().abs() < 0.1);
        assert!(rel_close(cosine_similarity(&a, &a).unwrap(), 1.0, 1e-12));
    }
}

/// Direct sliding-window SSIM with the 2-D Gaussian weights, no separability.
fn ssim_oracle(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
    let n = 11usize;
    let g: Vec<f64> = (0..n).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
    let gs: f64 = g.iter().sum();
    let (c1, c2) = (1e-4, 9e-4);
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=h - n {
        for c0 in 0..=w - n {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    let wt = g[i] * g[j] / (gs * gs);
                    let (a, b) = (x[(r0 + i) * w + c0 + j], y[(r0 + i) * w + c0 + j]);
                    mx += wt * a;
                    my += wt * b;
                    sxx += wt * a * a;
                    syy += wt * b * b;
                    sxy += wt * a * b;
                }
            }
            let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn ssim_matches_direct_window_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (h, w) in [(11, 11), (16, 20), (24, 24)] {
        let x: Vec<f64> = (0..h * w).map(|_| rng.random()).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| (v * 0.7 + rng.random_range(0.0..0.3)).min(1.0))
            .collect();
        let got = ssim(&x, &y, h, w).unwrap();
        let want = ssim_oracle(&x, &y, h, w);
        assert!((got - want).abs() < 1e-6, "{h}x{w}: {got} vs {want}");
    }
}

#[test]
fn stratified_unit_lesion_area_and_single_bucket() {
    let gt = mask(4, 4, &[(1, 1)]);
    let results = vec![
        (gt.clone(), gt.clone()),
        (BinaryMask::empty(4, 4), mask(4, 4, &[(0, 0), (0, 1)])),
    ];
    // one pixel is 4 mm², so it lands in [4, 8) and the two-pixel lesion in [8, ∞)
    let b = stratified_dice(&results, &[4.0, 8.0], 4.0).unwrap();
    assert_eq!(b[0].dice.unwrap().mean, 1.0);
    assert_eq!(b[1].dice.unwrap().mean, 0.0);
    let one = stratified_dice(&results, &[0.0], 4.0).unwrap();
    let s = one[0].dice.unwrap();
    assert_eq!((s.n, s.mean), (2, 0.5));
}

#[test]
fn embedding_export_is_reproducible() {
    let arch = ArchConfig {
        base_filters: 4,
        max_filters: 8,
        bottleneck_channels: 8,
        input_size: (32, 32),
        ..ArchConfig::default()
    };
    let params = init_model::<f32>(&arch, 2, true).unwrap();
    let counts = SplitCounts {
        train: 1,
        val: 1,
        test: 2,
    };
    let data = generate_phantom_client::<f32>("c0", 4, &AppearanceProfile::default(), counts, (32, 32)).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let (p1, p2) = (tmp.path().join("a.csv"), tmp.path().join("b.csv"));
    write_embeddings_csv(
        &export_embeddings(&params, std::slice::from_ref(&data), (0.5, 2.0), 7).unwrap(),
        &p1,
    )
    .unwrap();
    write_embeddings_csv(&export_embeddings(&params, &[data], (0.5, 2.0), 7).unwrap(), &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

proptest! {
    #[test]
    fn ssim_is_symmetric_and_at_most_one(
        x in proptest::collection::vec(0.0f64..1.0, 144),
        y in proptest::collection::vec(0.0f64..1.0, 144),
    ) {
        let a = ssim(&x, &y, 12, 12).unwrap();
        prop_assert!((a - ssim(&y, &x, 12, 12).unwrap()).abs() < 1e-12);
        prop_assert!(a <= 1.0 + 1e-12);
    }
}
