mod common;

use bift::metrics::{median, rmse_cm, ssim, MetricReport};
use bift::{Shape, Tensor};
use common::{random_image, rmse_reference, ssim_reference};
use proptest::prelude::*;

#[test]
fn rmse_scalar_cases() {
    let gt = Tensor::<f64>::from_vec(Shape::new(1, 1, 1, 2), vec![10.0, 20.0]).unwrap();
    let p = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![13.0, 16.0]).unwrap();
    assert_eq!(rmse_cm(&gt, &gt).unwrap(), 0.0);
    assert!((rmse_cm(&p, &gt).unwrap() - (12.5f64).sqrt()).abs() < 1e-10);
    let offset = gt.map(|v| v + 2.0);
    assert!((rmse_cm(&offset, &gt).unwrap() - 2.0).abs() < 1e-10);
    assert!(rmse_cm(&gt, &Tensor::zeros(Shape::new(1, 1, 2, 1))).is_err());
}

#[test]
fn ssim_identity_and_inversion() {
    let gt = random_image(1, Shape::new(1, 1, 32, 32));
    assert!((ssim(&gt, &gt).unwrap() - 1.0).abs() < 1e-12);
    let inv = gt.map(|v| 1.0 - v);
    let s = ssim(&inv, &gt).unwrap();
    assert!(s < 0.3, "ssim {s}");
    assert!(ssim(&Tensor::<f64>::zeros(Shape::new(1, 1, 10, 32)), &Tensor::zeros(Shape::new(1, 1, 10, 32))).is_err());
}

#[test]
fn dc_offset_only_touches_luminance() {
    let gt = random_image(2, Shape::new(1, 1, 32, 32));
    let shifted = gt.map(|v| v + 0.05);
    let s = ssim(&shifted, &gt).unwrap();
    assert!(s < 1.0);
    assert!((s - ssim_reference(&shifted, &gt)).abs() < 1e-10);
    // variances and covariance are unchanged, so the structure term is 1 and
    // only luminance drops
    let flat = Tensor::<f64>::full(Shape::new(1, 1, 11, 11), 0.4);
    let lum = ssim(&flat.map(|v| v + 0.05), &flat).unwrap();
    let c1 = 1e-4;
    let expect = (2.0 * 0.45 * 0.4 + c1) / (0.45f64 * 0.45 + 0.4 * 0.4 + c1);
    assert!((lum - expect).abs() < 1e-10);
}

#[test]
fn metrics_match_scalar_references_on_random_pairs() {
    for seed in 0..4 {
        let a = random_image(10 + seed, Shape::new(2, 1, 32, 32));
        let b = random_image(20 + seed, Shape::new(2, 1, 32, 32));
        assert!((rmse_cm(&a, &b).unwrap() - rmse_reference(&a, &b)).abs() < 1e-10);
        assert!((ssim(&a, &b).unwrap() - ssim_reference(&a, &b)).abs() < 1e-10);
    }
}

#[test]
fn reports_aggregate_values() {
    let r = MetricReport::from_values(vec![3.0, 1.0, 2.0, 10.0]);
    assert_eq!(r.mean, 4.0);
    assert_eq!(r.median, 2.5);
    assert!((r.std - (12.5f64).sqrt()).abs() < 1e-12);
    assert_eq!(median(&[5.0, 1.0, 3.0]), 3.0);
    assert!(median(&[]).is_nan());
}

fn small(seed: u64) -> Tensor<f64> {
    random_image(seed, Shape::new(1, 1, 4, 5)).map(|v| 100.0 * v)
}

/// Tiling of a random 4x4 pattern, read starting at the given offset.
fn tiled(seed: u64, dy: usize, dx: usize) -> Tensor<f64> {
    let pat = random_image(seed, Shape::new(1, 1, 4, 4));
    Tensor::from_fn(Shape::new(1, 1, 18, 18), |[_, _, y, x]| pat[[0, 0, (y + dy) % 4, (x + dx) % 4]])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rmse_is_a_metric(a in any::<u64>(), b in any::<u64>(), c in any::<u64>()) {
        let (x, y, z) = (small(a), small(b), small(c));
        let dxy = rmse_cm(&x, &y).unwrap();
        prop_assert!((dxy - rmse_cm(&y, &x).unwrap()).abs() < 1e-12);
        prop_assert_eq!(rmse_cm(&x, &x).unwrap(), 0.0);
        prop_assert!(a == b || dxy > 0.0);
        prop_assert!(rmse_cm(&x, &z).unwrap() <= dxy + rmse_cm(&y, &z).unwrap() + 1e-9);
    }

    #[test]
    fn ssim_is_symmetric_and_translation_invariant(a in any::<u64>(), b in any::<u64>(), dy in 0usize..4, dx in 0usize..4) {
        let x = random_image(a, Shape::new(1, 1, 20, 20));
        let y = random_image(b, Shape::new(1, 1, 20, 20));
        prop_assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() < 1e-12);
        // 18 - 11 + 1 window positions per axis cover every phase of the
        // period twice, so shifting both images permutes the windows
        let base = ssim(&tiled(a, 0, 0), &tiled(b, 0, 0)).unwrap();
        let moved = ssim(&tiled(a, dy, dx), &tiled(b, dy, dx)).unwrap();
        prop_assert!((moved - base).abs() < 1e-12);
    }
}
