mod common;

use common::random;
use fsid_core::loss::{evaluate_losses, stage1_loss, stage1_target, stage2_loss, LossWeights};
use fsid_core::metrics::{psnr, ssim, PSNR_CAP};
use fsid_core::tensor::{with_precision, Precision};
use fsid_core::Tensor;
use proptest::prelude::*;

/// Naive orthonormal DFT of every `H x W` plane: `(amplitude, phase)` per bin.
fn naive_spectrum(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let s = t.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let data = t.to_vec();
    let norm = ((h * w) as f64).sqrt();
    let (mut amp, mut ph) = (Vec::new(), Vec::new());
    for plane in data.chunks(h * w) {
        for u in 0..h {
            for v in 0..w {
                let (mut re, mut im) = (0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let a = -2.0 * std::f64::consts::PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                        re += plane[y * w + x] * a.cos();
                        im += plane[y * w + x] * a.sin();
                    }
                }
                amp.push((re * re + im * im).sqrt() / norm);
                ph.push(im.atan2(re));
            }
        }
    }
    (amp, ph)
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

#[test]
fn stage_losses_match_naive_dft_oracle() {
    with_precision(Precision::Double, || {
        let w = LossWeights::default();
        let y = random(&[2, 3, 6, 5], 1, 0.0, 1.0);
        let gt = random(&[2, 3, 6, 5], 2, 0.0, 1.0);
        let x_in = random(&[2, 3, 6, 5], 3, 0.0, 0.3);

        let s2 = stage2_loss(&y, &gt, &w).unwrap();
        let (_, py) = naive_spectrum(&y);
        let (agt, pgt) = naive_spectrum(&gt);
        let spatial = mean_abs_diff(&y.to_vec(), &gt.to_vec());
        let phase = mean_abs_diff(&py, &pgt);
        assert!((s2.total.item() - (spatial + 0.1 * phase)).abs() < 1e-9);

        let s1 = stage1_loss(&y, &x_in, &gt, &w).unwrap();
        let (ay, _) = naive_spectrum(&y);
        let target = stage1_target(&x_in, &gt).unwrap();
        let spatial1 = mean_abs_diff(&y.to_vec(), &target.to_vec());
        let amp = mean_abs_diff(&ay, &agt);
        assert!((s1.total.item() - (spatial1 + 0.2 * amp)).abs() < 1e-9);
    });
}

#[test]
fn losses_vanish_at_their_fixed_points() {
    with_precision(Precision::Double, || {
        let w = LossWeights::default();
        let gt = random(&[1, 3, 8, 8], 4, 0.2, 1.0);
        let x_in = random(&[1, 3, 8, 8], 5, 0.0, 0.3);
        assert!(stage2_loss(&gt, &gt, &w).unwrap().total.item().abs() < 1e-12);
        let target = stage1_target(&x_in, &gt).unwrap();
        assert!(stage1_loss(&target, &x_in, &gt, &w).unwrap().total.item().abs() < 1e-9);
        let (_, r) = evaluate_losses(&target, &gt, &x_in, &gt, &w).unwrap();
        assert!(r.l_total.abs() < 1e-9);
    });
}

#[test]
fn loss_shape_mismatch_is_an_error() {
    let w = LossWeights::default();
    let a = random(&[1, 3, 8, 8], 0, 0.0, 1.0);
    let b = random(&[1, 3, 8, 4], 0, 0.0, 1.0);
    assert!(stage2_loss(&a, &b, &w).is_err());
    assert!(stage1_loss(&a, &a, &b, &w).is_err());
}

#[test]
fn identical_images_score_cap_and_one() {
    let x = random(&[1, 3, 16, 16], 7, 0.0, 1.0);
    assert_eq!(psnr(&x, &x, 1.0).unwrap(), PSNR_CAP);
    assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn psnr_matches_direct_formula() {
    let a = random(&[1, 3, 12, 12], 8, 0.0, 1.0);
    let b = random(&[1, 3, 12, 12], 9, 0.0, 1.0);
    let mse = a.to_vec().iter().zip(b.to_vec()).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / a.numel() as f64;
    assert!((psnr(&a, &b, 1.0).unwrap() - 10.0 * (1.0 / mse).log10()).abs() < 1e-12);
}

#[test]
fn ssim_of_image_and_negative_is_low() {
    let x = random(&[1, 3, 24, 24], 10, 0.0, 1.0);
    let neg = x.scale(-1.0).add(&Tensor::full(&[1, 3, 24, 24], 1.0)).unwrap();
    assert!(ssim(&x, &neg).unwrap() < 0.5);
    assert!(ssim(&random(&[1, 3, 8, 8], 0, 0.0, 1.0), &random(&[1, 3, 8, 8], 1, 0.0, 1.0)).is_err());
}

fn noisy(x: &Tensor, sigma: f64, seed: u64) -> Tensor {
    x.add(&random(x.shape(), seed, -1.0, 1.0).scale(sigma)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn total_is_stage2_plus_half_stage1(seed in 0u64..10_000) {
        with_precision(Precision::Double, || {
            let w = LossWeights::default();
            let y1 = random(&[1, 3, 4, 4], seed, 0.0, 1.0);
            let y2 = random(&[1, 3, 4, 4], seed + 1, 0.0, 1.0);
            let x_in = random(&[1, 3, 4, 4], seed + 2, 0.0, 0.3);
            let gt = random(&[1, 3, 4, 4], seed + 3, 0.0, 1.0);
            let (loss, r) = evaluate_losses(&y1, &y2, &x_in, &gt, &w).unwrap();
            let s1 = stage1_loss(&y1, &x_in, &gt, &w).unwrap().total.item();
            let s2 = stage2_loss(&y2, &gt, &w).unwrap().total.item();
            prop_assert!((loss.item() - (s2 + 0.5 * s1)).abs() < 1e-9);
            prop_assert!((r.l_total - (r.l_s2 + 0.5 * r.l_s1)).abs() < 1e-9);
            Ok(())
        })?;
    }

    #[test]
    fn psnr_falls_as_noise_grows(s1 in 0.001f64..0.1, ratio in 1.5f64..5.0, seed in 0u64..1000) {
        let x = random(&[1, 3, 16, 16], seed, 0.4, 0.6);
        let low = psnr(&noisy(&x, s1, seed + 1), &x, 1.0).unwrap();
        let high = psnr(&noisy(&x, s1 * ratio, seed + 1), &x, 1.0).unwrap();
        prop_assert!(high < low);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(seed in 0u64..1000, sigma in 0.0f64..0.3) {
        let x = random(&[1, 3, 12, 12], seed, 0.0, 1.0);
        let y = noisy(&x, sigma, seed + 7);
        let (a, b) = (ssim(&x, &y).unwrap(), ssim(&y, &x).unwrap());
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!(a <= 1.0 + 1e-12 && a >= -1.0);
    }
}
