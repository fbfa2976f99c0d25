//! Full-reference image quality metrics on `[0, 1]` images.

use crate::error::{arg_err, shape_err, Result};
use crate::tensor::Tensor;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn clamped(t: &Tensor, peak: f64) -> Vec<f64> {
    t.data().iter().map(|v| v.clamp(0.0, peak)).collect()
}

/// `10 log10(peak^2 / MSE)` after clamping both inputs to `[0, peak]`.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return shape_err("psnr", format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    if a.numel() == 0 {
        return arg_err("psnr", "empty images");
    }
    let (x, y) = (clamped(a, peak), clamped(b, peak));
    let mse = x.iter().zip(&y).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = g.iter().enumerate().map(|(i, gi)| gi * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = g.iter().enumerate().map(|(i, gi)| gi * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize, g: &[f64]) -> f64 {
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_x = filter_valid(x, h, w, g);
    let mu_y = filter_valid(y, h, w, g);
    let xx = filter_valid(&prod(x, x), h, w, g);
    let yy = filter_valid(&prod(y, y), h, w, g);
    let xy = filter_valid(&prod(x, y), h, w, g);
    let n = mu_x.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = xx[i] - mx * mx;
            let vy = yy[i] - my * my;
            let cov = xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    total / n as f64
}

/// Mean SSIM over valid 11x11 Gaussian windows, averaged over channels and
/// images. Inputs are `[N,C,H,W]` or `[C,H,W]` and clamped to `[0, 1]`.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return shape_err("ssim", format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    let shape = a.shape();
    if shape.len() < 2 {
        return shape_err("ssim", format!("expected an image, got shape {shape:?}"));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return shape_err(
            "ssim",
            format!("image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        );
    }
    let g = gaussian_window();
    let (x, y) = (clamped(a, 1.0), clamped(b, 1.0));
    let planes = x.len() / (h * w);
    let sum: f64 = x
        .chunks(h * w)
        .zip(y.chunks(h * w))
        .map(|(p, q)| ssim_plane(p, q, h, w, &g))
        .sum();
    Ok(sum / planes as f64)
}
