//! Image quality metrics: PSNR on RGB or the BT.601 luma channel, and
//! single-scale SSIM (11×11 Gaussian window, valid positions only).

use crate::tensor::Tensor;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// PSNR reported for identical images instead of infinity.
pub const PSNR_CAP: f64 = 99.0;

/// Channel convention for PSNR.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsnrMode {
    /// MSE over all three RGB channels.
    Rgb,
    /// MSE over the BT.601 luma channel.
    Y,
}

/// One evaluation row: both PSNR conventions plus SSIM at a given shave.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_rgb: f64,
    pub psnr_y: f64,
    pub ssim: f64,
    pub shave: usize,
}

/// BT.601 luma of an `[1, 3, H, W]` image in [0,1], as an `[H·W]` plane.
pub fn rgb_to_y(img: &Tensor) -> Vec<f64> {
    assert_eq!(img.shape.len(), 4, "rgb_to_y expects [1,3,H,W]");
    assert_eq!(img.shape[1], 3, "rgb_to_y expects 3 channels");
    let hw = img.shape[2] * img.shape[3];
    (0..hw)
        .map(|k| {
            let (r, g, b) = (img.data[k], img.data[hw + k], img.data[2 * hw + k]);
            (65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0
        })
        .collect()
}

fn check_pair(pred: &Tensor, gt: &Tensor, shave: usize, min_size: usize) -> Result<(usize, usize)> {
    if pred.shape != gt.shape {
        return Err(Error::InvalidArg(format!(
            "metric shape mismatch: {:?} vs {:?}",
            pred.shape, gt.shape
        )));
    }
    assert_eq!(pred.shape.len(), 4, "metrics expect [1,3,H,W]");
    let (h, w) = (pred.shape[2], pred.shape[3]);
    if h < 2 * shave + min_size || w < 2 * shave + min_size {
        return Err(Error::InvalidArg(format!(
            "image {h}x{w} too small for shave {shave} (needs {min_size} px after shaving)"
        )));
    }
    Ok((h, w))
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP`] for identical
/// inputs. `shave` crops that many pixels from every border first.
pub fn psnr(pred: &Tensor, gt: &Tensor, mode: PsnrMode, shave: usize) -> Result<f64> {
    let (h, w) = check_pair(pred, gt, shave, 1)?;
    let (y0, y1, x0, x1) = (shave, h - shave, shave, w - shave);
    let mse = match mode {
        PsnrMode::Rgb => {
            let mut acc = 0.0;
            let mut n = 0usize;
            for c in 0..3 {
                for i in y0..y1 {
                    for j in x0..x1 {
                        let k = c * h * w + i * w + j;
                        let d = pred.data[k] - gt.data[k];
                        acc += d * d;
                        n += 1;
                    }
                }
            }
            acc / n as f64
        }
        PsnrMode::Y => {
            let (py, gy) = (rgb_to_y(pred), rgb_to_y(gt));
            let mut acc = 0.0;
            let mut n = 0usize;
            for i in y0..y1 {
                for j in x0..x1 {
                    let d = py[i * w + j] - gy[i * w + j];
                    acc += d * d;
                    n += 1;
                }
            }
            acc / n as f64
        }
    };
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// 11×11 Gaussian window, σ = 1.5, normalized to sum 1.
fn gaussian_window() -> [f64; 11] {
    let mut k = [0.0; 11];
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - 5.0;
        *v = (-x * x / (2.0 * 1.5 * 1.5)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable valid-mode Gaussian filtering of an `h×w` plane; output is
/// `(h−10)×(w−10)`.
fn window_means(plane: &[f64], h: usize, w: usize, k: &[f64; 11]) -> Vec<f64> {
    let wh = w; // row stride
    let oh = h - 10;
    let ow = w - 10;
    let mut mid = vec![0.0; oh * w]; // vertical pass
    for i in 0..oh {
        for j in 0..w {
            mid[i * wh + j] = (0..11).map(|t| k[t] * plane[(i + t) * wh + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..11).map(|t| k[t] * mid[i * wh + j + t]).sum();
        }
    }
    out
}

/// Single-scale SSIM on the luma channel: K1 = 0.01, K2 = 0.03, L = 1,
/// averaged over valid window positions after shaving.
pub fn ssim(pred: &Tensor, gt: &Tensor, shave: usize) -> Result<f64> {
    let (h, w) = check_pair(pred, gt, shave, 11)?;
    let (py, gy) = (rgb_to_y(pred), rgb_to_y(gt));
    let sh = h - 2 * shave;
    let sw = w - 2 * shave;
    let crop = |src: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; sh * sw];
        for i in 0..sh {
            for j in 0..sw {
                out[i * sw + j] = src[(i + shave) * w + j + shave];
            }
        }
        out
    };
    let (a, b) = (crop(&py), crop(&gy));
    let k = gaussian_window();
    let mu_a = window_means(&a, sh, sw, &k);
    let mu_b = window_means(&b, sh, sw, &k);
    let sq = |v: &[f64]| v.iter().map(|x| x * x).collect::<Vec<_>>();
    let prod: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
    let e_aa = window_means(&sq(&a), sh, sw, &k);
    let e_bb = window_means(&sq(&b), sh, sw, &k);
    let e_ab = window_means(&prod, sh, sw, &k);
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let mut acc = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        acc += ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
            / ((ma * ma + mb * mb + C1) * (va + vb + C2));
    }
    Ok(acc / mu_a.len() as f64)
}

/// Compute the full report (both PSNR modes + SSIM) at one shave setting.
pub fn report(pred: &Tensor, gt: &Tensor, shave: usize) -> Result<MetricReport> {
    Ok(MetricReport {
        psnr_rgb: psnr(pred, gt, PsnrMode::Rgb, shave)?,
        psnr_y: psnr(pred, gt, PsnrMode::Y, shave)?,
        ssim: ssim(pred, gt, shave)?,
        shave,
    })
}

/// Border shave convention for scale `s`: ⌈s⌉ pixels.
pub fn shave_for_scale(s: f64) -> usize {
    s.ceil() as usize
}
