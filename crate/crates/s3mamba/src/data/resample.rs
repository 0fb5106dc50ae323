//! Bicubic resampling with the Keys kernel (a = −0.5), fixed bit-exactly so
//! every consumer (dataset synthesis, baselines, tests) agrees:
//!
//! * separable, vertical pass then horizontal;
//! * center-aligned mapping src = (dst + 0.5)·(in/out) − 0.5;
//! * replicate boundary;
//! * downscaling widens the kernel by in/out (anti-aliasing) and
//!   renormalizes tap weights to sum to one;
//! * outputs are clamped to [0, 1] at the end.

use crate::tensor::Tensor;

/// The Keys cubic interpolation kernel with a = −0.5.
pub fn keys_cubic(t: f64) -> f64 {
    let x = t.abs();
    if x <= 1.0 {
        (1.5 * x - 2.5) * x * x + 1.0
    } else if x < 2.0 {
        ((-0.5 * x + 2.5) * x - 4.0) * x + 2.0
    } else {
        0.0
    }
}

/// Tap plan for one axis: for each output index, the first source index and
/// the normalized weights of consecutive taps (source indices are clamped to
/// the axis when applied — replicate boundary).
fn axis_taps(n_in: usize, n_out: usize) -> Vec<(isize, Vec<f64>)> {
    assert!(n_in >= 1 && n_out >= 1, "resample: empty axis");
    let ratio = n_in as f64 / n_out as f64;
    let widen = ratio.max(1.0); // > 1 only when downscaling
    let radius = 2.0 * widen;
    (0..n_out)
        .map(|d| {
            let src = (d as f64 + 0.5) * ratio - 0.5;
            let first = (src - radius).ceil() as isize;
            let last = (src + radius).floor() as isize;
            let mut w: Vec<f64> = (first..=last)
                .map(|i| keys_cubic((src - i as f64) / widen))
                .collect();
            let sum: f64 = w.iter().sum();
            for v in &mut w {
                *v /= sum;
            }
            (first, w)
        })
        .collect()
}

/// Resample one H×W plane to out_h×out_w (no clamping).
fn resample_plane(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let clamp = |i: isize, n: usize| -> usize { i.clamp(0, n as isize - 1) as usize };
    // Vertical pass: [h, w] → [out_h, w].
    let vtaps = axis_taps(h, out_h);
    let mut mid = vec![0.0; out_h * w];
    for (oy, (first, ws)) in vtaps.iter().enumerate() {
        for (k, &wgt) in ws.iter().enumerate() {
            let sy = clamp(first + k as isize, h);
            let row = &src[sy * w..(sy + 1) * w];
            let out = &mut mid[oy * w..(oy + 1) * w];
            for (o, &v) in out.iter_mut().zip(row) {
                *o += wgt * v;
            }
        }
    }
    // Horizontal pass: [out_h, w] → [out_h, out_w].
    let htaps = axis_taps(w, out_w);
    let mut dst = vec![0.0; out_h * out_w];
    for oy in 0..out_h {
        let row = &mid[oy * w..(oy + 1) * w];
        let out = &mut dst[oy * out_w..(oy + 1) * out_w];
        for (ox, (first, ws)) in htaps.iter().enumerate() {
            let mut acc = 0.0;
            for (k, &wgt) in ws.iter().enumerate() {
                acc += wgt * row[clamp(first + k as isize, w)];
            }
            out[ox] = acc;
        }
    }
    dst
}

/// Evaluate the interpolant at arbitrary source positions (upscale-direction
/// kernel, no widening), replicate boundary, clamped to [0, 1]. `points` are
/// fractional (row, col) pixel coordinates; a target grid maps to them via
/// src = (dst + 0.5)·(in/out) − 0.5, so full-grid evaluation agrees with
/// [`bicubic_resample`]. Returns one row per point, one column per channel.
pub fn bicubic_sample(img: &Tensor, points: &[(f64, f64)]) -> Tensor {
    assert_eq!(img.shape.len(), 4, "image must be [1, C, H, W]");
    let (c, h, w) = (img.shape[1], img.shape[2], img.shape[3]);
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let taps = |src: f64, n: usize| -> Vec<(usize, f64)> {
        let first = (src - 2.0).ceil() as isize;
        let last = (src + 2.0).floor() as isize;
        let mut ws: Vec<(usize, f64)> =
            (first..=last).map(|i| (clampi(i, n), keys_cubic(src - i as f64))).collect();
        let sum: f64 = ws.iter().map(|(_, v)| v).sum();
        for t in &mut ws {
            t.1 /= sum;
        }
        ws
    };
    let mut data = Vec::with_capacity(points.len() * c);
    for &(sy, sx) in points {
        let wy = taps(sy, h);
        let wx = taps(sx, w);
        for ch in 0..c {
            let plane = &img.data[ch * h * w..(ch + 1) * h * w];
            let mut acc = 0.0;
            for &(iy, vy) in &wy {
                let mut row = 0.0;
                for &(ix, vx) in &wx {
                    row += vx * plane[iy * w + ix];
                }
                acc += vy * row;
            }
            data.push(acc.clamp(0.0, 1.0));
        }
    }
    Tensor::new(vec![points.len(), c], data)
}

/// Resample an image [1, C, H, W] to [1, C, out_h, out_w], clamped to [0, 1].
pub fn bicubic_resample(img: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    assert_eq!(img.shape.len(), 4, "image must be [1, C, H, W]");
    assert!(out_h >= 1 && out_w >= 1, "resample: empty output");
    let (c, h, w) = (img.shape[1], img.shape[2], img.shape[3]);
    let mut data = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = resample_plane(&img.data[ch * h * w..(ch + 1) * h * w], h, w, out_h, out_w);
        data.extend(plane.into_iter().map(|v| v.clamp(0.0, 1.0)));
    }
    Tensor::new(vec![1, c, out_h, out_w], data)
}
