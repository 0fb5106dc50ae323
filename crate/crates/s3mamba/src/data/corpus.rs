//! Procedural training corpus: deterministic synthetic RGB images (oriented
//! sinusoids, band-limited noise, polygon overlays) written as PNGs under
//! `corpus/{train,val}/NNNN.png` with a JSON manifest. Everything is a pure
//! function of the seed, so two generations are byte-identical.
//!
//! Every image is a smooth low-frequency base plus narrowband mid-frequency
//! detail. The detail bands sit in the transition zones of ×2 and ×3
//! downsampling (about 0.10–0.24 cycles per pixel), where a fixed cubic
//! kernel's frequency response has already rolled off — it blurs this
//! content badly — yet the content is still below or near the downsampled
//! grid's Nyquist limit, so an upscaler that adapts to the corpus spectrum
//! can genuinely reconstruct it. That combination (recoverable, but poorly
//! served by a fixed kernel) is what lets a trained model earn a margin
//! over bicubic interpolation.

use crate::data::imageio::save_png;
use crate::data::resample::bicubic_resample;
use crate::data::rng::SplitMix64;
use crate::tensor::Tensor;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

/// Bump when the generator's output changes for the same seed.
pub const GENERATOR_VERSION: u32 = 3;

/// Mid-frequency band hit hard by ×2 downsampling: ~0.18–0.24 cycles/px.
const BAND_A: (f64, f64) = (0.18, 0.24);
/// Mid-frequency band hit hard by ×3 downsampling: ~0.105–0.156 cycles/px.
const BAND_B: (f64, f64) = (0.105, 0.156);

/// Oriented sinusoid plane at `cycles` per image width, unit amplitude.
fn tone_plane(size: usize, cycles: f64, theta: f64, phase: f64) -> Vec<f64> {
    let (ct, st) = (theta.cos(), theta.sin());
    let mut out = vec![0.0; size * size];
    for i in 0..size {
        for j in 0..size {
            let u = (j as f64 * ct + i as f64 * st) / size as f64;
            out[i * size + j] = (2.0 * std::f64::consts::PI * cycles * u + phase).sin();
        }
    }
    out
}

/// Per-image manifest record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageEntry {
    pub file: String,
    pub kind: String,
    pub params: serde_json::Value,
}

/// Corpus manifest, written as `manifest.json` next to the split folders.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub generator_version: u32,
    pub size: usize,
    pub images: Vec<ImageEntry>,
}

/// Generate image `index` of the corpus (pure in (seed, index, size)).
pub fn generate_image(seed: u64, index: usize, size: usize) -> (Tensor, ImageEntry) {
    assert!(size >= 16, "corpus images must be at least 16 px");
    let mut rng = SplitMix64::new(seed).fork(index as u64 + 1);
    let (img, kind, params) = match index % 3 {
        0 => sinusoid(size, &mut rng),
        1 => smoothed_noise(size, &mut rng),
        _ => polygons(size, &mut rng),
    };
    let entry = ImageEntry { file: String::new(), kind: kind.to_string(), params };
    (img, entry)
}

/// Oriented sinusoids: a gentle low-frequency base plus one tone in each
/// mid band, all with independent random orientation and phase. The mid
/// tones carry most of the contrast; they are the content a fixed cubic
/// kernel under-resolves.
fn sinusoid(size: usize, rng: &mut SplitMix64) -> (Tensor, &'static str, serde_json::Value) {
    let offsets = [rng.uniform(0.42, 0.58), rng.uniform(0.42, 0.58), rng.uniform(0.42, 0.58)];
    let mut plane = vec![0.0; size * size];
    let mut lows = Vec::new();
    for _ in 0..2 {
        let c = rng.uniform(1.5, 4.5);
        let th = rng.uniform(0.0, std::f64::consts::PI);
        let ph = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
        let a = rng.uniform(0.04, 0.08);
        let t = tone_plane(size, c, th, ph);
        for (p, v) in plane.iter_mut().zip(&t) {
            *p += a * v;
        }
        lows.push(serde_json::json!({"cycles": c, "theta": th, "amp": a}));
    }
    // Dominant mid tone (recorded as the image's generating frequency).
    let theta = rng.uniform(0.0, std::f64::consts::PI);
    let cycles = rng.uniform(BAND_A.0 * size as f64, BAND_A.1 * size as f64);
    let phase = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
    let amp = rng.uniform(0.10, 0.14);
    let tone_a = tone_plane(size, cycles, theta, phase);
    let cyc_b = rng.uniform(BAND_B.0 * size as f64, BAND_B.1 * size as f64);
    let th_b = rng.uniform(0.0, std::f64::consts::PI);
    let ph_b = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
    let amp_b = rng.uniform(0.07, 0.10);
    let tone_b = tone_plane(size, cyc_b, th_b, ph_b);
    let gains_a = [1.0, rng.uniform(0.75, 1.0), rng.uniform(0.75, 1.0)];
    let gains_b = [rng.uniform(0.75, 1.0), rng.uniform(0.75, 1.0), 1.0];
    let mut data = vec![0.0; 3 * size * size];
    for k in 0..size * size {
        for c in 0..3 {
            let v = offsets[c] + plane[k] + gains_a[c] * amp * tone_a[k] + gains_b[c] * amp_b * tone_b[k];
            data[c * size * size + k] = v.clamp(0.0, 1.0);
        }
    }
    let params = serde_json::json!({
        "theta": theta, "cycles": cycles, "phase": phase, "amp": amp,
        "cycles_b": cyc_b, "amp_b": amp_b, "lows": lows, "offsets": offsets,
    });
    (Tensor::new(vec![1, 3, size, size], data), "sinusoid", params)
}

/// Filtered noise: a smooth base drawn on a very coarse grid, plus a
/// band-pass component built by subtracting two interpolations of one
/// half-resolution white-noise grid. The band-pass energy lives at roughly
/// 0.12–0.25 cycles/px — the zone a fixed cubic kernel reproduces worst.
fn smoothed_noise(size: usize, rng: &mut SplitMix64) -> (Tensor, &'static str, serde_json::Value) {
    // Smooth base: coarse grid (nothing above ~4 cycles per image).
    let factor = 12 + rng.below(5); // 12..=16
    let coarse = size.div_ceil(factor).max(2);
    let grid: Vec<f64> = (0..coarse * coarse).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let base_up = bicubic_resample(&Tensor::new(vec![1, 1, coarse, coarse], grid), size, size);
    let base_amp = rng.uniform(0.06, 0.10);
    let base = normalized(&base_up.data, base_amp);

    // Band-pass detail: half-res white noise, minus its own low-pass.
    let half = size.div_ceil(2).max(2);
    let noise: Vec<f64> = (0..half * half).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let noise_t = Tensor::new(vec![1, 1, half, half], noise);
    let full = bicubic_resample(&noise_t, size, size);
    let lo = bicubic_resample(&bicubic_resample(&noise_t, half / 2, half / 2), size, size);
    let band_raw: Vec<f64> = full.data.iter().zip(&lo.data).map(|(a, b)| a - b).collect();
    let band_amp = rng.uniform(0.09, 0.13);
    let band = normalized(&band_raw, band_amp);

    let offsets = [rng.uniform(0.42, 0.58), rng.uniform(0.42, 0.58), rng.uniform(0.42, 0.58)];
    let gains = [1.0, rng.uniform(0.75, 1.0), rng.uniform(0.75, 1.0)];
    let mut data = vec![0.0; 3 * size * size];
    for k in 0..size * size {
        for c in 0..3 {
            let v = offsets[c] + base[k] + gains[c] * band[k];
            data[c * size * size + k] = v.clamp(0.0, 1.0);
        }
    }
    let params = serde_json::json!({
        "factor": factor, "base_amp": base_amp, "band_amp": band_amp, "offsets": offsets,
    });
    (Tensor::new(vec![1, 3, size, size], data), "noise", params)
}

/// Rescale `v` to zero mean and RMS `amp`.
fn normalized(v: &[f64], amp: f64) -> Vec<f64> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
    let k = amp / var.sqrt().max(1e-12);
    v.iter().map(|x| (x - mean) * k).collect()
}

/// Affine background with moderate-contrast hard-edged triangles, plus a
/// faint mid-band tone so this class, too, carries content a fixed kernel
/// under-resolves. Edges add broadband structure at modest contrast.
fn polygons(size: usize, rng: &mut SplitMix64) -> (Tensor, &'static str, serde_json::Value) {
    let base = [rng.uniform(0.38, 0.62), rng.uniform(0.38, 0.62), rng.uniform(0.38, 0.62)];
    let gx = rng.uniform(-0.12, 0.12);
    let gy = rng.uniform(-0.12, 0.12);
    let k = 4 + rng.below(3); // 4..=6
    let mut tris = Vec::new(); // (vertices [6], color [3])
    for _ in 0..k {
        let v: Vec<f64> = (0..6).map(|_| rng.uniform(0.0, size as f64)).collect();
        let sgn = if rng.next_f64() < 0.5 { -1.0 } else { 1.0 };
        let col = [
            base[0] + sgn * rng.uniform(0.08, 0.18),
            base[1] + sgn * rng.uniform(0.08, 0.18),
            base[2] + sgn * rng.uniform(0.08, 0.18),
        ];
        tris.push((v, col));
    }
    let cyc = rng.uniform(BAND_B.0 * size as f64, BAND_B.1 * size as f64);
    let th = rng.uniform(0.0, std::f64::consts::PI);
    let ph = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
    let tone_amp = rng.uniform(0.05, 0.08);
    let tone = tone_plane(size, cyc, th, ph);
    let mut data = vec![0.0; 3 * size * size];
    for i in 0..size {
        for j in 0..size {
            let ramp = gx * j as f64 / size as f64 + gy * i as f64 / size as f64;
            let mut px = [0.0f64; 3];
            for c in 0..3 {
                px[c] = base[c] + ramp;
            }
            for (v, col) in &tris {
                if point_in_triangle(j as f64 + 0.5, i as f64 + 0.5, v) {
                    px = *col;
                }
            }
            let t = tone_amp * tone[i * size + j];
            for c in 0..3 {
                data[c * size * size + i * size + j] = (px[c] + t).clamp(0.0, 1.0);
            }
        }
    }
    let params = serde_json::json!({
        "base": base, "gx": gx, "gy": gy, "tone_cycles": cyc, "tone_amp": tone_amp,
        "triangles": tris.iter().map(|(v, c)| serde_json::json!({"v": v, "color": c})).collect::<Vec<_>>(),
    });
    (Tensor::new(vec![1, 3, size, size], data), "polygons", params)
}

fn point_in_triangle(x: f64, y: f64, v: &[f64]) -> bool {
    let sign = |ax: f64, ay: f64, bx: f64, by: f64| (x - bx) * (ay - by) - (ax - bx) * (y - by);
    let d1 = sign(v[0], v[1], v[2], v[3]);
    let d2 = sign(v[2], v[3], v[4], v[5]);
    let d3 = sign(v[4], v[5], v[0], v[1]);
    let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(neg && pos)
}

/// Generate `n` images of `size`² and write them under `dir` as
/// `train/NNNN.png` (three quarters) and `val/NNNN.png` (the rest), plus
/// `manifest.json`. Returns the manifest.
pub fn write_corpus(dir: &Path, n: usize, size: usize, seed: u64) -> Result<Manifest> {
    let n_val = n / 4;
    let n_train = n - n_val;
    fs::create_dir_all(dir.join("train")).map_err(|e| Error::io(dir, e))?;
    fs::create_dir_all(dir.join("val")).map_err(|e| Error::io(dir, e))?;
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let (img, mut entry) = generate_image(seed, i, size);
        entry.file = if i < n_train {
            format!("train/{i:04}.png")
        } else {
            format!("val/{:04}.png", i - n_train)
        };
        save_png(&dir.join(&entry.file), &img)?;
        images.push(entry);
    }
    let manifest = Manifest { seed, generator_version: GENERATOR_VERSION, size, images };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Dataset(format!("manifest serialization: {e}")))?;
    fs::write(dir.join("manifest.json"), text).map_err(|e| Error::io(dir, e))?;
    Ok(manifest)
}

/// Load every PNG of a split (`train` or `val`) in filename order.
pub fn load_split(dir: &Path, split: &str) -> Result<Vec<Tensor>> {
    let split_dir = dir.join(split);
    let mut names: Vec<_> = fs::read_dir(&split_dir)
        .map_err(|e| Error::io(&split_dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x == "png").unwrap_or(false))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Dataset(format!("no PNGs in {}", split_dir.display())));
    }
    names.iter().map(|p| crate::data::imageio::load_png(p)).collect()
}
