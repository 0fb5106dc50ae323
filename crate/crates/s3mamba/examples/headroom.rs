//! Scratch probe (not part of the library surface): for candidate corpus
//! texture designs, measure how much a perfect smooth predictor would beat
//! the bicubic round-trip, at ×2 and ×3. "base" is the smooth learnable
//! layer; "gt" adds the fine texture. headroom = psnr(up(down(base)), gt)
//! − psnr(up(down(gt)), gt).

use s3mamba::data::resample::bicubic_resample;
use s3mamba::data::rng::SplitMix64;
use s3mamba::metrics::{psnr, PsnrMode};
use s3mamba::tensor::Tensor;

const SIZE: usize = 96;

fn luma_to_rgb(luma: &[f64]) -> Tensor {
    let n = luma.len();
    let mut data = vec![0.0; 3 * n];
    for c in 0..3 {
        for k in 0..n {
            data[c * n + k] = luma[k].clamp(0.0, 1.0);
        }
    }
    let s = (n as f64).sqrt() as usize;
    Tensor::new(vec![1, 3, s, s], data)
}

fn low_freq_base(rng: &mut SplitMix64) -> Vec<f64> {
    let mut img = vec![0.5; SIZE * SIZE];
    for (amp_hi, amp_lo) in [(0.10, 0.06), (0.05, 0.03)] {
        let theta = rng.uniform(0.0, std::f64::consts::PI);
        let cycles = rng.uniform(1.5, 4.5);
        let phase = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
        let amp = rng.uniform(amp_lo, amp_hi);
        let (ct, st) = (theta.cos(), theta.sin());
        for i in 0..SIZE {
            for j in 0..SIZE {
                let u = (j as f64 * ct + i as f64 * st) / SIZE as f64;
                img[i * SIZE + j] += amp * (2.0 * std::f64::consts::PI * cycles * u + phase).sin();
            }
        }
    }
    img
}

/// white noise minus its 3x3 box blur, scaled to std sigma
fn hp_noise(rng: &mut SplitMix64, sigma: f64) -> Vec<f64> {
    let white: Vec<f64> = (0..SIZE * SIZE).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let mut out = vec![0.0; SIZE * SIZE];
    for i in 0..SIZE {
        for j in 0..SIZE {
            let mut acc = 0.0;
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    let ii = (i as i64 + di).clamp(0, SIZE as i64 - 1) as usize;
                    let jj = (j as i64 + dj).clamp(0, SIZE as i64 - 1) as usize;
                    acc += white[ii * SIZE + jj];
                }
            }
            out[i * SIZE + j] = white[i * SIZE + j] - acc / 9.0;
        }
    }
    let var: f64 = out.iter().map(|v| v * v).sum::<f64>() / out.len() as f64;
    let k = sigma / var.sqrt();
    out.iter_mut().for_each(|v| *v *= k);
    out
}

/// oriented sinusoid at given cycles, amplitude amp
fn tone(rng: &mut SplitMix64, cyc_lo: f64, cyc_hi: f64, amp: f64) -> Vec<f64> {
    let theta = rng.uniform(0.0, std::f64::consts::PI);
    let cycles = rng.uniform(cyc_lo, cyc_hi);
    let phase = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
    let (ct, st) = (theta.cos(), theta.sin());
    let mut out = vec![0.0; SIZE * SIZE];
    for i in 0..SIZE {
        for j in 0..SIZE {
            let u = (j as f64 * ct + i as f64 * st) / SIZE as f64;
            out[i * SIZE + j] = amp * (2.0 * std::f64::consts::PI * cycles * u + phase).sin();
        }
    }
    out
}

/// n thin strokes (hard-edged lines) of given width and contrast
fn strokes(rng: &mut SplitMix64, n: usize, width: f64, contrast: f64) -> Vec<f64> {
    let mut out = vec![0.0; SIZE * SIZE];
    for _ in 0..n {
        let x0 = rng.uniform(0.0, SIZE as f64);
        let y0 = rng.uniform(0.0, SIZE as f64);
        let ang = rng.uniform(0.0, std::f64::consts::PI);
        let len = rng.uniform(20.0, 70.0);
        let (dx, dy) = (ang.cos(), ang.sin());
        let x1 = x0 + len * dx;
        let y1 = y0 + len * dy;
        let sgn = if rng.next_f64() < 0.5 { -1.0 } else { 1.0 };
        for i in 0..SIZE {
            for j in 0..SIZE {
                let (px, py) = (j as f64 + 0.5, i as f64 + 0.5);
                let t = ((px - x0) * dx + (py - y0) * dy).clamp(0.0, len);
                let (cx, cy) = (x0 + t * dx, y0 + t * dy);
                let d = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
                if d <= width / 2.0 {
                    out[i * SIZE + j] = sgn * contrast;
                }
            }
        }
    }
    out
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn roundtrip(img: &Tensor, s: f64) -> Tensor {
    let lr = (SIZE as f64 / s).floor() as usize;
    let down = bicubic_resample(img, lr, lr);
    bicubic_resample(&down, (lr as f64 * s).floor() as usize, (lr as f64 * s).floor() as usize)
}

fn measure(name: &str, cases: &[(Vec<f64>, Vec<f64>)]) {
    for s in [2.0f64, 3.0] {
        let shave = s.ceil() as usize;
        let (mut bic, mut floor) = (0.0, 0.0);
        for (base, gt) in cases {
            let gt_t = luma_to_rgb(gt);
            let base_t = luma_to_rgb(base);
            bic += psnr(&roundtrip(&gt_t, s), &gt_t, PsnrMode::Rgb, shave).unwrap();
            floor += psnr(&roundtrip(&base_t, s), &gt_t, PsnrMode::Rgb, shave).unwrap();
        }
        bic /= cases.len() as f64;
        floor /= cases.len() as f64;
        println!("{name:28} x{s}: bicubic {bic:6.2}  smooth-floor {floor:6.2}  headroom {:+5.2}", floor - bic);
    }
}

fn main() {
    let n = 8;
    let mk = |f: &dyn Fn(&mut SplitMix64, &[f64]) -> Vec<f64>| -> Vec<(Vec<f64>, Vec<f64>)> {
        (0..n)
            .map(|i| {
                let mut rng = SplitMix64::new(999).fork(i);
                let base = low_freq_base(&mut rng);
                let gt = f(&mut rng, &base);
                (base, gt)
            })
            .collect()
    };

    measure("T1 hp-noise s=0.06", &mk(&|r, b| add(b, &hp_noise(r, 0.06))));
    measure("T1 hp-noise s=0.09", &mk(&|r, b| add(b, &hp_noise(r, 0.09))));
    measure("T2 tone 27-40 a=0.08", &mk(&|r, b| add(b, &tone(r, 27.0, 40.0, 0.08))));
    measure("T2b tone 17-23 a=0.08", &mk(&|r, b| add(b, &tone(r, 17.0, 23.0, 0.08))));
    measure("T3 strokes n=16 w=1.2 c=.25", &mk(&|r, b| add(b, &strokes(r, 16, 1.2, 0.25))));
    measure("T3b strokes n=24 w=1.0 c=.3", &mk(&|r, b| add(b, &strokes(r, 24, 1.0, 0.3))));
    measure("T4 strokes+hp", &mk(&|r, b| add(&add(b, &strokes(r, 16, 1.2, 0.25)), &hp_noise(r, 0.04))));
    measure("T5 tones 27-40 + 17-23", &mk(&|r, b| add(&add(b, &tone(r, 27.0, 40.0, 0.07)), &tone(r, 17.0, 23.0, 0.05))));
}
