//! Independent numerical oracles used to cross-check the main
//! implementation: finite differences, Gauss–Legendre quadrature, a
//! Taylor-series matrix exponential, a dense unrolled recurrence, and a
//! direct (non-separable) bicubic evaluator. These deliberately avoid the
//! code paths they check.

use crate::data::rng::SplitMix64;
use crate::nn::{ParamId, ParamStore};

/// Outcome of a finite-difference sweep over parameter coordinates.
#[derive(Debug, Clone, Default)]
pub struct FdReport {
    pub checked: usize,
    pub failed: usize,
    pub worst_rel: f64,
    pub failures: Vec<String>,
}

impl FdReport {
    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            1.0 - self.failed as f64 / self.checked as f64
        }
    }
}

/// Compare analytic parameter gradients against central finite differences
/// of `eval` (a scalar function of the store's current values).
///
/// Samples up to `max_coords_per_tensor` coordinates of each parameter
/// (all, when None). Coordinates where both sides are below `abs_floor`
/// count as checked-and-passed; mismatches beyond `rel_tol` relative are
/// recorded with the parameter name.
#[allow(clippy::too_many_arguments)]
pub fn fd_store_check(
    ps: &mut ParamStore,
    eval: &mut dyn FnMut(&ParamStore) -> f64,
    analytic: &[Vec<f64>],
    h: f64,
    rel_tol: f64,
    abs_floor: f64,
    max_coords_per_tensor: Option<usize>,
    rng: &mut SplitMix64,
) -> FdReport {
    let mut report = FdReport::default();
    for pi in 0..ps.len() {
        let n = ps.get(ParamId(pi)).data.len();
        let coords: Vec<usize> = match max_coords_per_tensor {
            Some(k) if k < n => {
                let mut all: Vec<usize> = (0..n).collect();
                rng.shuffle(&mut all);
                all.truncate(k);
                all.sort_unstable();
                all
            }
            _ => (0..n).collect(),
        };
        for &ci in &coords {
            let orig = ps.get(ParamId(pi)).data[ci];
            ps.get_mut(ParamId(pi)).data[ci] = orig + h;
            let fh = eval(ps);
            ps.get_mut(ParamId(pi)).data[ci] = orig - h;
            let fl = eval(ps);
            ps.get_mut(ParamId(pi)).data[ci] = orig;
            let fd = (fh - fl) / (2.0 * h);
            let got = analytic[pi][ci];
            report.checked += 1;
            let denom = fd.abs().max(got.abs());
            if denom < abs_floor {
                continue;
            }
            let rel = (fd - got).abs() / denom;
            report.worst_rel = report.worst_rel.max(rel);
            if rel > rel_tol {
                report.failed += 1;
                if report.failures.len() < 16 {
                    report
                        .failures
                        .push(format!("{}[{}]: analytic {} vs fd {}", ps.name(ParamId(pi)), ci, got, fd));
                }
            }
        }
    }
    report
}

/// Nodes and weights of n-point Gauss–Legendre quadrature on [-1, 1],
/// computed by Newton iteration on the Legendre recurrence.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        // Chebyshev-style initial guess for the i-th root.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_and_derivative(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_and_derivative(n, x);
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

/// (P_n(x), P_n'(x)) via the three-term recurrence.
fn legendre_and_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// ∫₀^Δ f(τ) dτ by composite Gauss–Legendre quadrature.
pub fn integrate(f: impl Fn(f64) -> f64, delta: f64, n: usize) -> f64 {
    let (nodes, weights) = gauss_legendre(n);
    let half = 0.5 * delta;
    nodes
        .iter()
        .zip(&weights)
        .map(|(&x, &w)| w * f(half * (x + 1.0)))
        .sum::<f64>()
        * half
}

/// ZOH oracle: (ā, b̄) from the defining integral
/// ā = e^{aΔ} (via `expm_taylor`), b̄ = (∫₀^Δ e^{aτ} dτ)·b by quadrature.
/// Shares no code with the production `zoh_discretize`.
pub fn zoh_oracle(a: f64, b: f64, delta: f64) -> (f64, f64) {
    let abar = expm_taylor(a * delta);
    let integral = integrate(|tau| expm_taylor(a * tau), delta, 40);
    (abar, integral * b)
}

/// Scalar e^z by argument scaling and a Taylor series — independent of
/// libm's exp. Accurate to ~1e-15 relative for |z| ≤ 50.
pub fn expm_taylor(z: f64) -> f64 {
    // Scale so the series converges fast: e^z = (e^{z/2^k})^{2^k}.
    let mut k = 0u32;
    let mut zs = z;
    while zs.abs() > 0.25 {
        zs *= 0.5;
        k += 1;
    }
    let mut term = 1.0;
    let mut sum = 1.0;
    for i in 1..30 {
        term *= zs / i as f64;
        sum += term;
        if term.abs() < 1e-20 * sum.abs() {
            break;
        }
    }
    for _ in 0..k {
        sum *= sum;
    }
    sum
}

/// Direct (non-separable) bicubic resampling of one plane: every output
/// pixel is a dense 2-D weighted sum with outer-product Keys weights,
/// per-axis normalized, replicate boundary. Written independently of the
/// production separable resampler (different kernel formula and loop
/// structure); agrees with it to ~1e-15 by associativity only.
pub fn bicubic_oracle(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    fn kernel(t: f64) -> f64 {
        const A: f64 = -0.5;
        let x = t.abs();
        if x <= 1.0 {
            (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
        } else if x < 2.0 {
            A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
        } else {
            0.0
        }
    }
    let weights_for = |n_in: usize, n_out: usize, d: usize| -> (isize, Vec<f64>) {
        let ratio = n_in as f64 / n_out as f64;
        let widen = if ratio > 1.0 { ratio } else { 1.0 };
        let src_pos = (d as f64 + 0.5) * ratio - 0.5;
        let first = (src_pos - 2.0 * widen).ceil() as isize;
        let last = (src_pos + 2.0 * widen).floor() as isize;
        let w: Vec<f64> = (first..=last).map(|i| kernel((src_pos - i as f64) / widen)).collect();
        (first, w)
    };
    let mut out = vec![0.0; out_h * out_w];
    for oy in 0..out_h {
        let (fy, wy) = weights_for(h, out_h, oy);
        let sy: f64 = wy.iter().sum();
        for ox in 0..out_w {
            let (fx, wx) = weights_for(w, out_w, ox);
            let sx: f64 = wx.iter().sum();
            let mut acc = 0.0;
            for (ky, &vy) in wy.iter().enumerate() {
                let iy = (fy + ky as isize).clamp(0, h as isize - 1) as usize;
                for (kx, &vx) in wx.iter().enumerate() {
                    let ix = (fx + kx as isize).clamp(0, w as isize - 1) as usize;
                    acc += vy * vx * src[iy * w + ix];
                }
            }
            out[oy * out_w + ox] = acc / (sy * sx);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrature_integrates_polynomials_exactly() {
        // n-point GL is exact for degree ≤ 2n−1.
        let got = integrate(|t| 3.0 * t * t, 2.0, 5);
        assert!((got - 8.0).abs() < 1e-13);
        let got = integrate(|t| t.powi(7) - t, 1.0, 8);
        assert!((got - (1.0 / 8.0 - 0.5)).abs() < 1e-13);
    }

    #[test]
    fn taylor_exponential_matches_libm() {
        // Each squaring step can double the relative error, so wide
        // arguments land near 1e-14; still 10⁵× tighter than any check
        // that relies on this oracle.
        for &z in &[-30.0, -2.0, -1e-9, 0.0, 0.3, 5.0, 20.0] {
            let rel = (expm_taylor(z) - z.exp()).abs() / z.exp();
            assert!(rel < 5e-14, "z={z}: rel={rel}");
        }
    }

    #[test]
    fn zoh_oracle_reproduces_hand_case() {
        // a=-1, b=1, Δ=ln2 → (0.5, 0.5).
        let (abar, bbar) = zoh_oracle(-1.0, 1.0, std::f64::consts::LN_2);
        assert!((abar - 0.5).abs() < 1e-14);
        assert!((bbar - 0.5).abs() < 1e-13);
    }
}
