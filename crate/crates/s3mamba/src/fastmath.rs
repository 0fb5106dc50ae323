//! An inlineable exponential for the numeric hot loops.
//!
//! `f64::exp` routes through libm's out-of-line wrapper (call + errno
//! bookkeeping), which dominates the discretization and activation loops on
//! a single core. `fast_exp` is the classic rational min-max approximation
//! (Cephes `exp`, public domain) with Cody–Waite argument reduction: ~2 ulp
//! over |x| ≤ 700, inlined at every call site. Outside that range — where
//! the polynomial path would lose the subnormal/overflow semantics — it
//! falls back to `f64::exp`, so NaN, ±∞, overflow-to-∞ and
//! underflow-to-zero behave exactly like the standard function.

/// log₂(e).
const LOG2E: f64 = std::f64::consts::LOG2_E;
/// ln 2 split into a 32-bit-exact head and a tail (Cody–Waite).
const LN2_HI: f64 = 6.931_457_519_531_25e-1;
const LN2_LO: f64 = 1.428_606_820_309_417_2e-6;

/// Numerator of the rational approximation, in xx = r².
const P: [f64; 3] = [
    1.261_771_930_748_105_9e-4,
    3.029_944_077_074_419_6e-2,
    9.999_999_999_999_999_9e-1,
];
/// Denominator of the rational approximation, in xx = r².
const Q: [f64; 4] = [
    3.001_985_051_386_644_6e-6,
    2.524_483_403_496_841e-3,
    2.272_655_482_081_550_3e-1,
    2.0,
];

/// Largest |x| the polynomial path accepts; beyond it 2ⁿ would leave the
/// normal range, so the slow path keeps the exact semantics.
const POLY_RANGE: f64 = 700.0;

/// e^x, accurate to a few ulp, bit-identical across runs.
///
/// exp(0) is exactly 1. Specials match `f64::exp`: NaN propagates,
/// exp(−∞) = 0, exp(+∞) = ∞, overflow saturates to ∞, underflow reaches
/// the same subnormals as the standard function.
#[inline]
pub fn fast_exp(x: f64) -> f64 {
    if !(x.abs() <= POLY_RANGE) {
        // Also catches NaN (comparison is false).
        return x.exp();
    }
    // x = n·ln2 + r with |r| ≤ ln2/2.
    let n = (x * LOG2E).round_ties_even();
    let r = (x - n * LN2_HI) - n * LN2_LO;
    // exp(r) = 1 + 2r·P(r²) / (Q(r²) − r·P(r²)).
    let rr = r * r;
    let p = r * (P[2] + rr * (P[1] + rr * P[0]));
    let q = Q[3] + rr * (Q[2] + rr * (Q[1] + rr * Q[0]));
    let e = 1.0 + 2.0 * p / (q - p);
    // |x| ≤ 700 keeps n within the normal exponent range, so 2ⁿ is exact.
    let scale = f64::from_bits(((1023 + n as i64) as u64) << 52);
    e * scale
}

/// Numerically stable logistic function 1/(1 + e^{−x}).
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + fast_exp(-x))
    } else {
        let e = fast_exp(x);
        e / (1.0 + e)
    }
}

/// Numerically stable ln(1 + eˣ).
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + fast_exp(-x).ln_1p()
    } else {
        fast_exp(x).ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::rng::SplitMix64;

    #[test]
    fn matches_standard_exp_to_a_few_ulp_across_the_range() {
        let mut r = SplitMix64::new(314159);
        let mut worst = 0.0f64;
        // Uniform sweep plus log-spaced magnitudes down to 1e-300.
        for i in 0..2_000_000u64 {
            let x = match i % 4 {
                0 => r.uniform(-700.0, 700.0),
                1 => r.uniform(-20.0, 20.0),
                2 => r.uniform(-1e-3, 1e-3),
                _ => {
                    let m = r.uniform(-300.0, 2.0);
                    let s = if r.uniform(0.0, 1.0) < 0.5 { -1.0 } else { 1.0 };
                    s * 10f64.powf(m)
                }
            };
            let got = fast_exp(x);
            let want = x.exp();
            let rel = ((got - want) / want).abs();
            worst = worst.max(rel);
            assert!(rel < 1e-14, "x={x}: fast {got} vs std {want} (rel {rel})");
        }
        // The approximation is specified to ~2 ulp; make sure we actually
        // achieve an order better than the assertion above.
        assert!(worst < 2e-15, "worst relative error {worst}");
    }

    #[test]
    fn exact_at_zero_and_near_one() {
        assert_eq!(fast_exp(0.0), 1.0);
        assert_eq!(fast_exp(-0.0), 1.0);
        // ln 2 → 2 within one ulp.
        let two = fast_exp(std::f64::consts::LN_2);
        assert!((two - 2.0).abs() <= f64::EPSILON * 2.0);
    }

    #[test]
    fn specials_match_standard_semantics() {
        assert!(fast_exp(f64::NAN).is_nan());
        assert_eq!(fast_exp(f64::INFINITY), f64::INFINITY);
        assert_eq!(fast_exp(f64::NEG_INFINITY), 0.0);
        assert_eq!(fast_exp(710.0), f64::INFINITY); // overflow
        assert_eq!(fast_exp(800.0), 800f64.exp());
        assert_eq!(fast_exp(-800.0), 0.0); // underflow
        // Subnormal region agrees exactly with the standard function.
        for x in [-709.0, -720.0, -745.0, 701.0, 709.0] {
            assert_eq!(fast_exp(x), x.exp(), "x={x}");
        }
    }

    #[test]
    fn both_sides_of_the_fallback_switch_match_standard_exp() {
        for sign in [1.0, -1.0] {
            for eps in [1e-12, 1e-9, 1e-6] {
                for x in [sign * POLY_RANGE * (1.0 - eps), sign * POLY_RANGE * (1.0 + eps)] {
                    let rel = ((fast_exp(x) - x.exp()) / x.exp()).abs();
                    assert!(rel < 1e-14, "x={x}: rel {rel}");
                }
            }
        }
    }

    #[test]
    fn sigmoid_and_softplus_identities() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        // σ(x) + σ(−x) = 1.
        let mut r = SplitMix64::new(7);
        for _ in 0..1000 {
            let x = r.uniform(-40.0, 40.0);
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
            // softplus(x) − softplus(−x) = x.
            assert!((softplus(x) - softplus(-x) - x).abs() < 1e-12 * x.abs().max(1.0));
        }
        // Saturation.
        assert_eq!(sigmoid(800.0), 1.0);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert!(softplus(-800.0) == 0.0);
        assert_eq!(softplus(800.0), 800.0);
    }
}
