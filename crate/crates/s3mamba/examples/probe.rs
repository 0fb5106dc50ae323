//! Scratch probe: measure the branch jump of φ₁ at the Taylor switch.

use s3mamba::ssm::zoh::{phi1, TAYLOR_SWITCH};

fn main() {
    let eps = (2.0f64).powi(-40);
    for sign in [1.0, -1.0] {
        let z = sign * TAYLOR_SWITCH;
        let lo = z * (1.0 - eps); // Taylor branch (|lo| < switch)
        let hi = z * (1.0 + eps); // closed-form branch
        let jump = (phi1(lo) - phi1(hi)).abs();
        println!("z={z:+.1e}  phi1(lo)={:.17}  phi1(hi)={:.17}  jump={jump:.3e}", phi1(lo), phi1(hi));
        // Reference: libm expm1 closed form at the boundary.
        let reference = z.exp_m1() / z;
        println!("          reference={reference:.17}  taylor_err={:.3e}  closed_err={:.3e}", (phi1(lo) - reference).abs(), (phi1(hi) - reference).abs());
    }
    // b̄ discontinuity for the worst pinned-range combo: Δ=1, b=5, a=±1e-4.
    let (_, b_lo) = s3mamba::ssm::zoh::zoh_discretize(-(TAYLOR_SWITCH) * (1.0 - eps), 5.0, 1.0);
    let (_, b_hi) = s3mamba::ssm::zoh::zoh_discretize(-(TAYLOR_SWITCH) * (1.0 + eps), 5.0, 1.0);
    println!("bbar jump at worst combo: {:.3e}", (b_lo - b_hi).abs());
}
