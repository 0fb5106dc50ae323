//! The scalable selective SSM layer: input-dependent (B, C, Δ) projections
//! plus a scale/coordinate-conditioned modulation head that rescales Δ and
//! B per step, feeding the fused selective scan.
//!
//! The modulation head σ maps (s, 1/s, coord₀, coord₁) through two-layer
//! MLPs whose final layers start at zero, so a freshly initialized layer is
//! *exactly* scale-blind: Δ^scale ≡ 1 and B^scale ≡ 1, and the output is
//! bit-equal to the unmodulated scan.

use crate::data::rng::SplitMix64;
use crate::graph::{Graph, Var};
use crate::nn::{BoundParams, Linear, Mlp2, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Scale and per-position coordinates conditioning one scan.
#[derive(Debug, Clone)]
pub struct ScaleContext {
    /// Magnification factor s > 0.
    pub scale: f64,
    /// [L, 2] normalized coordinates in [−1, 1] (row, col order).
    pub coords: Tensor,
}

impl ScaleContext {
    pub fn new(scale: f64, coords: Tensor) -> Self {
        assert!(scale > 0.0, "scale must be positive, got {scale}");
        assert_eq!(coords.shape.len(), 2, "coords must be [L, 2]");
        assert_eq!(coords.shape[1], 2, "coords must be [L, 2]");
        debug_assert!(
            coords.data.iter().all(|&v| (-1.0 - 1e-9..=1.0 + 1e-9).contains(&v)),
            "coords outside [-1, 1]"
        );
        ScaleContext { scale, coords }
    }

    pub fn len(&self) -> usize {
        self.coords.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The σ input features, one row per position: (s, 1/s, coord₀, coord₁).
    pub fn sigma_features(&self) -> Tensor {
        let l = self.len();
        let mut data = Vec::with_capacity(l * 4);
        for i in 0..l {
            data.push(self.scale);
            data.push(1.0 / self.scale);
            data.push(self.coords.data[i * 2]);
            data.push(self.coords.data[i * 2 + 1]);
        }
        Tensor::new(vec![l, 4], data)
    }
}

/// Hidden width of the σ modulation MLPs.
pub const SIGMA_HIDDEN: usize = 16;

/// Scale-modulated selective SSM over [L, D] sequences.
pub struct ScalableSsm {
    pub d_inner: usize,
    pub n_state: usize,
    /// A = −exp(a_log), [D, N]: negativity survives any gradient update.
    pub a_log: ParamId,
    /// Skip gain, [D].
    pub d_skip: ParamId,
    /// x ↦ (B, C, Δ_raw): [D, 2N+1], no bias.
    pub w_bcd: Linear,
    /// Per-channel Δ bias, [D], initialized to ln(e−1) so Δ starts at 1.
    pub dt_bias: ParamId,
    /// σ head for Δ^scale = exp(MLP(features)); None for the unmodulated
    /// (scale-blind) variant, which then carries no σ parameters at all.
    pub sigma_dt: Option<Mlp2>,
    /// σ head for B^scale = 1 + MLP(features).
    pub sigma_b: Option<Mlp2>,
}

impl ScalableSsm {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        d_inner: usize,
        n_state: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        Self::build(ps, name, d_inner, n_state, true, rng)
    }

    /// A structurally scale-blind layer: same ω projections, no σ heads.
    pub fn new_unmodulated(
        ps: &mut ParamStore,
        name: &str,
        d_inner: usize,
        n_state: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        Self::build(ps, name, d_inner, n_state, false, rng)
    }

    fn build(
        ps: &mut ParamStore,
        name: &str,
        d_inner: usize,
        n_state: usize,
        with_sigma: bool,
        rng: &mut SplitMix64,
    ) -> Self {
        let a_log = ps.add(format!("{name}.a_log"), {
            let mut t = Tensor::zeros(vec![d_inner, n_state]);
            for d in 0..d_inner {
                for n in 0..n_state {
                    t.data[d * n_state + n] = ((n + 1) as f64).ln();
                }
            }
            t
        });
        let d_skip = ps.add(format!("{name}.d_skip"), Tensor::full(vec![d_inner], 1.0));
        let w_bcd = Linear::new(ps, &format!("{name}.w_bcd"), d_inner, 2 * n_state + 1, false, rng);
        let dt_bias = ps.add(
            format!("{name}.dt_bias"),
            Tensor::full(vec![d_inner], (std::f64::consts::E - 1.0).ln()),
        );
        let (sigma_dt, sigma_b) = if with_sigma {
            (
                Some(Mlp2::new(ps, &format!("{name}.sigma_dt"), 4, SIGMA_HIDDEN, d_inner, true, rng)),
                Some(Mlp2::new(ps, &format!("{name}.sigma_b"), 4, SIGMA_HIDDEN, n_state, true, rng)),
            )
        } else {
            (None, None)
        };
        ScalableSsm { d_inner, n_state, a_log, d_skip, w_bcd, dt_bias, sigma_dt, sigma_b }
    }

    /// Whether this layer carries σ modulation heads.
    pub fn has_sigma(&self) -> bool {
        self.sigma_dt.is_some()
    }

    /// Input-dependent projections: B, C ([L, N], linear in x) and
    /// Δ = softplus(Δ_raw + Δ_bias) ([L, D], strictly positive).
    pub fn input_projections(&self, g: &mut Graph, p: &BoundParams, x: Var) -> (Var, Var, Var) {
        let n = self.n_state;
        let bcd = self.w_bcd.forward(g, p, x); // [L, 2N+1]
        let b = g.slice_cols(bcd, 0, n);
        let c = g.slice_cols(bcd, n, n);
        let draw = g.slice_cols(bcd, 2 * n, 1); // [L, 1]
        let biased = g.add(draw, p.var(self.dt_bias)); // broadcast → [L, D]
        let delta = g.softplus(biased);
        (b, c, delta)
    }

    /// Modulation factors from (scale, coords): Δ^scale = exp(MLP) > 0
    /// ([L, D]) and B^scale = 1 + MLP ([L, N]). Exactly (1, 1) at init;
    /// None when the layer was built without σ heads.
    pub fn scale_modulation(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        ctx: &ScaleContext,
    ) -> Option<(Var, Var)> {
        let (sigma_dt, sigma_b) = (self.sigma_dt.as_ref()?, self.sigma_b.as_ref()?);
        let feats = g.constant(ctx.sigma_features());
        let dt_raw = sigma_dt.forward(g, p, feats);
        let dt_scale = g.exp(dt_raw);
        let b_raw = sigma_b.forward(g, p, feats);
        let b_scale = g.add_scalar(b_raw, 1.0);
        Some((dt_scale, b_scale))
    }

    /// The negative-definite diagonal A = −exp(a_log).
    fn a(&self, g: &mut Graph, p: &BoundParams) -> Var {
        let e = g.exp(p.var(self.a_log));
        g.neg(e)
    }

    /// Scale-modulated scan over x [L, D].
    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var, ctx: &ScaleContext) -> Var {
        self.forward_carry(g, p, x, ctx, None).0
    }

    /// As `forward`, with explicit initial state ([D, N] data) for exact
    /// chunked processing; returns the final state.
    pub fn forward_carry(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        x: Var,
        ctx: &ScaleContext,
        h0: Option<Vec<f64>>,
    ) -> (Var, Vec<f64>) {
        assert_eq!(g.shape(x)[0], ctx.len(), "coords/sequence length mismatch");
        let modulation = self.scale_modulation(g, p, ctx);
        self.scan_with(g, p, x, modulation, h0)
    }

    /// The unmodulated (scale-blind) scan: same ω parameters, no σ.
    pub fn forward_scale_blind(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Var {
        self.scan_with(g, p, x, None, None).0
    }

    /// Scale-blind scan with explicit state carry.
    pub fn forward_scale_blind_carry(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        x: Var,
        h0: Option<Vec<f64>>,
    ) -> (Var, Vec<f64>) {
        self.scan_with(g, p, x, None, h0)
    }

    fn scan_with(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        x: Var,
        modulation: Option<(Var, Var)>,
        h0: Option<Vec<f64>>,
    ) -> (Var, Vec<f64>) {
        let (b, c, delta) = self.input_projections(g, p, x);
        let (delta_eff, b_eff) = match modulation {
            Some((dt_scale, b_scale)) => (g.mul(delta, dt_scale), g.mul(b, b_scale)),
            None => (delta, b),
        };
        let a = self.a(g, p);
        g.selective_scan_carry(x, delta_eff, a, b_eff, c, p.var(self.d_skip), h0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adam::AdamState;
    use crate::verify::oracles::fd_store_check;

    fn rand_t(r: &mut SplitMix64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.uniform(lo, hi)).collect())
    }

    fn ctx_random(r: &mut SplitMix64, l: usize, scale: f64) -> ScaleContext {
        ScaleContext::new(scale, rand_t(r, &[l, 2], -1.0, 1.0))
    }

    /// Overwrite every parameter with random values (keeping the guaranteed
    /// invariants: nothing needs clamping since A = −exp and Δ = softplus).
    fn randomize(ps: &mut ParamStore, r: &mut SplitMix64) {
        for i in 0..ps.len() {
            let t = ps.get_mut(ParamId(i));
            for v in t.data.iter_mut() {
                *v = r.uniform(-0.8, 0.8);
            }
        }
    }

    #[test]
    fn zero_projection_weights_give_unit_delta_and_zero_bc() {
        let mut r = SplitMix64::new(1);
        let mut ps = ParamStore::new();
        let ssm = ScalableSsm::new(&mut ps, "ssm", 3, 2, &mut r);
        ps.get_mut(ssm.w_bcd.w).data.fill(0.0);
        let mut g = Graph::new();
        let p = ps.bind(&mut g);
        let x = g.constant(rand_t(&mut r, &[5, 3], -1.0, 1.0));
        let (b, c, delta) = ssm.input_projections(&mut g, &p, x);
        assert!(g.data(b).iter().all(|&v| v == 0.0));
        assert!(g.data(c).iter().all(|&v| v == 0.0));
        assert_eq!(g.shape(delta), [5, 3]);
        for &v in g.data(delta) {
            assert!((v - 1.0).abs() < 1e-15, "delta at init: {v}");
        }
    }

    #[test]
    fn delta_stays_positive_over_random_sweep() {
        let mut r = SplitMix64::new(2);
        for trial in 0..100 {
            let mut ps = ParamStore::new();
            let ssm = ScalableSsm::new(&mut ps, "ssm", 4, 3, &mut r);
            randomize(&mut ps, &mut r);
            let mut g = Graph::inference();
            let p = ps.bind(&mut g);
            let x = g.constant(rand_t(&mut r, &[100, 4], -3.0, 3.0));
            let (_, _, delta) = ssm.input_projections(&mut g, &p, x);
            assert!(
                g.data(delta).iter().all(|&v| v > 0.0),
                "nonpositive delta in trial {trial}"
            );
        }
    }

    #[test]
    fn modulation_is_exactly_neutral_at_init() {
        let mut r = SplitMix64::new(3);
        let mut ps = ParamStore::new();
        let ssm = ScalableSsm::new(&mut ps, "ssm", 3, 2, &mut r);
        for scale in [1.0, 1.7, 3.999, 12.0] {
            let mut g = Graph::new();
            let p = ps.bind(&mut g);
            let ctx = ctx_random(&mut r, 7, scale);
            let (dt_s, b_s) = ssm.scale_modulation(&mut g, &p, &ctx).unwrap();
            assert!(g.data(dt_s).iter().all(|&v| v == 1.0));
            assert!(g.data(b_s).iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn delta_scale_positive_over_random_parameterizations() {
        let mut r = SplitMix64::new(4);
        for _ in 0..100 {
            let mut ps = ParamStore::new();
            let ssm = ScalableSsm::new(&mut ps, "ssm", 4, 3, &mut r);
            randomize(&mut ps, &mut r);
            let mut g = Graph::inference();
            let p = ps.bind(&mut g);
            let scale = r.uniform(0.1, 8.0);
            let ctx = ctx_random(&mut r, 100, scale);
            let (dt_s, _) = ssm.scale_modulation(&mut g, &p, &ctx).unwrap();
            assert!(g.data(dt_s).iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn modulate_identities() {
        // Neutral factors leave the step unchanged, exactly.
        let mut g = Graph::new();
        let delta = g.leaf(Tensor::new(vec![2, 2], vec![0.5, 0.25, 2.0, 1.5]));
        let ones = g.constant(Tensor::full(vec![2, 2], 1.0));
        let same = g.mul(delta, ones);
        assert_eq!(g.data(same), g.data(delta));
        // Δ = 0.5 with Δ^scale = 2 → 1.0; doubling the factor doubles Δ′.
        let two = g.constant(Tensor::full(vec![2, 2], 2.0));
        let double = g.mul(delta, two);
        assert_eq!(g.data(double)[0], 1.0);
        let four = g.constant(Tensor::full(vec![2, 2], 4.0));
        let quad = g.mul(delta, four);
        for (a, b) in g.data(double).to_vec().iter().zip(g.data(quad)) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn fresh_sigma_is_bit_equal_to_scale_blind_scan() {
        let mut r = SplitMix64::new(5);
        let mut ps = ParamStore::new();
        let ssm = ScalableSsm::new(&mut ps, "ssm", 4, 3, &mut r);
        // Make ω projections non-trivial but keep σ at its fresh init.
        let xs = rand_t(&mut r, &[32, 4], -1.0, 1.0);
        for scale in [1.0, 2.5, 4.0] {
            let mut g = Graph::new();
            let p = ps.bind(&mut g);
            let x = g.constant(xs.clone());
            let ctx = ctx_random(&mut r, 32, scale);
            let modulated = ssm.forward(&mut g, &p, x, &ctx);
            let blind = ssm.forward_scale_blind(&mut g, &p, x);
            assert_eq!(g.data(modulated), g.data(blind), "not bit-equal at scale {scale}");
        }
    }

    #[test]
    fn one_training_step_makes_delta_scale_sensitive() {
        let mut r = SplitMix64::new(6);
        let mut ps = ParamStore::new();
        let ssm = ScalableSsm::new(&mut ps, "ssm", 3, 2, &mut r);
        let xs = rand_t(&mut r, &[8, 3], -1.0, 1.0);
        let coords = rand_t(&mut r, &[8, 2], -1.0, 1.0);

        let delta_at = |ps: &ParamStore, scale: f64| -> Vec<f64> {
            let mut g = Graph::inference();
            let p = ps.bind(&mut g);
            let x = g.constant(xs.clone());
            let ctx = ScaleContext::new(scale, coords.clone());
            let (_, _, delta) = ssm.input_projections(&mut g, &p, x);
            let (dt_s, _) = ssm.scale_modulation(&mut g, &p, &ctx).unwrap();
            let dm = g.mul(delta, dt_s);
            g.data(dm).to_vec()
        };
        // Identical before training.
        assert_eq!(delta_at(&ps, 2.0), delta_at(&ps, 4.0));

        // One Adam step on a loss that only pays off by reacting to scale:
        // push the scan output up at s=2 and down at s=4.
        let mut g = Graph::new();
        let p = ps.bind(&mut g);
        let x = g.constant(xs.clone());
        let y2 = ssm.forward(&mut g, &p, x, &ScaleContext::new(2.0, coords.clone()));
        let y4 = ssm.forward(&mut g, &p, x, &ScaleContext::new(4.0, coords.clone()));
        let s2 = g.sum_all(y2);
        let s4 = g.sum_all(y4);
        let neg = g.neg(s4);
        let loss = g.add(s2, neg);
        let grads = g.backward(loss);
        let gvec = ps.collect_grads(&p, &grads);
        let mut adam = AdamState::new(&ps);
        adam.step(&mut ps, &gvec, 1e-2);

        let d2 = delta_at(&ps, 2.0);
        let d4 = delta_at(&ps, 4.0);
        assert_ne!(d2, d4, "Δ′ should differ across scales after training");
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let mut r = SplitMix64::new(7);
        let mut ps = ParamStore::new();
        let ssm = ScalableSsm::new(&mut ps, "ssm", 2, 2, &mut r);
        randomize(&mut ps, &mut r);
        let xs = rand_t(&mut r, &[5, 2], -1.0, 1.0);
        let coords = rand_t(&mut r, &[5, 2], -1.0, 1.0);

        // Analytic gradients (including wrt x).
        let mut g = Graph::new();
        let p = ps.bind(&mut g);
        let x = g.leaf(xs.clone());
        let ctx = ScaleContext::new(1.8, coords.clone());
        let y = ssm.forward(&mut g, &p, x, &ctx);
        let loss = g.sum_all(y);
        let grads = g.backward(loss);
        let analytic = ps.collect_grads(&p, &grads);
        let dx = grads.expect(x).to_vec();

        let mut eval = |ps: &ParamStore| -> f64 {
            let mut g = Graph::inference();
            let p = ps.bind(&mut g);
            let x = g.constant(xs.clone());
            let ctx = ScaleContext::new(1.8, coords.clone());
            let y = ssm.forward(&mut g, &p, x, &ctx);
            g.data(y).iter().sum()
        };
        let report = fd_store_check(&mut ps, &mut eval, &analytic, 1e-5, 1e-4, 1e-8, None, &mut r);
        assert_eq!(report.failed, 0, "{:?}", report.failures);
        assert!(report.checked > 100);

        // And wrt the input sequence.
        let h = 1e-5;
        for i in 0..xs.data.len() {
            let fd = {
                let mut hi = xs.clone();
                hi.data[i] += h;
                let mut lo = xs.clone();
                lo.data[i] -= h;
                let f = |t: &Tensor| -> f64 {
                    let mut g = Graph::inference();
                    let p = ps.bind(&mut g);
                    let x = g.constant(t.clone());
                    let ctx = ScaleContext::new(1.8, coords.clone());
                    let y = ssm.forward(&mut g, &p, x, &ctx);
                    g.data(y).iter().sum()
                };
                (f(&hi) - f(&lo)) / (2.0 * h)
            };
            let got = dx[i];
            assert!(
                (fd - got).abs() <= 1e-4 * fd.abs().max(got.abs()) + 1e-8,
                "dx[{i}]: {got} vs {fd}"
            );
        }
    }

    #[test]
    #[should_panic(expected = "scale must be positive")]
    fn nonpositive_scale_rejected() {
        ScaleContext::new(0.0, Tensor::zeros(vec![1, 2]));
    }

    #[test]
    fn unmodulated_variant_has_no_sigma_parameters_and_ignores_scale() {
        let mut r = SplitMix64::new(8);
        let mut ps_mod = ParamStore::new();
        let mut r2 = SplitMix64::new(8);
        let mut ps_plain = ParamStore::new();
        let withs = ScalableSsm::new(&mut ps_mod, "ssm", 3, 2, &mut r);
        let without = ScalableSsm::new_unmodulated(&mut ps_plain, "ssm", 3, 2, &mut r2);
        assert!(withs.has_sigma() && !without.has_sigma());

        // Parameter name sets differ exactly by the σ heads.
        let names = |ps: &ParamStore| -> Vec<String> {
            (0..ps.len()).map(|i| ps.name(ParamId(i)).to_string()).collect()
        };
        let extra: Vec<String> = names(&ps_mod)
            .into_iter()
            .filter(|n| !names(&ps_plain).contains(n))
            .collect();
        assert!(!extra.is_empty());
        assert!(extra.iter().all(|n| n.contains(".sigma_dt.") || n.contains(".sigma_b.")));

        // With identical seeds the shared parameters coincide, so the
        // unmodulated forward (any scale) matches the scale-blind scan.
        let xs = rand_t(&mut r, &[6, 3], -1.0, 1.0);
        let coords = rand_t(&mut r, &[6, 2], -1.0, 1.0);
        let mut g = Graph::new();
        let p = ps_plain.bind(&mut g);
        let x = g.constant(xs);
        let y = without.forward(&mut g, &p, x, &ScaleContext::new(3.0, coords));
        let blind = without.forward_scale_blind(&mut g, &p, x);
        assert_eq!(g.data(y), g.data(blind));
    }
}
