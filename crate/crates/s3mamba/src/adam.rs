//! Adam optimizer with bias correction, over a [`ParamStore`].

use crate::nn::ParamStore;

/// Adam moment estimates and step counter. The moment buffers are aligned
/// with the store's parameter order.
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Fresh state (zero moments) shaped like `store`.
    pub fn new(store: &ParamStore) -> Self {
        AdamState {
            m: store.iter().map(|(_, t)| vec![0.0; t.data.len()]).collect(),
            v: store.iter().map(|(_, t)| vec![0.0; t.data.len()]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update: p ← p − lr·m̂/(√v̂ + ε) with bias-corrected moments.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) {
        assert_eq!(grads.len(), self.m.len(), "gradient count mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = &mut store.get_mut(crate::nn::ParamId(i)).data;
            assert_eq!(g.len(), p.len(), "gradient shape mismatch at param {i}");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g[j];
                debug_assert!(gj.is_finite(), "non-finite gradient");
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * mhat / (vhat.sqrt() + self.eps);
                debug_assert!(p[j].is_finite(), "non-finite parameter after update");
            }
        }
    }
}
