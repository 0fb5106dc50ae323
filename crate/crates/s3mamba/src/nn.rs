//! Named parameter storage and the small layer toolkit (linear, conv,
//! layer-norm, two-layer MLP) built on the autodiff graph.
//!
//! Parameters live in a [`ParamStore`] — a name-ordered `Vec`, never a hash
//! map, so iteration order (and therefore optimizer state, checkpoints, and
//! replays) is deterministic. Each training step binds the store onto a
//! fresh [`Graph`] as leaves via [`ParamStore::bind`].

use crate::data::rng::SplitMix64;
use crate::graph::{Gradients, Graph, PadMode, Var};
use crate::tensor::Tensor;

/// Index of one parameter tensor in its store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

struct Param {
    name: String,
    value: Tensor,
}

/// Ordered, named collection of trainable tensors.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor under a unique dotted name (e.g. "gfe.0.in_proj.w").
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name: {name}"
        );
        self.entries.push(Param { name, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|p| p.value.data.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|p| p.name == name)
            .map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|p| (p.name.as_str(), &p.value))
    }

    /// Create one graph leaf per parameter, in store order.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            vars: self.entries.iter().map(|p| g.leaf(p.value.clone())).collect(),
        }
    }

    /// Collect gradients in store order after a backward pass; parameters
    /// the loss does not reach get zeros.
    pub fn collect_grads(&self, bound: &BoundParams, grads: &Gradients) -> Vec<Vec<f64>> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, p)| match grads.get(bound.vars[i]) {
                Some(gv) => gv.to_vec(),
                None => vec![0.0; p.value.data.len()],
            })
            .collect()
    }
}

/// Graph leaves for one bound store, indexed by [`ParamId`].
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Kaiming-uniform fill: U(−√(6/fan_in), √(6/fan_in)).
pub fn kaiming_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut SplitMix64) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(-bound, bound)).collect())
}

/// Dense layer: x [R, in] ↦ x·W + b with W stored [in, out].
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut SplitMix64,
    ) -> Self {
        let w = ps.add(
            format!("{name}.w"),
            kaiming_uniform(vec![in_dim, out_dim], in_dim, rng),
        );
        let b = bias.then(|| ps.add(format!("{name}.b"), Tensor::zeros(vec![out_dim])));
        Linear { w, b, in_dim, out_dim }
    }

    /// All-zero layer (used for residual output projections and modulation
    /// heads, whose neutral-at-init behavior the model depends on).
    pub fn new_zeroed(
        ps: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let w = ps.add(format!("{name}.w"), Tensor::zeros(vec![in_dim, out_dim]));
        let b = bias.then(|| ps.add(format!("{name}.b"), Tensor::zeros(vec![out_dim])));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Var {
        let y = g.matmul(x, p.var(self.w));
        match self.b {
            Some(b) => g.add(y, p.var(b)),
            None => y,
        }
    }
}

/// Convolution layer wrapper (1×1 or 3×3, stride 1, same size).
pub struct Conv2dLayer {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub groups: usize,
    pub pad: PadMode,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        groups: usize,
        pad: PadMode,
        bias: bool,
        rng: &mut SplitMix64,
    ) -> Self {
        let c_in_g = c_in / groups;
        let w = ps.add(
            format!("{name}.w"),
            kaiming_uniform(vec![c_out, c_in_g, k, k], c_in_g * k * k, rng),
        );
        let b = bias.then(|| ps.add(format!("{name}.b"), Tensor::zeros(vec![c_out])));
        Conv2dLayer { w, b, groups, pad }
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Var {
        g.conv2d(x, p.var(self.w), self.b.map(|b| p.var(b)), self.groups, self.pad)
    }
}

/// Learned per-channel normalization over the last dim of [R, C].
pub struct LayerNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormLayer {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNormLayer {
            gamma: ps.add(format!("{name}.gamma"), Tensor::full(vec![dim], 1.0)),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(vec![dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Var {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta))
    }
}

/// Two-layer MLP with SiLU: fc2(silu(fc1(x))). With `zero_final` the second
/// layer starts at exactly zero, making the whole map the zero function.
pub struct Mlp2 {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp2 {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        zero_final: bool,
        rng: &mut SplitMix64,
    ) -> Self {
        let fc1 = Linear::new(ps, &format!("{name}.fc1"), in_dim, hidden, true, rng);
        let fc2 = if zero_final {
            Linear::new_zeroed(ps, &format!("{name}.fc2"), hidden, out_dim, true)
        } else {
            Linear::new(ps, &format!("{name}.fc2"), hidden, out_dim, true, rng)
        };
        Mlp2 { fc1, fc2 }
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Var {
        let h = self.fc1.forward(g, p, x);
        let h = g.silu(h);
        self.fc2.forward(g, p, h)
    }
}
