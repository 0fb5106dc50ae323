//! The 2-D SSSM block: pre-norm, channel expansion, depthwise 3×3 mixing,
//! SiLU, four-direction scalable scans (shared parameters), mean merge,
//! and a zero-initialized output projection feeding a residual connection.
//!
//! Because the output projection starts at zero, a fresh block is exactly
//! the identity map; because the σ heads start neutral, it is exactly
//! scale-blind until training moves them.

use crate::data::rng::SplitMix64;
use crate::graph::{Graph, PadMode, Var};
use crate::nn::{BoundParams, Conv2dLayer, LayerNormLayer, Linear, ParamStore};
use crate::ssm::layer::{ScalableSsm, ScaleContext};
use crate::tensor::Tensor;

/// Widths of one block.
#[derive(Debug, Clone, Copy)]
pub struct BlockConfig {
    pub d_model: usize,
    pub d_inner: usize,
    pub n_state: usize,
}

impl BlockConfig {
    /// Default expansion: d_inner = 2·d_model.
    pub fn new(d_model: usize, n_state: usize) -> Self {
        BlockConfig { d_model, d_inner: 2 * d_model, n_state }
    }
}

/// Number of scan directions (fixed).
pub const DIRECTIONS: usize = 4;

/// Visit order of raster positions for one scan direction on an H×W map:
/// element k is the raster index scanned at step k.
/// 0 = row-major, 1 = row-major reversed, 2 = column-major,
/// 3 = column-major reversed.
pub fn direction_order(dir: usize, h: usize, w: usize) -> Vec<usize> {
    let hw = h * w;
    match dir {
        0 => (0..hw).collect(),
        1 => (0..hw).rev().collect(),
        2 => {
            let mut v = Vec::with_capacity(hw);
            for j in 0..w {
                for i in 0..h {
                    v.push(i * w + j);
                }
            }
            v
        }
        3 => {
            let mut v = direction_order(2, h, w);
            v.reverse();
            v
        }
        _ => panic!("invalid scan direction {dir}"),
    }
}

/// Inverse permutation: maps scanned sequence positions back to raster.
pub fn inverse_order(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; order.len()];
    for (k, &src) in order.iter().enumerate() {
        inv[src] = k;
    }
    inv
}

/// Normalized cell-center coordinates of an H×W grid, raster order:
/// coord(i, j) = (−1 + (2i+1)/H, −1 + (2j+1)/W).
pub fn cell_center_coords(h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(h * w * 2);
    for i in 0..h {
        for j in 0..w {
            data.push(-1.0 + (2 * i + 1) as f64 / h as f64);
            data.push(-1.0 + (2 * j + 1) as f64 / w as f64);
        }
    }
    Tensor::new(vec![h * w, 2], data)
}

/// One residual SSSM block over [1, d_model, H, W] feature maps.
pub struct SssmBlock {
    pub cfg: BlockConfig,
    norm: LayerNormLayer,
    proj_in: Linear,
    dwconv: Conv2dLayer,
    ssm: ScalableSsm,
    proj_out: Linear,
}

impl SssmBlock {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: BlockConfig, rng: &mut SplitMix64) -> Self {
        let norm = LayerNormLayer::new(ps, &format!("{name}.norm"), cfg.d_model);
        let proj_in = Linear::new(ps, &format!("{name}.proj_in"), cfg.d_model, cfg.d_inner, true, rng);
        let dwconv = Conv2dLayer::new(
            ps,
            &format!("{name}.dwconv"),
            cfg.d_inner,
            cfg.d_inner,
            3,
            cfg.d_inner,
            PadMode::Replicate,
            true,
            rng,
        );
        let ssm = ScalableSsm::new(ps, &format!("{name}.ssm"), cfg.d_inner, cfg.n_state, rng);
        // Zero so the whole block starts as the identity (residual safety).
        let proj_out = Linear::new_zeroed(ps, &format!("{name}.proj_out"), cfg.d_inner, cfg.d_model, true);
        SssmBlock { cfg, norm, proj_in, dwconv, ssm, proj_out }
    }

    /// Access to the inner scan layer (for structural tests).
    pub fn ssm(&self) -> &ScalableSsm {
        &self.ssm
    }

    /// Access to the depthwise convolution (for structural tests).
    pub fn dwconv(&self) -> &Conv2dLayer {
        &self.dwconv
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, f: Var, scale: f64) -> Var {
        self.forward_impl(g, p, f, Some(scale))
    }

    /// The unmodulated block: identical path but with σ bypassed.
    pub fn forward_scale_blind(&self, g: &mut Graph, p: &BoundParams, f: Var) -> Var {
        self.forward_impl(g, p, f, None)
    }

    fn forward_impl(&self, g: &mut Graph, p: &BoundParams, f: Var, scale: Option<f64>) -> Var {
        let sf = g.shape(f).to_vec();
        assert!(sf.len() == 4 && sf[0] == 1, "block input must be [1, C, H, W]");
        assert_eq!(sf[1], self.cfg.d_model, "block channel mismatch");
        let (h, w) = (sf[2], sf[3]);
        let coords = cell_center_coords(h, w);

        let seq_f = g.map_to_seq(f); // [HW, C]
        let normed = self.norm.forward(g, p, seq_f);
        let expanded = self.proj_in.forward(g, p, normed); // [HW, D_inner]
        let xmap = g.seq_to_map(expanded, h, w);
        let mixed = self.dwconv.forward(g, p, xmap);
        let act = g.silu(mixed);
        let xs = g.map_to_seq(act); // [HW, D_inner]

        let mut merged: Option<Var> = None;
        for dir in 0..DIRECTIONS {
            let order = direction_order(dir, h, w);
            let xd = g.gather_rows(xs, order.clone());
            let yd = match scale {
                Some(s) => {
                    let cd = gather_coords(&coords, &order);
                    self.ssm.forward(g, p, xd, &ScaleContext::new(s, cd))
                }
                None => self.ssm.forward_scale_blind(g, p, xd),
            };
            let back = g.gather_rows(yd, inverse_order(&order));
            merged = Some(match merged {
                Some(acc) => g.add(acc, back),
                None => back,
            });
        }
        let mean = g.mul_scalar(merged.unwrap(), 1.0 / DIRECTIONS as f64);
        let proj = self.proj_out.forward(g, p, mean); // [HW, C]
        let out_seq = g.add(seq_f, proj);
        g.seq_to_map(out_seq, h, w)
    }
}

/// Reorder an [L, 2] coordinate tensor by a scan order.
fn gather_coords(coords: &Tensor, order: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(order.len() * 2);
    for &src in order {
        data.push(coords.data[src * 2]);
        data.push(coords.data[src * 2 + 1]);
    }
    Tensor::new(vec![order.len(), 2], data)
}
