//! The full arbitrary-scale super-resolution network: a small convolutional
//! backbone, local unfolded features fused with a global SSSM branch, per-
//! query nearest-cell feature gathering, and a pluggable decoder head (see
//! [`decoder`]).
//!
//! Feature maps are [1, C, H, W]; query batches are [Q, 2] normalized
//! coordinates ordered raster-major (the decoder scans run over that
//! sequence). Outputs are [Q, 3] RGB rows in (0,1).

pub mod decoder;

use crate::block::{cell_center_coords, BlockConfig, SssmBlock};
use crate::data::rng::SplitMix64;
use crate::graph::{Graph, PadMode, Var};
use crate::nn::{BoundParams, Conv2dLayer, ParamStore};
use crate::tensor::Tensor;
use crate::Result;
use decoder::{build_decoder, Decoder, DecoderSpec, DecoderState};
use serde::{Deserialize, Serialize};

/// Architecture hyperparameters; `Default` is the toy profile.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Backbone / feature channel count C.
    pub d_model: usize,
    /// SSM state size N per channel.
    pub n_state: usize,
    /// Residual conv blocks in the backbone.
    pub res_blocks: usize,
    /// SSSM blocks in the global branch.
    pub gfe_blocks: usize,
    /// Decoder registry name: one of "mlp", "ssm", "sssm".
    pub decoder: String,
    /// Ablation: build the global SSSM branch (false = pass features through).
    pub use_gfe: bool,
    /// Ablation: build the decoder's attention branch.
    pub use_sfatt: bool,
    /// Hidden width for the MLP decoder; 0 = auto-size for parity.
    pub mlp_hidden: usize,
    /// Predict a correction on top of the bicubic upsample instead of raw
    /// RGB: the head's logits are added to the interpolant's logits, so a
    /// fresh model reproduces bicubic exactly. The interpolant is treated
    /// as a constant (gradients flow only through the learned correction).
    pub residual_over_bicubic: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            n_state: 8,
            res_blocks: 4,
            gfe_blocks: 2,
            decoder: "sssm".to_string(),
            use_gfe: true,
            use_sfatt: true,
            mlp_hidden: 0,
            residual_over_bicubic: false,
        }
    }
}

impl ModelConfig {
    /// Gathered feature width: 9·C local + C global + 4 extras.
    pub fn gathered_dim(&self) -> usize {
        10 * self.d_model + 4
    }
}

/// Shallow conv → R residual blocks (conv-SiLU-conv + skip) → final conv.
/// The second conv of every residual block starts at zero.
pub struct Backbone {
    shallow: Conv2dLayer,
    blocks: Vec<(Conv2dLayer, Conv2dLayer)>,
    last: Conv2dLayer,
}

impl Backbone {
    fn new(ps: &mut ParamStore, name: &str, d_model: usize, res_blocks: usize, rng: &mut SplitMix64) -> Self {
        let conv = |ps: &mut ParamStore, n: String, ci: usize, co: usize, rng: &mut SplitMix64| {
            Conv2dLayer::new(ps, &n, ci, co, 3, 1, PadMode::Replicate, true, rng)
        };
        let shallow = conv(ps, format!("{name}.shallow"), 3, d_model, rng);
        let mut blocks = Vec::new();
        for i in 0..res_blocks {
            let c1 = conv(ps, format!("{name}.res{i}.conv1"), d_model, d_model, rng);
            let c2 = conv(ps, format!("{name}.res{i}.conv2"), d_model, d_model, rng);
            ps.get_mut(c2.w).data.fill(0.0); // residual projection starts silent
            blocks.push((c1, c2));
        }
        let last = conv(ps, format!("{name}.last"), d_model, d_model, rng);
        Backbone { shallow, blocks, last }
    }

    fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Var {
        let mut f = self.shallow.forward(g, p, x);
        for (c1, c2) in &self.blocks {
            let h = c1.forward(g, p, f);
            let a = g.silu(h);
            let o = c2.forward(g, p, a);
            f = g.add(f, o);
        }
        self.last.forward(g, p, f)
    }
}

/// Raster index of the LR cell whose center is nearest to each query
/// coordinate (rows are (coord₀, coord₁) in [−1, 1]).
pub fn nearest_cells(coords: &Tensor, h: usize, w: usize) -> Vec<usize> {
    let q = coords.shape[0];
    let clamp_floor = |v: f64, n: usize| -> usize {
        let i = ((v + 1.0) * n as f64 / 2.0).floor();
        (i.max(0.0) as usize).min(n - 1)
    };
    (0..q)
        .map(|k| {
            let i = clamp_floor(coords.data[k * 2], h);
            let j = clamp_floor(coords.data[k * 2 + 1], w);
            i * w + j
        })
        .collect()
}

/// Logits of the bicubic interpolant of `lr` at normalized query
/// coordinates, clamped away from {0, 1} so a correction head always has
/// slope to work with. Rows are queries, columns RGB.
fn base_logits(lr: &Tensor, coords: &Tensor) -> Tensor {
    let (h, w) = (lr.shape[2], lr.shape[3]);
    let pts: Vec<(f64, f64)> = (0..coords.shape[0])
        .map(|k| {
            (
                (coords.data[k * 2] + 1.0) / 2.0 * h as f64 - 0.5,
                (coords.data[k * 2 + 1] + 1.0) / 2.0 * w as f64 - 0.5,
            )
        })
        .collect();
    let mut b = crate::data::resample::bicubic_sample(lr, &pts);
    for v in &mut b.data {
        let y = v.clamp(1e-6, 1.0 - 1e-6);
        *v = (y / (1.0 - y)).ln();
    }
    b
}

/// Per-query extra features appended to the gathered rows:
/// (rel₀·H, rel₁·W, s, 1/s) with rel = query − nearest cell center.
pub fn gather_extras(coords: &Tensor, cells: &[usize], h: usize, w: usize, scale: f64) -> Tensor {
    let q = coords.shape[0];
    let mut data = Vec::with_capacity(q * 4);
    for k in 0..q {
        let (ci, cj) = (cells[k] / w, cells[k] % w);
        let center0 = -1.0 + (2 * ci + 1) as f64 / h as f64;
        let center1 = -1.0 + (2 * cj + 1) as f64 / w as f64;
        data.push((coords.data[k * 2] - center0) * h as f64);
        data.push((coords.data[k * 2 + 1] - center1) * w as f64);
        data.push(scale);
        data.push(1.0 / scale);
    }
    Tensor::new(vec![q, 4], data)
}

/// The assembled network.
pub struct S3Model {
    pub cfg: ModelConfig,
    backbone: Backbone,
    gfe: Vec<SssmBlock>,
    decoder: Box<dyn Decoder>,
}

impl S3Model {
    /// Build all parameters into `ps`. Fails only on an unknown decoder name.
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig, rng: &mut SplitMix64) -> Result<Self> {
        let backbone = Backbone::new(ps, "backbone", cfg.d_model, cfg.res_blocks, rng);
        let mut gfe = Vec::new();
        if cfg.use_gfe {
            for i in 0..cfg.gfe_blocks {
                let bc = BlockConfig::new(cfg.d_model, cfg.n_state);
                gfe.push(SssmBlock::new(ps, &format!("gfe{i}"), bc, rng));
            }
        }
        let spec = DecoderSpec {
            in_dim: cfg.gathered_dim(),
            d: cfg.d_model,
            d_inner: 2 * cfg.d_model,
            n_state: cfg.n_state,
            mlp_hidden: cfg.mlp_hidden,
            use_alpha: cfg.use_sfatt,
        };
        let decoder = build_decoder(&cfg.decoder, ps, "dec", &spec, rng)?;
        Ok(S3Model { cfg: cfg.clone(), backbone, gfe, decoder })
    }

    /// The decoder head (for structural tests and diagnostics).
    pub fn decoder(&self) -> &dyn Decoder {
        self.decoder.as_ref()
    }

    /// Global branch: the SSSM block stack (identity bypass when disabled).
    pub fn global_features(&self, g: &mut Graph, p: &BoundParams, f_lr: Var, scale: f64) -> Var {
        let mut f = f_lr;
        for block in &self.gfe {
            f = block.forward(g, p, f, scale);
        }
        f
    }

    /// Backbone + local/global fusion: [1, 3, h, w] → [1, 10·C, h, w].
    pub fn fusion_features(&self, g: &mut Graph, p: &BoundParams, lr: Var, scale: f64) -> Var {
        let f_lr = self.backbone.forward(g, p, lr);
        let f_local = g.unfold3x3(f_lr);
        let f_global = self.global_features(g, p, f_lr, scale);
        g.concat_channels(&[f_local, f_global])
    }

    /// Full forward from an LR image variable already on the tape.
    pub fn forward_var(&self, g: &mut Graph, p: &BoundParams, lr: Var, coords_hr: &Tensor, scale: f64) -> Var {
        let q = coords_hr.shape[0];
        assert!(q > 0, "empty query batch");
        assert!(scale > 0.0, "scale must be positive");
        let shape = g.shape(lr).to_vec();
        let (h, w) = (shape[2], shape[3]);
        let fusion = self.fusion_features(g, p, lr, scale);
        let seq = g.map_to_seq(fusion); // [hw, 10C]
        let cells = nearest_cells(coords_hr, h, w);
        let extras = gather_extras(coords_hr, &cells, h, w, scale);
        let picked = g.gather_rows(seq, cells);
        let ev = g.constant(extras);
        let f_hr = g.concat_cols(&[picked, ev]);
        let rgb = self.decoder.forward(g, p, f_hr, coords_hr, scale);
        if !self.cfg.residual_over_bicubic {
            return rgb;
        }
        let lr_t = Tensor::new(shape, g.data(lr).to_vec());
        let base = g.constant(base_logits(&lr_t, coords_hr));
        let ly = g.logit(rgb);
        let sum = g.add(ly, base);
        g.sigmoid(sum)
    }

    /// Full forward from an LR image tensor (placed on the tape as a constant).
    pub fn forward(&self, g: &mut Graph, p: &BoundParams, lr: &Tensor, coords_hr: &Tensor, scale: f64) -> Var {
        let v = g.constant(lr.clone());
        self.forward_var(g, p, v, coords_hr, scale)
    }

    /// Full-grid upscale by `scale` with bounded memory: fusion features are
    /// computed once, then the HR grid is decoded in `chunk`-query pieces
    /// with carried scan state (bit-identical to a single-pass decode).
    pub fn upscale(&self, ps: &ParamStore, lr: &Tensor, scale: f64, chunk: usize) -> Tensor {
        assert!(scale > 0.0, "scale must be positive");
        assert!(chunk > 0, "chunk size must be positive");
        let (h, w) = (lr.shape[2], lr.shape[3]);
        let (hh, hw) = ((h as f64 * scale).floor() as usize, (w as f64 * scale).floor() as usize);
        assert!(hh > 0 && hw > 0, "output grid is empty");

        // One inference pass for the fused LR features.
        let fusion_seq = {
            let mut g = Graph::inference();
            let p = ps.bind(&mut g);
            let v = g.constant(lr.clone());
            let fusion = self.fusion_features(&mut g, &p, v, scale);
            let seq = g.map_to_seq(fusion);
            Tensor::new(g.shape(seq).to_vec(), g.data(seq).to_vec())
        };
        let fdim = fusion_seq.shape[1];

        let coords = cell_center_coords(hh, hw); // raster-major HR grid
        let q_total = hh * hw;
        let mut out = Tensor::zeros(vec![1, 3, hh, hw]);
        let mut state = self.decoder.begin_state();
        let mut start = 0;
        while start < q_total {
            let len = chunk.min(q_total - start);
            let chunk_coords = Tensor::new(
                vec![len, 2],
                coords.data[start * 2..(start + len) * 2].to_vec(),
            );
            let cells = nearest_cells(&chunk_coords, h, w);
            let extras = gather_extras(&chunk_coords, &cells, h, w, scale);
            let mut rows = Vec::with_capacity(len * (fdim + 4));
            for (k, &cell) in cells.iter().enumerate() {
                rows.extend_from_slice(&fusion_seq.data[cell * fdim..(cell + 1) * fdim]);
                rows.extend_from_slice(&extras.data[k * 4..(k + 1) * 4]);
            }
            let mut g = Graph::inference();
            let p = ps.bind(&mut g);
            let f_hr = g.constant(Tensor::new(vec![len, fdim + 4], rows));
            let mut rgb = self.decoder.forward_chunk(&mut g, &p, f_hr, &chunk_coords, scale, &mut state);
            if self.cfg.residual_over_bicubic {
                let base = g.constant(base_logits(lr, &chunk_coords));
                let ly = g.logit(rgb);
                let sum = g.add(ly, base);
                rgb = g.sigmoid(sum);
            }
            let data = g.data(rgb);
            for k in 0..len {
                for c in 0..3 {
                    out.data[c * q_total + start + k] = data[k * 3 + c];
                }
            }
            start += len;
        }
        out
    }
}

/// Reusable chunked-decode state (re-exported for callers that stream).
pub type StreamState = DecoderState;
