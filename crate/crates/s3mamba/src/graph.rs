//! Define-by-run reverse-mode autodiff over dense f64 tensors.
//!
//! A [`Graph`] is an append-only tape of [`Node`]s; building an operation
//! runs its forward computation immediately and records what backward needs.
//! [`Graph::backward`] then walks the tape once in reverse, accumulating
//! vector–Jacobian products into per-node gradient buffers.
//!
//! Design notes:
//! - Single-threaded, fixed evaluation order: repeated runs are bit-identical.
//! - Shape errors are programmer errors and panic; numeric problems are
//!   caught by debug assertions at the boundaries (leaves, scan output,
//!   backward root).
//! - Graphs built with [`Graph::inference`] skip gradient bookkeeping and
//!   the memory for saved activations.

use crate::fastmath::fast_exp;
use crate::linalg::{matmul, matmul_nt_acc, matmul_tn_acc};
use crate::ssm::scan::{discretize, scan_discrete, scan_vjp, ScanDims};
use crate::tensor::{broadcast_shape, Tensor};

/// Handle to a node in one specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

/// Spatial padding behavior for 3×3 convolutions and unfolding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Replicate,
}

/// Epsilon inside layer-norm's variance square root.
pub const LN_EPS: f64 = 1e-5;

/// States saved by the scan forward pass for its backward sweep.
struct ScanSaved {
    abar: Vec<f64>,
    bbar: Vec<f64>,
    h: Vec<f64>,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Exp(Var),
    Log(Var),
    Neg(Var),
    Silu(Var),
    Sigmoid(Var),
    Logit(Var),
    Softplus(Var),
    Tanh(Var),
    Abs(Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Matmul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        groups: usize,
        pad: PadMode,
        col: Option<Vec<f64>>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        /// Per-row (mean, inv_std), saved when gradients are needed.
        stats: Option<Vec<f64>>,
    },
    Unfold3x3(Var),
    ConcatChannels(Vec<Var>),
    MapToSeq(Var),
    SeqToMap {
        x: Var,
        h: usize,
        w: usize,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    GatherRows {
        x: Var,
        idx: Box<[usize]>,
    },
    SumAll(Var),
    MeanAll(Var),
    SelectiveScan {
        x: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d_skip: Var,
        dims: ScanDims,
        h0: Option<Vec<f64>>,
        saved: Option<Box<ScanSaved>>,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

/// Gradient buffers produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    g: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `v`, if any was
    /// accumulated (None for nodes the root does not depend on, and for
    /// no-grad nodes).
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.g.get(v.0).and_then(|o| o.as_deref())
    }

    /// As `get`, panicking when the gradient is absent.
    pub fn expect(&self, v: Var) -> &[f64] {
        self.get(v).expect("no gradient accumulated for this var")
    }
}

/// Define-by-run tape.
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Tape with gradient bookkeeping on.
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grad_enabled: true }
    }

    /// Tape that only runs forward math: no activations are saved and
    /// `backward` must not be called.
    pub fn inference() -> Self {
        Graph { nodes: Vec::new(), grad_enabled: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].data.len()
    }

    /// Clone a node's value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { op, shape, data, requires_grad: requires_grad && self.grad_enabled });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf (gradient accumulated when the graph tracks grads).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        debug_assert!(t.all_finite(), "non-finite leaf value");
        self.push(Op::Leaf, t.shape, t.data, true)
    }

    /// Non-trainable input (no gradient is ever accumulated for it).
    pub fn constant(&mut self, t: Tensor) -> Var {
        debug_assert!(t.all_finite(), "non-finite constant value");
        self.push(Op::Leaf, t.shape, t.data, false)
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, make: impl FnOnce(Var, Var) -> Op) -> Var {
        let out_shape = broadcast_shape(self.shape(a), self.shape(b));
        let (ad, bd) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let data = if self.nodes[a.0].shape == self.nodes[b.0].shape {
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        } else if out_shape.len() <= 2 {
            // Strided broadcast, no index tables.
            let (rows, cols) = rank2_dims(&out_shape);
            let (ars, acs) = bc_strides2(rows, cols, &self.nodes[a.0].shape);
            let (brs, bcs) = bc_strides2(rows, cols, &self.nodes[b.0].shape);
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                let (ab, bb) = (r * ars, r * brs);
                match (acs, bcs) {
                    (1, 1) => data.extend(
                        ad[ab..ab + cols].iter().zip(&bd[bb..bb + cols]).map(|(&x, &y)| f(x, y)),
                    ),
                    (1, 0) => {
                        let y = bd[bb];
                        data.extend(ad[ab..ab + cols].iter().map(|&x| f(x, y)));
                    }
                    (0, 1) => {
                        let x = ad[ab];
                        data.extend(bd[bb..bb + cols].iter().map(|&y| f(x, y)));
                    }
                    _ => data.extend(std::iter::repeat_n(f(ad[ab], bd[bb]), cols)),
                }
            }
            data
        } else {
            let ao = bc_offsets(&out_shape, &self.nodes[a.0].shape);
            let bo = bc_offsets(&out_shape, &self.nodes[b.0].shape);
            ao.iter().zip(&bo).map(|(&i, &j)| f(ad[i], bd[j])).collect()
        };
        let req = self.requires(a) || self.requires(b);
        self.push(make(a, b), out_shape, data, req)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        if cfg!(debug_assertions) {
            assert!(
                self.nodes[b.0].data.iter().all(|&v| v != 0.0),
                "division by zero"
            );
        }
        self.binary(a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, make: impl FnOnce(Var) -> Op) -> Var {
        let data = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let req = self.requires(a);
        self.push(make(a), shape, data, req)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, fast_exp, Op::Exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid)
    }

    /// Inverse sigmoid, ln(y/(1−y)); inputs must lie strictly in (0, 1).
    pub fn logit(&mut self, a: Var) -> Var {
        self.unary(a, |y| (y / (1.0 - y)).ln(), Op::Logit)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let data = self.nodes[a.0].data.iter().map(|&x| x + s).collect();
        let shape = self.nodes[a.0].shape.clone();
        let req = self.requires(a);
        self.push(Op::AddScalar(a), shape, data, req)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let data = self.nodes[a.0].data.iter().map(|&x| x * s).collect();
        let shape = self.nodes[a.0].shape.clone();
        let req = self.requires(a);
        self.push(Op::MulScalar(a, s), shape, data, req)
    }

    // ---- linear algebra --------------------------------------------------

    /// [M,K] × [K,N] → [M,N].
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2, "matmul wants rank-2, got {sa:?} × {sb:?}");
        assert_eq!(sa[1], sb[0], "matmul inner dims: {sa:?} × {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul(&self.nodes[a.0].data, &self.nodes[b.0].data, &mut out, m, k, n);
        let req = self.requires(a) || self.requires(b);
        self.push(Op::Matmul(a, b), vec![m, n], out, req)
    }

    // ---- convolution ------------------------------------------------------

    /// 2-D convolution, stride 1, same spatial size. Kernels are 1×1
    /// (groups = 1, no padding) or 3×3 (pad 1, zero or replicate); 3×3 may
    /// be depthwise (groups = channels). `w` is [C_out, C_in/groups, k, k].
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, groups: usize, pad: PadMode) -> Var {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        assert!(sx.len() == 4 && sw.len() == 4, "conv2d shapes {sx:?}, {sw:?}");
        let (bsz, c_in, hh, ww) = (sx[0], sx[1], sx[2], sx[3]);
        let (c_out, c_in_g, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        assert!(kh == kw && (kh == 1 || kh == 3), "kernel must be 1×1 or 3×3");
        let k = kh;
        if groups == 1 {
            assert_eq!(c_in_g, c_in, "weight channels mismatch");
        } else {
            assert!(
                groups == c_in && c_out == c_in && c_in_g == 1 && k == 3,
                "grouped conv must be 3×3 depthwise (groups = channels)"
            );
        }
        if let Some(bv) = bias {
            assert_eq!(self.shape(bv), [c_out], "bias shape");
        }
        let hw = hh * ww;
        let req = self.requires(x) || self.requires(w) || bias.is_some_and(|b| self.requires(b));

        let xd = &self.nodes[x.0].data;
        let wd = &self.nodes[w.0].data;
        let mut out = vec![0.0; bsz * c_out * hw];
        let mut col_saved: Option<Vec<f64>> = None;

        if groups != 1 {
            // Depthwise 3×3: direct taps.
            for bz in 0..bsz {
                let xb = &xd[bz * c_in * hw..(bz + 1) * c_in * hw];
                let ob = &mut out[bz * c_out * hw..(bz + 1) * c_out * hw];
                for c in 0..c_in {
                    let xp = &xb[c * hw..(c + 1) * hw];
                    let wp = &wd[c * 9..(c + 1) * 9];
                    let op = &mut ob[c * hw..(c + 1) * hw];
                    dw_conv_plane(xp, wp, op, hh, ww, pad);
                }
            }
        } else if k == 1 {
            for bz in 0..bsz {
                let xb = &xd[bz * c_in * hw..(bz + 1) * c_in * hw];
                let ob = &mut out[bz * c_out * hw..(bz + 1) * c_out * hw];
                matmul(wd, xb, ob, c_out, c_in, hw);
            }
        } else {
            // 3×3 dense: im2col + matmul. Col rows are channel-major
            // (row c·9 + t holds tap t of channel c).
            let mut cols = vec![0.0; bsz * c_in * 9 * hw];
            for bz in 0..bsz {
                let xb = &xd[bz * c_in * hw..(bz + 1) * c_in * hw];
                let cb = &mut cols[bz * c_in * 9 * hw..(bz + 1) * c_in * 9 * hw];
                im2col3(xb, cb, c_in, hh, ww, pad);
                let ob = &mut out[bz * c_out * hw..(bz + 1) * c_out * hw];
                matmul(wd, cb, ob, c_out, c_in * 9, hw);
            }
            if req {
                col_saved = Some(cols);
            }
        }
        if let Some(bv) = bias {
            let bd = &self.nodes[bv.0].data;
            for bz in 0..bsz {
                for c in 0..c_out {
                    let o = &mut out[(bz * c_out + c) * hw..(bz * c_out + c + 1) * hw];
                    let add = bd[c];
                    o.iter_mut().for_each(|v| *v += add);
                }
            }
        }
        self.push(
            Op::Conv2d { x, w, bias, groups, pad, col: col_saved },
            vec![bsz, c_out, hh, ww],
            out,
            req,
        )
    }

    // ---- normalization ----------------------------------------------------

    /// Per-row channel normalization of a [R, C] tensor with learned scale
    /// and shift: (x − μ)/√(σ² + 1e-5)·γ + β.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let sx = self.shape(x).to_vec();
        assert_eq!(sx.len(), 2, "layer_norm wants [rows, channels]");
        let (rows, c) = (sx[0], sx[1]);
        assert_eq!(self.shape(gamma), [c], "gamma shape");
        assert_eq!(self.shape(beta), [c], "beta shape");
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);

        let xd = &self.nodes[x.0].data;
        let gd = &self.nodes[gamma.0].data;
        let bd = &self.nodes[beta.0].data;
        let mut out = vec![0.0; rows * c];
        let mut stats = if req { Some(vec![0.0; rows * 2]) } else { None };
        for r in 0..rows {
            let xr = &xd[r * c..(r + 1) * c];
            let mean = xr.iter().sum::<f64>() / c as f64;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            let or = &mut out[r * c..(r + 1) * c];
            for i in 0..c {
                or[i] = (xr[i] - mean) * inv * gd[i] + bd[i];
            }
            if let Some(st) = stats.as_deref_mut() {
                st[r * 2] = mean;
                st[r * 2 + 1] = inv;
            }
        }
        self.push(Op::LayerNorm { x, gamma, beta, stats }, sx, out, req)
    }

    // ---- layout -----------------------------------------------------------

    /// Stack each 3×3 replicate-padded neighborhood into channels:
    /// [B, C, H, W] → [B, 9C, H, W], out channel c·9 + t holding tap t
    /// (t = ky·3 + kx) of input channel c.
    pub fn unfold3x3(&mut self, x: Var) -> Var {
        let sx = self.shape(x).to_vec();
        assert_eq!(sx.len(), 4, "unfold3x3 wants [B, C, H, W]");
        let (bsz, c_in, hh, ww) = (sx[0], sx[1], sx[2], sx[3]);
        let hw = hh * ww;
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; bsz * c_in * 9 * hw];
        for bz in 0..bsz {
            let xb = &xd[bz * c_in * hw..(bz + 1) * c_in * hw];
            let ob = &mut out[bz * c_in * 9 * hw..(bz + 1) * c_in * 9 * hw];
            im2col3(xb, ob, c_in, hh, ww, PadMode::Replicate);
        }
        let req = self.requires(x);
        self.push(Op::Unfold3x3(x), vec![bsz, c_in * 9, hh, ww], out, req)
    }

    /// Concatenate feature maps along the channel dimension.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let s0 = self.shape(parts[0]).to_vec();
        assert_eq!(s0.len(), 4);
        let (bsz, hh, ww) = (s0[0], s0[2], s0[3]);
        let hw = hh * ww;
        let mut c_total = 0;
        for &p in parts {
            let sp = self.shape(p);
            assert!(sp.len() == 4 && sp[0] == bsz && sp[2] == hh && sp[3] == ww, "concat_channels shape mismatch");
            c_total += sp[1];
        }
        let mut out = vec![0.0; bsz * c_total * hw];
        for bz in 0..bsz {
            let mut coff = 0;
            for &p in parts {
                let cp = self.shape(p)[1];
                let pd = &self.nodes[p.0].data;
                out[(bz * c_total + coff) * hw..(bz * c_total + coff + cp) * hw]
                    .copy_from_slice(&pd[bz * cp * hw..(bz + 1) * cp * hw]);
                coff += cp;
            }
        }
        let req = parts.iter().any(|&p| self.requires(p));
        self.push(Op::ConcatChannels(parts.to_vec()), vec![bsz, c_total, hh, ww], out, req)
    }

    /// [1, C, H, W] → [H·W, C] (row-major positions).
    pub fn map_to_seq(&mut self, x: Var) -> Var {
        let sx = self.shape(x).to_vec();
        assert!(sx.len() == 4 && sx[0] == 1, "map_to_seq wants [1, C, H, W]");
        let (c, hh, ww) = (sx[1], sx[2], sx[3]);
        let hw = hh * ww;
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; hw * c];
        for ch in 0..c {
            for p in 0..hw {
                out[p * c + ch] = xd[ch * hw + p];
            }
        }
        let req = self.requires(x);
        self.push(Op::MapToSeq(x), vec![hw, c], out, req)
    }

    /// [H·W, C] → [1, C, H, W] (inverse of `map_to_seq`).
    pub fn seq_to_map(&mut self, x: Var, h: usize, w: usize) -> Var {
        let sx = self.shape(x).to_vec();
        assert!(sx.len() == 2 && sx[0] == h * w, "seq_to_map wants [{h}·{w}, C]");
        let c = sx[1];
        let hw = h * w;
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; c * hw];
        for p in 0..hw {
            for ch in 0..c {
                out[ch * hw + p] = xd[p * c + ch];
            }
        }
        let req = self.requires(x);
        self.push(Op::SeqToMap { x, h, w }, vec![1, c, h, w], out, req)
    }

    /// Concatenate rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0])[0];
        let mut c_total = 0;
        for &p in parts {
            let sp = self.shape(p);
            assert!(sp.len() == 2 && sp[0] == rows, "concat_cols shape mismatch");
            c_total += sp[1];
        }
        let mut out = vec![0.0; rows * c_total];
        let mut coff = 0;
        for &p in parts {
            let cp = self.shape(p)[1];
            let pd = &self.nodes[p.0].data;
            for r in 0..rows {
                out[r * c_total + coff..r * c_total + coff + cp]
                    .copy_from_slice(&pd[r * cp..(r + 1) * cp]);
            }
            coff += cp;
        }
        let req = parts.iter().any(|&p| self.requires(p));
        self.push(Op::ConcatCols(parts.to_vec()), vec![rows, c_total], out, req)
    }

    /// Columns [start, start+len) of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let sx = self.shape(x).to_vec();
        assert!(sx.len() == 2 && start + len <= sx[1], "slice_cols out of range");
        let (rows, c) = (sx[0], sx[1]);
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; rows * len];
        for r in 0..rows {
            out[r * len..(r + 1) * len].copy_from_slice(&xd[r * c + start..r * c + start + len]);
        }
        let req = self.requires(x);
        self.push(Op::SliceCols { x, start, len }, vec![rows, len], out, req)
    }

    /// Select rows by index (duplicates allowed; backward scatter-adds).
    /// A permutation index reorders rows bijectively.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let sx = self.shape(x).to_vec();
        assert_eq!(sx.len(), 2, "gather_rows wants rank-2");
        let (rows, c) = (sx[0], sx[1]);
        assert!(idx.iter().all(|&i| i < rows), "gather_rows index out of range");
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; idx.len() * c];
        for (q, &r) in idx.iter().enumerate() {
            out[q * c..(q + 1) * c].copy_from_slice(&xd[r * c..(r + 1) * c]);
        }
        let req = self.requires(x);
        let shape = vec![idx.len(), c];
        self.push(Op::GatherRows { x, idx: idx.into_boxed_slice() }, shape, out, req)
    }

    // ---- reductions ---------------------------------------------------------

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let req = self.requires(x);
        self.push(Op::SumAll(x), vec![1], vec![s], req)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.numel(x);
        assert!(n > 0, "mean of empty tensor");
        let s: f64 = self.nodes[x.0].data.iter().sum::<f64>() / n as f64;
        let req = self.requires(x);
        self.push(Op::MeanAll(x), vec![1], vec![s], req)
    }

    /// Mean absolute error between two equal-shaped tensors.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "l1_loss shapes");
        let d = self.sub(a, b);
        let d = self.abs(d);
        self.mean_all(d)
    }

    // ---- selective scan -------------------------------------------------------

    /// Fused selective-scan: ZOH-discretize (a, b, Δ) per step and run the
    /// recurrence. x, delta: [L, D]; a: [D, N]; b, c: [L, N]; d_skip: [D];
    /// output [L, D]. Gradients flow to all six inputs.
    pub fn selective_scan(&mut self, x: Var, delta: Var, a: Var, b: Var, c: Var, d_skip: Var) -> Var {
        self.scan_impl(x, delta, a, b, c, d_skip, None).0
    }

    /// As `selective_scan`, but seeds the state with `h0` ([D, N], treated
    /// as a constant) and returns the final state alongside the output, so
    /// long sequences can run in exact chunks.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan_carry(
        &mut self,
        x: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d_skip: Var,
        h0: Option<Vec<f64>>,
    ) -> (Var, Vec<f64>) {
        self.scan_impl(x, delta, a, b, c, d_skip, h0)
    }

    #[allow(clippy::too_many_arguments)]
    fn scan_impl(
        &mut self,
        x: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d_skip: Var,
        h0: Option<Vec<f64>>,
    ) -> (Var, Vec<f64>) {
        let sx = self.shape(x).to_vec();
        assert_eq!(sx.len(), 2, "scan x wants [L, D]");
        let (l, d_inner) = (sx[0], sx[1]);
        let n_state = {
            let sa = self.shape(a);
            assert!(sa.len() == 2 && sa[0] == d_inner, "scan a wants [D, N]");
            sa[1]
        };
        assert_eq!(self.shape(delta), [l, d_inner], "scan delta shape");
        assert_eq!(self.shape(b), [l, n_state], "scan b shape");
        assert_eq!(self.shape(c), [l, n_state], "scan c shape");
        assert_eq!(self.shape(d_skip), [d_inner], "scan d_skip shape");
        if let Some(h0) = &h0 {
            assert_eq!(h0.len(), d_inner * n_state, "scan h0 length");
        }
        let dims = ScanDims { l, d_inner, n_state };
        let req = [x, delta, a, b, c, d_skip].iter().any(|&v| self.requires(v));

        let mut abar = vec![0.0; dims.states()];
        let mut bbar = vec![0.0; dims.states()];
        discretize(
            dims,
            &self.nodes[delta.0].data,
            &self.nodes[a.0].data,
            &self.nodes[b.0].data,
            &mut abar,
            &mut bbar,
        );
        let mut y = vec![0.0; l * d_inner];
        let mut h_final = vec![0.0; d_inner * n_state];
        let saved = if req {
            let mut h = vec![0.0; dims.states()];
            scan_discrete(
                dims,
                &abar,
                &bbar,
                &self.nodes[x.0].data,
                &self.nodes[c.0].data,
                &self.nodes[d_skip.0].data,
                h0.as_deref(),
                &mut y,
                Some(&mut h),
                Some(&mut h_final),
            );
            Some(Box::new(ScanSaved { abar, bbar, h }))
        } else {
            scan_discrete(
                dims,
                &abar,
                &bbar,
                &self.nodes[x.0].data,
                &self.nodes[c.0].data,
                &self.nodes[d_skip.0].data,
                h0.as_deref(),
                &mut y,
                None,
                Some(&mut h_final),
            );
            None
        };
        let v = self.push(
            Op::SelectiveScan { x, delta, a, b, c, d_skip, dims, h0, saved },
            vec![l, d_inner],
            y,
            req,
        );
        (v, h_final)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar root. Returns per-node gradients.
    pub fn backward(&self, root: Var) -> Gradients {
        assert!(self.grad_enabled, "backward on an inference graph");
        assert_eq!(self.numel(root), 1, "backward root must be scalar");
        debug_assert!(self.nodes[root.0].data[0].is_finite(), "non-finite loss");
        let mut g: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gi) = g[i].take() else { continue };
            self.accumulate(i, &gi, &mut g);
            g[i] = Some(gi);
        }
        Gradients { g }
    }

    /// Get-or-allocate the gradient buffer of `v` (only for nodes that
    /// require grad) and apply `f` to it.
    fn with_grad(&self, g: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.requires(v) {
            return;
        }
        let buf = g[v.0].get_or_insert_with(|| vec![0.0; self.numel(v)]);
        f(buf);
    }

    fn accumulate(&self, i: usize, gi: &[f64], g: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.bc_binary_back(g, *a, *b, &node.shape, gi, |_, _| (1.0, 1.0));
            }
            Op::Sub(a, b) => {
                self.bc_binary_back(g, *a, *b, &node.shape, gi, |_, _| (1.0, -1.0));
            }
            Op::Mul(a, b) => {
                self.bc_binary_back(g, *a, *b, &node.shape, gi, |x, y| (y, x));
            }
            Op::Div(a, b) => {
                self.bc_binary_back(g, *a, *b, &node.shape, gi, |x, y| (1.0 / y, -x / (y * y)));
            }
            Op::Exp(a) => self.with_grad(g, *a, |ga| {
                for ((gv, ov), gav) in gi.iter().zip(&node.data).zip(ga) {
                    *gav += gv * ov;
                }
            }),
            Op::Log(a) => {
                let ad = &self.nodes[a.0].data;
                self.with_grad(g, *a, |ga| {
                    for ((gv, xv), gav) in gi.iter().zip(ad).zip(ga) {
                        *gav += gv / xv;
                    }
                })
            }
            Op::Neg(a) => self.with_grad(g, *a, |ga| {
                for (gv, gav) in gi.iter().zip(ga) {
                    *gav -= gv;
                }
            }),
            Op::Silu(a) => {
                let ad = &self.nodes[a.0].data;
                self.with_grad(g, *a, |ga| {
                    for ((gv, &xv), gav) in gi.iter().zip(ad).zip(ga) {
                        let s = sigmoid(xv);
                        *gav += gv * s * (1.0 + xv * (1.0 - s));
                    }
                })
            }
            Op::Sigmoid(a) => self.with_grad(g, *a, |ga| {
                for ((gv, &ov), gav) in gi.iter().zip(&node.data).zip(ga) {
                    *gav += gv * ov * (1.0 - ov);
                }
            }),
            Op::Logit(a) => {
                let ad = &self.nodes[a.0].data;
                self.with_grad(g, *a, |ga| {
                    for ((gv, &yv), gav) in gi.iter().zip(ad).zip(ga) {
                        *gav += gv / (yv * (1.0 - yv));
                    }
                })
            }
            Op::Softplus(a) => {
                let ad = &self.nodes[a.0].data;
                self.with_grad(g, *a, |ga| {
                    for ((gv, &xv), gav) in gi.iter().zip(ad).zip(ga) {
                        *gav += gv * sigmoid(xv);
                    }
                })
            }
            Op::Tanh(a) => self.with_grad(g, *a, |ga| {
                for ((gv, &ov), gav) in gi.iter().zip(&node.data).zip(ga) {
                    *gav += gv * (1.0 - ov * ov);
                }
            }),
            Op::Abs(a) => {
                let ad = &self.nodes[a.0].data;
                self.with_grad(g, *a, |ga| {
                    for ((gv, &xv), gav) in gi.iter().zip(ad).zip(ga) {
                        // Subgradient 0 at the kink.
                        *gav += gv * if xv > 0.0 { 1.0 } else if xv < 0.0 { -1.0 } else { 0.0 };
                    }
                })
            }
            Op::AddScalar(a) => self.with_grad(g, *a, |ga| {
                for (gv, gav) in gi.iter().zip(ga) {
                    *gav += gv;
                }
            }),
            Op::MulScalar(a, s) => {
                let s = *s;
                self.with_grad(g, *a, |ga| {
                    for (gv, gav) in gi.iter().zip(ga) {
                        *gav += gv * s;
                    }
                })
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let ad = &self.nodes[a.0].data;
                let bd = &self.nodes[b.0].data;
                self.with_grad(g, *a, |ga| matmul_nt_acc(gi, bd, ga, m, n, k));
                self.with_grad(g, *b, |gb| matmul_tn_acc(ad, gi, gb, k, m, n));
            }
            Op::Conv2d { x, w, bias, groups, pad, col } => {
                self.conv2d_back(g, gi, *x, *w, *bias, *groups, *pad, col.as_deref());
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let stats = stats.as_ref().expect("layer_norm stats not saved");
                let (rows, c) = (node.shape[0], node.shape[1]);
                let xd = &self.nodes[x.0].data;
                let gd = &self.nodes[gamma.0].data;
                self.with_grad(g, *x, |gx| {
                    for r in 0..rows {
                        let (mean, inv) = (stats[r * 2], stats[r * 2 + 1]);
                        let gr = &gi[r * c..(r + 1) * c];
                        let xr = &xd[r * c..(r + 1) * c];
                        let mut m1 = 0.0; // mean of dxhat
                        let mut m2 = 0.0; // mean of dxhat·xhat
                        for i in 0..c {
                            let xh = (xr[i] - mean) * inv;
                            let dxh = gr[i] * gd[i];
                            m1 += dxh;
                            m2 += dxh * xh;
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        let gxr = &mut gx[r * c..(r + 1) * c];
                        for i in 0..c {
                            let xh = (xr[i] - mean) * inv;
                            let dxh = gr[i] * gd[i];
                            gxr[i] += inv * (dxh - m1 - xh * m2);
                        }
                    }
                });
                self.with_grad(g, *gamma, |gg| {
                    for r in 0..rows {
                        let (mean, inv) = (stats[r * 2], stats[r * 2 + 1]);
                        for i in 0..c {
                            gg[i] += gi[r * c + i] * (xd[r * c + i] - mean) * inv;
                        }
                    }
                });
                self.with_grad(g, *beta, |gb| {
                    for r in 0..rows {
                        for i in 0..c {
                            gb[i] += gi[r * c + i];
                        }
                    }
                });
            }
            Op::Unfold3x3(x) => {
                let sx = self.shape(*x);
                let (bsz, c_in, hh, ww) = (sx[0], sx[1], sx[2], sx[3]);
                let hw = hh * ww;
                self.with_grad(g, *x, |gx| {
                    for bz in 0..bsz {
                        let gb = &gi[bz * c_in * 9 * hw..(bz + 1) * c_in * 9 * hw];
                        let xb = &mut gx[bz * c_in * hw..(bz + 1) * c_in * hw];
                        col2im3_acc(gb, xb, c_in, hh, ww, PadMode::Replicate);
                    }
                });
            }
            Op::ConcatChannels(parts) => {
                let (bsz, hh, ww) = (node.shape[0], node.shape[2], node.shape[3]);
                let hw = hh * ww;
                let c_total = node.shape[1];
                let mut coff = 0;
                for &p in parts {
                    let cp = self.shape(p)[1];
                    self.with_grad(g, p, |gp| {
                        for bz in 0..bsz {
                            let src = &gi[(bz * c_total + coff) * hw..(bz * c_total + coff + cp) * hw];
                            let dst = &mut gp[bz * cp * hw..(bz + 1) * cp * hw];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    coff += cp;
                }
            }
            Op::MapToSeq(x) => {
                let sx = self.shape(*x);
                let (c, hw) = (sx[1], sx[2] * sx[3]);
                self.with_grad(g, *x, |gx| {
                    for p in 0..hw {
                        for ch in 0..c {
                            gx[ch * hw + p] += gi[p * c + ch];
                        }
                    }
                });
            }
            Op::SeqToMap { x, h, w } => {
                let c = self.shape(*x)[1];
                let hw = h * w;
                self.with_grad(g, *x, |gx| {
                    for p in 0..hw {
                        for ch in 0..c {
                            gx[p * c + ch] += gi[ch * hw + p];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let rows = node.shape[0];
                let c_total = node.shape[1];
                let mut coff = 0;
                for &p in parts {
                    let cp = self.shape(p)[1];
                    self.with_grad(g, p, |gp| {
                        for r in 0..rows {
                            for j in 0..cp {
                                gp[r * cp + j] += gi[r * c_total + coff + j];
                            }
                        }
                    });
                    coff += cp;
                }
            }
            Op::SliceCols { x, start, len } => {
                let c = self.shape(*x)[1];
                let rows = node.shape[0];
                self.with_grad(g, *x, |gx| {
                    for r in 0..rows {
                        for j in 0..*len {
                            gx[r * c + start + j] += gi[r * len + j];
                        }
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let c = node.shape[1];
                self.with_grad(g, *x, |gx| {
                    for (q, &r) in idx.iter().enumerate() {
                        for j in 0..c {
                            gx[r * c + j] += gi[q * c + j];
                        }
                    }
                });
            }
            Op::SumAll(a) => self.with_grad(g, *a, |ga| {
                for gav in ga.iter_mut() {
                    *gav += gi[0];
                }
            }),
            Op::MeanAll(a) => {
                let n = self.numel(*a) as f64;
                self.with_grad(g, *a, |ga| {
                    for gav in ga.iter_mut() {
                        *gav += gi[0] / n;
                    }
                })
            }
            Op::SelectiveScan { x, delta, a, b, c, d_skip, dims, h0, saved } => {
                let saved = saved.as_ref().expect("scan states not saved");
                let grads = scan_vjp(
                    *dims,
                    &self.nodes[x.0].data,
                    &self.nodes[delta.0].data,
                    &self.nodes[a.0].data,
                    &self.nodes[b.0].data,
                    &self.nodes[c.0].data,
                    &self.nodes[d_skip.0].data,
                    h0.as_deref(),
                    &saved.abar,
                    &saved.bbar,
                    &saved.h,
                    gi,
                );
                let pairs: [(Var, &Vec<f64>); 6] = [
                    (*x, &grads.dx),
                    (*delta, &grads.ddelta),
                    (*a, &grads.da),
                    (*b, &grads.db),
                    (*c, &grads.dc),
                    (*d_skip, &grads.dd_skip),
                ];
                for (v, src) in pairs {
                    self.with_grad(g, v, |gv| {
                        for (d, s) in gv.iter_mut().zip(src) {
                            *d += s;
                        }
                    });
                }
            }
        }
    }

    /// Shared backward for broadcasting binary ops: `df` returns the local
    /// partials (∂out/∂a, ∂out/∂b) at one element.
    fn bc_binary_back(
        &self,
        g: &mut [Option<Vec<f64>>],
        a: Var,
        b: Var,
        out_shape: &[usize],
        gi: &[f64],
        df: impl Fn(f64, f64) -> (f64, f64) + Copy,
    ) {
        let ad = &self.nodes[a.0].data;
        let bd = &self.nodes[b.0].data;
        if self.nodes[a.0].shape == self.nodes[b.0].shape {
            self.with_grad(g, a, |ga| {
                for i in 0..gi.len() {
                    ga[i] += gi[i] * df(ad[i], bd[i]).0;
                }
            });
            self.with_grad(g, b, |gb| {
                for i in 0..gi.len() {
                    gb[i] += gi[i] * df(ad[i], bd[i]).1;
                }
            });
        } else if out_shape.len() <= 2 {
            let (rows, cols) = rank2_dims(out_shape);
            let (ars, acs) = bc_strides2(rows, cols, &self.nodes[a.0].shape);
            let (brs, bcs) = bc_strides2(rows, cols, &self.nodes[b.0].shape);
            self.with_grad(g, a, |ga| {
                for r in 0..rows {
                    let (ab, bb) = (r * ars, r * brs);
                    for c in 0..cols {
                        let (ai, bi) = (ab + c * acs, bb + c * bcs);
                        ga[ai] += gi[r * cols + c] * df(ad[ai], bd[bi]).0;
                    }
                }
            });
            self.with_grad(g, b, |gb| {
                for r in 0..rows {
                    let (ab, bb) = (r * ars, r * brs);
                    for c in 0..cols {
                        let (ai, bi) = (ab + c * acs, bb + c * bcs);
                        gb[bi] += gi[r * cols + c] * df(ad[ai], bd[bi]).1;
                    }
                }
            });
        } else {
            let ao = bc_offsets(out_shape, &self.nodes[a.0].shape);
            let bo = bc_offsets(out_shape, &self.nodes[b.0].shape);
            self.with_grad(g, a, |ga| {
                for i in 0..gi.len() {
                    ga[ao[i]] += gi[i] * df(ad[ao[i]], bd[bo[i]]).0;
                }
            });
            self.with_grad(g, b, |gb| {
                for i in 0..gi.len() {
                    gb[bo[i]] += gi[i] * df(ad[ao[i]], bd[bo[i]]).1;
                }
            });
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_back(
        &self,
        g: &mut [Option<Vec<f64>>],
        gi: &[f64],
        x: Var,
        w: Var,
        bias: Option<Var>,
        groups: usize,
        pad: PadMode,
        col: Option<&[f64]>,
    ) {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let (bsz, c_in, hh, ww) = (sx[0], sx[1], sx[2], sx[3]);
        let (c_out, k) = (sw[0], sw[2]);
        let hw = hh * ww;
        let xd = &self.nodes[x.0].data;
        let wd = &self.nodes[w.0].data;

        if let Some(bv) = bias {
            self.with_grad(g, bv, |gb| {
                for bz in 0..bsz {
                    for c in 0..c_out {
                        gb[c] += gi[(bz * c_out + c) * hw..(bz * c_out + c + 1) * hw]
                            .iter()
                            .sum::<f64>();
                    }
                }
            });
        }

        if groups != 1 {
            // Depthwise 3×3.
            for bz in 0..bsz {
                let gb = &gi[bz * c_in * hw..(bz + 1) * c_in * hw];
                let xb = &xd[bz * c_in * hw..(bz + 1) * c_in * hw];
                self.with_grad(g, w, |gw| {
                    for c in 0..c_in {
                        dw_conv_back_w(
                            &xb[c * hw..(c + 1) * hw],
                            &gb[c * hw..(c + 1) * hw],
                            &mut gw[c * 9..(c + 1) * 9],
                            hh,
                            ww,
                            pad,
                        );
                    }
                });
                self.with_grad(g, x, |gx| {
                    let gxb = &mut gx[bz * c_in * hw..(bz + 1) * c_in * hw];
                    for c in 0..c_in {
                        dw_conv_back_x(
                            &wd[c * 9..(c + 1) * 9],
                            &gb[c * hw..(c + 1) * hw],
                            &mut gxb[c * hw..(c + 1) * hw],
                            hh,
                            ww,
                            pad,
                        );
                    }
                });
            }
        } else if k == 1 {
            for bz in 0..bsz {
                let gb = &gi[bz * c_out * hw..(bz + 1) * c_out * hw];
                let xb = &xd[bz * c_in * hw..(bz + 1) * c_in * hw];
                self.with_grad(g, w, |gw| matmul_nt_acc(gb, xb, gw, c_out, hw, c_in));
                self.with_grad(g, x, |gx| {
                    let gxb = &mut gx[bz * c_in * hw..(bz + 1) * c_in * hw];
                    matmul_tn_acc(wd, gb, gxb, c_in, c_out, hw);
                });
            }
        } else {
            let col = col.expect("conv col not saved");
            let ck = c_in * 9;
            for bz in 0..bsz {
                let gb = &gi[bz * c_out * hw..(bz + 1) * c_out * hw];
                let cb = &col[bz * ck * hw..(bz + 1) * ck * hw];
                self.with_grad(g, w, |gw| matmul_nt_acc(gb, cb, gw, c_out, hw, ck));
                self.with_grad(g, x, |gx| {
                    let mut dcol = vec![0.0; ck * hw];
                    matmul_tn_acc(wd, gb, &mut dcol, ck, c_out, hw);
                    let gxb = &mut gx[bz * c_in * hw..(bz + 1) * c_in * hw];
                    col2im3_acc(&dcol, gxb, c_in, hh, ww, pad);
                });
            }
        }
    }
}

// ---- math helpers ----------------------------------------------------------

pub use crate::fastmath::{sigmoid, softplus};

/// A rank ≤ 2 shape as (rows, cols).
#[inline]
fn rank2_dims(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        2 => (shape[0], shape[1]),
        1 => (1, shape[0]),
        _ => (1, 1),
    }
}

/// Row/column strides of `in_shape` broadcast to a rank ≤ 2 `out_shape`
/// of `rows × cols`: output element (r, c) reads input `r·rs + c·cs`.
/// Valid broadcasts only (each padded input dim is 1 or the output dim).
#[inline]
fn bc_strides2(rows: usize, cols: usize, in_shape: &[usize]) -> (usize, usize) {
    let (ir, ic) = rank2_dims(in_shape);
    let rs = if ir == 1 { 0 } else { ic };
    let cs = if ic == 1 { 0 } else { 1 };
    debug_assert!((ir == 1 || ir == rows) && (ic == 1 || ic == cols));
    (rs, cs)
}

/// For each element of the broadcast output shape, the source offset in a
/// tensor of shape `in_shape` (trailing-dimension broadcasting).
fn bc_offsets(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let r = out_shape.len();
    let mut pshape = vec![1usize; r];
    pshape[r - in_shape.len()..].copy_from_slice(in_shape);
    let mut strides = vec![0usize; r];
    let mut acc = 1usize;
    for i in (0..r).rev() {
        strides[i] = if pshape[i] == 1 { 0 } else { acc };
        acc *= pshape[i];
    }
    let n: usize = out_shape.iter().product();
    let mut offs = Vec::with_capacity(n);
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    for _ in 0..n {
        offs.push(off);
        for i in (0..r).rev() {
            idx[i] += 1;
            off += strides[i];
            if idx[i] < out_shape[i] {
                break;
            }
            off -= strides[i] * out_shape[i];
            idx[i] = 0;
        }
    }
    offs
}

/// Source row index for tap (dy, dx) at output row/col, or None for
/// zero-padded out-of-bounds taps.
#[inline]
fn tap_src(i: isize, limit: isize, pad: PadMode) -> Option<isize> {
    if (0..limit).contains(&i) {
        Some(i)
    } else {
        match pad {
            PadMode::Zero => None,
            PadMode::Replicate => Some(i.clamp(0, limit - 1)),
        }
    }
}

/// One-channel 3×3 convolution, stride 1, same size.
fn dw_conv_plane(x: &[f64], w9: &[f64], out: &mut [f64], h: usize, wd: usize, pad: PadMode) {
    for i in 0..h as isize {
        for j in 0..wd as isize {
            let mut acc = 0.0;
            for t in 0..9usize {
                let (dy, dx) = ((t / 3) as isize - 1, (t % 3) as isize - 1);
                if let (Some(si), Some(sj)) =
                    (tap_src(i + dy, h as isize, pad), tap_src(j + dx, wd as isize, pad))
                {
                    acc += w9[t] * x[(si * wd as isize + sj) as usize];
                }
            }
            out[(i * wd as isize + j) as usize] = acc;
        }
    }
}

fn dw_conv_back_w(x: &[f64], gout: &[f64], gw9: &mut [f64], h: usize, wd: usize, pad: PadMode) {
    for i in 0..h as isize {
        for j in 0..wd as isize {
            let gv = gout[(i * wd as isize + j) as usize];
            for t in 0..9usize {
                let (dy, dx) = ((t / 3) as isize - 1, (t % 3) as isize - 1);
                if let (Some(si), Some(sj)) =
                    (tap_src(i + dy, h as isize, pad), tap_src(j + dx, wd as isize, pad))
                {
                    gw9[t] += gv * x[(si * wd as isize + sj) as usize];
                }
            }
        }
    }
}

fn dw_conv_back_x(w9: &[f64], gout: &[f64], gx: &mut [f64], h: usize, wd: usize, pad: PadMode) {
    for i in 0..h as isize {
        for j in 0..wd as isize {
            let gv = gout[(i * wd as isize + j) as usize];
            for t in 0..9usize {
                let (dy, dx) = ((t / 3) as isize - 1, (t % 3) as isize - 1);
                if let (Some(si), Some(sj)) =
                    (tap_src(i + dy, h as isize, pad), tap_src(j + dx, wd as isize, pad))
                {
                    gx[(si * wd as isize + sj) as usize] += gv * w9[t];
                }
            }
        }
    }
}

/// Unfold 3×3 neighborhoods of a [C, H, W] plane stack into a
/// [C·9, H·W] matrix (row c·9 + t = tap t of channel c).
fn im2col3(x: &[f64], col: &mut [f64], c_in: usize, h: usize, w: usize, pad: PadMode) {
    let hw = h * w;
    for c in 0..c_in {
        let xp = &x[c * hw..(c + 1) * hw];
        for t in 0..9usize {
            let (dy, dx) = ((t / 3) as isize - 1, (t % 3) as isize - 1);
            let row = &mut col[(c * 9 + t) * hw..(c * 9 + t + 1) * hw];
            for i in 0..h as isize {
                for j in 0..w as isize {
                    row[(i * w as isize + j) as usize] = match (
                        tap_src(i + dy, h as isize, pad),
                        tap_src(j + dx, w as isize, pad),
                    ) {
                        (Some(si), Some(sj)) => xp[(si * w as isize + sj) as usize],
                        _ => 0.0,
                    };
                }
            }
        }
    }
}

/// Adjoint of `im2col3`: scatter-add col gradients back onto the plane.
fn col2im3_acc(dcol: &[f64], dx: &mut [f64], c_in: usize, h: usize, w: usize, pad: PadMode) {
    let hw = h * w;
    for c in 0..c_in {
        let xp = &mut dx[c * hw..(c + 1) * hw];
        for t in 0..9usize {
            let (dy, dxo) = ((t / 3) as isize - 1, (t % 3) as isize - 1);
            let row = &dcol[(c * 9 + t) * hw..(c * 9 + t + 1) * hw];
            for i in 0..h as isize {
                for j in 0..w as isize {
                    if let (Some(si), Some(sj)) = (
                        tap_src(i + dy, h as isize, pad),
                        tap_src(j + dxo, w as isize, pad),
                    ) {
                        xp[(si * w as isize + sj) as usize] += row[(i * w as isize + j) as usize];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::rng::SplitMix64;

    fn t1(data: &[f64]) -> Tensor {
        Tensor::new(vec![data.len()], data.to_vec())
    }

    fn t2(r: usize, c: usize, data: &[f64]) -> Tensor {
        Tensor::new(vec![r, c], data.to_vec())
    }

    fn rand_t(r: &mut SplitMix64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.uniform(lo, hi)).collect())
    }

    type Build = dyn Fn(&mut Graph, &[Var]) -> Var;

    fn eval(inputs: &[Tensor], build: &Build) -> f64 {
        let mut g = Graph::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.data(out)[0]
    }

    /// Check reverse-mode gradients of a scalar-valued builder against
    /// central finite differences on every input coordinate.
    fn fd_check(inputs: &[Tensor], rel_tol: f64, build: &Build) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars);
        assert_eq!(g.numel(out), 1, "fd_check wants a scalar output");
        let grads = g.backward(out);
        let h = 1e-5;
        for (vi, t) in inputs.iter().enumerate() {
            let ga = grads.expect(vars[vi]);
            for i in 0..t.data.len() {
                let mut lo = inputs.to_vec();
                lo[vi].data[i] -= h;
                let mut hi = inputs.to_vec();
                hi[vi].data[i] += h;
                let fd = (eval(&hi, build) - eval(&lo, build)) / (2.0 * h);
                let got = ga[i];
                let tol = rel_tol * fd.abs().max(got.abs()) + 1e-7;
                assert!(
                    (fd - got).abs() <= tol,
                    "input {vi} coord {i}: analytic {got} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn elementwise_reference_values() {
        let mut g = Graph::new();
        let x = g.leaf(t1(&[0.0, 1.0]));
        let e = g.exp(x);
        assert!((g.data(e)[0] - 1.0).abs() < 1e-15);
        assert!((g.data(e)[1] - std::f64::consts::E).abs() < 1e-15);
        let z = g.leaf(t1(&[0.0]));
        let sp = g.softplus(z);
        assert!((g.data(sp)[0] - std::f64::consts::LN_2).abs() < 1e-15);
        let si = g.silu(z);
        assert_eq!(g.data(si)[0], 0.0);
    }

    #[test]
    fn matmul_reference_values() {
        let mut g = Graph::new();
        let i2 = g.leaf(t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let m = g.leaf(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let p = g.matmul(i2, m);
        assert_eq!(g.data(p), [1.0, 2.0, 3.0, 4.0]);
        let a = g.leaf(t2(1, 2, &[1.0, 2.0]));
        let b = g.leaf(t2(2, 1, &[3.0, 4.0]));
        let d = g.matmul(a, b);
        assert_eq!(g.data(d), [11.0]);
    }

    #[test]
    fn matmul_gradient_matches_finite_differences_tightly() {
        let mut r = SplitMix64::new(1);
        let a = rand_t(&mut r, &[3, 3], -1.0, 1.0);
        let b = rand_t(&mut r, &[3, 3], -1.0, 1.0);
        fd_check(&[a, b], 1e-6, &|g, v| {
            let p = g.matmul(v[0], v[1]);
            g.sum_all(p)
        });
    }

    #[test]
    fn every_elementwise_op_gradient_matches_finite_differences() {
        let mut r = SplitMix64::new(2);
        let x = rand_t(&mut r, &[2, 3], 0.2, 1.8); // positive: safe for log/div
        let y = rand_t(&mut r, &[2, 3], 0.3, 1.5);
        type F = fn(&mut Graph, Var, Var) -> Var;
        let cases: Vec<(&str, F)> = vec![
            ("add", |g, a, b| g.add(a, b)),
            ("sub", |g, a, b| g.sub(a, b)),
            ("mul", |g, a, b| g.mul(a, b)),
            ("div", |g, a, b| g.div(a, b)),
            ("exp", |g, a, _| g.exp(a)),
            ("log", |g, a, _| g.log(a)),
            ("neg", |g, a, _| g.neg(a)),
            ("silu", |g, a, _| g.silu(a)),
            ("sigmoid", |g, a, _| g.sigmoid(a)),
            ("softplus", |g, a, _| g.softplus(a)),
            ("tanh", |g, a, _| g.tanh(a)),
            ("abs", |g, a, _| g.abs(a)),
            ("logit", |g, a, _| {
                let s = g.sigmoid(a); // squash into (0,1) first
                g.logit(s)
            }),
        ];
        for (name, f) in cases {
            let xc = x.clone();
            let yc = y.clone();
            fd_check(&[xc, yc], 1e-4, &move |g, v| {
                let o = f(g, v[0], v[1]);
                // Weighted sum makes the projection non-uniform.
                let o2 = g.mul(o, v[1]);
                g.sum_all(o2)
            });
            let _ = name;
        }
    }

    #[test]
    fn broadcast_add_row_vector_and_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.leaf(t1(&[10.0, 20.0, 30.0]));
        let s = g.add(a, b);
        assert_eq!(g.shape(s), [2, 3]);
        assert_eq!(g.data(s), [11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let tot = g.sum_all(s);
        let grads = g.backward(tot);
        assert_eq!(grads.expect(b), [2.0, 2.0, 2.0]);
        assert_eq!(grads.expect(a), [1.0; 6]);

        // Column-vector broadcast [2,1] ⊕ [2,3].
        let mut r = SplitMix64::new(3);
        let col = rand_t(&mut r, &[2, 1], -1.0, 1.0);
        let full = rand_t(&mut r, &[2, 3], -1.0, 1.0);
        fd_check(&[col, full], 1e-4, &|g, v| {
            let o = g.mul(v[0], v[1]);
            g.sum_all(o)
        });
    }

    #[test]
    #[cfg(debug_assertions)]
    #[should_panic(expected = "division by zero")]
    fn division_by_zero_is_checked_in_debug() {
        let mut g = Graph::new();
        let a = g.leaf(t1(&[1.0]));
        let b = g.leaf(t1(&[0.0]));
        g.div(a, b);
    }

    #[test]
    fn conv_identity_and_constant_preservation() {
        let mut g = Graph::new();
        // 1×1 conv with identity weights: unchanged.
        let x = g.leaf(Tensor::new(vec![1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let wid = g.leaf(Tensor::new(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]));
        let y = g.conv2d(x, wid, None, 1, PadMode::Zero);
        assert_eq!(g.data(y), g.data(x));
        // 3×3 depthwise all-ones on constant map, replicate pad: 9c.
        let c = g.leaf(Tensor::full(vec![1, 1, 3, 4], 2.5));
        let w1 = g.leaf(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let o = g.conv2d(c, w1, None, 1, PadMode::Replicate);
        for &v in g.data(o) {
            assert!((v - 22.5).abs() < 1e-12);
        }
        // Same via the depthwise path (groups = channels).
        let c2 = g.leaf(Tensor::full(vec![1, 2, 3, 3], -1.5));
        let w2 = g.leaf(Tensor::full(vec![2, 1, 3, 3], 1.0));
        let o2 = g.conv2d(c2, w2, None, 2, PadMode::Replicate);
        for &v in g.data(o2) {
            assert!((v + 13.5).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences_tightly() {
        let mut r = SplitMix64::new(4);
        let x = rand_t(&mut r, &[1, 2, 4, 4], -1.0, 1.0);
        let w = rand_t(&mut r, &[3, 2, 3, 3], -0.5, 0.5);
        let bias = rand_t(&mut r, &[3], -0.5, 0.5);
        for pad in [PadMode::Zero, PadMode::Replicate] {
            let ins = [x.clone(), w.clone(), bias.clone()];
            fd_check(&ins, 1e-6, &move |g, v| {
                let o = g.conv2d(v[0], v[1], Some(v[2]), 1, pad);
                // Square before reduction so every output influences the loss
                // with a distinct weight.
                let o2 = g.mul(o, o);
                g.sum_all(o2)
            });
        }
        // Depthwise and 1×1 paths.
        let wdw = rand_t(&mut r, &[2, 1, 3, 3], -0.5, 0.5);
        fd_check(&[x.clone(), wdw], 1e-6, &|g, v| {
            let o = g.conv2d(v[0], v[1], None, 2, PadMode::Replicate);
            let o2 = g.mul(o, o);
            g.sum_all(o2)
        });
        let w11 = rand_t(&mut r, &[3, 2, 1, 1], -0.5, 0.5);
        fd_check(&[x, w11], 1e-6, &|g, v| {
            let o = g.conv2d(v[0], v[1], None, 1, PadMode::Zero);
            let o2 = g.mul(o, o);
            g.sum_all(o2)
        });
    }

    #[test]
    fn layer_norm_reference_values() {
        let mut g = Graph::new();
        let gamma = g.leaf(t1(&[1.0, 1.0]));
        let beta = g.leaf(t1(&[0.0, 0.0]));
        // Constant row collapses to zero.
        let c = g.leaf(t2(1, 2, &[3.7, 3.7]));
        let o = g.layer_norm(c, gamma, beta);
        assert_eq!(g.data(o), [0.0, 0.0]);
        // [1, −1] normalizes to ±1/√(1+eps).
        let x = g.leaf(t2(1, 2, &[1.0, -1.0]));
        let o2 = g.layer_norm(x, gamma, beta);
        let want = 1.0 / (1.0 + LN_EPS).sqrt();
        assert!((g.data(o2)[0] - want).abs() < 1e-15);
        assert!((g.data(o2)[1] + want).abs() < 1e-15);
        // Random rows: output channel mean ~ 0.
        let mut r = SplitMix64::new(5);
        let g3 = g.leaf(t1(&[1.0, 1.0, 1.0, 1.0, 1.0]));
        let b3 = g.leaf(t1(&[0.0; 5]));
        let xr = g.leaf(rand_t(&mut r, &[4, 5], -2.0, 2.0));
        let o3 = g.layer_norm(xr, g3, b3);
        for row in g.data(o3).chunks(5) {
            assert!(row.iter().sum::<f64>().abs() / 5.0 < 1e-12);
        }
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let mut r = SplitMix64::new(6);
        let x = rand_t(&mut r, &[3, 4], -1.0, 1.0);
        let gamma = rand_t(&mut r, &[4], 0.5, 1.5);
        let beta = rand_t(&mut r, &[4], -0.5, 0.5);
        fd_check(&[x, gamma, beta], 1e-4, &|g, v| {
            let o = g.layer_norm(v[0], v[1], v[2]);
            let o2 = g.mul(o, o);
            g.sum_all(o2)
        });
    }

    #[test]
    fn unfold_3x3_values_and_gradient() {
        let mut g = Graph::new();
        // 1×1×2×2 map [[1,2],[3,4]]: at (0,0) the replicated window is
        // [[1,1,2],[1,1,2],[3,3,4]].
        let x = g.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let u = g.unfold3x3(x);
        assert_eq!(g.shape(u), [1, 9, 2, 2]);
        let d = g.data(u);
        let hw = 4;
        let at = |t: usize, p: usize| d[t * hw + p];
        assert_eq!(at(4, 0), 1.0); // center tap = identity
        assert_eq!(at(4, 3), 4.0);
        assert_eq!(at(0, 0), 1.0); // top-left tap at corner: clamped
        assert_eq!(at(8, 0), 4.0); // bottom-right tap at (0,0) → (1,1)
        assert_eq!(at(3, 1), 1.0); // left tap of (0,1) → (0,0)

        let mut r = SplitMix64::new(7);
        let xr = rand_t(&mut r, &[1, 2, 3, 3], -1.0, 1.0);
        fd_check(&[xr], 1e-4, &|g, v| {
            let u = g.unfold3x3(v[0]);
            let u2 = g.mul(u, u);
            g.sum_all(u2)
        });
    }

    #[test]
    fn layout_ops_roundtrip_and_gradients() {
        let mut r = SplitMix64::new(8);
        let x = rand_t(&mut r, &[1, 3, 2, 4], -1.0, 1.0);
        let mut g = Graph::new();
        let v = g.leaf(x.clone());
        let seq = g.map_to_seq(v);
        assert_eq!(g.shape(seq), [8, 3]);
        let back = g.seq_to_map(seq, 2, 4);
        assert_eq!(g.data(back), &x.data[..]);

        // concat_cols ∘ slice_cols round-trip.
        let a = rand_t(&mut r, &[4, 2], -1.0, 1.0);
        let b = rand_t(&mut r, &[4, 3], -1.0, 1.0);
        let va = g.leaf(a.clone());
        let vb = g.leaf(b.clone());
        let cat = g.concat_cols(&[va, vb]);
        assert_eq!(g.shape(cat), [4, 5]);
        let sa = g.slice_cols(cat, 0, 2);
        let sb = g.slice_cols(cat, 2, 3);
        assert_eq!(g.data(sa), &a.data[..]);
        assert_eq!(g.data(sb), &b.data[..]);

        // concat_channels values.
        let m1 = rand_t(&mut r, &[1, 2, 2, 2], -1.0, 1.0);
        let m2 = rand_t(&mut r, &[1, 1, 2, 2], -1.0, 1.0);
        let vm1 = g.leaf(m1.clone());
        let vm2 = g.leaf(m2.clone());
        let mc = g.concat_channels(&[vm1, vm2]);
        assert_eq!(g.shape(mc), [1, 3, 2, 2]);
        assert_eq!(&g.data(mc)[..8], &m1.data[..]);
        assert_eq!(&g.data(mc)[8..], &m2.data[..]);

        // Gradients through the whole layout chain.
        let xs = rand_t(&mut r, &[1, 2, 2, 3], -1.0, 1.0);
        let ys = rand_t(&mut r, &[1, 1, 2, 3], -1.0, 1.0);
        fd_check(&[xs, ys], 1e-4, &|g, v| {
            let cat = g.concat_channels(&[v[0], v[1]]);
            let seq = g.map_to_seq(cat);
            let left = g.slice_cols(seq, 0, 2);
            let right = g.slice_cols(seq, 1, 2);
            let prod = g.mul(left, right);
            let m = g.seq_to_map(prod, 2, 3);
            let m2 = g.mul(m, m);
            g.sum_all(m2)
        });
    }

    #[test]
    fn gather_rows_values_and_scatter_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t2(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let o = g.gather_rows(x, vec![2, 0, 2]);
        assert_eq!(g.data(o), [5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = g.sum_all(o);
        let grads = g.backward(s);
        // Row 2 was taken twice.
        assert_eq!(grads.expect(x), [1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);

        let mut r = SplitMix64::new(9);
        let xr = rand_t(&mut r, &[4, 3], -1.0, 1.0);
        fd_check(&[xr], 1e-4, &|g, v| {
            let o = g.gather_rows(v[0], vec![1, 1, 3, 0]);
            let o2 = g.mul(o, o);
            g.sum_all(o2)
        });
    }

    #[test]
    fn reductions_and_composites() {
        let mut g = Graph::new();
        let x = g.leaf(t1(&[1.0, 2.0, 3.0, 4.0]));
        let s = g.sum_all(x);
        let m = g.mean_all(x);
        assert_eq!(g.data(s), [10.0]);
        assert_eq!(g.data(m), [2.5]);
        let y = g.leaf(t1(&[2.0, 2.0, 2.0, 2.0]));
        let l = g.l1_loss(x, y);
        assert_eq!(g.data(l), [(1.0 + 0.0 + 1.0 + 2.0) / 4.0]);
        let grads = g.backward(l);
        assert_eq!(grads.expect(x), [-0.25, 0.0, 0.25, 0.25]);
    }

    #[test]
    fn selective_scan_on_tape_matches_finite_differences() {
        let mut r = SplitMix64::new(10);
        let (l, d, n) = (4, 2, 3);
        let x = rand_t(&mut r, &[l, d], -1.0, 1.0);
        let delta = rand_t(&mut r, &[l, d], 0.1, 1.2);
        let a = rand_t(&mut r, &[d, n], -2.5, -0.2);
        let b = rand_t(&mut r, &[l, n], -1.0, 1.0);
        let c = rand_t(&mut r, &[l, n], -1.0, 1.0);
        let dk = rand_t(&mut r, &[d], -1.0, 1.0);
        fd_check(&[x, delta, a, b, c, dk], 1e-4, &|g, v| {
            let y = g.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5]);
            let y2 = g.mul(y, y);
            g.sum_all(y2)
        });
    }

    #[test]
    fn forward_is_bit_identical_across_runs() {
        let run = || -> Vec<f64> {
            let mut r = SplitMix64::new(123);
            let mut g = Graph::new();
            let x = g.leaf(rand_t(&mut r, &[1, 2, 4, 4], -1.0, 1.0));
            let w = g.leaf(rand_t(&mut r, &[2, 2, 3, 3], -0.5, 0.5));
            let o = g.conv2d(x, w, None, 1, PadMode::Replicate);
            let seq = g.map_to_seq(o);
            let act = g.silu(seq);
            g.data(act).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn inference_graph_skips_activation_saving() {
        let mut g = Graph::inference();
        let x = g.leaf(rand_t(&mut SplitMix64::new(11), &[1, 2, 4, 4], -1.0, 1.0));
        let w = g.leaf(rand_t(&mut SplitMix64::new(12), &[2, 2, 3, 3], -0.5, 0.5));
        let o = g.conv2d(x, w, None, 1, PadMode::Zero);
        match &g.nodes[o.0].op {
            Op::Conv2d { col, .. } => assert!(col.is_none(), "inference graph saved im2col"),
            _ => unreachable!(),
        }
        assert!(!g.nodes[o.0].requires_grad);
    }
}
