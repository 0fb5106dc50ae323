//! Arbitrary-scale image super-resolution with scale-modulated selective
//! state space models.
//!
//! The crate is organized bottom-up:
//! - [`tensor`], [`graph`]: a small dense-f64 tensor type and a define-by-run
//!   reverse-mode autodiff tape with the fused selective-scan operation.
//! - [`ssm`]: zero-order-hold discretization and the scalable (scale- and
//!   coordinate-modulated) selective state space layer.
//! - [`block`]: the four-direction 2-D scan block with residual fusion.
//! - [`model`]: encoder backbone, feature fusion, and the continuous-scale
//!   decoder family (selected by name at runtime).
//! - [`data`]: deterministic RNG, PNG/PPM I/O, bicubic resampling, the
//!   procedural training corpus, and sample assembly.
//! - [`train`], [`adam`], [`metrics`], [`config`]: the training loop,
//!   optimizer, quality metrics, and run configuration.
//! - [`verify`]: self-contained numerical oracles (quadrature, matrix
//!   exponentials, dense unrolled recurrences, finite differences) and the
//!   check suite built on them.
//!
//! Everything is deterministic: single-threaded, seeded, with fixed
//! evaluation order; repeated runs produce bit-identical results.

pub mod adam;
pub mod block;
pub mod config;
pub mod data;
pub mod fastmath;
pub mod graph;
pub(crate) mod linalg;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ssm;
pub mod tensor;
pub mod train;
pub mod verify;

mod error;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
