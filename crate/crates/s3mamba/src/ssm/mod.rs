//! Selective state space core: exact ZOH discretization, the sequential
//! and blocked-associative scans, and the scale-modulated SSM layer.

pub mod layer;
pub mod scan;
pub mod zoh;

pub use scan::ScanDims;
