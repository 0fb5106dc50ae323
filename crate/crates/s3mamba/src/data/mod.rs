//! Data pipeline: deterministic RNG, image I/O, bicubic resampling,
//! procedural corpus synthesis, and training-sample assembly.

pub mod corpus;
pub mod imageio;
pub mod resample;
pub mod rng;
pub mod sample;
