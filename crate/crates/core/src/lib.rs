//! Parallel high-resolution diffusion sampling with asynchronous structure
//! guidance.
//!
//! A high-resolution latent is sampled in two stages. Stage 1 splits it into
//! interleaved low-resolution patches that are denoised in parallel, with
//! worker 0's noise prediction guiding the others one iteration late so the
//! broadcast overlaps with compute. Stage 2 refines overlapping spatial tiles
//! and fuses them back onto the canvas after every step.

pub mod denoiser;
pub mod engine;
pub mod guidance;
pub mod metrics;
pub mod patching;
pub mod rng;
pub mod schedule;
pub mod selftest;
pub mod tensor;

pub use tensor::{Shape, Stats, Tensor, TensorError};
