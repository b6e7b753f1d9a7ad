//! Desk-scale latent inpainting laboratory.
//!
//! A self-contained pipeline on a toy attention-based inpainting denoiser:
//! a dense-tensor reverse-mode autodiff engine, DDPM noise schedules and
//! ancestral sampling, attention-steering optimization of the initial noise
//! distribution, differentiable reward models, reward-guided denoising with
//! final mask blending, and a fixed synthetic benchmark with toy metrics.

pub mod bench;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod denoiser;
pub mod guidance;
pub mod metrics;
pub mod noise_opt;
pub mod ppm;
pub mod rewards;
pub mod rng;
pub mod scene;
pub mod schedule;
pub mod tape;
pub mod tensor;
pub mod train;

pub use tape::{Tape, Var};
pub use tensor::Tensor;
