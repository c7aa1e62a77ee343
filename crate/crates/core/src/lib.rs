//! Numerics and media tooling for pose-driven human image animation with
//! latent diffusion.
//!
//! The crate covers the pieces of such a system that can be stated and
//! checked without a trained network:
//!
//! - [`scheduler`]: linear beta schedules, SNR shifting, forward diffusion
//!   and one-step `x0` recovery.
//! - [`sampler`]: the denoiser port, animation-cfg guidance, DDIM/DDPM
//!   steps, initial reference noise and prompt-traveling window denoising.
//! - [`regional`]: masked face/hand MSE, embedding cosine loss and the
//!   combined regional-stage objective.
//! - [`driving`]: COCO-WholeBody keypoints, pose-map rendering, motion-blur
//!   conditions (movement vectors and Laplacian sharpness) and flipping.
//! - [`metrics`]: L1, PSNR and SSIM reconstruction metrics.
//!
//! Images are carried as [`FrameTensor`]s, `H x W x C` arrays of `f64`
//! values nominally in `[0, 1]`. Sequences of frames are [`FrameSequence`]s
//! with a leading frame axis.

pub mod config;
pub mod driving;
mod error;
pub mod frame;
pub mod metrics;
pub mod pipeline;
pub mod regional;
pub mod sampler;
pub mod scheduler;

pub use error::{Error, Result};
pub use frame::{FrameSequence, FrameTensor};
