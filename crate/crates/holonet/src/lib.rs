//! Learned 3D particle-field holography.
//!
//! End-to-end pipeline: synthesize inline particle holograms (angular
//! spectrum method), preprocess them into the 3-channel network input
//! (hologram, depth map, maximum phase projection), train a residual/Swish
//! U-net with channel-specific losses (Huber on depth, TV-regularized MSE
//! on centroids), and extract + evaluate 3D particle positions.
//!
//! Module map:
//! - [`optics`]: hologram synthesis and FFT free-space propagation
//! - [`preprocess`]: volume reconstruction, depth/phase maps, input assembly
//! - [`dataset`]: target encoding, synthetic dataset generation, manifests
//! - [`autodiff`]: reverse-mode AD over dense tensors (conv, pool, upconv, ...)
//! - [`unet`]: the encoder/decoder architecture and checkpoint format
//! - [`losses`]: Huber and TV-regularized MSE with gradients
//! - [`trainer`]: Adam training loop, transfer learning, diagnostics
//! - [`postprocess`]: particle extraction, matching, metrics, baseline
//! - [`arrayio`]: raw array file format shared by dataset artifacts

pub mod arrayio;
pub mod autodiff;
pub mod dataset;
pub mod losses;
pub mod optics;
pub mod postprocess;
pub mod preprocess;
pub mod trainer;
pub mod unet;

pub use optics::{Hologram, OpticsConfig, Particle, ParticleField};

