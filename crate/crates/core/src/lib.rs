//! Seam-free patch-by-patch convolutional inference.
//!
//! A fully convolutional network is run on a grid of patches instead of one
//! large tensor. Before every spatial convolution each patch is padded with
//! the edge features of its neighbours ("local padding"), which makes the
//! assembled result identical to a single forward pass over the whole
//! input while only ever materialising a bounded window of patches.
//!
//! Module map:
//!
//! - [`tensor`]: NCHW tensors, windows and spatial concatenation.
//! - [`nn`]: valid convolution, batch norm, upsampling, residual blocks.
//! - [`halo`]: halo exchange between patches and border policies.
//! - [`netspec`]: network descriptions.
//! - [`network`]: parameterised networks and the shared forward pass.
//! - [`weights`]: the `LPWT` weight file format.
//! - [`engine`]: grid execution, latent sampling and the single-pass oracle.
//! - [`stream`]: incremental canvas growth with cached frontier strips.
//! - [`tiled`]: tiled inference for arbitrary feed-forward conv networks.
//! - [`metrics`]: seam ratios, per-pixel diversity and patch statistics.
//! - [`imageio`]: PNG and raw tensor files.

pub mod engine;
pub mod error;
pub mod halo;
pub mod imageio;
pub mod metrics;
pub mod netspec;
pub mod network;
pub mod nn;
pub mod rng;
pub mod stream;
pub mod tensor;
pub mod tiled;
pub mod weights;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use tensor::{Shape, Slice2D, Tensor};
