//! Pixel-difference and binary convolution networks, from the tensor ops up.
//!
//! The crate provides:
//!
//! - dense NCHW tensors with deterministic convolution / pooling / resize
//!   kernels ([`tensor`], [`ops`]);
//! - pixel-difference convolutions (central, angular, radial probe
//!   patterns), equivalently computable as pairwise differences or as
//!   folded vanilla kernels ([`pdc`]);
//! - 1-bit convolutions with XNOR/popcount inner products, sign-difference
//!   variants, and the hybrid split layer combining both ([`binary`]);
//! - ready-made edge-detection and classification architectures built from
//!   those pieces, plus reference full-precision/binary residual nets for
//!   cost comparisons ([`blocks`], [`layers`]);
//! - training utilities: losses, Adam, schedules, synthetic datasets
//!   ([`train`], [`synth`]);
//! - analysis tools: filter/feature spectra, operation/parameter counting,
//!   local-binary-pattern statistics of learned kernels ([`analysis`]);
//! - serialization for tensors and checkpoints, and a tiny PGM/PPM codec
//!   ([`checkpoint`], [`pnm`]).

pub mod analysis;
pub mod binary;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod layers;
pub mod ops;
pub mod pdc;
pub mod pnm;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Shape, Tensor};
