//! Patch-to-cluster attention (PaCa) vision transformers.
//!
//! The crate is `no_std` with `alloc`. It carries a small reverse-mode
//! autodiff engine ([`tape`]), the three attention mechanisms
//! ([`attention`]), the stage-wise network ([`blocks`], [`config`],
//! [`model`]), desk-scale training ([`train`]), the cluster-masking
//! explainer ([`explain`]) and an exact FLOP accountant ([`profiler`]).
//!
//! File formats, dataset loaders and the command-line driver live in the
//! companion `paca` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attention;
pub mod blocks;
pub mod config;
pub mod data;
mod error;
pub mod explain;
pub mod layers;
pub mod model;
pub mod params;
pub mod profiler;
mod scalar;
pub mod tape;
mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Real;
pub use tensor::{Shape, Tensor};
