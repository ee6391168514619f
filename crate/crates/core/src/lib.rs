// SPDX-License-Identifier: MIT OR Apache-2.0

//! Patch-aligned feature extraction with masked attention, concept-space
//! substitution, and a toy closed-loop driving harness.
//!
//! The crate is `no_std` (it needs `alloc`). Everything here is a pure
//! function of its inputs and a seed; file formats, the CLI and the HTTP
//! debugging service live in the `conceptdrive` companion crate.
//!
//! Module map:
//!
//! - [`vit`]: a minimal single-head transformer encoder with patching,
//!   positional-encoding interpolation, and a prefix/suffix split.
//! - [`masked`]: distance-based attention masks and per-patch, per-region
//!   and dense feature extraction.
//! - [`concept`]: concept banks, similarity search, and feature substitution.
//! - [`policy`]: the MLP control head, Adam, training and gradient checks.
//! - [`sim`]: the lane-following simulator, teacher and rollouts.
//! - [`analysis`]: K-means, distance projection, linear SVC, coefficient maps.
//! - [`experiment`]: end-to-end recipes shared by the CLI and the tests.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod analysis;
pub mod concept;
mod error;
pub mod experiment;
mod feature;
pub mod linalg;
pub mod masked;
pub mod policy;
pub mod rng;
pub mod sim;
pub mod vit;

pub use error::{Error, Result};
pub use feature::{FeatureMap, Provenance};

/// Crate version, recorded in experiment manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
