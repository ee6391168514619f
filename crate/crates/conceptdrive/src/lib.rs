// SPDX-License-Identifier: MIT OR Apache-2.0

//! File formats, experiment configuration, the `conceptdrive` command line
//! and the HTTP debugging service built on `conceptdrive-core`.

pub mod archive;
pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod scene;
pub mod service;

pub use error::{Error, Result};
