//! Recovering 3D object skeletons from 2D keypoint heatmaps.
//!
//! The crate is organized around the pipeline:
//!
//! - [`skeleton`]: basis-shape skeleton model, `Y = sum_k alpha_k B_k`.
//! - [`camera`]: central projection of a skeleton with analytic Jacobians.
//! - [`heatmap`]: Gaussian keypoint heatmaps, salt-and-pepper corruption, decoding.
//! - [`synth`]: seeded synthetic corpora and the `skelds-v1` file format.
//! - [`nn`]: fully-connected interpreter and heatmap refiner, trained from scratch.
//! - [`baseline`]: orthographic initialization plus perspective refinement.
//! - [`metrics`]: PCK, PCP, AE, canonical structure RMSE, azimuth, retrieval.
//! - [`harness`]: experiment driver behind the `skelterp` binary.

pub mod baseline;
pub mod camera;
pub mod error;
pub mod harness;
pub mod heatmap;
pub mod metrics;
pub mod nn;
pub mod skeleton;
pub mod synth;

pub use error::{Error, Result};

/// Version string embedded in every file this crate writes.
pub const VERSION: &str = concat!("skelterp-", env!("CARGO_PKG_VERSION"));
