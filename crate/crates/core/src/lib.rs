//! Training-free lifting of per-view 2D feature maps onto a 3D Gaussian scene.
//!
//! The crate is organised bottom-up:
//!
//! - [`scene`] and [`io`]: domain types and their little-endian binary formats.
//! - [`splat`]: projection, per-pixel alpha compositing and marginal contributions.
//! - [`gate`]: the two-stage per-view visibility gate (mass coverage, quantile cap).
//! - [`aggregate`]: streaming cosine-loss median on the unit sphere plus the
//!   weighted-mean and Weiszfeld baselines and the dispersion metric.
//! - [`label`]: pseudo-labels for Gaussians from an annotated point cloud.
//! - [`eval`]: relevancy, selection, segmentation metrics and mask corruption.
//! - [`synth`]: deterministic synthetic scenes and feature streams.
//! - [`pipeline`]: the end-to-end lift and the ablation runner.

pub mod aggregate;
pub mod error;
pub mod eval;
pub mod gate;
pub mod io;
pub mod label;
pub mod pipeline;
pub mod rng;
pub mod scene;
pub mod spatial;
pub mod splat;
pub mod synth;

pub use error::{Error, Result};
