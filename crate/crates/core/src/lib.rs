//! Multi-view reconstruction of rising bubbles with SDF-coupled surfels.
//!
//! Surfels are oriented Gaussian disks whose opacity is a bell-shaped
//! function of a learnable signed distance value. A differentiable
//! ray-splat rasterizer renders them, per-frame optimization fits them to a
//! handful of calibrated views, and the fitted clouds are grouped into
//! bubble instances, tracked over time and meshed.

pub mod bubbles;
pub mod camera;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod image;
pub mod io;
mod mc_table;
pub mod mesh;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod raster;
pub mod refine;
pub mod sequence;
pub mod surface;
pub mod surfel;
pub mod synth;

pub use error::{Error, Result};
