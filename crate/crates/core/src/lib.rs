//! Occupancy prediction with dual static/dynamic Gaussian queries.
//!
//! The crate bundles the scene types, a differentiable tile-based Gaussian
//! rasterizer for depth and semantics, the query network with hand-written
//! backward passes, temporal warping, the loss stack, occupancy metrics and a
//! synthetic multi-camera scene generator.

pub mod error;
pub mod losses;
pub mod metrics;
pub mod motion;
pub mod network;
pub mod render;
pub mod scene;
pub mod synthgen;
pub mod train;

pub use error::{OdgError, Result};
