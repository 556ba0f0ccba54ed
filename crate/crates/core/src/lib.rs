//! Voxel-grid radiance fields with render-time photorealistic style conditioning.

pub mod error;
pub mod field;
pub mod hyper;
pub mod io;
pub mod metrics;
pub mod numerics;
pub mod raster;
pub mod render;
pub mod style;
pub mod train;

pub use error::{Error, Result};
pub use nalgebra;
pub use field::{RgbNet, VoxelField};
pub use hyper::{HyperNet, HyperWeights};
pub use numerics::{AdamConfig, AdamState, Graph, Tensor, Var};
pub use raster::Image;
pub use render::{Camera, RenderBundle, RenderOptions};
