//! Sparse-view Gaussian splatting with transient masking, reference-guided
//! refinement and sparsity-aware replication.

pub mod colmap;
pub mod density;
pub mod error;
pub mod io;
pub mod losses;
pub mod mask;
pub mod raster;
pub mod refiner;
pub mod scene;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use scene::{Camera, Gaussian, GaussianField, ImageBuffer, OpacityMap, ScalarMap, TransientMask};
