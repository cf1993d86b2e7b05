//! Incremental distance-field mapping.
//!
//! Posed point clouds are fused into a sparse voxel grid through short-lived
//! per-frame GP distance fields; a persistent GP field trained on the mesh
//! zero crossings answers continuous distance and gradient queries.

pub mod config;
pub mod error;
pub mod eval;
pub mod frame;
pub mod fusion;
pub mod global_field;
pub mod gp;
pub mod io;
pub mod kdtree;
pub mod local_field;
pub mod meshing;
pub mod pipeline;
pub mod ply;
pub mod scene;
pub mod snapshot;
pub mod sparse_grid;
pub mod test_points;
pub mod wire;

pub use error::{Error, Result};
pub use sparse_grid::{GridCoord, SparseGrid, VoxelState};

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;
