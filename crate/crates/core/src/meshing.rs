//! Marching cubes over the fused grid.
//!
//! Cells are the cubes spanned by eight neighbouring voxel centers and are
//! owned by the leaf holding their minimum corner, so every cell is meshed
//! by exactly one leaf. Meshes are kept as per-leaf fragments; only leaves
//! touched by a frame (and their lower neighbours, whose cells reach into
//! them) are rebuilt.

use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::sparse_grid::{world_to_grid, GridCoord, Property, SparseGrid, VoxelState, LEAF_DIM, MAX_CHANNELS};
use crate::Vec3;

/// Triangles smaller than this (m²) are dropped.
pub const MIN_TRIANGLE_AREA: f64 = 1e-12;

const CORNERS: [[i32; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Triangles per cube configuration, as edge indices in groups of three.
/// Bit `i` of the configuration is set when corner `i` is inside (D < 0).
#[rustfmt::skip]
static TRI_TABLE: [&[u8]; 256] = [
    &[],
    &[0, 8, 3],
    &[0, 1, 9],
    &[1, 8, 3, 9, 8, 1],
    &[1, 2, 10],
    &[0, 8, 3, 1, 2, 10],
    &[9, 2, 10, 0, 2, 9],
    &[2, 8, 3, 2, 10, 8, 10, 9, 8],
    &[3, 11, 2],
    &[0, 11, 2, 8, 11, 0],
    &[1, 9, 0, 2, 3, 11],
    &[1, 11, 2, 1, 9, 11, 9, 8, 11],
    &[3, 10, 1, 11, 10, 3],
    &[0, 10, 1, 0, 8, 10, 8, 11, 10],
    &[3, 9, 0, 3, 11, 9, 11, 10, 9],
    &[9, 8, 10, 10, 8, 11],
    &[4, 7, 8],
    &[4, 3, 0, 7, 3, 4],
    &[0, 1, 9, 8, 4, 7],
    &[4, 1, 9, 4, 7, 1, 7, 3, 1],
    &[1, 2, 10, 8, 4, 7],
    &[3, 4, 7, 3, 0, 4, 1, 2, 10],
    &[9, 2, 10, 9, 0, 2, 8, 4, 7],
    &[2, 10, 9, 2, 9, 7, 2, 7, 3, 7, 9, 4],
    &[8, 4, 7, 3, 11, 2],
    &[11, 4, 7, 11, 2, 4, 2, 0, 4],
    &[9, 0, 1, 8, 4, 7, 2, 3, 11],
    &[4, 7, 11, 9, 4, 11, 9, 11, 2, 9, 2, 1],
    &[3, 10, 1, 3, 11, 10, 7, 8, 4],
    &[1, 11, 10, 1, 4, 11, 1, 0, 4, 7, 11, 4],
    &[4, 7, 8, 9, 0, 11, 9, 11, 10, 11, 0, 3],
    &[4, 7, 11, 4, 11, 9, 9, 11, 10],
    &[9, 5, 4],
    &[9, 5, 4, 0, 8, 3],
    &[0, 5, 4, 1, 5, 0],
    &[8, 5, 4, 8, 3, 5, 3, 1, 5],
    &[1, 2, 10, 9, 5, 4],
    &[3, 0, 8, 1, 2, 10, 4, 9, 5],
    &[5, 2, 10, 5, 4, 2, 4, 0, 2],
    &[2, 10, 5, 3, 2, 5, 3, 5, 4, 3, 4, 8],
    &[9, 5, 4, 2, 3, 11],
    &[0, 11, 2, 0, 8, 11, 4, 9, 5],
    &[0, 5, 4, 0, 1, 5, 2, 3, 11],
    &[2, 1, 5, 2, 5, 8, 2, 8, 11, 4, 8, 5],
    &[10, 3, 11, 10, 1, 3, 9, 5, 4],
    &[4, 9, 5, 0, 8, 1, 8, 10, 1, 8, 11, 10],
    &[5, 4, 0, 5, 0, 11, 5, 11, 10, 11, 0, 3],
    &[5, 4, 8, 5, 8, 10, 10, 8, 11],
    &[9, 7, 8, 5, 7, 9],
    &[9, 3, 0, 9, 5, 3, 5, 7, 3],
    &[0, 7, 8, 0, 1, 7, 1, 5, 7],
    &[1, 5, 3, 3, 5, 7],
    &[9, 7, 8, 9, 5, 7, 10, 1, 2],
    &[10, 1, 2, 9, 5, 0, 5, 3, 0, 5, 7, 3],
    &[8, 0, 2, 8, 2, 5, 8, 5, 7, 10, 5, 2],
    &[2, 10, 5, 2, 5, 3, 3, 5, 7],
    &[7, 9, 5, 7, 8, 9, 3, 11, 2],
    &[9, 5, 7, 9, 7, 2, 9, 2, 0, 2, 7, 11],
    &[2, 3, 11, 0, 1, 8, 1, 7, 8, 1, 5, 7],
    &[11, 2, 1, 11, 1, 7, 7, 1, 5],
    &[9, 5, 8, 8, 5, 7, 10, 1, 3, 10, 3, 11],
    &[5, 7, 0, 5, 0, 9, 7, 11, 0, 1, 0, 10, 11, 10, 0],
    &[11, 10, 0, 11, 0, 3, 10, 5, 0, 8, 0, 7, 5, 7, 0],
    &[11, 10, 5, 7, 11, 5],
    &[10, 6, 5],
    &[0, 8, 3, 5, 10, 6],
    &[9, 0, 1, 5, 10, 6],
    &[1, 8, 3, 1, 9, 8, 5, 10, 6],
    &[1, 6, 5, 2, 6, 1],
    &[1, 6, 5, 1, 2, 6, 3, 0, 8],
    &[9, 6, 5, 9, 0, 6, 0, 2, 6],
    &[5, 9, 8, 5, 8, 2, 5, 2, 6, 3, 2, 8],
    &[2, 3, 11, 10, 6, 5],
    &[11, 0, 8, 11, 2, 0, 10, 6, 5],
    &[0, 1, 9, 2, 3, 11, 5, 10, 6],
    &[5, 10, 6, 1, 9, 2, 9, 11, 2, 9, 8, 11],
    &[6, 3, 11, 6, 5, 3, 5, 1, 3],
    &[0, 8, 11, 0, 11, 5, 0, 5, 1, 5, 11, 6],
    &[3, 11, 6, 0, 3, 6, 0, 6, 5, 0, 5, 9],
    &[6, 5, 9, 6, 9, 11, 11, 9, 8],
    &[5, 10, 6, 4, 7, 8],
    &[4, 3, 0, 4, 7, 3, 6, 5, 10],
    &[1, 9, 0, 5, 10, 6, 8, 4, 7],
    &[10, 6, 5, 1, 9, 7, 1, 7, 3, 7, 9, 4],
    &[6, 1, 2, 6, 5, 1, 4, 7, 8],
    &[1, 2, 5, 5, 2, 6, 3, 0, 4, 3, 4, 7],
    &[8, 4, 7, 9, 0, 5, 0, 6, 5, 0, 2, 6],
    &[7, 3, 9, 7, 9, 4, 3, 2, 9, 5, 9, 6, 2, 6, 9],
    &[3, 11, 2, 7, 8, 4, 10, 6, 5],
    &[5, 10, 6, 4, 7, 2, 4, 2, 0, 2, 7, 11],
    &[0, 1, 9, 4, 7, 8, 2, 3, 11, 5, 10, 6],
    &[9, 2, 1, 9, 11, 2, 9, 4, 11, 7, 11, 4, 5, 10, 6],
    &[8, 4, 7, 3, 11, 5, 3, 5, 1, 5, 11, 6],
    &[5, 1, 11, 5, 11, 6, 1, 0, 11, 7, 11, 4, 0, 4, 11],
    &[0, 5, 9, 0, 6, 5, 0, 3, 6, 11, 6, 3, 8, 4, 7],
    &[6, 5, 9, 6, 9, 11, 4, 7, 9, 7, 11, 9],
    &[10, 4, 9, 6, 4, 10],
    &[4, 10, 6, 4, 9, 10, 0, 8, 3],
    &[10, 0, 1, 10, 6, 0, 6, 4, 0],
    &[8, 3, 1, 8, 1, 6, 8, 6, 4, 6, 1, 10],
    &[1, 4, 9, 1, 2, 4, 2, 6, 4],
    &[3, 0, 8, 1, 2, 9, 2, 4, 9, 2, 6, 4],
    &[0, 2, 4, 4, 2, 6],
    &[8, 3, 2, 8, 2, 4, 4, 2, 6],
    &[10, 4, 9, 10, 6, 4, 11, 2, 3],
    &[0, 8, 2, 2, 8, 11, 4, 9, 10, 4, 10, 6],
    &[3, 11, 2, 0, 1, 6, 0, 6, 4, 6, 1, 10],
    &[6, 4, 1, 6, 1, 10, 4, 8, 1, 2, 1, 11, 8, 11, 1],
    &[9, 6, 4, 9, 3, 6, 9, 1, 3, 11, 6, 3],
    &[8, 11, 1, 8, 1, 0, 11, 6, 1, 9, 1, 4, 6, 4, 1],
    &[3, 11, 6, 3, 6, 0, 0, 6, 4],
    &[6, 4, 8, 11, 6, 8],
    &[7, 10, 6, 7, 8, 10, 8, 9, 10],
    &[0, 7, 3, 0, 10, 7, 0, 9, 10, 6, 7, 10],
    &[10, 6, 7, 1, 10, 7, 1, 7, 8, 1, 8, 0],
    &[10, 6, 7, 10, 7, 1, 1, 7, 3],
    &[1, 2, 6, 1, 6, 8, 1, 8, 9, 8, 6, 7],
    &[2, 6, 9, 2, 9, 1, 6, 7, 9, 0, 9, 3, 7, 3, 9],
    &[7, 8, 0, 7, 0, 6, 6, 0, 2],
    &[7, 3, 2, 6, 7, 2],
    &[2, 3, 11, 10, 6, 8, 10, 8, 9, 8, 6, 7],
    &[2, 0, 7, 2, 7, 11, 0, 9, 7, 6, 7, 10, 9, 10, 7],
    &[1, 8, 0, 1, 7, 8, 1, 10, 7, 6, 7, 10, 2, 3, 11],
    &[11, 2, 1, 11, 1, 7, 10, 6, 1, 6, 7, 1],
    &[8, 9, 6, 8, 6, 7, 9, 1, 6, 11, 6, 3, 1, 3, 6],
    &[0, 9, 1, 11, 6, 7],
    &[7, 8, 0, 7, 0, 6, 3, 11, 0, 11, 6, 0],
    &[7, 11, 6],
    &[7, 6, 11],
    &[3, 0, 8, 11, 7, 6],
    &[0, 1, 9, 11, 7, 6],
    &[8, 1, 9, 8, 3, 1, 11, 7, 6],
    &[10, 1, 2, 6, 11, 7],
    &[1, 2, 10, 3, 0, 8, 6, 11, 7],
    &[2, 9, 0, 2, 10, 9, 6, 11, 7],
    &[6, 11, 7, 2, 10, 3, 10, 8, 3, 10, 9, 8],
    &[7, 2, 3, 6, 2, 7],
    &[7, 0, 8, 7, 6, 0, 6, 2, 0],
    &[2, 7, 6, 2, 3, 7, 0, 1, 9],
    &[1, 6, 2, 1, 8, 6, 1, 9, 8, 8, 7, 6],
    &[10, 7, 6, 10, 1, 7, 1, 3, 7],
    &[10, 7, 6, 1, 7, 10, 1, 8, 7, 1, 0, 8],
    &[0, 3, 7, 0, 7, 10, 0, 10, 9, 6, 10, 7],
    &[7, 6, 10, 7, 10, 8, 8, 10, 9],
    &[6, 8, 4, 11, 8, 6],
    &[3, 6, 11, 3, 0, 6, 0, 4, 6],
    &[8, 6, 11, 8, 4, 6, 9, 0, 1],
    &[9, 4, 6, 9, 6, 3, 9, 3, 1, 11, 3, 6],
    &[6, 8, 4, 6, 11, 8, 2, 10, 1],
    &[1, 2, 10, 3, 0, 11, 0, 6, 11, 0, 4, 6],
    &[4, 11, 8, 4, 6, 11, 0, 2, 9, 2, 10, 9],
    &[10, 9, 3, 10, 3, 2, 9, 4, 3, 11, 3, 6, 4, 6, 3],
    &[8, 2, 3, 8, 4, 2, 4, 6, 2],
    &[0, 4, 2, 4, 6, 2],
    &[1, 9, 0, 2, 3, 4, 2, 4, 6, 4, 3, 8],
    &[1, 9, 4, 1, 4, 2, 2, 4, 6],
    &[8, 1, 3, 8, 6, 1, 8, 4, 6, 6, 10, 1],
    &[10, 1, 0, 10, 0, 6, 6, 0, 4],
    &[4, 6, 3, 4, 3, 8, 6, 10, 3, 0, 3, 9, 10, 9, 3],
    &[10, 9, 4, 6, 10, 4],
    &[4, 9, 5, 7, 6, 11],
    &[0, 8, 3, 4, 9, 5, 11, 7, 6],
    &[5, 0, 1, 5, 4, 0, 7, 6, 11],
    &[11, 7, 6, 8, 3, 4, 3, 5, 4, 3, 1, 5],
    &[9, 5, 4, 10, 1, 2, 7, 6, 11],
    &[6, 11, 7, 1, 2, 10, 0, 8, 3, 4, 9, 5],
    &[7, 6, 11, 5, 4, 10, 4, 2, 10, 4, 0, 2],
    &[3, 4, 8, 3, 5, 4, 3, 2, 5, 10, 5, 2, 11, 7, 6],
    &[7, 2, 3, 7, 6, 2, 5, 4, 9],
    &[9, 5, 4, 0, 8, 6, 0, 6, 2, 6, 8, 7],
    &[3, 6, 2, 3, 7, 6, 1, 5, 0, 5, 4, 0],
    &[6, 2, 8, 6, 8, 7, 2, 1, 8, 4, 8, 5, 1, 5, 8],
    &[9, 5, 4, 10, 1, 6, 1, 7, 6, 1, 3, 7],
    &[1, 6, 10, 1, 7, 6, 1, 0, 7, 8, 7, 0, 9, 5, 4],
    &[4, 0, 10, 4, 10, 5, 0, 3, 10, 6, 10, 7, 3, 7, 10],
    &[7, 6, 10, 7, 10, 8, 5, 4, 10, 4, 8, 10],
    &[6, 9, 5, 6, 11, 9, 11, 8, 9],
    &[3, 6, 11, 0, 6, 3, 0, 5, 6, 0, 9, 5],
    &[0, 11, 8, 0, 5, 11, 0, 1, 5, 5, 6, 11],
    &[6, 11, 3, 6, 3, 5, 5, 3, 1],
    &[1, 2, 10, 9, 5, 11, 9, 11, 8, 11, 5, 6],
    &[0, 11, 3, 0, 6, 11, 0, 9, 6, 5, 6, 9, 1, 2, 10],
    &[11, 8, 5, 11, 5, 6, 8, 0, 5, 10, 5, 2, 0, 2, 5],
    &[6, 11, 3, 6, 3, 5, 2, 10, 3, 10, 5, 3],
    &[5, 8, 9, 5, 2, 8, 5, 6, 2, 3, 8, 2],
    &[9, 5, 6, 9, 6, 0, 0, 6, 2],
    &[1, 5, 8, 1, 8, 0, 5, 6, 8, 3, 8, 2, 6, 2, 8],
    &[1, 5, 6, 2, 1, 6],
    &[1, 3, 6, 1, 6, 10, 3, 8, 6, 5, 6, 9, 8, 9, 6],
    &[10, 1, 0, 10, 0, 6, 9, 5, 0, 5, 6, 0],
    &[0, 3, 8, 5, 6, 10],
    &[10, 5, 6],
    &[11, 5, 10, 7, 5, 11],
    &[11, 5, 10, 11, 7, 5, 8, 3, 0],
    &[5, 11, 7, 5, 10, 11, 1, 9, 0],
    &[10, 7, 5, 10, 11, 7, 9, 8, 1, 8, 3, 1],
    &[11, 1, 2, 11, 7, 1, 7, 5, 1],
    &[0, 8, 3, 1, 2, 7, 1, 7, 5, 7, 2, 11],
    &[9, 7, 5, 9, 2, 7, 9, 0, 2, 2, 11, 7],
    &[7, 5, 2, 7, 2, 11, 5, 9, 2, 3, 2, 8, 9, 8, 2],
    &[2, 5, 10, 2, 3, 5, 3, 7, 5],
    &[8, 2, 0, 8, 5, 2, 8, 7, 5, 10, 2, 5],
    &[9, 0, 1, 5, 10, 3, 5, 3, 7, 3, 10, 2],
    &[9, 8, 2, 9, 2, 1, 8, 7, 2, 10, 2, 5, 7, 5, 2],
    &[1, 3, 5, 3, 7, 5],
    &[0, 8, 7, 0, 7, 1, 1, 7, 5],
    &[9, 0, 3, 9, 3, 5, 5, 3, 7],
    &[9, 8, 7, 5, 9, 7],
    &[5, 8, 4, 5, 10, 8, 10, 11, 8],
    &[5, 0, 4, 5, 11, 0, 5, 10, 11, 11, 3, 0],
    &[0, 1, 9, 8, 4, 10, 8, 10, 11, 10, 4, 5],
    &[10, 11, 4, 10, 4, 5, 11, 3, 4, 9, 4, 1, 3, 1, 4],
    &[2, 5, 1, 2, 8, 5, 2, 11, 8, 4, 5, 8],
    &[0, 4, 11, 0, 11, 3, 4, 5, 11, 2, 11, 1, 5, 1, 11],
    &[0, 2, 5, 0, 5, 9, 2, 11, 5, 4, 5, 8, 11, 8, 5],
    &[9, 4, 5, 2, 11, 3],
    &[2, 5, 10, 3, 5, 2, 3, 4, 5, 3, 8, 4],
    &[5, 10, 2, 5, 2, 4, 4, 2, 0],
    &[3, 10, 2, 3, 5, 10, 3, 8, 5, 4, 5, 8, 0, 1, 9],
    &[5, 10, 2, 5, 2, 4, 1, 9, 2, 9, 4, 2],
    &[8, 4, 5, 8, 5, 3, 3, 5, 1],
    &[0, 4, 5, 1, 0, 5],
    &[8, 4, 5, 8, 5, 3, 9, 0, 5, 0, 3, 5],
    &[9, 4, 5],
    &[4, 11, 7, 4, 9, 11, 9, 10, 11],
    &[0, 8, 3, 4, 9, 7, 9, 11, 7, 9, 10, 11],
    &[1, 10, 11, 1, 11, 4, 1, 4, 0, 7, 4, 11],
    &[3, 1, 4, 3, 4, 8, 1, 10, 4, 7, 4, 11, 10, 11, 4],
    &[4, 11, 7, 9, 11, 4, 9, 2, 11, 9, 1, 2],
    &[9, 7, 4, 9, 11, 7, 9, 1, 11, 2, 11, 1, 0, 8, 3],
    &[11, 7, 4, 11, 4, 2, 2, 4, 0],
    &[11, 7, 4, 11, 4, 2, 8, 3, 4, 3, 2, 4],
    &[2, 9, 10, 2, 7, 9, 2, 3, 7, 7, 4, 9],
    &[9, 10, 7, 9, 7, 4, 10, 2, 7, 8, 7, 0, 2, 0, 7],
    &[3, 7, 10, 3, 10, 2, 7, 4, 10, 1, 10, 0, 4, 0, 10],
    &[1, 10, 2, 8, 7, 4],
    &[4, 9, 1, 4, 1, 7, 7, 1, 3],
    &[4, 9, 1, 4, 1, 7, 0, 8, 1, 8, 7, 1],
    &[4, 0, 3, 7, 4, 3],
    &[4, 8, 7],
    &[9, 10, 8, 10, 11, 8],
    &[3, 0, 9, 3, 9, 11, 11, 9, 10],
    &[0, 1, 10, 0, 10, 8, 8, 10, 11],
    &[3, 1, 10, 11, 3, 10],
    &[1, 2, 11, 1, 11, 9, 9, 11, 8],
    &[3, 0, 9, 3, 9, 11, 1, 2, 9, 2, 11, 9],
    &[0, 2, 11, 8, 0, 11],
    &[3, 2, 11],
    &[2, 3, 8, 2, 8, 10, 10, 8, 9],
    &[9, 10, 2, 0, 9, 2],
    &[2, 3, 8, 2, 8, 10, 0, 1, 8, 1, 10, 8],
    &[1, 10, 2],
    &[1, 3, 8, 9, 1, 8],
    &[0, 9, 1],
    &[0, 3, 8],
    &[],
];

/// A grid edge from `voxel` to its neighbour along `axis`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EdgeKey {
    pub voxel: GridCoord,
    pub axis: u8,
}

/// Surface point on a grid edge with its interpolated property.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Crossing {
    pub position: Vec3,
    pub property: Property,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Fragment {
    pub vertices: Vec<Vec3>,
    pub properties: Vec<Property>,
    pub edges: Vec<EdgeKey>,
    pub triangles: Vec<[u32; 3]>,
}

impl Fragment {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    pub vertex_properties: Vec<Property>,
    /// Leaf containing each vertex.
    pub vertex_leaf: Vec<GridCoord>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_area(&self, t: &[u32; 3]) -> f64 {
        let [a, b, c] = t.map(|i| self.vertices[i as usize]);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn surface_area(&self) -> f64 {
        self.triangles.iter().map(|t| self.triangle_area(t)).sum()
    }
}

fn corner_state(grid: &SparseGrid, c: GridCoord) -> Option<&VoxelState> {
    grid.get(c).filter(|s| s.observed && s.weight > 0.0)
}

fn interpolate(grid: &SparseGrid, key: EdgeKey, lo: &VoxelState, hi: &VoxelState) -> (Vec3, Property) {
    // Always interpolate from the lower voxel so neighbouring cells agree
    // bit for bit on shared edges.
    let (da, db) = (lo.distance as f64, hi.distance as f64);
    let t = if da == db { 0.5 } else { (da / (da - db)).clamp(0.0, 1.0) };
    let pa = grid.grid_to_world(key.voxel);
    let mut pb = pa;
    pb[key.axis as usize] += grid.voxel_size();
    let mut prop = [0.0f32; MAX_CHANNELS];
    for ch in 0..MAX_CHANNELS {
        prop[ch] = (lo.property[ch] as f64 + t * (hi.property[ch] as f64 - lo.property[ch] as f64)) as f32;
    }
    (pa + (pb - pa) * t, prop)
}

/// Mesh all cells whose minimum corner lies in the leaf at `origin`.
pub fn mesh_leaf(grid: &SparseGrid, origin: GridCoord) -> Fragment {
    let mut frag = Fragment::default();
    let Some(leaf) = grid.leaf(origin) else {
        return frag;
    };
    let mut index: HashMap<EdgeKey, u32> = HashMap::new();
    let blank = VoxelState::default();
    for (c, _) in leaf.iter() {
        let mut states = [&blank; 8];
        let mut ok = true;
        for (n, off) in CORNERS.iter().enumerate() {
            match corner_state(grid, c.offset(off[0], off[1], off[2])) {
                Some(s) => states[n] = s,
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            continue;
        }
        let config = states
            .iter()
            .enumerate()
            .fold(0usize, |acc, (n, s)| if s.distance < 0.0 { acc | 1 << n } else { acc });
        let tris = TRI_TABLE[config];
        if tris.is_empty() {
            continue;
        }
        let mut edge_vertex = [u32::MAX; 12];
        for &e in tris {
            let e = e as usize;
            if edge_vertex[e] != u32::MAX {
                continue;
            }
            let [a, b] = EDGES[e];
            let (a, b) = if CORNERS[a] < CORNERS[b] { (a, b) } else { (b, a) };
            let axis = (0..3).find(|&x| CORNERS[a][x] != CORNERS[b][x]).expect("edge spans one axis") as u8;
            let key = EdgeKey {
                voxel: c.offset(CORNERS[a][0], CORNERS[a][1], CORNERS[a][2]),
                axis,
            };
            edge_vertex[e] = *index.entry(key).or_insert_with(|| {
                let (p, prop) = interpolate(grid, key, states[a], states[b]);
                frag.vertices.push(p);
                frag.properties.push(prop);
                frag.edges.push(key);
                (frag.vertices.len() - 1) as u32
            });
        }
        for t in tris.chunks_exact(3) {
            let tri = [edge_vertex[t[0] as usize], edge_vertex[t[1] as usize], edge_vertex[t[2] as usize]];
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                continue;
            }
            let [a, b, c] = tri.map(|i| frag.vertices[i as usize]);
            if 0.5 * (b - a).cross(&(c - a)).norm() < MIN_TRIANGLE_AREA {
                continue;
            }
            frag.triangles.push(tri);
        }
    }
    if frag.triangles.is_empty() {
        return Fragment::default();
    }
    frag
}

/// Offsets to the 7 lower (or upper, with `sign = 1`) neighbouring leaves.
fn neighbour_leaves(origin: GridCoord, sign: i32) -> impl Iterator<Item = GridCoord> {
    (1..8).map(move |bits| {
        let d = |b: i32| if bits & b != 0 { sign * LEAF_DIM } else { 0 };
        origin.offset(d(1), d(2), d(4))
    })
}

/// Per-leaf mesh fragments, rebuilt incrementally.
#[derive(Debug, Clone, Default)]
pub struct Mesher {
    fragments: BTreeMap<GridCoord, Fragment>,
}

impl Mesher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn fragments(&self) -> &BTreeMap<GridCoord, Fragment> {
        &self.fragments
    }

    pub fn clear(&mut self) {
        self.fragments.clear();
    }

    /// Remesh around the given active leaves and return the new crossing
    /// lists of every leaf whose crossings may have changed (empty lists
    /// included), sorted by leaf origin.
    pub fn update(&mut self, grid: &SparseGrid, active: &[GridCoord]) -> Vec<(GridCoord, Vec<Crossing>)> {
        let mut remesh: Vec<GridCoord> = active
            .iter()
            .flat_map(|&a| std::iter::once(a).chain(neighbour_leaves(a, -1)))
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        remesh.sort_unstable();
        let built: Vec<(GridCoord, Fragment)> = remesh.par_iter().map(|&o| (o, mesh_leaf(grid, o))).collect();
        for (o, f) in built {
            if f.is_empty() {
                self.fragments.remove(&o);
            } else {
                self.fragments.insert(o, f);
            }
        }

        let mut affected: Vec<GridCoord> = remesh
            .iter()
            .flat_map(|&a| std::iter::once(a).chain(neighbour_leaves(a, 1)))
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        affected.sort_unstable();
        affected.par_iter().map(|&a| (a, self.leaf_crossings(grid, a))).collect()
    }

    /// Mesh vertices contained in leaf `origin`, one per grid edge.
    pub fn leaf_crossings(&self, grid: &SparseGrid, origin: GridCoord) -> Vec<Crossing> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for src in std::iter::once(origin).chain(neighbour_leaves(origin, -1)) {
            let Some(frag) = self.fragments.get(&src) else { continue };
            for (n, p) in frag.vertices.iter().enumerate() {
                if world_to_grid(p, grid.voxel_size()).leaf_origin() == origin && seen.insert(frag.edges[n]) {
                    out.push(Crossing {
                        position: *p,
                        property: frag.properties[n],
                    });
                }
            }
        }
        out
    }

    /// Vertex count with shared edges counted once per owning leaf.
    pub fn vertex_count(&self) -> usize {
        self.fragments
            .iter()
            .map(|(o, f)| f.edges.iter().filter(|e| e.voxel.leaf_origin() == *o).count())
            .sum()
    }

    pub fn triangle_count(&self) -> usize {
        self.fragments.values().map(|f| f.triangles.len()).sum()
    }

    /// Stitch all fragments into one mesh, merging vertices on shared edges.
    pub fn mesh(&self, voxel_size: f64) -> TriangleMesh {
        let mut mesh = TriangleMesh::default();
        let mut index: HashMap<EdgeKey, u32> = HashMap::new();
        for frag in self.fragments.values() {
            let remap: Vec<u32> = (0..frag.vertices.len())
                .map(|n| {
                    *index.entry(frag.edges[n]).or_insert_with(|| {
                        mesh.vertices.push(frag.vertices[n]);
                        mesh.vertex_properties.push(frag.properties[n]);
                        mesh.vertex_leaf.push(world_to_grid(&frag.vertices[n], voxel_size).leaf_origin());
                        (mesh.vertices.len() - 1) as u32
                    })
                })
                .collect();
            mesh.triangles
                .extend(frag.triangles.iter().map(|t| t.map(|i| remap[i as usize])));
        }
        mesh
    }
}

/// Mesh the given leaves from scratch.
pub fn marching_cubes(grid: &SparseGrid, leaves: &[GridCoord]) -> TriangleMesh {
    let mut m = Mesher::new();
    m.update(grid, leaves);
    m.mesh(grid.voxel_size())
}

/// Mesh vertices grouped by the leaf containing them.
pub fn zero_crossings(mesh: &TriangleMesh) -> BTreeMap<GridCoord, Vec<Crossing>> {
    let mut out: BTreeMap<GridCoord, Vec<Crossing>> = BTreeMap::new();
    for (n, p) in mesh.vertices.iter().enumerate() {
        out.entry(mesh.vertex_leaf[n]).or_default().push(Crossing {
            position: *p,
            property: mesh.vertex_properties[n],
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(d: f64) -> VoxelState {
        VoxelState {
            distance: d as f32,
            weight: 1.0,
            observed: true,
            ..Default::default()
        }
    }

    fn sphere_grid(s: f64, r: f64, band: f64) -> SparseGrid {
        let mut grid = SparseGrid::new(s);
        let n = ((r + band) / s).ceil() as i32 + 1;
        for i in -n..n {
            for j in -n..n {
                for k in -n..n {
                    let c = GridCoord::new(i, j, k);
                    let d = grid.grid_to_world(c).norm() - r;
                    if d.abs() <= band {
                        grid.set(c, state(d));
                    }
                }
            }
        }
        grid
    }

    fn all_leaves(grid: &SparseGrid) -> Vec<GridCoord> {
        grid.leaf_origins().to_vec()
    }

    #[test]
    fn table_is_consistent() {
        assert!(TRI_TABLE[0].is_empty() && TRI_TABLE[255].is_empty());
        for (config, tris) in TRI_TABLE.iter().enumerate() {
            assert_eq!(tris.len() % 3, 0);
            for &e in tris.iter() {
                let [a, b] = EDGES[e as usize];
                // Every used edge must separate inside from outside corners.
                assert_ne!(config >> a & 1, config >> b & 1, "config {config} edge {e}");
            }
        }
    }

    #[test]
    fn all_positive_cell_is_empty() {
        let mut grid = SparseGrid::new(0.1);
        for off in CORNERS {
            grid.set(GridCoord::new(off[0], off[1], off[2]), state(0.05));
        }
        assert!(marching_cubes(&grid, &all_leaves(&grid)).is_empty());
    }

    #[test]
    fn single_corner_case() {
        let mut grid = SparseGrid::new(0.1);
        for (n, off) in CORNERS.iter().enumerate() {
            grid.set(GridCoord::new(off[0], off[1], off[2]), state(if n == 0 { -0.03 } else { 0.03 }));
        }
        let mesh = marching_cubes(&grid, &all_leaves(&grid));
        assert_eq!(mesh.triangles.len(), 1);
        let c0 = grid.grid_to_world(GridCoord::new(0, 0, 0));
        for v in &mesh.vertices {
            assert!(((v - c0).norm() - 0.05).abs() < 1e-12);
        }
    }

    #[test]
    fn unobserved_corner_skips_cell() {
        let mut grid = SparseGrid::new(0.1);
        for (n, off) in CORNERS.iter().enumerate() {
            let mut s = state(if n == 0 { -0.03 } else { 0.03 });
            s.observed = n != 6;
            grid.set(GridCoord::new(off[0], off[1], off[2]), s);
        }
        assert!(marching_cubes(&grid, &all_leaves(&grid)).is_empty());
    }

    #[test]
    fn sphere_mesh_accuracy_and_watertightness() {
        let s = 0.05;
        let grid = sphere_grid(s, 1.0, 3.0 * s);
        let mesh = marching_cubes(&grid, &all_leaves(&grid));
        assert!(mesh.triangles.len() > 1000);
        let worst = mesh.vertices.iter().map(|v| (v.norm() - 1.0).abs()).fold(0.0, f64::max);
        assert!(worst < 0.5 * s, "worst radius error {worst}");
        let mut uses: HashMap<(u32, u32), u32> = HashMap::new();
        for t in &mesh.triangles {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                *uses.entry((a.min(b), a.max(b))).or_default() += 1;
            }
            assert!(mesh.triangle_area(t) >= MIN_TRIANGLE_AREA);
        }
        assert!(uses.values().all(|&u| u == 2), "mesh has cracks");
        let crossings = zero_crossings(&mesh);
        let total: usize = crossings.values().map(Vec::len).sum();
        assert_eq!(total, mesh.vertices.len());
        let close = crossings
            .values()
            .flatten()
            .filter(|c| (c.position.norm() - 1.0).abs() < 0.5 * s)
            .count();
        assert!(close as f64 >= 0.99 * total as f64);
        for (leaf, list) in &crossings {
            for c in list {
                assert_eq!(world_to_grid(&c.position, s).leaf_origin(), *leaf);
            }
        }
        let again = marching_cubes(&grid, &all_leaves(&grid));
        assert_eq!(again, mesh);
    }

    #[test]
    fn incremental_matches_full_remesh() {
        let s = 0.05;
        let mut grid = sphere_grid(s, 0.6, 3.0 * s);
        let mut mesher = Mesher::new();
        mesher.update(&grid, &all_leaves(&grid));
        // Perturb a few voxels in one leaf and remesh incrementally.
        let target = GridCoord::new(12, 0, 0);
        let leaf = target.leaf_origin();
        let coords: Vec<GridCoord> = grid.leaf(leaf).unwrap().iter().map(|(c, _)| c).collect();
        for c in coords {
            let d = grid.get(c).unwrap().distance as f64;
            grid.set(c, state(d + 0.01));
        }
        let lists = mesher.update(&grid, &[leaf]);
        let full = marching_cubes(&grid, &all_leaves(&grid));
        assert_eq!(mesher.mesh(s).triangles.len(), full.triangles.len());
        let full_crossings = zero_crossings(&full);
        for (o, list) in lists {
            let expect = full_crossings.get(&o).map_or(0, Vec::len);
            assert_eq!(list.len(), expect, "leaf {o:?}");
        }
    }

    #[test]
    fn plane_in_one_leaf() {
        let s = 0.1;
        let mut grid = SparseGrid::new(s);
        for i in 0..8 {
            for j in 0..8 {
                for k in 0..8 {
                    grid.set(GridCoord::new(i, j, k), state((k as f64 + 0.5) * s - 0.42));
                }
            }
        }
        let mesh = marching_cubes(&grid, &all_leaves(&grid));
        let crossings = zero_crossings(&mesh);
        assert_eq!(crossings.len(), 1);
        assert_eq!(crossings.values().next().unwrap().len(), mesh.vertices.len());
        assert_eq!(mesh.vertices.len(), 64);
        assert!(zero_crossings(&TriangleMesh::default()).is_empty());
        for v in &mesh.vertices {
            assert!((v.z - 0.42).abs() < 1e-6);
        }
    }
}
