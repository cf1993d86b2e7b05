//! Per-frame mapping pipeline: voxelize → local field → test points →
//! inference → fusion → meshing → global field update.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::fusion::{fuse_frame, normalize_variance, Observation};
use crate::global_field::{FieldQueryResult, GlobalField};
use crate::local_field::{voxelize, LocalField};
use crate::meshing::{Mesher, TriangleMesh};
use crate::sparse_grid::{GridCoord, SparseGrid};
use crate::test_points::generate_all;
use crate::Vec3;

pub const STAGES: [&str; 8] = [
    "voxelize",
    "local",
    "test_points",
    "inference",
    "fusion",
    "meshing",
    "global",
    "eager_train",
];

/// Wall time per stage in milliseconds, in [`STAGES`] order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes(pub [f64; 8]);

impl StageTimes {
    pub fn get(&self, stage: &str) -> Option<f64> {
        STAGES.iter().position(|s| *s == stage).map(|i| self.0[i])
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, f64)> + '_ {
        STAGES.iter().copied().zip(self.0.iter().copied())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameStats {
    pub frame: usize,
    pub points: usize,
    pub measured_voxels: usize,
    pub local_models: usize,
    pub test_points: usize,
    pub voxels_fused: usize,
    pub leaves_active: usize,
    pub new_leaves: usize,
    pub total_leaves: usize,
    pub mesh_vertex_delta: i64,
    pub mesh_vertices: usize,
    pub global_nodes: usize,
    pub nodes_trained: usize,
    pub stage_ms: StageTimes,
    pub total_ms: f64,
}

impl FrameStats {
    /// Rows for the bench CSV (`frame,stage,ms,points,voxels,leaves`).
    pub fn csv_rows(&self) -> Vec<String> {
        self.stage_ms
            .iter()
            .chain(std::iter::once(("total", self.total_ms)))
            .map(|(stage, ms)| {
                format!(
                    "{},{},{:.4},{},{},{}",
                    self.frame, stage, ms, self.points, self.voxels_fused, self.leaves_active
                )
            })
            .collect()
    }
}

pub const CSV_HEADER: &str = "frame,stage,ms,points,voxels,leaves";

/// The whole map: fused grid, incremental mesh and global field.
#[derive(Debug)]
pub struct Mapper {
    config: PipelineConfig,
    grid: SparseGrid,
    mesher: Mesher,
    global: GlobalField,
    frames: usize,
}

impl Mapper {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        Ok(Mapper {
            grid: SparseGrid::new(config.voxel_size),
            mesher: Mesher::new(),
            global: GlobalField::new(config.global_params()),
            frames: 0,
            config,
        })
    }

    /// Reassemble a mapper from a stored grid and global field; the mesh
    /// is rebuilt from the grid.
    pub fn from_parts(config: PipelineConfig, grid: SparseGrid, global: GlobalField, frames: usize) -> Result<Self> {
        config.validate()?;
        if (grid.voxel_size() - config.voxel_size).abs() > 1e-12 {
            return Err(Error::Config("grid voxel size does not match the configuration".into()));
        }
        let mut mesher = Mesher::new();
        let leaves = grid.leaf_origins();
        mesher.update(&grid, leaves);
        Ok(Mapper {
            config,
            grid,
            mesher,
            global,
            frames,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn grid(&self) -> &SparseGrid {
        &self.grid
    }

    pub fn mesher(&self) -> &Mesher {
        &self.mesher
    }

    pub fn global(&self) -> &GlobalField {
        &self.global
    }

    pub fn frames_integrated(&self) -> usize {
        self.frames
    }

    pub fn reset(&mut self) {
        self.grid = SparseGrid::new(self.config.voxel_size);
        self.mesher.clear();
        self.global.clear();
        self.frames = 0;
    }

    pub fn mesh(&self) -> TriangleMesh {
        self.mesher.mesh(self.config.voxel_size)
    }

    pub fn query(&self, x: &Vec3) -> Result<FieldQueryResult> {
        self.global.query(&self.grid, x)
    }

    pub fn query_batch(&self, xs: &[Vec3]) -> Result<Vec<FieldQueryResult>> {
        self.global.query_batch(&self.grid, xs)
    }

    /// Run every stage for one frame. Errors carry the frame index.
    pub fn integrate_frame(&mut self, frame: &Frame) -> Result<FrameStats> {
        let index = self.frames;
        let stats = self.integrate(frame, index).map_err(|e| e.in_frame(index))?;
        self.frames += 1;
        Ok(stats)
    }

    fn integrate(&mut self, frame: &Frame, index: usize) -> Result<FrameStats> {
        let start = Instant::now();
        let mut times = [0.0; 8];
        let mut clock = Instant::now();
        let mut lap = |slot: usize, clock: &mut Instant| {
            let now = Instant::now();
            times[slot] = (now - *clock).as_secs_f64() * 1e3;
            *clock = now;
        };
        let cfg = &self.config;

        frame.validate()?;
        let vox = voxelize(frame, cfg.voxel_size)?;
        lap(0, &mut clock);

        let mut local_params = cfg.local_params();
        if !vox.has_properties {
            local_params.channels = 0;
        }
        let local = LocalField::build(&vox, &local_params)?;
        lap(1, &mut clock);

        let origin = frame.pose.origin();
        let tests = generate_all(&origin, &vox, &self.grid, &cfg.test_point_config());
        lap(2, &mut clock);

        let kernel = local_params.kernel;
        let sigma2 = kernel.sigma2;
        let observations: Vec<(GridCoord, Observation)> = tests
            .par_iter()
            .map(|tp| {
                let inf = local.query(&tp.position);
                let obs = Observation {
                    distance: tp.sign as f64 * inf.distance,
                    variance: normalize_variance(inf.variance, kernel.max_variance),
                    property: inf.property,
                    property_variance: normalize_variance(inf.property_variance, sigma2),
                };
                (tp.coord, obs)
            })
            .collect();
        lap(3, &mut clock);

        self.grid.clear_active();
        let fusion = fuse_frame(&mut self.grid, &observations, &cfg.fusion_config());
        lap(4, &mut clock);

        let vertices_before = self.mesher.vertex_count();
        let active = self.grid.active_origins();
        let lists = self.mesher.update(&self.grid, active);
        let vertices_after = self.mesher.vertex_count();
        lap(5, &mut clock);

        self.global.update(cfg.voxel_size, &lists);
        lap(6, &mut clock);

        let nodes_trained = if cfg.eager_train { self.global.train_all()? } else { 0 };
        lap(7, &mut clock);

        Ok(FrameStats {
            frame: index,
            points: frame.len(),
            measured_voxels: vox.len(),
            local_models: local.models().len(),
            test_points: tests.len(),
            voxels_fused: fusion.voxels_touched,
            leaves_active: active.len(),
            new_leaves: fusion.new_leaves,
            total_leaves: self.grid.leaf_count(),
            mesh_vertex_delta: vertices_after as i64 - vertices_before as i64,
            mesh_vertices: vertices_after,
            global_nodes: self.global.len(),
            nodes_trained,
            stage_ms: StageTimes(times),
            total_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}
