//! Per-frame local distance field.
//!
//! Each frame is voxelized into a throwaway grid; every populated leaf
//! becomes the training set of its own GP. Queries go to the single model
//! whose centroid is closest.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::gp::{self, GpLeafModel, KernelParams};
use crate::kdtree::KdTree;
use crate::sparse_grid::{GridCoord, Property, SparseGrid, LEAF_VOXELS, MAX_CHANNELS};
use crate::Vec3;

/// Leaves with fewer voxels than this are folded into a neighbouring model.
pub const MIN_LEAF_VOXELS: usize = 4;

/// Measured voxels of one frame, grouped by leaf in origin order.
#[derive(Debug, Clone)]
pub struct Voxelized {
    pub voxel_size: f64,
    pub coords: Vec<GridCoord>,
    /// World-frame voxel centers.
    pub centers: Vec<Vec3>,
    /// Mean property of the raw points in each voxel (zeros without properties).
    pub properties: Vec<Property>,
    pub counts: Vec<u32>,
    /// Leaf origin and the index range of its voxels.
    pub leaves: Vec<(GridCoord, std::ops::Range<usize>)>,
    pub has_properties: bool,
}

impl Voxelized {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

pub fn voxelize(frame: &Frame, voxel_size: f64) -> Result<Voxelized> {
    if frame.is_empty() {
        return Err(Error::EmptyFrame);
    }
    frame.validate()?;
    let has_properties = !frame.properties.is_empty();
    let mut grid = SparseGrid::new(voxel_size);
    for (idx, p) in frame.world_points().enumerate() {
        if !p.iter().all(|v| v.is_finite()) {
            continue;
        }
        let s = grid.get_or_insert(grid.world_to_grid(&p));
        s.weight += 1.0;
        if has_properties {
            let c = frame.properties[idx];
            for ch in 0..MAX_CHANNELS {
                s.property[ch] += (c[ch] - s.property[ch]) / s.weight;
            }
        }
    }
    if grid.is_empty() {
        return Err(Error::EmptyFrame);
    }

    let mut origins = grid.leaf_origins().to_vec();
    origins.sort_unstable();
    let n = grid.voxel_count();
    let mut out = Voxelized {
        voxel_size,
        coords: Vec::with_capacity(n),
        centers: Vec::with_capacity(n),
        properties: Vec::with_capacity(n),
        counts: Vec::with_capacity(n),
        leaves: Vec::with_capacity(origins.len()),
        has_properties,
    };
    for origin in origins {
        let leaf = grid.leaf(origin).expect("listed leaf exists");
        let start = out.coords.len();
        for (c, s) in leaf.iter() {
            out.coords.push(c);
            out.centers.push(grid.grid_to_world(c));
            out.properties.push(s.property);
            out.counts.push(s.weight as u32);
        }
        out.leaves.push((origin, start..out.coords.len()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalParams {
    pub kernel: KernelParams,
    /// Property channels used for regression (0 disables it).
    pub channels: usize,
    /// Valid range every property channel is clamped to.
    pub property_range: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct LocalModel {
    /// Leaf whose voxels seeded this model.
    pub leaf: GridCoord,
    /// All leaves whose voxels were used for training.
    pub members: Vec<GridCoord>,
    pub model: GpLeafModel,
}

/// Inference at a test point. The distance is unsigned.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalInference {
    pub distance: f64,
    /// Propagated distance variance (m²).
    pub variance: f64,
    pub property: Option<Property>,
    /// Latent variance of the property regression.
    pub property_variance: f64,
}

#[derive(Debug, Clone)]
pub struct LocalField {
    params: LocalParams,
    models: Vec<LocalModel>,
    leaf_to_model: HashMap<GridCoord, usize>,
    centroids: KdTree,
}

struct Cluster {
    leaf: GridCoord,
    members: Vec<GridCoord>,
    indices: Vec<usize>,
}

fn centroid(centers: &[Vec3], indices: impl Iterator<Item = usize>) -> Vec3 {
    let (sum, n) = indices.fold((Vec3::zeros(), 0usize), |(s, n), i| (s + centers[i], n + 1));
    sum / n.max(1) as f64
}

impl LocalField {
    pub fn build(vox: &Voxelized, params: &LocalParams) -> Result<LocalField> {
        if vox.is_empty() {
            return Err(Error::EmptyFrame);
        }
        params.kernel.validate()?;

        let (big, small): (Vec<_>, Vec<_>) = vox
            .leaves
            .iter()
            .partition(|(_, r)| r.len() >= MIN_LEAF_VOXELS);
        let mut clusters: Vec<Cluster> = big
            .iter()
            .map(|(origin, r)| Cluster {
                leaf: *origin,
                members: vec![*origin],
                indices: r.clone().collect(),
            })
            .collect();
        if clusters.is_empty() {
            clusters = small
                .iter()
                .map(|(origin, r)| Cluster {
                    leaf: *origin,
                    members: vec![*origin],
                    indices: r.clone().collect(),
                })
                .collect();
        } else {
            let tree = KdTree::new(
                clusters
                    .iter()
                    .map(|c| centroid(&vox.centers, c.indices.iter().copied()))
                    .collect(),
            );
            let mut orphans = Vec::new();
            for (origin, r) in small {
                let c = centroid(&vox.centers, r.clone());
                let target = tree
                    .knn(&c, tree.len())
                    .into_iter()
                    .find(|n| clusters[n.index].indices.len() + r.len() <= LEAF_VOXELS);
                match target {
                    Some(n) => {
                        clusters[n.index].members.push(*origin);
                        clusters[n.index].indices.extend(r.clone());
                    }
                    None => orphans.push(Cluster {
                        leaf: *origin,
                        members: vec![*origin],
                        indices: r.clone().collect(),
                    }),
                }
            }
            clusters.extend(orphans);
            clusters.sort_by_key(|c| c.leaf);
        }

        let channels = params.channels.min(MAX_CHANNELS);
        let use_props = channels > 0 && vox.has_properties;
        let models = clusters
            .into_par_iter()
            .map(|c| {
                let pts: Vec<Vec3> = c.indices.iter().map(|&i| vox.centers[i]).collect();
                let props = use_props.then(|| {
                    DMatrix::from_fn(pts.len(), channels, |r, ch| {
                        vox.properties[c.indices[r]][ch] as f64
                    })
                });
                let model = gp::train(&pts, props.as_ref(), &params.kernel).map_err(|e| match e {
                    Error::FactorizationFailure {
                        points, max_jitter, ..
                    } => Error::FactorizationFailure {
                        points,
                        max_jitter,
                        leaf: Some(c.leaf),
                    },
                    other => other,
                })?;
                Ok(LocalModel {
                    leaf: c.leaf,
                    members: c.members,
                    model,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let mut leaf_to_model = HashMap::new();
        for (i, m) in models.iter().enumerate() {
            for leaf in &m.members {
                leaf_to_model.insert(*leaf, i);
            }
        }
        let centroids = KdTree::new(models.iter().map(|m| m.model.centroid()).collect());
        Ok(LocalField {
            params: *params,
            models,
            leaf_to_model,
            centroids,
        })
    }

    pub fn params(&self) -> &LocalParams {
        &self.params
    }

    pub fn models(&self) -> &[LocalModel] {
        &self.models
    }

    pub fn model_for_leaf(&self, leaf: GridCoord) -> Option<&LocalModel> {
        self.leaf_to_model.get(&leaf).map(|&i| &self.models[i])
    }

    /// Index of the model that answers queries at `x`.
    pub fn route(&self, x: &Vec3) -> usize {
        self.centroids.nearest(x).expect("local field has models").index
    }

    pub fn query(&self, x: &Vec3) -> LocalInference {
        let m = &self.models[self.route(x)].model;
        let p = &self.params.kernel;
        let occ = m.infer_occupancy(x);
        let property = if self.params.channels > 0 {
            m.infer_property(x, self.params.property_range)
        } else {
            None
        };
        LocalInference {
            distance: gp::revert_distance(occ.mean, p),
            variance: gp::propagate_variance(occ.variance, occ.mean, p),
            property_variance: property.as_ref().map_or(occ.variance, |e| e.variance),
            property: property.map(|e| crate::frame::property_from_slice(&e.values)),
        }
    }
}
