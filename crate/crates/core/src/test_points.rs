//! Selection of the voxels updated by a frame.
//!
//! Rays are walked from the sensor to every measured voxel. Only voxels
//! that already hold a recorded surface are revisited along the way (so
//! vanished objects get carved), plus a short band around each endpoint and
//! a few steps along the local surface normal.

use std::collections::HashMap;

use nalgebra::{Matrix3, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::kdtree::KdTree;
use crate::local_field::Voxelized;
use crate::sparse_grid::{world_to_grid, GridCoord, SparseGrid};
use crate::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    /// Previously observed surface voxel on the way to a measurement.
    Ray,
    /// Within the band around a ray endpoint.
    Band,
    /// Offset along an estimated surface normal.
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestPoint {
    pub coord: GridCoord,
    /// Voxel center in world coordinates.
    pub position: Vec3,
    /// +1 on the sensor side of the surface, −1 behind it.
    pub sign: i8,
    pub source: Source,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestPointConfig {
    /// Voxels kept on each side of a ray endpoint.
    pub band_width: usize,
    /// Steps taken along each normal, in voxels.
    pub normal_reach: usize,
    /// Neighbours used for normal estimation.
    pub normal_k: usize,
}

impl Default for TestPointConfig {
    fn default() -> Self {
        TestPointConfig {
            band_width: 3,
            normal_reach: 3,
            normal_k: 10,
        }
    }
}

/// Voxels pierced by the segment `origin → end`, in order, followed by
/// `extra` further voxels along the same direction. Returns the cells and
/// the index of the cell containing `end`.
pub fn traverse(origin: &Vec3, end: &Vec3, voxel_size: f64, extra: usize) -> (Vec<GridCoord>, usize) {
    let start = world_to_grid(origin, voxel_size);
    let stop = world_to_grid(end, voxel_size);
    let dir = end - origin;
    let mut cell = start;
    let mut cells = vec![cell];
    let len = dir.norm();
    if len == 0.0 || !len.is_finite() {
        return (cells, 0);
    }

    let mut step = [0i32; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    let idx = [start.i, start.j, start.k];
    for a in 0..3 {
        if dir[a] > 0.0 {
            step[a] = 1;
            t_max[a] = (((idx[a] + 1) as f64) * voxel_size - origin[a]) / dir[a];
            t_delta[a] = voxel_size / dir[a];
        } else if dir[a] < 0.0 {
            step[a] = -1;
            t_max[a] = ((idx[a] as f64) * voxel_size - origin[a]) / dir[a];
            t_delta[a] = -voxel_size / dir[a];
        }
    }
    let manhattan = ((stop.i - start.i).abs() + (stop.j - start.j).abs() + (stop.k - start.k).abs()) as usize;
    let mut advance = |cell: &mut GridCoord| {
        let a = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
            0
        } else if t_max[1] <= t_max[2] {
            1
        } else {
            2
        };
        match a {
            0 => cell.i += step[0],
            1 => cell.j += step[1],
            _ => cell.k += step[2],
        }
        t_max[a] += t_delta[a];
    };
    for _ in 0..manhattan {
        advance(&mut cell);
        cells.push(cell);
    }
    if cell != stop {
        // Rounding at a voxel corner sent the walk past the endpoint; snap back.
        cells.truncate(1);
        let mut c = start;
        for (a, target) in [stop.i, stop.j, stop.k].into_iter().enumerate() {
            while [c.i, c.j, c.k][a] != target {
                match a {
                    0 => c.i += step[0],
                    1 => c.j += step[1],
                    _ => c.k += step[2],
                }
                cells.push(c);
            }
        }
        cell = stop;
    }
    let end_index = cells.len() - 1;
    for _ in 0..extra {
        advance(&mut cell);
        cells.push(cell);
    }
    (cells, end_index)
}

/// Accumulates test points in first-seen order, resolving conflicting signs
/// by majority (ties go to the free side).
#[derive(Default)]
struct Collector {
    index: HashMap<GridCoord, usize>,
    points: Vec<(TestPoint, u32, u32)>,
}

impl Collector {
    fn push(&mut self, p: TestPoint) {
        let slot = *self.index.entry(p.coord).or_insert_with(|| {
            self.points.push((p, 0, 0));
            self.points.len() - 1
        });
        let entry = &mut self.points[slot];
        if p.sign > 0 {
            entry.1 += 1;
        } else {
            entry.2 += 1;
        }
    }

    fn finish(self) -> Vec<TestPoint> {
        self.points
            .into_iter()
            .map(|(mut p, plus, minus)| {
                p.sign = if plus >= minus { 1 } else { -1 };
                p
            })
            .collect()
    }
}

/// Ray-traversal and band test points for every measured voxel.
fn ray_candidates(
    origin: &Vec3,
    measured: &Voxelized,
    grid: &SparseGrid,
    cfg: &TestPointConfig,
) -> Vec<Vec<TestPoint>> {
    let s = measured.voxel_size;
    let carve_limit = cfg.band_width as f64 * s;
    measured
        .centers
        .par_iter()
        .map(|end| {
            let (cells, e) = traverse(origin, end, s, cfg.band_width);
            let dir = end - origin;
            let len2 = dir.norm_squared().max(f64::MIN_POSITIVE);
            let band_start = e.saturating_sub(cfg.band_width);
            let mut out = Vec::new();
            for (n, &c) in cells.iter().enumerate() {
                let source = if n < band_start {
                    match grid.get(c) {
                        Some(v) if v.observed && (v.distance as f64).abs() <= carve_limit => Source::Ray,
                        _ => continue,
                    }
                } else {
                    Source::Band
                };
                let position = grid.grid_to_world(c);
                let t = (position - origin).dot(&dir) / len2;
                out.push(TestPoint {
                    coord: c,
                    position,
                    sign: if t <= 1.0 { 1 } else { -1 },
                    source,
                });
            }
            out
        })
        .collect()
}

/// Test points from ray traversal and endpoint bands, deduplicated.
pub fn generate(
    origin: &Vec3,
    measured: &Voxelized,
    grid: &SparseGrid,
    cfg: &TestPointConfig,
) -> Vec<TestPoint> {
    let mut acc = Collector::default();
    for list in ray_candidates(origin, measured, grid, cfg) {
        list.into_iter().for_each(|p| acc.push(p));
    }
    acc.finish()
}

/// Per-point surface normals from the covariance of the `k` nearest
/// neighbours, oriented towards `origin`. Degenerate neighbourhoods and
/// views too close to the tangent plane to orient get `None`.
pub fn estimate_normals(points: &[Vec3], origin: &Vec3, k: usize) -> Vec<Option<Vec3>> {
    if points.len() < 3 || k < 3 {
        return vec![None; points.len()];
    }
    let tree = KdTree::new(points.to_vec());
    points
        .par_iter()
        .map(|p| {
            let nn = tree.knn(p, k);
            let mean = nn.iter().fold(Vec3::zeros(), |a, n| a + points[n.index]) / nn.len() as f64;
            let mut cov = Matrix3::zeros();
            for n in &nn {
                let d = points[n.index] - mean;
                cov += d * d.transpose();
            }
            let eig = SymmetricEigen::new(cov);
            let mut order = [0usize, 1, 2];
            order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
            let (lmin, lmid, lmax) = (
                eig.eigenvalues[order[0]].max(0.0),
                eig.eigenvalues[order[1]].max(0.0),
                eig.eigenvalues[order[2]].max(0.0),
            );
            if lmid <= 1e-12 * lmax || lmin > 0.9 * lmid {
                return None;
            }
            let n: Vec3 = eig.eigenvectors.column(order[0]).into_owned().normalize();
            // Orientation is only trustworthy when the view ray is further
            // from the tangent plane than the normal's own angular spread;
            // on curved silhouettes a flipped normal would plant negative
            // test points in free space.
            let facing = n.dot(&(origin - p)) / (origin - p).norm();
            if facing.abs() < (lmin / lmid).sqrt() {
                return None;
            }
            Some(if facing < 0.0 { -n } else { n })
        })
        .collect()
}

/// Voxels `±1..=reach` steps along each normal; positive on the normal side.
pub fn normal_augment(
    measured: &Voxelized,
    normals: &[Option<Vec3>],
    reach: usize,
) -> Vec<TestPoint> {
    let s = measured.voxel_size;
    let mut out = Vec::with_capacity(measured.len() * 2 * reach);
    for (p, n) in measured.centers.iter().zip(normals) {
        let Some(n) = n else { continue };
        for m in 1..=reach as i32 {
            for sign in [1i8, -1] {
                let q = p + n * (s * m as f64 * sign as f64);
                let coord = world_to_grid(&q, s);
                out.push(TestPoint {
                    coord,
                    position: crate::sparse_grid::grid_to_world(coord, s),
                    sign,
                    source: Source::Normal,
                });
            }
        }
    }
    out
}

/// Complete per-frame test set: rays, bands and normal offsets, deduplicated.
pub fn generate_all(
    origin: &Vec3,
    measured: &Voxelized,
    grid: &SparseGrid,
    cfg: &TestPointConfig,
) -> Vec<TestPoint> {
    let mut acc = Collector::default();
    for list in ray_candidates(origin, measured, grid, cfg) {
        list.into_iter().for_each(|p| acc.push(p));
    }
    if cfg.normal_reach > 0 && measured.len() >= cfg.normal_k.max(3) {
        let normals = estimate_normals(&measured.centers, origin, cfg.normal_k);
        normal_augment(measured, &normals, cfg.normal_reach)
            .into_iter()
            .for_each(|p| acc.push(p));
    }
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::{Frame, Pose};
    use crate::local_field::voxelize;
    use crate::sparse_grid::{grid_to_world, VoxelState};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    const S: f64 = 0.1;

    fn measured(points: Vec<Vec3>) -> Voxelized {
        voxelize(&Frame::new(points, Pose::identity(), 0.0), S).unwrap()
    }

    fn cfg(band: usize, reach: usize) -> TestPointConfig {
        TestPointConfig {
            band_width: band,
            normal_reach: reach,
            normal_k: 10,
        }
    }

    /// Whether the segment intersects the closed voxel box (slab test).
    fn segment_hits(o: &Vec3, e: &Vec3, c: GridCoord, tol: f64) -> bool {
        let lo = c.as_vec() * S;
        let d = e - o;
        let (mut t0, mut t1) = (0.0f64, 1.0f64);
        for a in 0..3 {
            let (l, h) = (lo[a] - tol, lo[a] + S + tol);
            if d[a].abs() < 1e-15 {
                if o[a] < l || o[a] > h {
                    return false;
                }
            } else {
                let (mut ta, mut tb) = ((l - o[a]) / d[a], (h - o[a]) / d[a]);
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                t0 = t0.max(ta);
                t1 = t1.min(tb);
            }
        }
        t0 <= t1
    }

    #[test]
    fn dda_matches_fine_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let o = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let c = world_to_grid(
                &Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)),
                S,
            );
            let e = grid_to_world(c, S);
            let (cells, idx) = traverse(&o, &e, S, 0);
            assert_eq!(idx, cells.len() - 1);
            assert_eq!(cells[idx], c);
            let set: HashSet<GridCoord> = cells.iter().copied().collect();
            assert_eq!(set.len(), cells.len());
            let steps = ((e - o).norm() / (S / 10.0)).ceil() as usize;
            for n in 0..=steps {
                let p = o + (e - o) * (n as f64 / steps as f64);
                assert!(set.contains(&world_to_grid(&p, S)), "missed sample {n}");
            }
            for cell in &cells {
                assert!(segment_hits(&o, &e, *cell, 1e-9), "cell {cell:?} not on ray");
            }
        }
    }

    #[test]
    fn band_only_on_empty_grid() {
        let origin = Vec3::new(0.05, 0.05, 0.05);
        let m = measured(vec![Vec3::new(2.05, 0.05, 0.05)]);
        let grid = SparseGrid::new(S);
        let pts = generate(&origin, &m, &grid, &cfg(3, 0));
        assert_eq!(pts.len(), 7);
        let mut is: Vec<i32> = pts.iter().map(|p| p.coord.i).collect();
        is.sort();
        assert_eq!(is, vec![17, 18, 19, 20, 21, 22, 23]);
        for p in &pts {
            assert_eq!(p.sign, if p.coord.i <= 20 { 1 } else { -1 });
            assert_eq!(p.source, Source::Band);
        }
    }

    #[test]
    fn stale_surface_is_carved() {
        let origin = Vec3::new(0.05, 0.05, 0.05);
        let m = measured(vec![Vec3::new(2.05, 0.05, 0.05)]);
        let mut grid = SparseGrid::new(S);
        let stale = GridCoord::new(8, 0, 0);
        grid.set(stale, VoxelState { distance: 0.01, weight: 5.0, observed: true, ..Default::default() });
        // Observed but far from any surface: skipped.
        grid.set(GridCoord::new(5, 0, 0), VoxelState { distance: 0.9, weight: 5.0, observed: true, ..Default::default() });
        // Never observed: skipped.
        grid.set(GridCoord::new(6, 0, 0), VoxelState { distance: 0.0, weight: 1.0, observed: false, ..Default::default() });
        let pts = generate(&origin, &m, &grid, &cfg(3, 0));
        assert_eq!(pts.len(), 8);
        let p = pts.iter().find(|p| p.coord == stale).unwrap();
        assert_eq!((p.sign, p.source), (1, Source::Ray));
    }

    #[test]
    fn shared_endpoint_emitted_once() {
        let m = measured(vec![Vec3::new(1.05, 0.05, 0.05), Vec3::new(1.06, 0.06, 0.04)]);
        assert_eq!(m.len(), 1);
        let pts = generate(&Vec3::new(0.05, 0.05, 0.05), &m, &SparseGrid::new(S), &cfg(3, 0));
        let coords: HashSet<GridCoord> = pts.iter().map(|p| p.coord).collect();
        assert_eq!(coords.len(), pts.len());
        let grid = SparseGrid::new(S);
        let two = measured(vec![Vec3::new(1.05, 0.05, 0.05), Vec3::new(1.05, 0.05, 0.05)]);
        assert_eq!(generate(&Vec3::new(0.05, 0.05, 0.05), &two, &grid, &cfg(3, 0)).len(), 7);
    }

    fn wall(z: f64, n: i32) -> Vec<Vec3> {
        (-n..n)
            .flat_map(|i| (-n..n).map(move |j| Vec3::new((i as f64 + 0.5) * S, (j as f64 + 0.5) * S, z)))
            .collect()
    }

    #[test]
    fn plane_normals() {
        let pts = wall(1.05, 6);
        let origin = Vec3::new(0.2, -0.1, -1.0);
        let normals = estimate_normals(&pts, &origin, 10);
        for n in normals {
            let n = n.unwrap();
            assert!((n - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-3);
        }
    }

    #[test]
    fn sphere_normals() {
        // Fibonacci lattice: evenly spread samples on the unit sphere.
        let n = 10_000;
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let pts: Vec<Vec3> = (0..n)
            .map(|i| {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r = (1.0 - z * z).sqrt();
                let phi = golden * i as f64;
                Vec3::new(r * phi.cos(), r * phi.sin(), z)
            })
            .collect();
        let origin = Vec3::new(0.0, 0.0, 10.0);
        let normals = estimate_normals(&pts, &origin, 10);
        let mut checked = 0;
        for (p, n) in pts.iter().zip(&normals) {
            let Some(n) = n else {
                // Only the silhouette, seen edge-on, may be left unoriented.
                let facing = p.dot(&(origin - p)) / (origin - p).norm();
                assert!(facing.abs() < 0.05, "p={p:?} dropped at facing {facing}");
                continue;
            };
            assert!(n.dot(p).abs() > 5f64.to_radians().cos(), "p={p:?} n={n:?}");
            assert!(n.dot(&(origin - p)) > 0.0);
            checked += 1;
        }
        assert!(checked > 9800, "{checked}");
    }

    #[test]
    fn collinear_is_degenerate() {
        let pts = vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0), Vec3::new(2.0, 0.0, 0.0)];
        assert!(estimate_normals(&pts, &Vec3::new(0.0, 1.0, 0.0), 3).iter().all(Option::is_none));
    }

    #[test]
    fn augment_offsets() {
        let m = measured(vec![Vec3::new(0.05, 0.05, 0.05)]);
        assert!(normal_augment(&m, &[Some(Vec3::z())], 0).is_empty());
        let pts = normal_augment(&m, &[Some(Vec3::z())], 2);
        let mut ks: Vec<(i32, i8)> = pts.iter().map(|p| (p.coord.k, p.sign)).collect();
        ks.sort();
        assert_eq!(ks, vec![(-2, -1), (-1, -1), (1, 1), (2, 1)]);
        for p in &pts {
            assert!((p.position - m.centers[0]).xy().norm() < 1e-12);
        }
    }

    #[test]
    fn grazing_wall_coverage() {
        // Wall z = 0.05, sensor skimming it at a few degrees.
        let origin = Vec3::new(-6.0, 0.05, 0.35);
        let m = measured(wall(0.05, 8));
        let grid = SparseGrid::new(S);
        let band = generate(&origin, &m, &grid, &cfg(3, 0));
        let full = generate_all(&origin, &m, &grid, &cfg(3, 3));
        let covered = |pts: &[TestPoint], c: GridCoord| {
            let up = pts.iter().any(|p| p.coord == c.offset(0, 0, 1) && p.sign > 0);
            let down = pts.iter().any(|p| p.coord == c.offset(0, 0, -1) && p.sign < 0);
            up && down
        };
        let gaps = m.coords.iter().filter(|c| !covered(&band, **c)).count();
        assert!(gaps > 0, "band-only generation should leave gaps at grazing incidence");
        for c in &m.coords {
            assert!(covered(&full, *c), "voxel {c:?} lacks two-sided coverage");
        }
        // Every measured voxel is updated and the budget bound holds.
        let coords: HashSet<GridCoord> = full.iter().map(|p| p.coord).collect();
        assert!(m.coords.iter().all(|c| coords.contains(c)));
    }

    #[test]
    fn free_side_sign_before_surface() {
        let origin = Vec3::new(0.05, 0.05, -1.0);
        let m = measured(wall(1.05, 4));
        let pts = generate_all(&origin, &m, &SparseGrid::new(S), &cfg(3, 3));
        for p in &pts {
            if p.position.z < 1.0 {
                assert_eq!(p.sign, 1, "{p:?}");
            } else if p.position.z > 1.1 {
                assert_eq!(p.sign, -1, "{p:?}");
            }
        }
    }
}
