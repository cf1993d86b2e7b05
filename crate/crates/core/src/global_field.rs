//! Global distance field over the mesh zero crossings.
//!
//! Every leaf holding crossings gets its own GP, trained on first use. A
//! query blends the Q nearest node models with a smooth minimum and takes
//! the sign from the fused grid.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{self, GpLeafModel, KernelParams};
use crate::kdtree::KdTree;
use crate::meshing::Crossing;
use crate::sparse_grid::{world_to_grid, GridCoord, Property, SparseGrid, LEAF_DIM, LEAF_VOXELS, MAX_CHANNELS};
use crate::Vec3;

/// How per-node gradients are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GradientBlend {
    /// Weighted by the smooth-minimum weights.
    #[default]
    Weighted,
    /// Plain average of the unit gradients.
    Uniform,
}

impl GradientBlend {
    pub fn name(self) -> &'static str {
        match self {
            GradientBlend::Weighted => "weighted",
            GradientBlend::Uniform => "uniform",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "weighted" => Some(GradientBlend::Weighted),
            "uniform" => Some(GradientBlend::Uniform),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalParams {
    pub kernel: KernelParams,
    /// Node models blended per query.
    pub q: usize,
    /// Smooth-minimum sharpness (1/m).
    pub lambda: f64,
    pub gradient: GradientBlend,
    /// Radius, in voxels, searched for a fused voxel that supplies the sign.
    pub sign_radius: i32,
    pub channels: usize,
    pub property_range: (f64, f64),
}

/// Where the sign of a query result came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignSource {
    /// Nearest fused voxel within the search radius.
    Grid,
    /// No fused voxel nearby; the distance is reported unsigned (free space
    /// assumed).
    Unsigned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldQueryResult {
    pub distance: f64,
    pub variance: f64,
    pub gradient: [f64; 3],
    pub property: Option<Vec<f64>>,
    pub property_variance: f64,
    pub sign: SignSource,
    /// Unsigned per-node distances, nearest centroid first.
    pub node_distances: Vec<f64>,
}

impl FieldQueryResult {
    pub fn gradient_vec(&self) -> Vec3 {
        Vec3::from(self.gradient)
    }
}

type Trained = std::result::Result<Arc<GpLeafModel>, (usize, f64)>;

#[derive(Debug)]
struct Node {
    points: Vec<Vec3>,
    properties: Vec<Property>,
    centroid: Vec3,
    model: OnceLock<Trained>,
}

#[derive(Debug)]
pub struct GlobalField {
    params: GlobalParams,
    nodes: BTreeMap<GridCoord, Node>,
    keys: Vec<GridCoord>,
    tree: KdTree,
    trainings: AtomicUsize,
}

/// Collapse crossings to one point per voxel (mean position and property),
/// ordered by voxel.
pub fn downsample(crossings: &[Crossing], voxel_size: f64) -> (Vec<Vec3>, Vec<Property>) {
    let mut acc: BTreeMap<GridCoord, (Vec3, [f64; MAX_CHANNELS], usize)> = BTreeMap::new();
    for c in crossings {
        let e = acc
            .entry(world_to_grid(&c.position, voxel_size))
            .or_insert((Vec3::zeros(), [0.0; MAX_CHANNELS], 0));
        e.0 += c.position;
        for ch in 0..MAX_CHANNELS {
            e.1[ch] += c.property[ch] as f64;
        }
        e.2 += 1;
    }
    let mut pts = Vec::with_capacity(acc.len());
    let mut props = Vec::with_capacity(acc.len());
    for (_, (sum, psum, n)) in acc.into_iter().take(LEAF_VOXELS) {
        pts.push(sum / n as f64);
        props.push(psum.map(|v| (v / n as f64) as f32));
    }
    (pts, props)
}

/// Smooth minimum `Σ d exp(−λ d) / Σ exp(−λ d)`, evaluated relative to the
/// minimum for stability. Returns the blend and the normalized weights.
pub fn smooth_min(distances: &[f64], lambda: f64) -> (f64, Vec<f64>) {
    let dmin = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = distances.iter().map(|d| (-lambda * (d - dmin)).exp()).collect();
    let total: f64 = w.iter().sum();
    let dmax = distances.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // A convex combination; the clamp only removes rounding.
    let blend = (distances.iter().zip(&w).map(|(d, w)| d * w).sum::<f64>() / total).clamp(dmin, dmax);
    (blend, w.into_iter().map(|w| w / total).collect())
}

impl GlobalField {
    pub fn new(params: GlobalParams) -> Self {
        GlobalField {
            params,
            nodes: BTreeMap::new(),
            keys: Vec::new(),
            tree: KdTree::new(Vec::new()),
            trainings: AtomicUsize::new(0),
        }
    }

    pub fn params(&self) -> &GlobalParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of node trainings performed so far.
    pub fn training_count(&self) -> usize {
        self.trainings.load(Ordering::Relaxed)
    }

    pub fn node_origins(&self) -> &[GridCoord] {
        &self.keys
    }

    pub fn node_points(&self, origin: GridCoord) -> Option<&[Vec3]> {
        self.nodes.get(&origin).map(|n| n.points.as_slice())
    }

    pub fn node_properties(&self, origin: GridCoord) -> Option<&[Property]> {
        self.nodes.get(&origin).map(|n| n.properties.as_slice())
    }

    pub fn is_trained(&self, origin: GridCoord) -> bool {
        self.nodes.get(&origin).is_some_and(|n| n.model.get().is_some())
    }

    /// Replace the crossing lists of the given leaves; empty lists remove
    /// the node. Training is deferred to the first query that needs it.
    pub fn update(&mut self, voxel_size: f64, lists: &[(GridCoord, Vec<Crossing>)]) {
        let mut changed = false;
        for (origin, list) in lists {
            let (points, properties) = downsample(list, voxel_size);
            if points.is_empty() {
                changed |= self.nodes.remove(origin).is_some();
                continue;
            }
            if let Some(old) = self.nodes.get(origin) {
                if old.points == points && old.properties == properties {
                    continue;
                }
            }
            self.insert_node(*origin, points, properties);
            changed = true;
        }
        if changed {
            self.rebuild_index();
        }
    }

    /// Insert a node from already downsampled points (used when loading).
    pub fn insert_node(&mut self, origin: GridCoord, points: Vec<Vec3>, properties: Vec<Property>) {
        let centroid = points.iter().fold(Vec3::zeros(), |a, p| a + p) / points.len().max(1) as f64;
        self.nodes.insert(
            origin,
            Node {
                points,
                properties,
                centroid,
                model: OnceLock::new(),
            },
        );
    }

    pub fn rebuild_index(&mut self) {
        self.keys = self.nodes.keys().copied().collect();
        self.tree = KdTree::new(self.nodes.values().map(|n| n.centroid).collect());
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.rebuild_index();
    }

    fn model(&self, origin: GridCoord) -> Result<Arc<GpLeafModel>> {
        let node = &self.nodes[&origin];
        let trained = node.model.get_or_init(|| {
            self.trainings.fetch_add(1, Ordering::Relaxed);
            let channels = self.params.channels.min(MAX_CHANNELS);
            let props = (channels > 0).then(|| {
                DMatrix::from_fn(node.points.len(), channels, |r, ch| node.properties[r][ch] as f64)
            });
            match gp::train(&node.points, props.as_ref(), &self.params.kernel) {
                Ok(m) => Ok(Arc::new(m)),
                Err(Error::FactorizationFailure { points, max_jitter, .. }) => Err((points, max_jitter)),
                Err(e) => unreachable!("training input validated: {e}"),
            }
        });
        trained.clone().map_err(|(points, max_jitter)| Error::FactorizationFailure {
            points,
            max_jitter,
            leaf: Some(origin),
        })
    }

    /// Train every node that is not trained yet. Returns how many were trained.
    pub fn train_all(&self) -> Result<usize> {
        let before = self.training_count();
        self.keys.par_iter().try_for_each(|&k| self.model(k).map(|_| ()))?;
        Ok(self.training_count() - before)
    }

    /// Unsigned blended query without sign lookup.
    pub fn query_unsigned(&self, x: &Vec3) -> Result<FieldQueryResult> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyField);
        }
        let p = &self.params;
        let nearest = self.tree.knn(x, p.q.max(1));
        let mut dists = Vec::with_capacity(nearest.len());
        let mut grads = Vec::with_capacity(nearest.len());
        let mut occs = Vec::with_capacity(nearest.len());
        let mut models = Vec::with_capacity(nearest.len());
        for n in &nearest {
            let m = self.model(self.keys[n.index])?;
            let occ = m.infer_occupancy(x);
            dists.push(gp::revert_distance(occ.mean, &p.kernel));
            grads.push(m.infer_distance_gradient(x).direction);
            occs.push(occ);
            models.push(m);
        }
        let (distance, weights) = smooth_min(&dists, p.lambda);
        let mut g = Vec3::zeros();
        for (gq, w) in grads.iter().zip(&weights) {
            g += match p.gradient {
                GradientBlend::Weighted => gq * *w,
                GradientBlend::Uniform => *gq,
            };
        }
        let g = if g.norm() > 1e-12 { g.normalize() } else { Vec3::zeros() };
        let win = weights
            .iter()
            .enumerate()
            .fold(0, |best, (i, w)| if *w > weights[best] { i } else { best });
        let occ = occs[win];
        let property = if p.channels > 0 {
            models[win].infer_property(x, p.property_range)
        } else {
            None
        };
        Ok(FieldQueryResult {
            distance,
            variance: gp::propagate_variance(occ.variance, occ.mean, &p.kernel),
            gradient: [g.x, g.y, g.z],
            property_variance: property.as_ref().map_or(occ.variance, |e| e.variance),
            property: property.map(|e| e.values),
            sign: SignSource::Unsigned,
            node_distances: dists,
        })
    }

    /// Blended query with the sign taken from `grid`.
    pub fn query(&self, grid: &SparseGrid, x: &Vec3) -> Result<FieldQueryResult> {
        let mut r = self.query_unsigned(x)?;
        if let Some(negative) = fused_sign(grid, x, self.params.sign_radius) {
            r.sign = SignSource::Grid;
            if negative {
                r.distance = -r.distance;
                r.gradient = r.gradient.map(|v| -v);
            }
        }
        Ok(r)
    }

    pub fn query_batch(&self, grid: &SparseGrid, xs: &[Vec3]) -> Result<Vec<FieldQueryResult>> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyField);
        }
        xs.par_iter().map(|x| self.query(grid, x)).collect()
    }
}

/// Sign of the fused field at `x`: `Some(true)` if negative.
///
/// Inside a fully fused cell the trilinear interpolation of the eight voxel
/// centres decides, which places the sign change between voxel centres
/// instead of on voxel faces. Elsewhere the nearest fused voxel decides.
pub fn fused_sign(grid: &SparseGrid, x: &Vec3, radius: i32) -> Option<bool> {
    if let Some(d) = interpolated_distance(grid, x) {
        if d != 0.0 {
            return Some(d < 0.0);
        }
    }
    nearest_fused_sign(grid, x, radius)
}

/// Trilinear fused distance at `x`, if all eight surrounding voxel centres
/// carry weight.
pub fn interpolated_distance(grid: &SparseGrid, x: &Vec3) -> Option<f64> {
    let g = x / grid.voxel_size() - Vec3::repeat(0.5);
    let base = GridCoord::new(g.x.floor() as i32, g.y.floor() as i32, g.z.floor() as i32);
    let f = g - Vec3::new(base.i as f64, base.j as f64, base.k as f64);
    let mut d = 0.0;
    for corner in 0..8 {
        let (di, dj, dk) = (corner >> 2 & 1, corner >> 1 & 1, corner & 1);
        let v = grid.get(base.offset(di, dj, dk)).filter(|v| v.weight > 0.0)?;
        let w = [1.0 - f.x, f.x][di as usize] * [1.0 - f.y, f.y][dj as usize] * [1.0 - f.z, f.z][dk as usize];
        d += w * v.distance as f64;
    }
    Some(d)
}

/// Sign of the nearest voxel with nonzero weight within `radius` voxels of
/// `x`: `Some(true)` if its distance is negative.
pub fn nearest_fused_sign(grid: &SparseGrid, x: &Vec3, radius: i32) -> Option<bool> {
    let s = grid.voxel_size();
    let c = grid.world_to_grid(x);
    let lo = c.offset(-radius, -radius, -radius);
    let hi = c.offset(radius, radius, radius);
    let r2 = ((radius as f64 + 0.5) * s).powi(2);
    let mut best: Option<(f64, GridCoord, bool)> = None;
    let (l0, l1) = (lo.leaf_origin(), hi.leaf_origin());
    let mut li = l0.i;
    while li <= l1.i {
        let mut lj = l0.j;
        while lj <= l1.j {
            let mut lk = l0.k;
            while lk <= l1.k {
                if let Some(leaf) = grid.leaf(GridCoord::new(li, lj, lk)) {
                    for (v, st) in leaf.iter() {
                        if st.weight <= 0.0
                            || v.i < lo.i
                            || v.i > hi.i
                            || v.j < lo.j
                            || v.j > hi.j
                            || v.k < lo.k
                            || v.k > hi.k
                        {
                            continue;
                        }
                        let d2 = (grid.grid_to_world(v) - x).norm_squared();
                        if d2 > r2 {
                            continue;
                        }
                        let better = match best {
                            None => true,
                            Some((bd, bc, _)) => d2 < bd || (d2 == bd && v < bc),
                        };
                        if better {
                            best = Some((d2, v, st.distance < 0.0));
                        }
                    }
                }
                lk += LEAF_DIM;
            }
            lj += LEAF_DIM;
        }
        li += LEAF_DIM;
    }
    best.map(|(_, _, neg)| neg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse_grid::VoxelState;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const S: f64 = 0.05;

    fn params(q: usize) -> GlobalParams {
        GlobalParams {
            kernel: KernelParams::new(1.0, 3.0 * S, 1e-3),
            q,
            lambda: 100.0,
            gradient: GradientBlend::Weighted,
            sign_radius: 5,
            channels: 0,
            property_range: (0.0, 1.0),
        }
    }

    /// Crossing lists of a unit sphere, dense enough for one point per voxel.
    fn sphere_lists(r: f64) -> Vec<(GridCoord, Vec<Crossing>)> {
        let n = 40_000;
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let mut map: BTreeMap<GridCoord, Vec<Crossing>> = BTreeMap::new();
        for i in 0..n {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let rr = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            let p = Vec3::new(rr * phi.cos(), rr * phi.sin(), z) * r;
            map.entry(world_to_grid(&p, S).leaf_origin()).or_default().push(Crossing {
                position: p,
                property: [0.0; 3],
            });
        }
        map.into_iter().collect()
    }

    fn crossing(p: Vec3) -> Crossing {
        Crossing {
            position: p,
            property: [0.5, 0.0, 0.0],
        }
    }

    #[test]
    fn smooth_min_closed_form() {
        let (d, w) = smooth_min(&[1.0, 2.0], 100.0);
        assert!((d - 1.0).abs() < 1e-6);
        assert!((w[1] / w[0] - (-100f64).exp()).abs() < 1e-50);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let ds: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..0.05)).collect();
            let (b, _) = smooth_min(&ds, 100.0);
            let lo = ds.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = ds.iter().copied().fold(0.0, f64::max);
            assert!(b >= lo - 1e-15 && b <= hi + 1e-15);
            assert!(b - lo <= 3f64.ln() / 100.0);
        }
    }

    #[test]
    fn downsample_by_voxel() {
        let list = vec![
            crossing(Vec3::new(0.01, 0.01, 0.01)),
            crossing(Vec3::new(0.03, 0.01, 0.01)),
            crossing(Vec3::new(0.07, 0.01, 0.01)),
        ];
        let (pts, props) = downsample(&list, S);
        assert_eq!(pts.len(), 2);
        assert!((pts[0] - Vec3::new(0.02, 0.01, 0.01)).norm() < 1e-12);
        assert_eq!(props[0][0], 0.5);
    }

    #[test]
    fn lazy_training_and_removal() {
        let mut f = GlobalField::new(params(3));
        let leaf = GridCoord::new(0, 0, 0);
        f.update(S, &[(leaf, vec![crossing(Vec3::new(0.1, 0.1, 0.1)), crossing(Vec3::new(0.2, 0.1, 0.1))])]);
        assert_eq!(f.training_count(), 0);
        f.update(S, &[(leaf, vec![crossing(Vec3::new(0.1, 0.1, 0.1)), crossing(Vec3::new(0.1, 0.2, 0.1))])]);
        assert_eq!(f.training_count(), 0);
        let grid = SparseGrid::new(S);
        f.query(&grid, &Vec3::new(0.1, 0.1, 0.2)).unwrap();
        f.query(&grid, &Vec3::new(0.1, 0.1, 0.3)).unwrap();
        assert_eq!(f.training_count(), 1);
        f.update(S, &[(leaf, Vec::new())]);
        assert!(f.is_empty());
        assert!(matches!(f.query(&grid, &Vec3::zeros()), Err(Error::EmptyField)));
    }

    #[test]
    fn single_node_equals_its_inference() {
        let mut f = GlobalField::new(params(1));
        let pts = vec![Vec3::new(0.11, 0.11, 0.11), Vec3::new(0.11, 0.17, 0.13), Vec3::new(0.17, 0.11, 0.11)];
        f.update(S, &[(GridCoord::new(0, 0, 0), pts.iter().map(|p| crossing(*p)).collect())]);
        let m = gp::train(&pts, None, &params(1).kernel).unwrap();
        let x = Vec3::new(0.2, 0.3, 0.1);
        let r = f.query_unsigned(&x).unwrap();
        assert!((r.distance - m.infer_distance(&x)).abs() < 1e-12);
        assert!((r.gradient_vec() - m.infer_distance_gradient(&x).direction).norm() < 1e-12);
    }

    #[test]
    fn sign_from_grid() {
        let mut f = GlobalField::new(params(1));
        f.update(S, &[(GridCoord::new(0, 0, 0), vec![crossing(Vec3::new(0.1, 0.1, 0.1))])]);
        let mut grid = SparseGrid::new(S);
        let x = Vec3::new(0.1, 0.1, 0.2);
        assert_eq!(f.query(&grid, &x).unwrap().sign, SignSource::Unsigned);
        grid.set(grid.world_to_grid(&x).offset(0, 0, 1), VoxelState { distance: -0.1, weight: 1.0, ..Default::default() });
        let r = f.query(&grid, &x).unwrap();
        assert_eq!(r.sign, SignSource::Grid);
        assert!(r.distance < 0.0);
        let u = f.query_unsigned(&x).unwrap();
        assert_eq!(r.distance, -u.distance);
        assert_eq!(r.gradient_vec(), -u.gradient_vec());
        // Beyond the search radius the voxel is ignored.
        let far = Vec3::new(0.1, 0.1, 0.2 - 7.0 * S);
        assert_eq!(f.query(&grid, &far).unwrap().sign, SignSource::Unsigned);
    }

    #[test]
    fn sphere_shell_accuracy_and_purity() {
        let mut f = GlobalField::new(params(3));
        f.update(S, &sphere_lists(1.0));
        let grid = SparseGrid::new(S);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let xs: Vec<Vec3> = (0..500)
            .map(|_| {
                let dir = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
                let r = if rng.random_bool(0.5) { 1.0 + rng.random_range(0.1..0.5) } else { 1.0 - rng.random_range(0.1..0.5) };
                dir * r
            })
            .collect();
        let results = f.query_batch(&grid, &xs).unwrap();
        let good = xs
            .iter()
            .zip(&results)
            .filter(|(x, r)| (r.distance.abs() - (x.norm() - 1.0).abs()).abs() < 0.05)
            .count();
        assert!(good as f64 >= 0.95 * xs.len() as f64, "{good}/{}", xs.len());
        for (x, r) in xs.iter().zip(&results).take(20) {
            assert_eq!(&f.query(&grid, x).unwrap(), r);
            let (lo, hi) = r.node_distances.iter().fold((f64::INFINITY, 0.0f64), |(a, b), d| (a.min(*d), b.max(*d)));
            assert!(r.distance >= lo && r.distance <= hi && r.distance - lo <= 3f64.ln() / 100.0, "{r:?}");
        }
        let single = f.query_batch(&grid, &xs[..1]).unwrap();
        assert_eq!(single[0], results[0]);
        let mut rev = xs.clone();
        rev.reverse();
        let back = f.query_batch(&grid, &rev).unwrap();
        for (a, b) in back.iter().rev().zip(&results) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn sign_changes_between_voxel_centres() {
        // A plane at x = 0.06 sampled at voxel centres 0.025, 0.075, ...
        let mut g = SparseGrid::new(S);
        for i in -2..4 {
            for j in -2..3 {
                for k in -2..3 {
                    let c = GridCoord::new(i, j, k);
                    let d = (g.grid_to_world(c).x - 0.06) as f32;
                    g.set(c, VoxelState { distance: d, weight: 1.0, ..VoxelState::default() });
                }
            }
        }
        // 0.055 is nearest the +0.015 voxel, but the field there is still negative.
        let x = Vec3::new(0.055, 0.01, 0.01);
        assert_eq!(nearest_fused_sign(&g, &x, 5), Some(false));
        assert_eq!(fused_sign(&g, &x, 5), Some(true));
        assert!((interpolated_distance(&g, &x).unwrap() + 0.005).abs() < 1e-6);
        assert_eq!(fused_sign(&g, &Vec3::new(0.065, 0.0, 0.0), 5), Some(false));
        // Outside the fused block only the nearest voxel is available.
        assert!(interpolated_distance(&g, &Vec3::new(0.3, 0.0, 0.0)).is_none());
        assert_eq!(fused_sign(&g, &Vec3::new(0.3, 0.0, 0.0), 5), Some(false));
    }
}
