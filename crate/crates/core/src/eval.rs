//! Reconstruction metrics: distance RMSE on a lattice, Chamfer distance,
//! and 2-D field slices.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kdtree::KdTree;
use crate::meshing::TriangleMesh;
use crate::pipeline::Mapper;
use crate::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Aabb { min, max }
    }

    pub fn cube(center: Vec3, half: f64) -> Self {
        let h = Vec3::repeat(half);
        Aabb::new(center - h, center + h)
    }

    pub fn is_empty(&self) -> bool {
        (0..3).any(|i| !(self.max[i] > self.min[i]))
    }
}

/// Cell-centred lattice with spacing close to `resolution`: each axis is
/// split into `round(extent / resolution)` cells.
pub fn lattice(region: &Aabb, resolution: f64) -> Result<Vec<Vec3>> {
    if region.is_empty() || !(resolution > 0.0) {
        return Err(Error::EmptyRegion);
    }
    let ext = region.max - region.min;
    let n = ext.map(|e| (e / resolution).round().max(1.0) as usize);
    let step = ext.component_div(&n.map(|v| v as f64));
    let mut out = Vec::with_capacity(n.x * n.y * n.z);
    for k in 0..n.z {
        for j in 0..n.y {
            for i in 0..n.x {
                let f = Vec3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5);
                out.push(region.min + step.component_mul(&f));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmseReport {
    pub rmse: f64,
    pub max_error: f64,
    pub samples: usize,
    pub lattice_points: usize,
}

/// RMSE of |field| against |oracle| over the lattice points whose oracle
/// distance lies in `band` (inclusive).
pub fn distance_rmse(
    mapper: &Mapper,
    oracle: &(dyn Fn(&Vec3) -> f64 + Sync),
    region: &Aabb,
    resolution: f64,
    band: (f64, f64),
) -> Result<RmseReport> {
    if mapper.global().is_empty() {
        return Err(Error::EmptyField);
    }
    let points = lattice(region, resolution)?;
    let lattice_points = points.len();
    let selected: Vec<(Vec3, f64)> = points
        .into_iter()
        .map(|p| (p, oracle(&p)))
        .filter(|(_, d)| d.abs() >= band.0 && d.abs() <= band.1)
        .collect();
    rmse_at(mapper, &selected, lattice_points)
}

/// RMSE of |field| against given |oracle| values at explicit points.
pub fn rmse_at(mapper: &Mapper, samples: &[(Vec3, f64)], lattice_points: usize) -> Result<RmseReport> {
    if mapper.global().is_empty() {
        return Err(Error::EmptyField);
    }
    if samples.is_empty() {
        return Err(Error::EmptyRegion);
    }
    let xs: Vec<Vec3> = samples.iter().map(|s| s.0).collect();
    let res = mapper.query_batch(&xs)?;
    let (mut sq, mut max_error) = (0.0, 0.0f64);
    for (r, (_, truth)) in res.iter().zip(samples) {
        let e = r.distance.abs() - truth.abs();
        sq += e * e;
        max_error = max_error.max(e.abs());
    }
    Ok(RmseReport {
        rmse: (sq / samples.len() as f64).sqrt(),
        max_error,
        samples: samples.len(),
        lattice_points,
    })
}

/// Area-weighted random points on the mesh surface plus all vertices.
pub fn sample_mesh(mesh: &TriangleMesh, n: usize, seed: u64) -> Vec<Vec3> {
    let mut out = mesh.vertices.clone();
    let cdf: Vec<f64> = mesh
        .triangles
        .iter()
        .scan(0.0, |acc, t| {
            *acc += mesh.triangle_area(t);
            Some(*acc)
        })
        .collect();
    let total = cdf.last().copied().unwrap_or(0.0);
    if total <= 0.0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    out.reserve(n);
    for _ in 0..n {
        let r = rng.random::<f64>() * total;
        let t = mesh.triangles[cdf.partition_point(|c| *c < r).min(cdf.len() - 1)];
        let (mut a, mut b) = (rng.random::<f64>(), rng.random::<f64>());
        if a + b > 1.0 {
            (a, b) = (1.0 - a, 1.0 - b);
        }
        let [p0, p1, p2] = t.map(|i| mesh.vertices[i as usize]);
        out.push(p0 + (p1 - p0) * a + (p2 - p0) * b);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChamferReport {
    /// Mean of the two directed distances.
    pub chamfer: f64,
    /// Mean distance from reconstruction samples to the reference.
    pub accuracy: f64,
    /// Mean distance from reference points to the reconstruction.
    pub completion: f64,
    /// Fraction of reference points within `threshold` of the reconstruction.
    pub completeness: f64,
    pub threshold: f64,
}

fn directed(from: &[Vec3], to: &KdTree) -> Vec<f64> {
    from.par_iter()
        .map(|p| to.nearest(p).map_or(f64::INFINITY, |n| n.dist2.sqrt()))
        .collect()
}

/// Symmetric Chamfer distance between two point sets.
pub fn chamfer_points(recon: &[Vec3], reference: &[Vec3], threshold: f64) -> Result<ChamferReport> {
    if recon.is_empty() {
        return Err(Error::EmptyInput("reconstruction"));
    }
    if reference.is_empty() {
        return Err(Error::EmptyInput("reference"));
    }
    let to_ref = directed(recon, &KdTree::new(reference.to_vec()));
    let to_rec = directed(reference, &KdTree::new(recon.to_vec()));
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (accuracy, completion) = (mean(&to_ref), mean(&to_rec));
    Ok(ChamferReport {
        chamfer: 0.5 * (accuracy + completion),
        accuracy,
        completion,
        completeness: to_rec.iter().filter(|d| **d <= threshold).count() as f64 / to_rec.len() as f64,
        threshold,
    })
}

/// Chamfer distance between `samples` area-weighted points of the mesh
/// and the reference cloud.
pub fn chamfer_mesh(mesh: &TriangleMesh, reference: &[Vec3], samples: usize, threshold: f64) -> Result<ChamferReport> {
    if mesh.triangles.is_empty() {
        return Err(Error::EmptyInput("mesh"));
    }
    chamfer_points(&sample_mesh(mesh, samples, 0), reference, threshold)
}

/// Evenly spread points on a sphere (Fibonacci lattice).
pub fn sphere_samples(center: Vec3, radius: f64, n: usize) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let a = golden * i as f64;
            center + Vec3::new(r * a.cos(), r * a.sin(), z) * radius
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn parse(s: &str) -> Option<Axis> {
        match s {
            "x" | "X" => Some(Axis::X),
            "y" | "Y" => Some(Axis::Y),
            "z" | "Z" => Some(Axis::Z),
            _ => None,
        }
    }

    /// Indices of the in-plane axes and the normal axis.
    fn layout(self) -> (usize, usize, usize) {
        match self {
            Axis::X => (1, 2, 0),
            Axis::Y => (0, 2, 1),
            Axis::Z => (0, 1, 2),
        }
    }

    fn names(self) -> (&'static str, &'static str) {
        match self {
            Axis::X => ("y", "z"),
            Axis::Y => ("x", "z"),
            Axis::Z => ("x", "y"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceSpec {
    pub axis: Axis,
    pub offset: f64,
    /// In-plane bounds `[u_min, u_max, v_min, v_max]`, inclusive.
    pub bounds: [f64; 4],
    pub resolution: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceSample {
    pub u: f64,
    pub v: f64,
    pub distance: f64,
    pub gradient_u: f64,
    pub gradient_v: f64,
    pub error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slice {
    pub spec: SliceSpec,
    pub nu: usize,
    pub nv: usize,
    /// Row-major, `u` fastest.
    pub samples: Vec<SliceSample>,
}

/// Sample the field on a plane. With an oracle, each sample also carries
/// the signed error `field − oracle`.
pub fn slice(mapper: &Mapper, spec: &SliceSpec, oracle: Option<&(dyn Fn(&Vec3) -> f64 + Sync)>) -> Result<Slice> {
    let [u0, u1, v0, v1] = spec.bounds;
    if !(u1 >= u0 && v1 >= v0 && spec.resolution > 0.0) {
        return Err(Error::EmptyRegion);
    }
    if mapper.global().is_empty() {
        return Err(Error::EmptyField);
    }
    let nu = ((u1 - u0) / spec.resolution + 1e-9).floor() as usize + 1;
    let nv = ((v1 - v0) / spec.resolution + 1e-9).floor() as usize + 1;
    let (iu, iv, iw) = spec.axis.layout();
    let mut xs = Vec::with_capacity(nu * nv);
    for j in 0..nv {
        for i in 0..nu {
            let mut p = Vec3::zeros();
            p[iu] = u0 + i as f64 * spec.resolution;
            p[iv] = v0 + j as f64 * spec.resolution;
            p[iw] = spec.offset;
            xs.push(p);
        }
    }
    let res = mapper.query_batch(&xs)?;
    let samples = xs
        .iter()
        .zip(res)
        .map(|(p, r)| SliceSample {
            u: p[iu],
            v: p[iv],
            distance: r.distance,
            gradient_u: r.gradient[iu],
            gradient_v: r.gradient[iv],
            error: oracle.map(|f| r.distance - f(p)),
        })
        .collect();
    Ok(Slice {
        spec: *spec,
        nu,
        nv,
        samples,
    })
}

impl Slice {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let (a, b) = self.spec.axis.names();
        let with_error = self.samples.first().is_some_and(|s| s.error.is_some());
        write!(w, "{a},{b},distance,gradient_{a},gradient_{b}")?;
        writeln!(w, "{}", if with_error { ",error" } else { "" })?;
        for s in &self.samples {
            write!(w, "{},{},{},{},{}", s.u, s.v, s.distance, s.gradient_u, s.gradient_v)?;
            match s.error {
                Some(e) => writeln!(w, ",{e}")?,
                None => writeln!(w)?,
            }
        }
        Ok(())
    }

    /// Zero crossings along lattice rows and columns, linearly
    /// interpolated. Pairs whose magnitudes sum to more than `max_jump`
    /// are skipped: such sign flips are discontinuities, not surface.
    pub fn zero_level(&self, max_jump: f64) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        let at = |i: usize, j: usize| &self.samples[j * self.nu + i];
        let mut check = |a: &SliceSample, b: &SliceSample| {
            if (a.distance < 0.0) != (b.distance < 0.0) && a.distance.abs() + b.distance.abs() <= max_jump {
                let t = a.distance / (a.distance - b.distance);
                out.push((a.u + t * (b.u - a.u), a.v + t * (b.v - a.v)));
            }
        };
        for j in 0..self.nv {
            for i in 0..self.nu {
                if i + 1 < self.nu {
                    check(at(i, j), at(i + 1, j));
                }
                if j + 1 < self.nv {
                    check(at(i, j), at(i, j + 1));
                }
            }
        }
        out
    }
}
