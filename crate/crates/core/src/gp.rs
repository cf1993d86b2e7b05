//! Squared-exponential Gaussian process distance field.
//!
//! A latent occupancy field `o(x)` is regressed with target 1 on surface
//! points. Because the SE kernel decays as `exp(-r²/2l²)`, the occupancy can
//! be mapped back to a metric distance with the reverting function
//! `d = sqrt(-2 l² ln(o/σ²))`, which is exact for a single training point.
//!
//! Distances produced here are unsigned; callers attach the sign.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Vec3;

/// Lower clamp on `o/σ²` before taking the logarithm.
pub const OCCUPANCY_EPS: f64 = 1e-12;
/// Variance reported at the reverting function's singularity (`o = σ²`).
pub const VARIANCE_FLOOR: f64 = 0.0;
/// Latent gradient norms below this (relative to `σ²/l`) yield a zero direction.
const GRADIENT_EPS: f64 = 1e-12;

const JITTER_START: f64 = 1e-8;
const JITTER_LIMIT: f64 = 1e-2;
/// Cholesky pivots below this fraction of σ² are treated as a failed factorization.
const PIVOT_FLOOR: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    /// Kernel signal variance σ².
    pub sigma2: f64,
    /// Length scale l (m).
    pub length_scale: f64,
    /// Observation noise variance σ_o², also used for property regression.
    pub noise2: f64,
    /// Cap on reverted distances (m).
    pub max_distance: f64,
    /// Cap on propagated distance variance (m²).
    pub max_variance: f64,
}

impl KernelParams {
    /// Parameters with `max_distance = 3l` and `max_variance = l²/2`.
    pub fn new(sigma2: f64, length_scale: f64, noise2: f64) -> Self {
        Self {
            sigma2,
            length_scale,
            noise2,
            max_distance: 3.0 * length_scale,
            max_variance: 0.5 * length_scale * length_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma2 > 0.0
            && self.length_scale > 0.0
            && self.noise2 >= 0.0
            && self.max_distance > 0.0
            && self.max_variance > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid kernel parameters {self:?}")))
        }
    }

    /// Latent occupancy an isolated point produces at distance `d`.
    fn occupancy_at(&self, d: f64) -> f64 {
        self.sigma2 * (-d * d / (2.0 * self.length_scale * self.length_scale)).exp()
    }
}

/// `σ² exp(-‖x - x'‖² / 2l²)`
pub fn se_kernel(x: &Vec3, y: &Vec3, p: &KernelParams) -> f64 {
    p.sigma2 * (-(x - y).norm_squared() / (2.0 * p.length_scale * p.length_scale)).exp()
}

pub fn kernel_matrix(points: &[Vec3], p: &KernelParams) -> DMatrix<f64> {
    let n = points.len();
    let mut k = DMatrix::zeros(n, n);
    for a in 0..n {
        k[(a, a)] = p.sigma2;
        for b in 0..a {
            let v = se_kernel(&points[a], &points[b], p);
            k[(a, b)] = v;
            k[(b, a)] = v;
        }
    }
    k
}

/// Trained GP over one cluster of surface points.
#[derive(Debug, Clone)]
pub struct GpLeafModel {
    params: KernelParams,
    points: Vec<Vec3>,
    chol: Cholesky<f64, Dyn>,
    alpha_occ: DVector<f64>,
    /// J × P coefficients, one column per property channel.
    alpha_prop: Option<DMatrix<f64>>,
    /// Mean of the training properties, used when occupancy vanishes.
    prop_mean: Option<DVector<f64>>,
    centroid: Vec3,
    jitter: f64,
}

/// Latent occupancy and its posterior variance at a query point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Occupancy {
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceGradient {
    /// Unit direction of increasing distance, or zero where undefined.
    pub direction: Vec3,
    /// Norm of the unnormalized distance gradient.
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyEstimate {
    pub values: Vec<f64>,
    pub variance: f64,
}

/// Factorize `K + σ_o² I` for the given points and solve for the occupancy
/// target (all ones) and, optionally, a J × P property matrix.
pub fn train(
    points: &[Vec3],
    properties: Option<&DMatrix<f64>>,
    params: &KernelParams,
) -> Result<GpLeafModel> {
    if points.is_empty() {
        return Err(Error::EmptyInput("GP training points"));
    }
    if let Some(props) = properties {
        if props.nrows() != points.len() {
            return Err(Error::Config(format!(
                "property rows {} do not match {} training points",
                props.nrows(),
                points.len()
            )));
        }
    }
    let mut k = kernel_matrix(points, params);
    for d in 0..points.len() {
        k[(d, d)] += params.noise2;
    }

    let mut jitter = 0.0;
    let chol = loop {
        let mut m = k.clone();
        if jitter > 0.0 {
            for d in 0..points.len() {
                m[(d, d)] += jitter;
            }
        }
        if let Some(c) = Cholesky::new(m) {
            let l = c.l_dirty();
            let min_pivot = (0..points.len()).map(|d| l[(d, d)] * l[(d, d)]).fold(f64::INFINITY, f64::min);
            if min_pivot > PIVOT_FLOOR * params.sigma2 {
                break c;
            }
        }
        jitter = if jitter == 0.0 {
            JITTER_START * params.sigma2
        } else {
            jitter * 10.0
        };
        if jitter > JITTER_LIMIT * params.sigma2 * (1.0 + 1e-9) {
            return Err(Error::FactorizationFailure {
                points: points.len(),
                max_jitter: jitter / 10.0,
                leaf: None,
            });
        }
    };

    let alpha_occ = chol.solve(&DVector::from_element(points.len(), 1.0));
    let alpha_prop = properties.map(|c| chol.solve(c));
    let prop_mean = properties.map(|c| c.row_mean().transpose());
    let centroid = points.iter().fold(Vec3::zeros(), |acc, p| acc + p) / points.len() as f64;
    Ok(GpLeafModel {
        params: *params,
        points: points.to_vec(),
        chol,
        alpha_occ,
        alpha_prop,
        prop_mean,
        centroid,
        jitter,
    })
}

impl GpLeafModel {
    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn centroid(&self) -> Vec3 {
        self.centroid
    }

    pub fn alpha_occupancy(&self) -> &DVector<f64> {
        &self.alpha_occ
    }

    /// Lower-triangular factor of `K + (σ_o² + jitter) I`.
    pub fn cholesky_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// Diagonal jitter that was needed on top of σ_o² (usually zero).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn has_properties(&self) -> bool {
        self.alpha_prop.is_some()
    }

    fn kernel_vector(&self, x: &Vec3) -> DVector<f64> {
        DVector::from_iterator(
            self.points.len(),
            self.points.iter().map(|p| se_kernel(x, p, &self.params)),
        )
    }

    fn latent_variance(&self, kx: &DVector<f64>) -> f64 {
        let mut v = kx.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut v);
        // Only the lower triangle of `l_dirty` is meaningful; the solve above
        // reads nothing else.
        (self.params.sigma2 - v.norm_squared()).clamp(0.0, self.params.sigma2)
    }

    /// Posterior latent occupancy mean and variance.
    pub fn infer_occupancy(&self, x: &Vec3) -> Occupancy {
        let kx = self.kernel_vector(x);
        Occupancy {
            mean: kx.dot(&self.alpha_occ),
            variance: self.latent_variance(&kx),
        }
    }

    /// Gradient of the latent occupancy mean.
    pub fn occupancy_gradient(&self, x: &Vec3) -> Vec3 {
        let inv_l2 = 1.0 / (self.params.length_scale * self.params.length_scale);
        self.points
            .iter()
            .zip(self.alpha_occ.iter())
            .fold(Vec3::zeros(), |acc, (p, a)| {
                acc + (p - x) * (a * se_kernel(x, p, &self.params) * inv_l2)
            })
    }

    /// Unsigned distance at `x`.
    pub fn infer_distance(&self, x: &Vec3) -> f64 {
        revert_distance(self.infer_occupancy(x).mean, &self.params)
    }

    /// Distance gradient: the reverting chain rule applied to the latent
    /// gradient, then normalized.
    pub fn infer_distance_gradient(&self, x: &Vec3) -> DistanceGradient {
        let occ = self.infer_occupancy(x).mean;
        distance_gradient(occ, &self.occupancy_gradient(x), &self.params)
    }

    /// Property regression `k(K + σ²I)⁻¹c`, normalized by the occupancy
    /// regression of the same system so constant inputs are reproduced
    /// exactly, then clamped to `range`.
    pub fn infer_property(&self, x: &Vec3, range: (f64, f64)) -> Option<PropertyEstimate> {
        let alpha = self.alpha_prop.as_ref()?;
        let kx = self.kernel_vector(x);
        let occ = kx.dot(&self.alpha_occ);
        let raw = alpha.tr_mul(&kx);
        let values: Vec<f64> = if occ.abs() > 1e-12 * self.params.sigma2 {
            raw.iter().map(|v| v / occ).collect()
        } else {
            self.prop_mean.as_ref().map(|m| m.iter().copied().collect()).unwrap_or_default()
        };
        Some(PropertyEstimate {
            values: values.into_iter().map(|v| v.clamp(range.0, range.1)).collect(),
            variance: self.latent_variance(&kx),
        })
    }
}

/// Map a latent occupancy back to metric distance, capped at `max_distance`.
pub fn revert_distance(occupancy: f64, p: &KernelParams) -> f64 {
    let ratio = occupancy / p.sigma2;
    if ratio <= OCCUPANCY_EPS || ratio.is_nan() {
        return p.max_distance;
    }
    let ratio = ratio.min(1.0);
    (-2.0 * p.length_scale * p.length_scale * ratio.ln())
        .max(0.0)
        .sqrt()
        .min(p.max_distance)
}

/// Distance variance `Λ² û` with `Λ = l σ_o² / (o sqrt(2 ln(σ²/o)))`.
///
/// The occupancy is clamped to the value that reverts to `max_distance`,
/// matching the distance cap, and the result is clamped to
/// `[0, max_variance]`.
pub fn propagate_variance(latent_variance: f64, occupancy: f64, p: &KernelParams) -> f64 {
    if latent_variance <= 0.0 {
        return 0.0;
    }
    let occ = occupancy.max(p.occupancy_at(p.max_distance));
    let log_term = (p.sigma2 / occ).ln();
    if log_term <= OCCUPANCY_EPS {
        return VARIANCE_FLOOR;
    }
    let lambda = p.length_scale * p.noise2 / (occ * (2.0 * log_term).sqrt());
    (lambda * lambda * latent_variance).clamp(0.0, p.max_variance)
}

fn distance_gradient(occupancy: f64, latent_grad: &Vec3, p: &KernelParams) -> DistanceGradient {
    let norm = latent_grad.norm();
    if norm < GRADIENT_EPS * p.sigma2 / p.length_scale || !norm.is_finite() {
        return DistanceGradient {
            direction: Vec3::zeros(),
            magnitude: 0.0,
        };
    }
    // r'(o) = -l² / (o d) < 0 wherever the reverting function is defined, so
    // the distance direction is opposite the latent gradient.
    let direction = -latent_grad / norm;
    let ratio = (occupancy / p.sigma2).clamp(OCCUPANCY_EPS, 1.0);
    let d = (-2.0 * p.length_scale * p.length_scale * ratio.ln()).sqrt();
    let magnitude = if d > 0.0 && occupancy > 0.0 {
        p.length_scale * p.length_scale / (occupancy * d) * norm
    } else {
        f64::INFINITY
    };
    DistanceGradient {
        direction,
        magnitude,
    }
}
