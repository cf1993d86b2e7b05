use nalgebra::{Quaternion, Rotation3, UnitQuaternion};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse_grid::{Property, MAX_CHANNELS};
use crate::{Mat3, Vec3};

/// Rigid sensor-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Pose { rotation, translation }
    }

    /// Quaternion given scalar-last, as in trajectory files.
    pub fn from_quaternion(translation: Vec3, qx: f64, qy: f64, qz: f64, qw: f64) -> Result<Self> {
        let q = Quaternion::new(qw, qx, qy, qz);
        let n = q.norm();
        if !n.is_finite() || n < 1e-9 {
            return Err(Error::InvalidPose(format!("degenerate quaternion ({qx}, {qy}, {qz}, {qw})")));
        }
        let rot: Rotation3<f64> = UnitQuaternion::from_quaternion(q).to_rotation_matrix();
        Ok(Pose::new(*rot.matrix(), translation))
    }

    /// Rotation as a scalar-last quaternion `[qx, qy, qz, qw]`.
    pub fn quaternion(&self) -> [f64; 4] {
        // Closed form; the iterative `from_matrix` fit can stall near 180°.
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation));
        [q.i, q.j, q.k, q.w]
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        if !r.iter().all(|v| v.is_finite()) || !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidPose("non-finite entries".into()));
        }
        let ortho = (r.transpose() * r - Mat3::identity()).amax();
        let det = r.determinant();
        if ortho > 1e-6 || (det - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidPose(format!(
                "rotation not orthonormal (deviation {ortho:.2e}, det {det:.6})"
            )));
        }
        Ok(())
    }

    pub fn transform(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn origin(&self) -> Vec3 {
        self.translation
    }
}

/// What the per-point property channels mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PropertyKind {
    #[default]
    None,
    Intensity,
    Rgb,
}

impl PropertyKind {
    pub fn channels(self) -> usize {
        match self {
            PropertyKind::None => 0,
            PropertyKind::Intensity => 1,
            PropertyKind::Rgb => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PropertyKind::None => "none",
            PropertyKind::Intensity => "intensity",
            PropertyKind::Rgb => "rgb",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(PropertyKind::None),
            "intensity" => Some(PropertyKind::Intensity),
            "rgb" => Some(PropertyKind::Rgb),
            _ => None,
        }
    }
}

/// One posed point cloud. Points are in the sensor frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub points: Vec<Vec3>,
    /// Either empty or one entry per point; unused channels are zero.
    pub properties: Vec<Property>,
    pub pose: Pose,
    pub timestamp: f64,
}

impl Frame {
    pub fn new(points: Vec<Vec3>, pose: Pose, timestamp: f64) -> Self {
        Frame {
            points,
            properties: Vec::new(),
            pose,
            timestamp,
        }
    }

    pub fn with_properties(mut self, properties: Vec<Property>) -> Self {
        self.properties = properties;
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        self.pose.validate()?;
        if !self.properties.is_empty() && self.properties.len() != self.points.len() {
            return Err(Error::Format(format!(
                "{} properties for {} points",
                self.properties.len(),
                self.points.len()
            )));
        }
        Ok(())
    }

    pub fn world_points(&self) -> impl Iterator<Item = Vec3> + '_ {
        self.points.iter().map(|p| self.pose.transform(p))
    }
}

/// Pack up to three channel values into a fixed-size property.
pub fn property_from_slice(values: &[f64]) -> Property {
    let mut p = [0.0f32; MAX_CHANNELS];
    for (dst, v) in p.iter_mut().zip(values) {
        *dst = *v as f32;
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pose_validation() {
        assert!(Pose::identity().validate().is_ok());
        let mut bad = Pose::identity();
        bad.rotation[(0, 0)] = -1.0;
        assert!(matches!(bad.validate(), Err(Error::InvalidPose(_))));
        bad.rotation = Mat3::identity() * 1.01;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn quaternion_round_trip() {
        let p = Pose::from_quaternion(Vec3::new(1.0, 2.0, 3.0), 0.1, -0.2, 0.3, 0.9).unwrap();
        p.validate().unwrap();
        let [x, y, z, w] = p.quaternion();
        let q = Pose::from_quaternion(p.translation, x, y, z, w).unwrap();
        assert!((q.rotation - p.rotation).amax() < 1e-12);
        assert!(Pose::from_quaternion(Vec3::zeros(), 0.0, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn half_turns_survive_the_round_trip() {
        for axis in [Vec3::x(), Vec3::y(), Vec3::z(), Vec3::new(1.0, -2.0, 0.5)] {
            let r = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), std::f64::consts::PI - 1e-9);
            let p = Pose::new(*r.matrix(), Vec3::zeros());
            let [x, y, z, w] = p.quaternion();
            let q = Pose::from_quaternion(Vec3::zeros(), x, y, z, w).unwrap();
            assert!((q.rotation - p.rotation).amax() < 1e-9, "axis {axis:?}");
        }
    }
}
