//! JSON request/response bodies shared by the HTTP service and its client.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::{Aabb, SliceSpec};
use crate::frame::{property_from_slice, Frame, Pose};
use crate::global_field::FieldQueryResult;
use crate::pipeline::FrameStats;
use crate::Vec3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseDto {
    pub translation: [f64; 3],
    /// `[qx, qy, qz, qw]`.
    pub quaternion: [f64; 4],
}

impl From<&Pose> for PoseDto {
    fn from(p: &Pose) -> Self {
        PoseDto {
            translation: p.translation.into(),
            quaternion: p.quaternion(),
        }
    }
}

impl PoseDto {
    pub fn to_pose(&self) -> Result<Pose> {
        let [x, y, z, w] = self.quaternion;
        Pose::from_quaternion(Vec3::from(self.translation), x, y, z, w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDto {
    pub points: Vec<[f64; 3]>,
    /// Per-point property values; empty when the frame has none.
    #[serde(default)]
    pub properties: Vec<Vec<f64>>,
    pub pose: PoseDto,
    #[serde(default)]
    pub timestamp: f64,
}

impl From<&Frame> for FrameDto {
    fn from(f: &Frame) -> Self {
        FrameDto {
            points: f.points.iter().map(|p| (*p).into()).collect(),
            properties: f.properties.iter().map(|c| c.iter().map(|v| *v as f64).collect()).collect(),
            pose: PoseDto::from(&f.pose),
            timestamp: f.timestamp,
        }
    }
}

impl FrameDto {
    pub fn to_frame(&self) -> Result<Frame> {
        let points = self.points.iter().map(|p| Vec3::from(*p)).collect();
        let props = self.properties.iter().map(|c| property_from_slice(c)).collect();
        let frame = Frame::new(points, self.pose.to_pose()?, self.timestamp).with_properties(props);
        frame.validate()?;
        Ok(frame)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramesRequest {
    pub frames: Vec<FrameDto>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramesResponse {
    pub stats: Vec<FrameStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub points: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub results: Vec<FieldQueryResult>,
}

/// Ground truth for evaluation: a scene in scene-file syntax, evaluated at
/// time `time`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleDto {
    pub scene: String,
    #[serde(default)]
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceRequest {
    pub spec: SliceSpec,
    #[serde(default)]
    pub oracle: Option<OracleDto>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseRequest {
    pub oracle: OracleDto,
    pub region: Aabb,
    pub resolution: f64,
    /// Only lattice points with `band[0] ≤ |oracle| ≤ band[1]` count.
    pub band: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChamferRequest {
    pub reference: Vec<[f64; 3]>,
    /// Random surface samples drawn from the mesh in addition to its vertices.
    pub samples: usize,
    /// Completeness distance threshold (m).
    pub threshold: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MapStats {
    pub frames: usize,
    pub voxel_size: f64,
    pub leaves: usize,
    pub voxels: usize,
    pub active_leaves: usize,
    pub mesh_vertices: usize,
    pub mesh_triangles: usize,
    pub global_nodes: usize,
    pub global_trainings: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub kind: String,
}

pub fn points_to_dto(points: &[Vec3]) -> Vec<[f64; 3]> {
    points.iter().map(|p| (*p).into()).collect()
}

pub fn points_from_dto(points: &[[f64; 3]]) -> Vec<Vec3> {
    points.iter().map(|p| Vec3::from(*p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_round_trip() {
        let f = Frame::new(vec![Vec3::new(1.0, 2.0, 3.0)], Pose::identity(), 0.5).with_properties(vec![[0.5, 0.25, 1.0]]);
        let json = serde_json::to_string(&FrameDto::from(&f)).unwrap();
        let back: FrameDto = serde_json::from_str(&json).unwrap();
        assert_eq!(back.to_frame().unwrap(), f);
    }

    #[test]
    fn invalid_frames_rejected() {
        let mut dto = FrameDto::from(&Frame::new(vec![Vec3::zeros()], Pose::identity(), 0.0));
        dto.pose.quaternion = [0.0; 4];
        assert!(dto.to_frame().is_err());
        let mut dto = FrameDto::from(&Frame::new(vec![Vec3::zeros(), Vec3::x()], Pose::identity(), 0.0));
        dto.properties = vec![vec![1.0]];
        assert!(dto.to_frame().is_err());
    }
}
