//! Analytic scenes and a simulated depth sensor.
//!
//! Scenes are unions of signed-distance primitives, each optionally active
//! only during a time window. Rendering sphere-traces sensor rays against
//! the scene and adds Gaussian range noise from a per-ray seeded stream, so
//! frames are reproducible regardless of thread scheduling.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{Frame, Pose};
use crate::sparse_grid::Property;
use crate::{Mat3, Vec3};

pub const MAX_TRACE_STEPS: usize = 256;
pub const HIT_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Sphere { center: Vec3, radius: f64 },
    Box { center: Vec3, half: Vec3 },
    /// Points with `normal·p > offset` are outside.
    Plane { normal: Vec3, offset: f64 },
}

impl Shape {
    pub fn sdf(&self, p: &Vec3) -> f64 {
        match self {
            Shape::Sphere { center, radius } => (p - center).norm() - radius,
            Shape::Box { center, half } => {
                let q = (p - center).abs() - half;
                let outside = q.sup(&Vec3::zeros()).norm();
                outside + q.max().min(0.0)
            }
            Shape::Plane { normal, offset } => normal.dot(p) / normal.norm() - offset,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub property: Property,
    /// Active for `t` in `[from, until)`.
    pub active_from: f64,
    pub active_until: f64,
}

impl Primitive {
    pub fn new(shape: Shape) -> Self {
        Primitive {
            shape,
            property: [0.5; 3],
            active_from: f64::NEG_INFINITY,
            active_until: f64::INFINITY,
        }
    }

    pub fn with_property(mut self, property: Property) -> Self {
        self.property = property;
        self
    }

    pub fn active_during(mut self, from: f64, until: f64) -> Self {
        self.active_from = from;
        self.active_until = until;
        self
    }

    pub fn is_active(&self, t: f64) -> bool {
        t >= self.active_from && t < self.active_until
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SensorKind {
    Pinhole {
        width: usize,
        height: usize,
        /// Focal length in pixels.
        focal: f64,
        max_range: f64,
    },
    Lidar {
        azimuths: usize,
        /// Beam elevations in radians.
        elevations: Vec<f64>,
        max_range: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorModel {
    pub kind: SensorKind,
    /// Standard deviation of the range noise (m).
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SensorModel {
    pub fn pinhole(width: usize, height: usize, fov_deg: f64, max_range: f64) -> Self {
        let focal = 0.5 * width as f64 / (0.5 * fov_deg.to_radians()).tan();
        SensorModel {
            kind: SensorKind::Pinhole {
                width,
                height,
                focal,
                max_range,
            },
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn lidar(azimuths: usize, beams: usize, min_deg: f64, max_deg: f64, max_range: f64) -> Self {
        let elevations = (0..beams)
            .map(|b| {
                let f = if beams > 1 { b as f64 / (beams - 1) as f64 } else { 0.5 };
                (min_deg + f * (max_deg - min_deg)).to_radians()
            })
            .collect();
        SensorModel {
            kind: SensorKind::Lidar {
                azimuths,
                elevations,
                max_range,
            },
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn with_noise(mut self, sigma: f64, seed: u64) -> Self {
        self.noise_sigma = sigma;
        self.seed = seed;
        self
    }

    pub fn ray_count(&self) -> usize {
        match &self.kind {
            SensorKind::Pinhole { width, height, .. } => width * height,
            SensorKind::Lidar { azimuths, elevations, .. } => azimuths * elevations.len(),
        }
    }

    pub fn max_range(&self) -> f64 {
        match &self.kind {
            SensorKind::Pinhole { max_range, .. } | SensorKind::Lidar { max_range, .. } => *max_range,
        }
    }

    /// Unit ray direction in the sensor frame. Cameras look along +z with
    /// x right and y down; lidars sweep azimuth in the x–y plane.
    pub fn ray(&self, index: usize) -> Vec3 {
        match &self.kind {
            SensorKind::Pinhole {
                width, height, focal, ..
            } => {
                let (u, v) = ((index % width) as f64 + 0.5, (index / width) as f64 + 0.5);
                Vec3::new((u - 0.5 * *width as f64) / focal, (v - 0.5 * *height as f64) / focal, 1.0).normalize()
            }
            SensorKind::Lidar {
                azimuths, elevations, ..
            } => {
                let az = std::f64::consts::TAU * (index % azimuths) as f64 / *azimuths as f64;
                let el = elevations[index / azimuths];
                Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
}

/// A ray hit: distance along the ray and the primitive that was hit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub range: f64,
    pub primitive: usize,
}

impl Scene {
    pub fn new(primitives: Vec<Primitive>) -> Self {
        Scene { primitives }
    }

    pub fn push(&mut self, p: Primitive) {
        self.primitives.push(p);
    }

    /// Signed distance at time `t`; `+∞` when nothing is active.
    pub fn sdf(&self, p: &Vec3, t: f64) -> f64 {
        self.closest(p, t).map_or(f64::INFINITY, |(d, _)| d)
    }

    fn closest(&self, p: &Vec3, t: f64) -> Option<(f64, usize)> {
        self.primitives
            .iter()
            .enumerate()
            .filter(|(_, prim)| prim.is_active(t))
            .map(|(i, prim)| (prim.shape.sdf(p), i))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }

    /// Sphere-trace a ray from `origin` along unit `dir`.
    pub fn trace(&self, origin: &Vec3, dir: &Vec3, max_range: f64, t: f64) -> Option<Hit> {
        let mut s = 0.0;
        for _ in 0..MAX_TRACE_STEPS {
            let (d, prim) = self.closest(&(origin + dir * s), t)?;
            if d.abs() < HIT_TOLERANCE {
                return Some(Hit { range: s, primitive: prim });
            }
            s += d.abs();
            if s > max_range {
                return None;
            }
        }
        None
    }

    /// Render one frame. Points are returned in the sensor frame.
    pub fn render(&self, sensor: &SensorModel, pose: &Pose, t: f64) -> Result<Frame> {
        pose.validate()?;
        let origin = pose.origin();
        let max_range = sensor.max_range();
        let noise = Normal::new(0.0, sensor.noise_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
        let hits: Vec<Option<(Vec3, Property)>> = (0..sensor.ray_count())
            .into_par_iter()
            .map(|i| {
                let local = sensor.ray(i);
                let dir = pose.rotation * local;
                let hit = self.trace(&origin, &dir, max_range, t)?;
                let mut range = hit.range;
                if sensor.noise_sigma > 0.0 {
                    let mut rng = ChaCha8Rng::seed_from_u64(ray_seed(sensor.seed, i, t));
                    range += noise.sample(&mut rng);
                }
                (range > 0.0).then(|| (local * range, self.primitives[hit.primitive].property))
            })
            .collect();
        let (points, properties): (Vec<Vec3>, Vec<Property>) = hits.into_iter().flatten().unzip();
        Ok(Frame::new(points, *pose, t).with_properties(properties))
    }

    /// Points on the visible surface of the active spheres and boxes at
    /// roughly `spacing` apart, for use as a reference cloud. Planes are
    /// unbounded and skipped; points buried inside other primitives are
    /// dropped.
    pub fn surface_samples(&self, t: f64, spacing: f64) -> Vec<Vec3> {
        let mut out = Vec::new();
        for prim in self.primitives.iter().filter(|p| p.is_active(t)) {
            match prim.shape {
                Shape::Sphere { center, radius } => {
                    let n = (4.0 * std::f64::consts::PI * radius * radius / (spacing * spacing)).ceil().max(1.0) as usize;
                    out.extend(crate::eval::sphere_samples(center, radius, n));
                }
                Shape::Box { center, half } => {
                    for axis in 0..3 {
                        let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
                        let na = (2.0 * half[a] / spacing).ceil().max(1.0) as usize;
                        let nb = (2.0 * half[b] / spacing).ceil().max(1.0) as usize;
                        for side in [-1.0, 1.0] {
                            for i in 0..na {
                                for j in 0..nb {
                                    let mut p = center;
                                    p[axis] += side * half[axis];
                                    p[a] += -half[a] + 2.0 * half[a] * (i as f64 + 0.5) / na as f64;
                                    p[b] += -half[b] + 2.0 * half[b] * (j as f64 + 0.5) / nb as f64;
                                    out.push(p);
                                }
                            }
                        }
                    }
                }
                Shape::Plane { .. } => {}
            }
        }
        out.retain(|p| self.sdf(p, t) > -1e-9);
        out
    }

    /// Parse the line-based scene format; see [`Scene::to_text`].
    pub fn parse(text: &str) -> Result<Scene> {
        Ok(parse_scene_file(text)?.scene)
    }

    /// Serialize the primitives as scene-file lines.
    pub fn to_text(&self) -> String {
        let v = |p: &Vec3| format!("{},{},{}", p.x, p.y, p.z);
        let mut out = String::new();
        for prim in &self.primitives {
            let shape = match &prim.shape {
                Shape::Sphere { center, radius } => format!("sphere center={} radius={}", v(center), radius),
                Shape::Box { center, half } => format!("box center={} half={}", v(center), v(half)),
                Shape::Plane { normal, offset } => format!("plane normal={} offset={}", v(normal), offset),
            };
            let c = prim.property;
            out += &format!(
                "{shape} property={},{},{} active={},{}\n",
                c[0], c[1], c[2], prim.active_from, prim.active_until
            );
        }
        out
    }
}

/// Stream seed for one ray, mixing the sensor seed, ray index and timestamp.
fn ray_seed(seed: u64, index: usize, t: f64) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ t.to_bits().rotate_left(29);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Camera pose at `position` looking at `target`, z up.
pub fn look_at(position: Vec3, target: Vec3) -> Pose {
    let forward = (target - position).normalize();
    let up = if forward.cross(&Vec3::z()).norm() < 1e-9 { Vec3::y() } else { Vec3::z() };
    let right = forward.cross(&up).normalize();
    let down = forward.cross(&right);
    Pose::new(Mat3::from_columns(&[right, down, forward]), position)
}

/// `n` poses evenly spaced on a horizontal circle around `center`, at the
/// center's height, all looking at it.
pub fn orbit_trajectory(center: Vec3, radius: f64, n_frames: usize) -> Vec<Pose> {
    orbit_at_height(center, radius, 0.0, n_frames)
}

/// Like [`orbit_trajectory`] but raised by `height` above the center.
pub fn orbit_at_height(center: Vec3, radius: f64, height: f64, n_frames: usize) -> Vec<Pose> {
    (0..n_frames)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / n_frames as f64;
            let pos = center + Vec3::new(radius * a.cos(), radius * a.sin(), height);
            look_at(pos, center)
        })
        .collect()
}

/// Everything a synthetic run needs, as read from a scene file.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFile {
    pub scene: Scene,
    pub sensor: Option<SensorModel>,
    pub trajectory: Option<Trajectory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Trajectory {
    Orbit {
        center: Vec3,
        radius: f64,
        height: f64,
        frames: usize,
        /// Alternate frames between `+height` and `-height`.
        #[serde(default)]
        mirror: bool,
    },
    /// Identity-oriented poses (lidar convention) along a segment.
    Line {
        start: Vec3,
        end: Vec3,
        frames: usize,
    },
    /// A camera held still, looking at `target`.
    Fixed {
        position: Vec3,
        target: Vec3,
        frames: usize,
    },
}

impl Trajectory {
    pub fn poses(&self) -> Vec<Pose> {
        match self {
            Trajectory::Orbit {
                center,
                radius,
                height,
                frames,
                mirror,
            } => {
                let mut poses = orbit_at_height(*center, *radius, *height, *frames);
                if *mirror {
                    let low = orbit_at_height(*center, *radius, -*height, *frames);
                    for i in (1..poses.len()).step_by(2) {
                        poses[i] = low[i];
                    }
                }
                poses
            }
            Trajectory::Line { start, end, frames } => (0..*frames)
                .map(|i| {
                    let f = if *frames > 1 { i as f64 / (*frames - 1) as f64 } else { 0.0 };
                    Pose::new(Mat3::identity(), start + (end - start) * f)
                })
                .collect(),
            Trajectory::Fixed { position, target, frames } => vec![look_at(*position, *target); *frames],
        }
    }

    pub fn frames(&self) -> usize {
        match self {
            Trajectory::Orbit { frames, .. } | Trajectory::Line { frames, .. } | Trajectory::Fixed { frames, .. } => *frames,
        }
    }

    pub fn set_frames(&mut self, n: usize) {
        match self {
            Trajectory::Orbit { frames, .. } | Trajectory::Line { frames, .. } | Trajectory::Fixed { frames, .. } => *frames = n,
        }
    }
}

fn parse_vec(s: &str) -> Option<Vec3> {
    let v: Vec<f64> = s.split(',').map(|x| x.trim().parse().ok()).collect::<Option<_>>()?;
    (v.len() == 3).then(|| Vec3::new(v[0], v[1], v[2]))
}

fn parse_f64(s: &str) -> Option<f64> {
    match s {
        "inf" | "+inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        _ => s.parse().ok(),
    }
}

/// Parse a scene file. One item per line, `#` starts a comment:
///
/// ```text
/// sphere center=0,0,0 radius=1 property=0.8,0.2,0.2 active=0,inf
/// box center=0,0,0.5 half=0.5,0.5,0.5
/// plane normal=0,0,1 offset=0
/// sensor kind=pinhole width=160 height=120 fov=70 max_range=6 noise=0.005 seed=7
/// sensor kind=lidar azimuths=360 beams=16 min_elevation=-15 max_elevation=15 max_range=20
/// trajectory kind=orbit center=0,0,0 radius=3 height=1 frames=60 mirror=1
/// trajectory kind=line start=0,0,1 end=10,0,1 frames=100
/// trajectory kind=fixed position=0,0,0 target=3,0,0 frames=30
/// ```
pub fn parse_scene_file(text: &str) -> Result<SceneFile> {
    let mut out = SceneFile {
        scene: Scene::default(),
        sensor: None,
        trajectory: None,
    };
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: n + 1, msg };
        let mut parts = line.split_whitespace();
        let item = parts.next().unwrap_or_default();
        let mut kv = std::collections::HashMap::new();
        for p in parts {
            let (k, v) = p.split_once('=').ok_or_else(|| err(format!("expected key=value, got '{p}'")))?;
            kv.insert(k, v);
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| err(format!("missing '{k}'")));
        let vec = |k: &str| get(k).and_then(|v| parse_vec(v).ok_or_else(|| err(format!("bad vector for '{k}'"))));
        let num = |k: &str| get(k).and_then(|v| parse_f64(v).ok_or_else(|| err(format!("bad number for '{k}'"))));
        let num_or = |k: &str, d: f64| if kv.contains_key(k) { num(k) } else { Ok(d) };
        let count = |k: &str| num(k).map(|v| v.max(0.0) as usize);
        match item {
            "sphere" | "box" | "plane" => {
                let shape = match item {
                    "sphere" => Shape::Sphere {
                        center: vec("center")?,
                        radius: num("radius")?,
                    },
                    "box" => Shape::Box {
                        center: vec("center")?,
                        half: vec("half")?,
                    },
                    _ => {
                        let normal = vec("normal")?;
                        if normal.norm() == 0.0 {
                            return Err(err("plane normal is zero".into()));
                        }
                        Shape::Plane {
                            normal: normal.normalize(),
                            offset: num("offset")?,
                        }
                    }
                };
                let mut prim = Primitive::new(shape);
                if kv.contains_key("property") {
                    let c = vec("property")?;
                    prim.property = [c.x as f32, c.y as f32, c.z as f32];
                }
                if let Some(a) = kv.get("active") {
                    let (from, until) = a.split_once(',').ok_or_else(|| err("active needs from,until".into()))?;
                    prim.active_from = parse_f64(from).ok_or_else(|| err("bad active start".into()))?;
                    prim.active_until = parse_f64(until).ok_or_else(|| err("bad active end".into()))?;
                }
                out.scene.push(prim);
            }
            "sensor" => {
                let mut s = match get("kind")? {
                    "pinhole" => SensorModel::pinhole(count("width")?, count("height")?, num("fov")?, num_or("max_range", 10.0)?),
                    "lidar" => SensorModel::lidar(
                        count("azimuths")?,
                        count("beams")?,
                        num("min_elevation")?,
                        num("max_elevation")?,
                        num_or("max_range", 30.0)?,
                    ),
                    other => return Err(err(format!("unknown sensor kind '{other}'"))),
                };
                s.noise_sigma = num_or("noise", 0.0)?;
                s.seed = num_or("seed", 0.0)? as u64;
                out.sensor = Some(s);
            }
            "trajectory" => {
                out.trajectory = Some(match get("kind")? {
                    "orbit" => Trajectory::Orbit {
                        center: vec("center")?,
                        radius: num("radius")?,
                        height: num_or("height", 0.0)?,
                        frames: count("frames")?,
                        mirror: num_or("mirror", 0.0)? != 0.0,
                    },
                    "line" => Trajectory::Line {
                        start: vec("start")?,
                        end: vec("end")?,
                        frames: count("frames")?,
                    },
                    "fixed" => Trajectory::Fixed {
                        position: vec("position")?,
                        target: vec("target")?,
                        frames: count("frames")?,
                    },
                    other => return Err(err(format!("unknown trajectory kind '{other}'"))),
                })
            }
            other => return Err(err(format!("unknown item '{other}'"))),
        }
    }
    Ok(out)
}

pub fn load_scene_file(path: &Path) -> Result<SceneFile> {
    parse_scene_file(&std::fs::read_to_string(path)?)
}

/// Built-in scenes used by tests, benchmarks and the CLI.
pub mod presets {
    use super::*;

    /// A unit sphere at the origin, seen by a depth camera orbiting
    /// alternately above and below it.
    pub fn sphere() -> SceneFile {
        SceneFile {
            scene: Scene::new(vec![Primitive::new(Shape::Sphere {
                center: Vec3::zeros(),
                radius: 1.0,
            })
            .with_property([0.8, 0.3, 0.2])]),
            sensor: Some(SensorModel::pinhole(160, 120, 60.0, 8.0).with_noise(0.005, 1)),
            trajectory: Some(Trajectory::Orbit {
                center: Vec3::zeros(),
                radius: 3.0,
                height: 1.5,
                frames: 60,
                mirror: true,
            }),
        }
    }

    /// A box in front of a wall that disappears at `t = 10`, watched by a
    /// fixed camera for 30 frames (one frame per time unit).
    pub fn dynamic_box() -> SceneFile {
        SceneFile {
            scene: Scene::new(vec![
                Primitive::new(Shape::Plane {
                    normal: Vec3::new(-1.0, 0.0, 0.0),
                    offset: -3.0,
                })
                .with_property([0.6, 0.6, 0.6]),
                Primitive::new(Shape::Box {
                    center: Vec3::new(1.5, 0.0, 0.0),
                    half: Vec3::new(0.3, 0.3, 0.3),
                })
                .with_property([0.9, 0.1, 0.1])
                .active_during(f64::NEG_INFINITY, 10.0),
            ]),
            sensor: Some(SensorModel::pinhole(120, 90, 60.0, 6.0).with_noise(0.002, 3)),
            trajectory: Some(Trajectory::Fixed {
                position: Vec3::zeros(),
                target: Vec3::new(3.0, 0.0, 0.0),
                frames: 30,
            }),
        }
    }

    /// A long corridor with pillars, traversed by a lidar.
    pub fn corridor(frames: usize, length: f64) -> SceneFile {
        let mut prims = vec![
            Primitive::new(Shape::Plane { normal: Vec3::new(0.0, 1.0, 0.0), offset: -1.5 }),
            Primitive::new(Shape::Plane { normal: Vec3::new(0.0, -1.0, 0.0), offset: -1.5 }),
            Primitive::new(Shape::Plane { normal: Vec3::new(0.0, 0.0, 1.0), offset: 0.0 }),
            Primitive::new(Shape::Plane { normal: Vec3::new(0.0, 0.0, -1.0), offset: -3.0 }),
        ];
        let mut x = 2.0;
        while x < length + 10.0 {
            prims.push(Primitive::new(Shape::Box {
                center: Vec3::new(x, 1.2, 1.5),
                half: Vec3::new(0.2, 0.3, 1.5),
            }));
            x += 4.0;
        }
        SceneFile {
            scene: Scene::new(prims),
            sensor: Some(SensorModel::lidar(180, 16, -30.0, 30.0, 4.0).with_noise(0.005, 11)),
            trajectory: Some(Trajectory::Line {
                start: Vec3::new(0.0, 0.0, 1.5),
                end: Vec3::new(length, 0.0, 1.5),
                frames,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sphere() -> Primitive {
        Primitive::new(Shape::Sphere {
            center: Vec3::zeros(),
            radius: 1.0,
        })
    }

    #[test]
    fn analytic_sdfs() {
        let s = Scene::new(vec![sphere()]);
        assert_eq!(s.sdf(&Vec3::new(2.0, 0.0, 0.0), 0.0), 1.0);
        let b = Scene::new(vec![Primitive::new(Shape::Box {
            center: Vec3::zeros(),
            half: Vec3::new(1.0, 1.0, 1.0),
        })]);
        assert_eq!(b.sdf(&Vec3::zeros(), 0.0), -1.0);
        assert!((b.sdf(&Vec3::new(2.0, 2.0, 0.0), 0.0) - 2f64.sqrt()).abs() < 1e-12);
        let mut u = Scene::new(vec![sphere()]);
        u.push(Primitive::new(Shape::Plane {
            normal: Vec3::z(),
            offset: -2.0,
        }));
        assert_eq!(u.sdf(&Vec3::new(50.0, 0.0, -2.0), 0.0), 0.0);
        assert_eq!(Scene::default().sdf(&Vec3::zeros(), 0.0), f64::INFINITY);
    }

    #[test]
    fn time_gating() {
        let s = Scene::new(vec![sphere().active_during(0.0, 10.0)]);
        assert!(s.sdf(&Vec3::zeros(), 5.0) < 0.0);
        assert_eq!(s.sdf(&Vec3::zeros(), 10.0), f64::INFINITY);
    }

    #[test]
    fn lipschitz() {
        let scene = presets::corridor(10, 20.0).scene;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let a = Vec3::new(rng.random_range(-1.0..20.0), rng.random_range(-2.0..2.0), rng.random_range(-0.5..3.5));
            let b = a + Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
            assert!((scene.sdf(&a, 0.0) - scene.sdf(&b, 0.0)).abs() <= (a - b).norm() + 1e-12);
        }
    }

    #[test]
    fn empty_scene_renders_nothing() {
        let f = Scene::default().render(&SensorModel::pinhole(16, 12, 60.0, 5.0), &Pose::identity(), 0.0).unwrap();
        assert!(f.is_empty());
    }

    #[test]
    fn wall_ranges() {
        let scene = Scene::new(vec![Primitive::new(Shape::Plane {
            normal: Vec3::new(0.0, 0.0, -1.0),
            offset: -2.0,
        })]);
        let sensor = SensorModel::pinhole(32, 24, 60.0, 10.0);
        let f = scene.render(&sensor, &Pose::identity(), 0.0).unwrap();
        assert_eq!(f.len(), 32 * 24);
        for p in &f.points {
            let cos = p.normalize().z;
            assert!((p.norm() - 2.0 / cos).abs() < 1e-4);
            assert!(scene.sdf(p, 0.0).abs() < 1e-4);
        }
    }

    #[test]
    fn hits_lie_on_surface_and_are_deterministic() {
        let pf = presets::sphere();
        let mut sensor = pf.sensor.clone().unwrap();
        sensor.noise_sigma = 0.0;
        let pose = pf.trajectory.as_ref().unwrap().poses()[7];
        let f = pf.scene.render(&sensor, &pose, 0.0).unwrap();
        assert!(!f.is_empty());
        for p in f.world_points() {
            assert!(pf.scene.sdf(&p, 0.0).abs() < 1e-4);
        }
        let noisy = pf.sensor.clone().unwrap();
        let a = pf.scene.render(&noisy, &pose, 1.0).unwrap();
        let b = pf.scene.render(&noisy, &pose, 1.0).unwrap();
        assert_eq!(a, b);
        let c = pf.scene.render(&noisy.clone().with_noise(0.005, 2), &pose, 1.0).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn surface_sampling() {
        let mut s = Scene::new(vec![sphere()]);
        s.push(Primitive::new(Shape::Box {
            center: Vec3::new(1.0, 0.0, 0.0),
            half: Vec3::new(0.5, 0.5, 0.5),
        }));
        let pts = s.surface_samples(0.0, 0.05);
        assert!(pts.len() > 5000);
        assert!(pts.iter().all(|p| s.sdf(p, 0.0).abs() < 1e-9));
        assert!(pts.iter().all(|p| !(p.x > 0.5 && p.x < 1.0 && p.norm() < 0.999)));
    }

    #[test]
    fn orbit_poses() {
        let one = orbit_trajectory(Vec3::new(1.0, 2.0, 0.5), 3.0, 1);
        assert_eq!(one.len(), 1);
        let fwd = one[0].rotation.column(2).into_owned();
        assert!((fwd - (Vec3::new(1.0, 2.0, 0.5) - one[0].translation).normalize()).norm() < 1e-12);
        let four = orbit_trajectory(Vec3::zeros(), 2.0, 4);
        for w in four.windows(2) {
            let rel = w[0].rotation.transpose() * w[1].rotation;
            let angle = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
            assert!((angle - std::f64::consts::FRAC_PI_2).abs() < 1e-9);
        }
        for p in orbit_at_height(Vec3::zeros(), 3.0, 1.5, 60) {
            p.validate().unwrap();
        }
    }

    #[test]
    fn scene_file_round_trip() {
        let text = "# demo\nsphere center=0,0,0 radius=1 property=0.8,0.2,0.2 active=0,inf\nbox center=1,2,3 half=0.5,0.5,0.5\nplane normal=0,0,2 offset=-1\nsensor kind=lidar azimuths=90 beams=8 min_elevation=-10 max_elevation=10 noise=0.01 seed=4\ntrajectory kind=orbit center=0,0,0 radius=3 height=1 frames=12\n";
        let f = parse_scene_file(text).unwrap();
        assert_eq!(f.scene.primitives.len(), 3);
        assert_eq!(f.scene.primitives[0].active_from, 0.0);
        assert_eq!(f.scene.primitives[2].shape, Shape::Plane { normal: Vec3::z(), offset: -1.0 });
        assert_eq!(f.sensor.as_ref().unwrap().ray_count(), 720);
        assert_eq!(f.trajectory.unwrap().poses().len(), 12);
        assert_eq!(Scene::parse(&f.scene.to_text()).unwrap(), f.scene);
        let bad = parse_scene_file("sphere center=0,0 radius=1\n").unwrap_err();
        assert!(matches!(bad, Error::Parse { line: 1, .. }));
        assert!(parse_scene_file("teapot size=3\n").is_err());
    }
}
