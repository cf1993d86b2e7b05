//! Frame and trajectory files.
//!
//! Frames are PLY point clouds or whitespace-delimited `x y z [props...]`
//! text; trajectories are lines of `timestamp tx ty tz qx qy qz qw` with
//! the quaternion scalar-last.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::frame::{Frame, Pose, PropertyKind};
use crate::ply;
use crate::sparse_grid::{Property, MAX_CHANNELS};
use crate::Vec3;

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

/// Read an XYZ text cloud. Lines are `x y z` followed by at least
/// `kind.channels()` property columns; extra columns are ignored.
pub fn read_xyz(r: impl BufRead, kind: PropertyKind) -> Result<(Vec<Vec3>, Vec<Property>)> {
    let channels = kind.channels();
    let (mut points, mut props) = (Vec::new(), Vec::new());
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|_| parse_err(n + 1, format!("not a number: '{s}'"))))
            .collect::<Result<_>>()?;
        if vals.len() < 3 + channels {
            return Err(parse_err(n + 1, format!("expected at least {} columns, got {}", 3 + channels, vals.len())));
        }
        points.push(Vec3::new(vals[0], vals[1], vals[2]));
        if channels > 0 {
            let mut p = [0.0f32; MAX_CHANNELS];
            for ch in 0..channels {
                p[ch] = vals[3 + ch] as f32;
            }
            props.push(p);
        }
    }
    Ok((points, props))
}

pub fn write_xyz(w: &mut impl Write, points: &[Vec3], props: &[Property], kind: PropertyKind) -> Result<()> {
    for (i, p) in points.iter().enumerate() {
        write!(w, "{} {} {}", p.x, p.y, p.z)?;
        if let Some(c) = props.get(i) {
            for v in &c[..kind.channels()] {
                write!(w, " {v}")?;
            }
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Read a point cloud file, choosing the format by extension (`.ply`,
/// anything else is XYZ text).
pub fn read_points(path: &Path, kind: PropertyKind) -> Result<(Vec<Vec3>, Vec<Property>)> {
    let is_ply = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply"));
    if is_ply {
        let data = ply::read(path)?;
        let props = match kind {
            PropertyKind::None => Vec::new(),
            _ => data
                .properties_as(kind)
                .ok_or_else(|| Error::Format(format!("{}: no {} vertex properties", path.display(), kind.name())))?,
        };
        Ok((data.vertices, props))
    } else {
        read_xyz(BufReader::new(File::open(path)?), kind)
    }
}

pub fn read_trajectory(r: impl BufRead) -> Result<Vec<(f64, Pose)>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|_| parse_err(n + 1, format!("not a number: '{s}'"))))
            .collect::<Result<_>>()?;
        if v.len() != 8 {
            return Err(parse_err(n + 1, format!("expected 8 values, got {}", v.len())));
        }
        let pose = Pose::from_quaternion(Vec3::new(v[1], v[2], v[3]), v[4], v[5], v[6], v[7])
            .map_err(|e| parse_err(n + 1, e.to_string()))?;
        out.push((v[0], pose));
    }
    Ok(out)
}

pub fn load_trajectory(path: &Path) -> Result<Vec<(f64, Pose)>> {
    read_trajectory(BufReader::new(File::open(path)?))
}

pub fn write_trajectory(w: &mut impl Write, poses: &[(f64, Pose)]) -> Result<()> {
    for (t, p) in poses {
        let q = p.quaternion();
        let o = p.translation;
        writeln!(w, "{t} {} {} {} {} {} {} {}", o.x, o.y, o.z, q[0], q[1], q[2], q[3])?;
    }
    Ok(())
}

/// Frame files in a directory (`.ply`, `.xyz`), sorted by name.
pub fn frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "ply" | "xyz"))
        })
        .collect();
    files.sort();
    Ok(files)
}

pub fn load_frame(path: &Path, pose: Pose, timestamp: f64, kind: PropertyKind) -> Result<Frame> {
    let (points, props) = read_points(path, kind)?;
    Ok(Frame::new(points, pose, timestamp).with_properties(props))
}

/// Write a frame directory plus `trajectory.txt` that [`frame_files`] and
/// [`load_trajectory`] read back.
pub fn write_sequence(dir: &Path, frames: &[Frame], kind: PropertyKind) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, f) in frames.iter().enumerate() {
        let mut w = BufWriter::new(File::create(dir.join(format!("frame_{i:05}.xyz")))?);
        write_xyz(&mut w, &f.points, &f.properties, kind)?;
        w.flush()?;
    }
    let poses: Vec<(f64, Pose)> = frames.iter().map(|f| (f.timestamp, f.pose)).collect();
    let mut w = BufWriter::new(File::create(dir.join("trajectory.txt"))?);
    write_trajectory(&mut w, &poses)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Mat3;

    #[test]
    fn xyz_with_properties() {
        let text = "# cloud\n0 0 1 0.5\n1,2,3,0.25\n\n";
        let (p, c) = read_xyz(text.as_bytes(), PropertyKind::Intensity).unwrap();
        assert_eq!(p, vec![Vec3::new(0.0, 0.0, 1.0), Vec3::new(1.0, 2.0, 3.0)]);
        assert_eq!(c[1][0], 0.25);
        let (_, c) = read_xyz(text.as_bytes(), PropertyKind::None).unwrap();
        assert!(c.is_empty());
        assert!(matches!(read_xyz(text.as_bytes(), PropertyKind::Rgb), Err(Error::Parse { line: 2, .. })));
        assert!(read_xyz("1 2 x\n".as_bytes(), PropertyKind::None).is_err());
    }

    #[test]
    fn trajectory_round_trip() {
        let r = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let poses = vec![(0.0, Pose::identity()), (0.1, Pose::new(r, Vec3::new(1.0, 2.0, 3.0)))];
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &poses).unwrap();
        let back = read_trajectory(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert!((back[1].1.rotation - r).norm() < 1e-12);
        assert_eq!(back[1].1.translation, Vec3::new(1.0, 2.0, 3.0));
        assert!(read_trajectory("0 1 2 3 0 0 0\n".as_bytes()).is_err());
        assert!(read_trajectory("0 1 2 3 0 0 0 0\n".as_bytes()).is_err());
    }

    #[test]
    fn sequence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = Frame::new(vec![Vec3::new(0.5, 0.25, 2.0)], Pose::identity(), 1.5).with_properties(vec![[0.1, 0.2, 0.3]]);
        write_sequence(dir.path(), &[f.clone(), f.clone()], PropertyKind::Rgb).unwrap();
        let files = frame_files(dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        let traj = load_trajectory(&dir.path().join("trajectory.txt")).unwrap();
        let g = load_frame(&files[0], traj[0].1, traj[0].0, PropertyKind::Rgb).unwrap();
        assert_eq!(g, f);
    }
}
