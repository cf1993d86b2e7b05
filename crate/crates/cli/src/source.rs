//! Where frames come from: a synthetic scene or files on disk.

use std::path::{Path, PathBuf};

use gpmap_core::frame::{Frame, PropertyKind};
use gpmap_core::io;
use gpmap_core::scene::{self, presets, SceneFile};
use gpmap_core::{Error, Result};

pub fn preset(name: &str, frames: Option<usize>) -> Result<SceneFile> {
    let mut sf = match name {
        "sphere" => presets::sphere(),
        "dynamic-box" => presets::dynamic_box(),
        "corridor" => {
            let n = frames.unwrap_or(500);
            presets::corridor(n, 0.1 * n as f64)
        }
        other => return Err(Error::Config(format!("unknown preset '{other}' (sphere, dynamic-box, corridor)"))),
    };
    if let (Some(n), Some(t)) = (frames, sf.trajectory.as_mut()) {
        t.set_frames(n);
    }
    Ok(sf)
}

pub fn scene_file(path: &Path, frames: Option<usize>) -> Result<SceneFile> {
    let mut sf = scene::load_scene_file(path)?;
    if let (Some(n), Some(t)) = (frames, sf.trajectory.as_mut()) {
        t.set_frames(n);
    }
    Ok(sf)
}

/// A lazily produced frame sequence.
pub enum Source {
    Synthetic(SceneFile),
    Files {
        files: Vec<PathBuf>,
        poses: Vec<(f64, gpmap_core::frame::Pose)>,
        property: PropertyKind,
    },
}

impl Source {
    pub fn files(dir: &Path, trajectory: &Path, property: PropertyKind, limit: Option<usize>) -> Result<Source> {
        let mut files = io::frame_files(dir)?;
        let mut poses = io::load_trajectory(trajectory)?;
        if files.len() != poses.len() {
            return Err(Error::Config(format!(
                "{} frame files but {} trajectory entries",
                files.len(),
                poses.len()
            )));
        }
        if let Some(n) = limit {
            files.truncate(n);
            poses.truncate(n);
        }
        Ok(Source::Files { files, poses, property })
    }

    pub fn synthetic(sf: SceneFile) -> Result<Source> {
        if sf.sensor.is_none() || sf.trajectory.is_none() {
            return Err(Error::Config("scene needs a 'sensor' and a 'trajectory' line to be run".into()));
        }
        Ok(Source::Synthetic(sf))
    }

    pub fn len(&self) -> usize {
        match self {
            Source::Synthetic(sf) => sf.trajectory.as_ref().map_or(0, |t| t.frames()),
            Source::Files { files, .. } => files.len(),
        }
    }

    pub fn frame(&self, i: usize) -> Result<Frame> {
        match self {
            Source::Synthetic(sf) => {
                let pose = sf.trajectory.as_ref().expect("checked").poses()[i];
                sf.scene.render(sf.sensor.as_ref().expect("checked"), &pose, i as f64)
            }
            Source::Files { files, poses, property } => io::load_frame(&files[i], poses[i].1, poses[i].0, *property),
        }
        .map_err(|e| e.in_frame(i))
    }
}

/// Keep `n` evenly spaced points (all of them if there are fewer).
pub fn subsample(frame: Frame, n: usize) -> Frame {
    let len = frame.len();
    if len <= n || n == 0 {
        return frame;
    }
    let idx: Vec<usize> = (0..n).map(|k| k * len / n).collect();
    let props = if frame.properties.is_empty() {
        Vec::new()
    } else {
        idx.iter().map(|&k| frame.properties[k]).collect()
    };
    Frame::new(idx.iter().map(|&k| frame.points[k]).collect(), frame.pose, frame.timestamp).with_properties(props)
}
