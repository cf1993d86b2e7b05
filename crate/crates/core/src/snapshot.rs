//! Binary map snapshots.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic        8 bytes  "GPMSNAP1"
//! config_len   u32      followed by config_len bytes of `key = value` text
//! frames       u64      frames integrated so far
//! voxel_size   f64
//! leaf_count   u64
//!   origin     3 × i32
//!   mask       8 × u64  bit n set ⇔ voxel n present (n = 64x + 8y + z)
//!   per set voxel, ascending n:
//!     distance f32, weight f32, property 3 × f32, property_weight f32, observed u8
//! node_count   u64      global-field nodes
//!   origin     3 × i32
//!   n          u32
//!   n × (position 3 × f64, property 3 × f32)
//! ```
//!
//! Leaves and nodes are written in ascending origin order, so equal maps
//! give byte-identical snapshots.

use std::io::{Read, Write};
use std::path::Path;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::global_field::GlobalField;
use crate::pipeline::Mapper;
use crate::sparse_grid::{GridCoord, SparseGrid, VoxelState, LEAF_VOXELS};
use crate::Vec3;

pub const MAGIC: &[u8; 8] = b"GPMSNAP1";

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        Ok(self.0.write_all(b)?)
    }
    fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn i32(&mut self, v: i32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn f32(&mut self, v: f32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn coord(&mut self, c: GridCoord) -> Result<()> {
        self.i32(c.i)?;
        self.i32(c.j)?;
        self.i32(c.k)
    }
}

struct Reader<R: Read>(R);

macro_rules! read_le {
    ($name:ident, $t:ty) => {
        fn $name(&mut self) -> Result<$t> {
            let mut b = [0u8; std::mem::size_of::<$t>()];
            self.fill(&mut b)?;
            Ok(<$t>::from_le_bytes(b))
        }
    };
}

impl<R: Read> Reader<R> {
    fn fill(&mut self, b: &mut [u8]) -> Result<()> {
        self.0.read_exact(b).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Format("snapshot is truncated".into()),
            _ => e.into(),
        })
    }
    read_le!(u8, u8);
    read_le!(u32, u32);
    read_le!(u64, u64);
    read_le!(i32, i32);
    read_le!(f32, f32);
    read_le!(f64, f64);
    fn coord(&mut self) -> Result<GridCoord> {
        Ok(GridCoord::new(self.i32()?, self.i32()?, self.i32()?))
    }
}

pub fn write_to(mapper: &Mapper, w: impl Write) -> Result<()> {
    let mut w = Writer(w);
    w.bytes(MAGIC)?;
    let cfg = mapper.config().to_text();
    w.u32(cfg.len() as u32)?;
    w.bytes(cfg.as_bytes())?;
    w.u64(mapper.frames_integrated() as u64)?;
    let grid = mapper.grid();
    w.f64(grid.voxel_size())?;
    let mut origins = grid.leaf_origins().to_vec();
    origins.sort_unstable();
    w.u64(origins.len() as u64)?;
    for o in origins {
        let leaf = grid.leaf(o).expect("listed leaf exists");
        w.coord(o)?;
        for m in leaf.value_mask() {
            w.u64(*m)?;
        }
        for n in 0..LEAF_VOXELS {
            if let Some(v) = leaf.voxel(n) {
                w.f32(v.distance)?;
                w.f32(v.weight)?;
                for c in v.property {
                    w.f32(c)?;
                }
                w.f32(v.property_weight)?;
                w.bytes(&[v.observed as u8])?;
            }
        }
    }
    let global = mapper.global();
    w.u64(global.len() as u64)?;
    for &o in global.node_origins() {
        let pts = global.node_points(o).unwrap_or_default();
        let props = global.node_properties(o).unwrap_or_default();
        w.coord(o)?;
        w.u32(pts.len() as u32)?;
        for (p, c) in pts.iter().zip(props) {
            w.f64(p.x)?;
            w.f64(p.y)?;
            w.f64(p.z)?;
            for v in c {
                w.f32(*v)?;
            }
        }
    }
    Ok(())
}

pub fn to_bytes(mapper: &Mapper) -> Vec<u8> {
    let mut buf = Vec::new();
    write_to(mapper, &mut buf).expect("writing to memory cannot fail");
    buf
}

pub fn read_from(r: impl Read) -> Result<Mapper> {
    let mut r = Reader(r);
    let mut magic = [0u8; 8];
    r.fill(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a map snapshot (bad magic)".into()));
    }
    let len = r.u32()? as usize;
    if len > 1 << 20 {
        return Err(Error::Format("config block too large".into()));
    }
    let mut text = vec![0u8; len];
    r.fill(&mut text)?;
    let text = String::from_utf8(text).map_err(|_| Error::Format("config block is not UTF-8".into()))?;
    let config = PipelineConfig::parse(&text)?;
    let frames = r.u64()? as usize;
    let voxel_size = r.f64()?;
    if voxel_size != config.voxel_size {
        return Err(Error::Format("voxel size disagrees with stored config".into()));
    }
    let mut grid = SparseGrid::new(voxel_size);
    let leaves = r.u64()?;
    for _ in 0..leaves {
        let origin = r.coord()?;
        if origin.leaf_origin() != origin {
            return Err(Error::Format(format!("misaligned leaf origin {origin:?}")));
        }
        let mut mask = [0u64; LEAF_VOXELS / 64];
        for m in &mut mask {
            *m = r.u64()?;
        }
        for n in 0..LEAF_VOXELS {
            if mask[n / 64] >> (n % 64) & 1 == 0 {
                continue;
            }
            let distance = r.f32()?;
            let weight = r.f32()?;
            let property = [r.f32()?, r.f32()?, r.f32()?];
            let property_weight = r.f32()?;
            let observed = r.u8()? != 0;
            let c = origin.offset((n / 64) as i32, (n / 8 % 8) as i32, (n % 8) as i32);
            grid.set(
                c,
                VoxelState {
                    distance,
                    weight,
                    property,
                    property_weight,
                    observed,
                },
            );
        }
    }
    let mut global = GlobalField::new(config.global_params());
    let nodes = r.u64()?;
    for _ in 0..nodes {
        let origin = r.coord()?;
        let n = r.u32()? as usize;
        if n == 0 || n > LEAF_VOXELS {
            return Err(Error::Format(format!("node with {n} points")));
        }
        let mut pts = Vec::with_capacity(n);
        let mut props = Vec::with_capacity(n);
        for _ in 0..n {
            pts.push(Vec3::new(r.f64()?, r.f64()?, r.f64()?));
            props.push([r.f32()?, r.f32()?, r.f32()?]);
        }
        global.insert_node(origin, pts, props);
    }
    global.rebuild_index();
    let mut rest = [0u8; 1];
    if r.0.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after snapshot".into()));
    }
    Mapper::from_parts(config, grid, global, frames)
}

pub fn save(mapper: &Mapper, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_to(mapper, &mut w)?;
    Ok(w.flush()?)
}

pub fn load(path: &Path) -> Result<Mapper> {
    read_from(std::io::BufReader::new(std::fs::File::open(path)?))
}
