//! PLY reading and writing.
//!
//! Meshes are written as binary little-endian with double-precision
//! positions and float properties, so a write/read cycle is lossless. The
//! reader also accepts ASCII and big-endian files and arbitrary scalar
//! types, which covers point clouds exported by common tools.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::frame::PropertyKind;
use crate::meshing::TriangleMesh;
use crate::sparse_grid::{Property, MAX_CHANNELS};
use crate::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Scalar> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Encoding {
    Ascii,
    LittleEndian,
    BigEndian,
}

#[derive(Debug, Clone)]
enum PropDef {
    Scalar(String, Scalar),
    List(String, Scalar, Scalar),
}

#[derive(Debug, Clone)]
struct ElementDef {
    name: String,
    count: usize,
    props: Vec<PropDef>,
}

/// Contents of a PLY file relevant to meshes and point clouds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlyData {
    pub vertices: Vec<Vec3>,
    /// Non-position vertex properties by name, one value per vertex.
    pub vertex_properties: Vec<(String, Vec<f64>)>,
    pub faces: Vec<Vec<u32>>,
}

impl PlyData {
    pub fn property(&self, name: &str) -> Option<&[f64]> {
        self.vertex_properties
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    /// Per-vertex properties in the channel layout of `kind`, if present.
    /// Integer colour channels are rescaled from 0–255.
    pub fn properties_as(&self, kind: PropertyKind) -> Option<Vec<Property>> {
        let names: &[&str] = match kind {
            PropertyKind::None => return None,
            PropertyKind::Intensity => &["intensity"],
            PropertyKind::Rgb => &["red", "green", "blue"],
        };
        let cols: Vec<&[f64]> = names.iter().map(|n| self.property(n)).collect::<Option<_>>()?;
        let scale = if kind == PropertyKind::Rgb && cols.iter().any(|c| c.iter().any(|v| *v > 1.0)) {
            1.0 / 255.0
        } else {
            1.0
        };
        Some(
            (0..self.vertices.len())
                .map(|i| {
                    let mut p = [0.0f32; MAX_CHANNELS];
                    for (ch, col) in cols.iter().enumerate() {
                        p[ch] = (col[i] * scale) as f32;
                    }
                    p
                })
                .collect(),
        )
    }
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub fn write_mesh(mesh: &TriangleMesh, kind: PropertyKind, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_mesh_to(mesh, kind, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_mesh_to(mesh: &TriangleMesh, kind: PropertyKind, w: &mut impl Write) -> Result<()> {
    let names: &[&str] = match kind {
        PropertyKind::None => &[],
        PropertyKind::Intensity => &["intensity"],
        PropertyKind::Rgb => &["red", "green", "blue"],
    };
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header += &format!("element vertex {}\n", mesh.vertices.len());
    header += "property double x\nproperty double y\nproperty double z\n";
    for n in names {
        header += &format!("property float {n}\n");
    }
    header += &format!("element face {}\n", mesh.triangles.len());
    header += "property list uchar int vertex_indices\nend_header\n";
    w.write_all(header.as_bytes())?;
    for (i, v) in mesh.vertices.iter().enumerate() {
        for a in 0..3 {
            w.write_all(&v[a].to_le_bytes())?;
        }
        for ch in 0..names.len() {
            let p = mesh.vertex_properties.get(i).map_or(0.0, |p| p[ch]);
            w.write_all(&p.to_le_bytes())?;
        }
    }
    for t in &mesh.triangles {
        w.write_all(&[3u8])?;
        for i in t {
            w.write_all(&(*i as i32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Read a mesh written by [`write_mesh`] (or any triangle PLY).
/// `vertex_leaf` is left empty.
pub fn read_mesh(path: &Path) -> Result<(TriangleMesh, PropertyKind)> {
    let data = read(path)?;
    let kind = if data.property("red").is_some() {
        PropertyKind::Rgb
    } else if data.property("intensity").is_some() {
        PropertyKind::Intensity
    } else {
        PropertyKind::None
    };
    let mut triangles = Vec::with_capacity(data.faces.len());
    for f in &data.faces {
        if f.iter().any(|&i| i as usize >= data.vertices.len()) {
            return Err(format_err("face index out of range"));
        }
        // Fan-triangulate polygons.
        for k in 1..f.len().saturating_sub(1) {
            triangles.push([f[0], f[k], f[k + 1]]);
        }
    }
    let vertex_properties = data
        .properties_as(kind)
        .unwrap_or_else(|| vec![[0.0; MAX_CHANNELS]; data.vertices.len()]);
    Ok((
        TriangleMesh {
            vertices: data.vertices,
            triangles,
            vertex_properties,
            vertex_leaf: Vec::new(),
        },
        kind,
    ))
}

pub fn read(path: &Path) -> Result<PlyData> {
    let mut r = BufReader::new(File::open(path)?);
    read_from(&mut r)
}

pub fn read_from(r: &mut impl BufRead) -> Result<PlyData> {
    let mut line = String::new();
    let next_line = |r: &mut dyn BufRead, line: &mut String| -> Result<()> {
        line.clear();
        if r.read_line(line)? == 0 {
            return Err(format_err("unexpected end of header"));
        }
        Ok(())
    };
    next_line(r, &mut line)?;
    if line.trim() != "ply" {
        return Err(format_err("missing 'ply' magic"));
    }
    let mut encoding = None;
    let mut elements: Vec<ElementDef> = Vec::new();
    loop {
        next_line(r, &mut line)?;
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["end_header"] => break,
            ["format", f, _] => {
                encoding = Some(match *f {
                    "ascii" => Encoding::Ascii,
                    "binary_little_endian" => Encoding::LittleEndian,
                    "binary_big_endian" => Encoding::BigEndian,
                    other => return Err(format_err(format!("unknown format {other}"))),
                })
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(ElementDef {
                name: name.to_string(),
                count: count.parse().map_err(|_| format_err("bad element count"))?,
                props: Vec::new(),
            }),
            ["property", "list", ct, it, name] => {
                let el = elements.last_mut().ok_or_else(|| format_err("property before element"))?;
                let (ct, it) = (
                    Scalar::parse(ct).ok_or_else(|| format_err(format!("unknown type {ct}")))?,
                    Scalar::parse(it).ok_or_else(|| format_err(format!("unknown type {it}")))?,
                );
                el.props.push(PropDef::List(name.to_string(), ct, it));
            }
            ["property", ty, name] => {
                let el = elements.last_mut().ok_or_else(|| format_err("property before element"))?;
                let ty = Scalar::parse(ty).ok_or_else(|| format_err(format!("unknown type {ty}")))?;
                el.props.push(PropDef::Scalar(name.to_string(), ty));
            }
            _ => return Err(format_err(format!("unrecognised header line '{}'", line.trim()))),
        }
    }
    let encoding = encoding.ok_or_else(|| format_err("missing format line"))?;
    let mut src = Source::new(r, encoding);
    let mut out = PlyData::default();
    for el in &elements {
        let is_vertex = el.name == "vertex";
        let is_face = el.name == "face";
        let scalar_names: Vec<&str> = el
            .props
            .iter()
            .filter_map(|p| match p {
                PropDef::Scalar(n, _) => Some(n.as_str()),
                PropDef::List(..) => None,
            })
            .collect();
        if is_vertex {
            for axis in ["x", "y", "z"] {
                if !scalar_names.contains(&axis) {
                    return Err(format_err(format!("vertex element lacks '{axis}'")));
                }
            }
            out.vertices.reserve(el.count);
            out.vertex_properties = scalar_names
                .iter()
                .filter(|n| !matches!(**n, "x" | "y" | "z"))
                .map(|n| (n.to_string(), Vec::with_capacity(el.count)))
                .collect();
        }
        for _ in 0..el.count {
            let mut pos = Vec3::zeros();
            let mut extra = 0;
            for p in &el.props {
                match p {
                    PropDef::Scalar(name, ty) => {
                        let v = src.scalar(*ty)?;
                        if is_vertex {
                            match name.as_str() {
                                "x" => pos.x = v,
                                "y" => pos.y = v,
                                "z" => pos.z = v,
                                _ => {
                                    out.vertex_properties[extra].1.push(v);
                                    extra += 1;
                                }
                            }
                        }
                    }
                    PropDef::List(name, ct, it) => {
                        let n = src.scalar(*ct)?;
                        if n < 0.0 || n.fract() != 0.0 {
                            return Err(format_err("bad list length"));
                        }
                        let mut idx = Vec::with_capacity(n as usize);
                        for _ in 0..n as usize {
                            let v = src.scalar(*it)?;
                            if v < 0.0 {
                                return Err(format_err("negative face index"));
                            }
                            idx.push(v as u32);
                        }
                        if is_face && (name == "vertex_indices" || name == "vertex_index") {
                            out.faces.push(idx);
                        }
                    }
                }
            }
            if is_vertex {
                out.vertices.push(pos);
            }
        }
        src.end_element()?;
    }
    Ok(out)
}

struct Source<'a, R: BufRead> {
    r: &'a mut R,
    encoding: Encoding,
    tokens: std::vec::IntoIter<String>,
}

impl<'a, R: BufRead> Source<'a, R> {
    fn new(r: &'a mut R, encoding: Encoding) -> Self {
        Source {
            r,
            encoding,
            tokens: Vec::new().into_iter(),
        }
    }

    fn scalar(&mut self, ty: Scalar) -> Result<f64> {
        if self.encoding == Encoding::Ascii {
            let tok = loop {
                if let Some(t) = self.tokens.next() {
                    break t;
                }
                let mut line = String::new();
                if self.r.read_line(&mut line)? == 0 {
                    return Err(format_err("unexpected end of data"));
                }
                self.tokens = line.split_whitespace().map(str::to_owned).collect::<Vec<_>>().into_iter();
            };
            return tok.parse::<f64>().map_err(|_| format_err(format!("bad number '{tok}'")));
        }
        let mut buf = [0u8; 8];
        let b = &mut buf[..ty.size()];
        self.r.read_exact(b).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => format_err("unexpected end of data"),
            _ => Error::Io(e),
        })?;
        if self.encoding == Encoding::BigEndian {
            b.reverse();
        }
        Ok(match ty {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(buf),
        })
    }

    fn end_element(&mut self) -> Result<()> {
        // ASCII rows may not end exactly at an element boundary only if the
        // file is malformed; leftover tokens are an error.
        if self.encoding == Encoding::Ascii && self.tokens.len() > 0 {
            return Err(format_err("trailing values in ASCII element"));
        }
        Ok(())
    }
}
