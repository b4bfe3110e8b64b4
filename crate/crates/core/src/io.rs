//! PLY reading and writing, and conversion of raw points to voxel sets.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ply_rs::parser::Parser;
use ply_rs::ply::{
    Addable, DefaultElement, ElementDef, Encoding, Ply, Property, PropertyAccess, PropertyDef,
    PropertyType, ScalarType,
};
use ply_rs::writer::Writer;
use thiserror::Error;

use crate::geometry::{GeometryError, VoxelSet, MAX_BITDEPTH, MIN_BITDEPTH};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("unsupported PLY variant: {0}")]
    UnsupportedPlyVariant(String),
    #[error("malformed PLY header: {0}")]
    MalformedHeader(String),
    #[error("malformed PLY payload: {0}")]
    MalformedPayload(String),
    #[error("all points coincide; extent is zero")]
    DegenerateExtent,
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("i/o failure: {0}")]
    IoFailure(#[from] std::io::Error),
}

/// Points as read from disk. `bitdepth` is set when the file declares one
/// (a `bitdepth N` or `depth N` comment).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawPointCloud {
    pub points: Vec<[f64; 3]>,
    pub bitdepth: Option<u8>,
}

impl RawPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

impl From<&VoxelSet> for RawPointCloud {
    fn from(vs: &VoxelSet) -> Self {
        RawPointCloud {
            points: vs.iter().map(|v| [v.x as f64, v.y as f64, v.z as f64]).collect(),
            bitdepth: Some(vs.bitdepth()),
        }
    }
}

/// Vertex holding only the coordinates; other properties are dropped.
#[derive(Debug, Default, Clone, Copy)]
struct Vertex([f64; 3]);

impl PropertyAccess for Vertex {
    fn new() -> Self {
        Vertex::default()
    }

    fn set_property(&mut self, name: String, property: Property) {
        let axis = match name.as_str() {
            "x" => 0,
            "y" => 1,
            "z" => 2,
            _ => return,
        };
        self.0[axis] = match property {
            Property::Char(v) => v as f64,
            Property::UChar(v) => v as f64,
            Property::Short(v) => v as f64,
            Property::UShort(v) => v as f64,
            Property::Int(v) => v as f64,
            Property::UInt(v) => v as f64,
            Property::Float(v) => v as f64,
            Property::Double(v) => v,
            _ => return,
        };
    }
}

fn parse_declared_depth(comments: &[String]) -> Option<u8> {
    comments.iter().find_map(|c| {
        let mut words = c.split_whitespace();
        match words.next()? {
            "bitdepth" | "depth" => words.next()?.parse().ok(),
            _ => None,
        }
    })
}

/// Reads the vertex positions of an ascii or binary little-endian PLY file.
pub fn read_ply(path: impl AsRef<Path>) -> Result<RawPointCloud, IoError> {
    let mut reader = BufReader::new(File::open(path)?);
    let parser = Parser::<Vertex>::new();
    let header = parser
        .read_header(&mut reader)
        .map_err(|e| IoError::MalformedHeader(e.to_string()))?;
    if header.encoding == Encoding::BinaryBigEndian {
        return Err(IoError::UnsupportedPlyVariant("binary_big_endian".into()));
    }
    let vertex = header
        .elements
        .get("vertex")
        .ok_or_else(|| IoError::MalformedHeader("no vertex element".into()))?;
    for axis in ["x", "y", "z"] {
        match vertex.properties.get(axis) {
            Some(p) if matches!(p.data_type, PropertyType::Scalar(_)) => {}
            Some(_) => {
                return Err(IoError::MalformedHeader(format!("property {axis} is a list")))
            }
            None => return Err(IoError::MalformedHeader(format!("missing property {axis}"))),
        }
    }
    let payload = parser
        .read_payload(&mut reader, &header)
        .map_err(|e| IoError::MalformedPayload(e.to_string()))?;
    let points = payload
        .get("vertex")
        .map(|vs| vs.iter().map(|v| v.0).collect())
        .unwrap_or_default();
    Ok(RawPointCloud {
        points,
        bitdepth: parse_declared_depth(&header.comments),
    })
}

/// Writes an ascii PLY with integer `x y z` vertices in scan order. The
/// bit depth is recorded as a `bitdepth N` comment.
pub fn write_ply(vs: &VoxelSet, path: impl AsRef<Path>) -> Result<(), IoError> {
    let mut ply = Ply::<DefaultElement>::new();
    ply.header.encoding = Encoding::Ascii;
    ply.header.comments.push(format!("bitdepth {}", vs.bitdepth()));
    let mut element = ElementDef::new("vertex".to_string());
    for axis in ["x", "y", "z"] {
        element.properties.add(PropertyDef::new(
            axis.to_string(),
            PropertyType::Scalar(ScalarType::Int),
        ));
    }
    ply.header.elements.add(element);
    let vertices = vs
        .iter()
        .map(|v| {
            let mut e = DefaultElement::new();
            e.insert("x".to_string(), Property::Int(v.x as i32));
            e.insert("y".to_string(), Property::Int(v.y as i32));
            e.insert("z".to_string(), Property::Int(v.z as i32));
            e
        })
        .collect();
    ply.payload.insert("vertex".to_string(), vertices);
    let mut out = BufWriter::new(File::create(path)?);
    Writer::new()
        .write_ply(&mut out, &mut ply)
        .map_err(IoError::IoFailure)?;
    out.flush()?;
    Ok(())
}

fn is_nonneg_integer(v: f64) -> bool {
    v >= 0.0 && v.fract() == 0.0 && v < (1u64 << 32) as f64
}

/// Smallest depth (at least 2) whose grid holds `max`.
fn depth_covering(max: u64) -> u8 {
    let bits = (64 - max.leading_zeros()) as u8;
    bits.max(MIN_BITDEPTH)
}

/// Maps a raw cloud onto the `2^target` grid.
///
/// Nonnegative integer clouds keep their grid: with source depth `s` (the
/// declared depth, or the smallest one covering the largest coordinate),
/// coordinates are unchanged when `s <= target` and shifted right by
/// `s - target` otherwise, which is the octree's own floor-halving.
///
/// Other clouds are scaled uniformly on all axes:
/// `v' = floor((v - min) * (2^target - 1) / extent)` with `extent` the
/// largest per-axis span, so the longest axis fills the grid.
pub fn requantize(pc: &RawPointCloud, target: u8) -> Result<VoxelSet, IoError> {
    if !(MIN_BITDEPTH..=MAX_BITDEPTH).contains(&target) {
        return Err(GeometryError::BitdepthUnsupported(target).into());
    }
    if pc.is_empty() {
        return Err(IoError::EmptyCloud);
    }
    if pc.points.iter().flatten().all(|&v| is_nonneg_integer(v)) {
        let max = pc.points.iter().flatten().fold(0.0f64, |m, &v| m.max(v)) as u64;
        let covering = depth_covering(max);
        let source = pc.bitdepth.map_or(covering, |d| d.max(covering));
        let shift = source.saturating_sub(target);
        let pts = pc
            .points
            .iter()
            .map(|p| p.map(|v| (v as i64) >> shift));
        return Ok(VoxelSet::voxelize(pts, target)?);
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &pc.points {
        for a in 0..3 {
            if !p[a].is_finite() {
                return Err(IoError::MalformedPayload("non-finite coordinate".into()));
            }
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    if extent <= 0.0 {
        return Err(IoError::DegenerateExtent);
    }
    let top = ((1u32 << target) - 1) as f64;
    let pts = pc.points.iter().map(|p| {
        let mut q = [0i64; 3];
        for a in 0..3 {
            q[a] = (((p[a] - lo[a]) * top / extent).floor() as i64).clamp(0, top as i64);
        }
        q
    });
    Ok(VoxelSet::voxelize(pts, target)?)
}
