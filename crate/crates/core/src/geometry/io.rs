use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::PointCloud;
use crate::{Error, Result};

pub const APC_MAGIC: &[u8; 4] = b"APC1";

/// Writes `"APC1"`, a little-endian `u32` point count, then `n x 3`
/// little-endian `f32` coordinates.
pub fn write_apc(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_apc(cloud)).map_err(|e| Error::io(path, e))
}

pub fn read_apc(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_apc(&bytes)
}

pub(crate) fn encode_apc(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + cloud.len() * 12);
    out.extend_from_slice(APC_MAGIC);
    out.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    for v in cloud.to_flat_f32() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub(crate) fn decode_apc(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() < 8 || &bytes[..4] != APC_MAGIC {
        return Err(Error::format("point cloud file", "missing APC1 header"));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != n * 12 {
        return Err(Error::format(
            "point cloud file",
            format!("header declares {n} points but body holds {} bytes", body.len()),
        ));
    }
    let flat: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    PointCloud::from_flat(&flat)
}

/// One `x y z` triple per line.
pub fn write_xyz(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::with_capacity(cloud.len() * 32);
    for p in cloud.points() {
        text.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(text.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Reads whitespace-separated triples; blank lines and `#` comments are
/// skipped, extra columns (normals, colours) are ignored.
pub fn read_xyz(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut points = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let coords: Vec<f64> = line
            .split_whitespace()
            .take(3)
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format("xyz file", format!("line {}: {e}", lineno + 1)))?;
        if coords.len() != 3 {
            return Err(Error::format("xyz file", format!("line {} has fewer than 3 columns", lineno + 1)));
        }
        points.push([coords[0], coords[1], coords[2]]);
    }
    PointCloud::new(points)
}
