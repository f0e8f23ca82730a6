//! File formats: `.dhpc` binary point clouds, `.xyz` text clouds, and the
//! `DHMD` model checkpoint holding named parameter blocks with a trailing
//! CRC32. Coordinates and parameters are stored as little-endian f32.

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::net::params::{collect, ParamSet};
use crate::scalar::Real;
use ndarray::{ArrayD, IxDyn};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const CLOUD_MAGIC: &[u8; 4] = b"DHPC";
const MODEL_MAGIC: &[u8; 4] = b"DHMD";
pub const CLOUD_VERSION: u16 = 1;
pub const MODEL_VERSION: u16 = 1;

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::io(path.display().to_string(), e)
}

fn parse_err(path: &Path, offset: u64, detail: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        offset,
        detail: detail.into(),
    }
}

/// Cursor over an in-memory file that tracks the byte offset for errors.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(parse_err(
                self.path,
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Writes a cloud as `.dhpc`. Coordinates are quantized to f32.
pub fn write_dhpc(path: &Path, cloud: &PointCloud) -> Result<()> {
    let n = u32::try_from(cloud.len())
        .map_err(|_| Error::invalid("cloud too large for the .dhpc format"))?;
    let mut buf = Vec::with_capacity(10 + cloud.len() * 12);
    buf.extend_from_slice(CLOUD_MAGIC);
    buf.extend_from_slice(&CLOUD_VERSION.to_le_bytes());
    buf.extend_from_slice(&n.to_le_bytes());
    for p in &cloud.points {
        for c in p {
            buf.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| io_err(path, e))
}

pub fn read_dhpc(path: &Path) -> Result<PointCloud> {
    let data = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let mut r = Reader {
        buf: &data,
        pos: 0,
        path,
    };
    let magic = r.take(4, "magic")?;
    if magic != CLOUD_MAGIC {
        return Err(parse_err(path, 0, "bad magic, expected DHPC"));
    }
    let version = r.u16("version")?;
    if version != CLOUD_VERSION {
        return Err(parse_err(path, 4, format!("unsupported version {version}")));
    }
    let count = r.u32("point count")? as usize;
    let mut points = Vec::with_capacity(count);
    for i in 0..count {
        let mut p = [0.0f64; 3];
        for (a, c) in p.iter_mut().enumerate() {
            *c = r.f32(&format!("point {i} axis {a}"))? as f64;
        }
        points.push(p);
    }
    if r.pos != data.len() {
        return Err(parse_err(
            path,
            r.pos as u64,
            format!("{} trailing bytes after declared payload", data.len() - r.pos),
        ));
    }
    PointCloud::new(points)
}

/// Writes a cloud as text, one `x y z` triple per line.
pub fn write_xyz(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = String::new();
    for p in &cloud.points {
        out.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    f.write_all(out.as_bytes()).map_err(|e| io_err(path, e))
}

pub fn read_xyz(path: &Path) -> Result<PointCloud> {
    let mut text = String::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| io_err(path, e))?;
    let mut points = Vec::new();
    let mut offset = 0u64;
    for (lineno, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            let coords: Vec<&str> = trimmed.split_whitespace().collect();
            if coords.len() != 3 {
                return Err(parse_err(
                    path,
                    offset,
                    format!("line {}: expected 3 coordinates, got {}", lineno + 1, coords.len()),
                ));
            }
            let mut p = [0.0f64; 3];
            for (c, s) in p.iter_mut().zip(&coords) {
                *c = s.parse().map_err(|_| {
                    parse_err(
                        path,
                        offset,
                        format!("line {}: bad number {s:?}", lineno + 1),
                    )
                })?;
            }
            points.push(p);
        }
        offset += line.len() as u64 + 1;
    }
    PointCloud::new(points)
}

/// Reads either cloud format based on the file extension.
pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("dhpc") => read_dhpc(path),
        Some("xyz") => read_xyz(path),
        other => Err(Error::invalid(format!(
            "unknown cloud extension {other:?}; expected .dhpc or .xyz"
        ))),
    }
}

/// Serializes every named parameter of a model into a `DHMD` checkpoint:
/// magic, version, block count, blocks (name, shape, f32 payload), CRC32 of
/// everything before the checksum.
pub fn write_model<S: Real>(path: &Path, model: &impl ParamSet<S>) -> Result<()> {
    let map = collect(model);
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    buf.extend_from_slice(&(map.len() as u32).to_le_bytes());
    for (name, arr) in &map {
        let bytes = name.as_bytes();
        buf.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(bytes);
        buf.extend_from_slice(&(arr.ndim() as u32).to_le_bytes());
        for d in arr.shape() {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in arr.iter() {
            buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    std::fs::write(path, buf).map_err(|e| io_err(path, e))
}

/// Reads a `DHMD` checkpoint into a name-keyed map of arrays.
pub fn read_model_blocks(path: &Path) -> Result<BTreeMap<String, ArrayD<f32>>> {
    let data = std::fs::read(path).map_err(|e| io_err(path, e))?;
    if data.len() < 4 + 2 + 4 + 4 {
        return Err(parse_err(path, 0, "file too short for a DHMD checkpoint"));
    }
    let (payload, crc_bytes) = data.split_at(data.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(parse_err(
            path,
            (data.len() - 4) as u64,
            format!("CRC mismatch: stored {stored:#010x}, computed {computed:#010x}"),
        ));
    }
    let mut r = Reader {
        buf: payload,
        pos: 0,
        path,
    };
    if r.take(4, "magic")? != MODEL_MAGIC {
        return Err(parse_err(path, 0, "bad magic, expected DHMD"));
    }
    let version = r.u16("version")?;
    if version != MODEL_VERSION {
        return Err(parse_err(path, 4, format!("unsupported version {version}")));
    }
    let count = r.u32("block count")? as usize;
    let mut map = BTreeMap::new();
    for b in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name_start = r.pos as u64;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| parse_err(path, name_start, format!("block {b}: name is not UTF-8")))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(parse_err(
                path,
                r.pos as u64 - 4,
                format!("block {name}: implausible rank {rank}"),
            ));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dimension")? as usize);
        }
        let len: usize = dims.iter().product();
        let mut values = Vec::with_capacity(len);
        for i in 0..len {
            values.push(r.f32(&format!("{name}[{i}]"))?);
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), values)
            .map_err(|e| parse_err(path, r.pos as u64, format!("block {name}: {e}")))?;
        if map.insert(name.clone(), arr).is_some() {
            return Err(parse_err(
                path,
                name_start,
                format!("duplicate parameter block {name}"),
            ));
        }
    }
    if r.pos != payload.len() {
        return Err(parse_err(
            path,
            r.pos as u64,
            "trailing bytes after the declared blocks",
        ));
    }
    Ok(map)
}

/// Loads a checkpoint into an existing model of matching architecture.
/// Every model parameter must be present with the right shape, and the file
/// must not carry extras.
pub fn load_model<S: Real>(path: &Path, model: &mut impl ParamSet<S>) -> Result<()> {
    let blocks = read_model_blocks(path)?;
    let mut used = 0usize;
    let mut problem: Option<String> = None;
    model.visit_mut("", &mut |name, mut view| {
        if problem.is_some() {
            return;
        }
        match blocks.get(name) {
            None => problem = Some(format!("checkpoint is missing parameter {name}")),
            Some(arr) if arr.shape() != view.shape() => {
                problem = Some(format!(
                    "parameter {name}: checkpoint shape {:?} vs model shape {:?}",
                    arr.shape(),
                    view.shape()
                ));
            }
            Some(arr) => {
                used += 1;
                for (dst, src) in view.iter_mut().zip(arr.iter()) {
                    *dst = S::from_f64_lossy(*src as f64);
                }
            }
        }
    });
    if let Some(p) = problem {
        return Err(Error::Config(p));
    }
    if used != blocks.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} blocks but the model consumed {used}",
            blocks.len()
        )));
    }
    Ok(())
}
