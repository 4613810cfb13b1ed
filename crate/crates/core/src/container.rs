//! Binary containers and JSON sidecars.
//!
//! Frame container layout (little-endian):
//!
//! ```text
//! magic    b"DEAP"
//! version  u16
//! nx, ny   u32, u32
//! n_frames u32
//! dt_ms    f32
//! dx_mm    f32
//! payload  n_frames * ny * nx f32, row-major per frame
//! ```
//!
//! Electrogram recordings reuse the same layout with `nx = n_samples`,
//! `ny = n_channels`, `n_frames = 1`, so the payload is channel-major.
//!
//! Weight archives use magic `b"DEAW"` followed by named `f64` blobs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{DeapError, Result};

pub const FRAME_MAGIC: [u8; 4] = *b"DEAP";
pub const WEIGHT_MAGIC: [u8; 4] = *b"DEAW";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameHeader {
    pub nx: u32,
    pub ny: u32,
    pub n_frames: u32,
    pub dt_ms: f32,
    pub dx_mm: f32,
}

impl FrameHeader {
    pub fn n_values(&self) -> usize {
        self.nx as usize * self.ny as usize * self.n_frames as usize
    }
}

pub fn write_frames<W: Write>(mut w: W, header: &FrameHeader, data: &[f32]) -> std::io::Result<()> {
    if data.len() != header.n_values() {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidInput,
            format!("payload has {} values, header declares {}", data.len(), header.n_values()),
        ));
    }
    w.write_all(&FRAME_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&header.nx.to_le_bytes())?;
    w.write_all(&header.ny.to_le_bytes())?;
    w.write_all(&header.n_frames.to_le_bytes())?;
    w.write_all(&header.dt_ms.to_le_bytes())?;
    w.write_all(&header.dx_mm.to_le_bytes())?;
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> std::io::Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn format_err(context: &str, reason: impl Into<String>) -> DeapError {
    DeapError::Format {
        context: context.to_string(),
        reason: reason.into(),
    }
}

pub fn read_frames<R: Read>(mut r: R, context: &str) -> Result<(FrameHeader, Vec<f32>)> {
    let io = |e: std::io::Error| format_err(context, e.to_string());
    let magic: [u8; 4] = read_array(&mut r).map_err(io)?;
    if magic != FRAME_MAGIC {
        return Err(format_err(context, format!("bad magic {magic:?}")));
    }
    let version = u16::from_le_bytes(read_array(&mut r).map_err(io)?);
    if version != FORMAT_VERSION {
        return Err(format_err(context, format!("unsupported version {version}")));
    }
    let header = FrameHeader {
        nx: u32::from_le_bytes(read_array(&mut r).map_err(io)?),
        ny: u32::from_le_bytes(read_array(&mut r).map_err(io)?),
        n_frames: u32::from_le_bytes(read_array(&mut r).map_err(io)?),
        dt_ms: f32::from_le_bytes(read_array(&mut r).map_err(io)?),
        dx_mm: f32::from_le_bytes(read_array(&mut r).map_err(io)?),
    };
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(io)?;
    if bytes.len() != header.n_values() * 4 {
        return Err(format_err(
            context,
            format!("payload is {} bytes, header declares {}", bytes.len(), header.n_values() * 4),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((header, data))
}

pub fn save_frames(path: &Path, header: &FrameHeader, data: &[f32]) -> Result<()> {
    let f = File::create(path).map_err(|e| DeapError::io(path, e))?;
    write_frames(BufWriter::new(f), header, data).map_err(|e| DeapError::io(path, e))
}

pub fn load_frames(path: &Path) -> Result<(FrameHeader, Vec<f32>)> {
    let f = File::open(path).map_err(|e| DeapError::io(path, e))?;
    read_frames(BufReader::new(f), &path.display().to_string())
}

/// Named `f64` blobs, written in the given order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightArchive {
    pub blobs: Vec<(String, Vec<f64>)>,
}

impl WeightArchive {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.blobs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(&WEIGHT_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.blobs.len() as u32).to_le_bytes())?;
        for (name, values) in &self.blobs {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(values.len() as u64).to_le_bytes())?;
            for v in values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn read<R: Read>(mut r: R, context: &str) -> Result<Self> {
        let io = |e: std::io::Error| format_err(context, e.to_string());
        let magic: [u8; 4] = read_array(&mut r).map_err(io)?;
        if magic != WEIGHT_MAGIC {
            return Err(format_err(context, format!("bad magic {magic:?}")));
        }
        let version = u16::from_le_bytes(read_array(&mut r).map_err(io)?);
        if version != FORMAT_VERSION {
            return Err(format_err(context, format!("unsupported version {version}")));
        }
        let n = u32::from_le_bytes(read_array(&mut r).map_err(io)?) as usize;
        let mut blobs = Vec::with_capacity(n);
        for _ in 0..n {
            let len = u16::from_le_bytes(read_array(&mut r).map_err(io)?) as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(io)?;
            let name = String::from_utf8(name).map_err(|e| format_err(context, e.to_string()))?;
            let count = u64::from_le_bytes(read_array(&mut r).map_err(io)?) as usize;
            let mut bytes = vec![0u8; count * 8];
            r.read_exact(&mut bytes).map_err(io)?;
            let values = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            blobs.push((name, values));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(io)? != 0 {
            return Err(format_err(context, "trailing bytes after last blob"));
        }
        Ok(WeightArchive { blobs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| DeapError::io(path, e))?;
        self.write(BufWriter::new(f)).map_err(|e| DeapError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| DeapError::io(path, e))?;
        Self::read(BufReader::new(f), &path.display().to_string())
    }
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path).map_err(|e| DeapError::io(path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| DeapError::io(path, e))?;
    w.flush().map_err(|e| DeapError::io(path, e))
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| DeapError::io(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}
