//! Versioned little-endian raw grid format.
//!
//! ```text
//! magic       8 bytes  "TSRAW\0\0\0"
//! version     u32      (1)
//! dtype       u8       1 = u8 labels, 3 = f32 intensities
//! dims        3 × u64  (D, H, W)
//! spacing     3 × f64  (z, y, x) mm
//! provenance  u32 length + UTF-8 bytes
//! payload     D·H·W values, little-endian
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::{voxel_count, Dims, Mask, Spacing, Volume};
use crate::error::{Error, Result};

pub const RAW_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"TSRAW\0\0\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum RawDtype {
    U8 = 1,
    F32 = 3,
}

impl RawDtype {
    fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(RawDtype::U8),
            3 => Ok(RawDtype::F32),
            other => Err(Error::format(format!(
                "raw dtype code {other} is not supported"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawHeader {
    pub dtype: RawDtype,
    pub dims: Dims,
    pub spacing: Spacing,
    pub provenance: String,
}

fn write_header<W: Write>(w: &mut W, h: &RawHeader) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(RAW_VERSION)?;
    w.write_u8(h.dtype as u8)?;
    for d in h.dims {
        w.write_u64::<LE>(d as u64)?;
    }
    for s in h.spacing {
        w.write_f64::<LE>(s)?;
    }
    w.write_u32::<LE>(h.provenance.len() as u32)?;
    w.write_all(h.provenance.as_bytes())
}

fn read_header<R: Read>(r: &mut R) -> Result<RawHeader> {
    let truncated = |_| Error::format("raw header is truncated");
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::format("raw header magic mismatch"));
    }
    let version = r.read_u32::<LE>().map_err(truncated)?;
    if version != RAW_VERSION {
        return Err(Error::format(format!(
            "raw version {version} is not supported (expected {RAW_VERSION})"
        )));
    }
    let dtype = RawDtype::from_code(r.read_u8().map_err(truncated)?)?;
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = r.read_u64::<LE>().map_err(truncated)? as usize;
    }
    let mut spacing = [0f64; 3];
    for s in &mut spacing {
        *s = r.read_f64::<LE>().map_err(truncated)?;
    }
    let len = r.read_u32::<LE>().map_err(truncated)? as usize;
    if len > 1 << 20 {
        return Err(Error::format("raw provenance field is implausibly long"));
    }
    let mut prov = vec![0u8; len];
    r.read_exact(&mut prov).map_err(truncated)?;
    let provenance =
        String::from_utf8(prov).map_err(|_| Error::format("raw provenance is not UTF-8"))?;
    Ok(RawHeader {
        dtype,
        dims,
        spacing,
        provenance,
    })
}

pub fn encode_volume(v: &Volume) -> Result<Vec<u8>> {
    v.validate()?;
    let mut buf = Vec::with_capacity(64 + v.values.len() * 4);
    write_header(
        &mut buf,
        &RawHeader {
            dtype: RawDtype::F32,
            dims: v.dims,
            spacing: v.spacing,
            provenance: v.provenance.clone(),
        },
    )?;
    for &x in &v.values {
        buf.write_f32::<LE>(x)?;
    }
    Ok(buf)
}

pub fn encode_mask(m: &Mask, provenance: &str) -> Result<Vec<u8>> {
    m.validate()?;
    let mut buf = Vec::with_capacity(64 + m.labels.len());
    write_header(
        &mut buf,
        &RawHeader {
            dtype: RawDtype::U8,
            dims: m.dims,
            spacing: m.spacing,
            provenance: provenance.to_string(),
        },
    )?;
    buf.extend_from_slice(&m.labels);
    Ok(buf)
}

fn payload<'a>(bytes: &'a [u8], header: &RawHeader, width: usize) -> Result<&'a [u8]> {
    let n = voxel_count(header.dims);
    if bytes.len() != n * width {
        return Err(Error::format(format!(
            "raw payload holds {} bytes but dims {:?} need {}",
            bytes.len(),
            header.dims,
            n * width
        )));
    }
    Ok(bytes)
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let mut r = bytes;
    let header = read_header(&mut r)?;
    if header.dtype != RawDtype::F32 {
        return Err(Error::format(format!(
            "expected an f32 volume, found {:?}",
            header.dtype
        )));
    }
    let data = payload(r, &header, 4)?;
    let values = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Volume::new(header.dims, header.spacing, values)?.with_provenance(header.provenance))
}

/// Returns the mask and its provenance string.
pub fn decode_mask(bytes: &[u8]) -> Result<(Mask, String)> {
    let mut r = bytes;
    let header = read_header(&mut r)?;
    if header.dtype != RawDtype::U8 {
        return Err(Error::format(format!(
            "expected a u8 mask, found {:?}",
            header.dtype
        )));
    }
    let data = payload(r, &header, 1)?;
    Ok((
        Mask::new(header.dims, header.spacing, data.to_vec())?,
        header.provenance,
    ))
}

pub fn read_header_bytes(bytes: &[u8]) -> Result<RawHeader> {
    read_header(&mut &bytes[..])
}

pub fn write_volume(v: &Volume, path: &Path) -> Result<()> {
    let bytes = encode_volume(v)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_mask(m: &Mask, provenance: &str, path: &Path) -> Result<()> {
    let bytes = encode_mask(m, provenance)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    decode_volume(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    Ok(decode_mask(&fs::read(path).map_err(|e| Error::io(path, e))?)?.0)
}
