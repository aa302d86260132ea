//! Read-only NIfTI-1 single-file (`.nii`, optionally gzipped) ingestion.
//!
//! Supported datatypes: uint8 (2), int16 (4), float32 (16). Both byte
//! orders are accepted. Orientation (qform/sform) is ignored; a warning is
//! logged when either is set.

use std::io::Read;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;

use super::{Mask, Volume, LABEL_TUMOR};
use crate::error::{Error, Result};

pub const HEADER_SIZE: usize = 348;

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;

#[derive(Debug, Clone)]
pub struct NiftiImage {
    pub volume: Volume,
    /// Present when the payload is integer-typed, unscaled, and every value
    /// is a valid label.
    pub labels: Option<Mask>,
}

struct Header {
    dims: [usize; 3],
    datatype: i16,
    pixdim: [f32; 3],
    vox_offset: usize,
    slope: f32,
    inter: f32,
    oriented: bool,
}

fn parse_header<B: ByteOrder>(h: &[u8]) -> Result<Header> {
    let dim: Vec<i16> = (0..8).map(|i| B::read_i16(&h[40 + 2 * i..])).collect();
    let ndim = dim[0];
    if !(3..=7).contains(&ndim) {
        return Err(Error::format(format!(
            "NIfTI dim[0] = {ndim}; a 3-D image is required"
        )));
    }
    if dim[1..4].iter().any(|&d| d <= 0) {
        return Err(Error::format(format!(
            "NIfTI spatial dims {:?} must be positive",
            &dim[1..4]
        )));
    }
    if dim[4..=ndim as usize].iter().any(|&d| d > 1) {
        return Err(Error::format(format!(
            "NIfTI image has extra non-singleton dims {:?}",
            &dim[4..=ndim as usize]
        )));
    }
    let pix: Vec<f32> = (0..8).map(|i| B::read_f32(&h[76 + 4 * i..])).collect();
    let vox_offset = B::read_f32(&h[108..]);
    if !(vox_offset >= HEADER_SIZE as f32) {
        return Err(Error::format(format!(
            "NIfTI vox_offset {vox_offset} is invalid"
        )));
    }
    Ok(Header {
        dims: [dim[3] as usize, dim[2] as usize, dim[1] as usize],
        datatype: B::read_i16(&h[70..]),
        pixdim: [pix[3].abs(), pix[2].abs(), pix[1].abs()],
        vox_offset: vox_offset as usize,
        slope: B::read_f32(&h[112..]),
        inter: B::read_f32(&h[116..]),
        oriented: B::read_i16(&h[252..]) != 0 || B::read_i16(&h[254..]) != 0,
    })
}

fn decode_values<B: ByteOrder>(data: &[u8], datatype: i16, n: usize) -> Result<Vec<f32>> {
    let width = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => {
            return Err(Error::format(format!(
                "NIfTI datatype code {other} is not supported (uint8, int16, float32 only)"
            )))
        }
    };
    if data.len() < n * width {
        return Err(Error::format(format!(
            "NIfTI data section is truncated: {} bytes for {n} voxels of {width} bytes",
            data.len()
        )));
    }
    let data = &data[..n * width];
    Ok(match datatype {
        DT_UINT8 => data.iter().map(|&b| b as f32).collect(),
        DT_INT16 => data
            .chunks_exact(2)
            .map(|c| B::read_i16(c) as f32)
            .collect(),
        _ => data.chunks_exact(4).map(B::read_f32).collect(),
    })
}

/// Parses a NIfTI-1 single-file image from memory. Gzip-wrapped input is
/// detected by its magic bytes.
pub fn read_nifti_bytes(bytes: &[u8]) -> Result<NiftiImage> {
    let owned;
    let bytes = if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        let mut buf = Vec::new();
        GzDecoder::new(bytes)
            .read_to_end(&mut buf)
            .map_err(|e| Error::format(format!("gzip stream is corrupt: {e}")))?;
        owned = buf;
        &owned[..]
    } else {
        bytes
    };
    if bytes.len() < HEADER_SIZE {
        return Err(Error::format(format!(
            "not NIfTI-1: {} bytes is shorter than the 348-byte header",
            bytes.len()
        )));
    }
    let magic = &bytes[344..348];
    if magic == b"ni1\0" {
        return Err(Error::format(
            "two-file NIfTI-1 (.hdr/.img, magic \"ni1\") is not supported",
        ));
    }
    if magic != b"n+1\0" {
        return Err(Error::format("not NIfTI-1: magic is not \"n+1\""));
    }
    let header = if LittleEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        parse_header::<LittleEndian>(&bytes[..HEADER_SIZE])?
    } else if BigEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        parse_header::<BigEndian>(&bytes[..HEADER_SIZE])?
    } else {
        return Err(Error::format("not NIfTI-1: sizeof_hdr is not 348"));
    };
    let little = LittleEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32;
    if header.oriented {
        log::warn!("NIfTI qform/sform orientation is ignored");
    }
    if bytes.len() < header.vox_offset {
        return Err(Error::format(
            "NIfTI data section is truncated before vox_offset",
        ));
    }
    let n: usize = header.dims.iter().product();
    let data = &bytes[header.vox_offset..];
    let raw = if little {
        decode_values::<LittleEndian>(data, header.datatype, n)?
    } else {
        decode_values::<BigEndian>(data, header.datatype, n)?
    };

    let scaled = header.slope != 0.0 && !(header.slope == 1.0 && header.inter == 0.0);
    let values: Vec<f32> = if scaled {
        raw.iter()
            .map(|&v| header.slope * v + header.inter)
            .collect()
    } else {
        raw
    };

    let spacing = header.pixdim.map(|p| if p > 0.0 { p as f64 } else { 1.0 });
    let integer = matches!(header.datatype, DT_UINT8 | DT_INT16);
    let labels = if integer
        && !scaled
        && values
            .iter()
            .all(|&v| (0.0..=LABEL_TUMOR as f32).contains(&v))
    {
        Some(Mask::new(
            header.dims,
            spacing,
            values.iter().map(|&v| v as u8).collect(),
        )?)
    } else {
        None
    };
    let volume = Volume::new(header.dims, spacing, values)?.with_provenance("nifti");
    Ok(NiftiImage { volume, labels })
}

pub fn read_nifti(path: &Path) -> Result<NiftiImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut img = read_nifti_bytes(&bytes)?;
    img.volume.provenance = format!("nifti:{}", path.display());
    Ok(img)
}

#[cfg(test)]
pub(crate) mod fixture {
    //! Hand-assembled NIfTI-1 files for tests.
    use byteorder::{LittleEndian as LE, WriteBytesExt};

    pub struct Spec {
        pub dims: [i16; 3],
        pub datatype: i16,
        pub pixdim: [f32; 3],
        pub slope: f32,
        pub inter: f32,
        pub magic: [u8; 4],
    }

    pub fn build(spec: &Spec, payload: &[u8]) -> Vec<u8> {
        let mut h = vec![0u8; 352];
        h[0..4].copy_from_slice(&348i32.to_le_bytes());
        let dim = [3i16, spec.dims[0], spec.dims[1], spec.dims[2], 1, 1, 1, 1];
        for (i, d) in dim.iter().enumerate() {
            h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
        }
        h[70..72].copy_from_slice(&spec.datatype.to_le_bytes());
        let bitpix: i16 = match spec.datatype {
            2 => 8,
            4 => 16,
            _ => 32,
        };
        h[72..74].copy_from_slice(&bitpix.to_le_bytes());
        let pix = [
            1.0f32,
            spec.pixdim[0],
            spec.pixdim[1],
            spec.pixdim[2],
            0.0,
            0.0,
            0.0,
            0.0,
        ];
        for (i, p) in pix.iter().enumerate() {
            h[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_le_bytes());
        }
        h[108..112].copy_from_slice(&352f32.to_le_bytes());
        h[112..116].copy_from_slice(&spec.slope.to_le_bytes());
        h[116..120].copy_from_slice(&spec.inter.to_le_bytes());
        h[344..348].copy_from_slice(&spec.magic);
        h.extend_from_slice(payload);
        h
    }

    pub fn f32_payload(v: &[f32]) -> Vec<u8> {
        let mut out = Vec::new();
        for &x in v {
            out.write_f32::<LE>(x).unwrap();
        }
        out
    }

    pub fn i16_payload(v: &[i16]) -> Vec<u8> {
        let mut out = Vec::new();
        for &x in v {
            out.write_i16::<LE>(x).unwrap();
        }
        out
    }
}
