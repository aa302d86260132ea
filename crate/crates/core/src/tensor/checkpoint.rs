//! Flat binary archive of named parameters plus optional optimizer state.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic     8 bytes  "TSCKPT\0\0"
//! version   u32
//! width     u8       bytes per stored value (8 = f64, 4 = f32)
//! metadata  u32 count, then (string key, string value) pairs
//! params    u32 count, then per entry:
//!             string name, u8 trainable, u32 ndim, u64 dims[ndim], values
//! optimizer u8 present; when 1:
//!             u64 step, f64 lr, f64 beta1, f64 beta2, f64 eps,
//!             u32 count, then (string name, u64 len, first[len], second[len])
//! ```
//!
//! Strings are a u32 byte length followed by UTF-8 bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::optim::Moments;
use super::{Adam, AdamConfig, Parameter, Real, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"TSCKPT\0\0";
const VALUE_WIDTH: u8 = std::mem::size_of::<Real>() as u8;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub params: Vec<Parameter>,
    pub optimizer: Option<Adam>,
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_u32::<LE>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = r.read_u32::<LE>()? as usize;
    if len > 1 << 24 {
        return Err(Error::format(format!(
            "checkpoint string length {len} is implausible"
        )));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::format("checkpoint string is not UTF-8"))
}

fn write_values<W: Write>(w: &mut W, v: &[Real]) -> std::io::Result<()> {
    for &x in v {
        #[cfg(not(feature = "single-precision"))]
        w.write_f64::<LE>(x)?;
        #[cfg(feature = "single-precision")]
        w.write_f32::<LE>(x)?;
    }
    Ok(())
}

fn read_values<R: Read>(r: &mut R, n: usize, width: u8) -> Result<Vec<Real>> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let v = match width {
            8 => r.read_f64::<LE>()? as Real,
            4 => r.read_f32::<LE>()? as Real,
            other => return Err(Error::format(format!("unsupported value width {other}"))),
        };
        out.push(v);
    }
    Ok(out)
}

impl Checkpoint {
    pub fn new(params: Vec<Parameter>) -> Self {
        Checkpoint {
            metadata: BTreeMap::new(),
            params,
            optimizer: None,
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LE>(CHECKPOINT_VERSION)?;
        w.write_u8(VALUE_WIDTH)?;
        w.write_u32::<LE>(self.metadata.len() as u32)?;
        for (k, v) in &self.metadata {
            write_str(w, k)?;
            write_str(w, v)?;
        }
        w.write_u32::<LE>(self.params.len() as u32)?;
        for p in &self.params {
            write_str(w, &p.name)?;
            w.write_u8(p.trainable as u8)?;
            let shape = p.tensor.shape();
            w.write_u32::<LE>(shape.len() as u32)?;
            for &d in shape {
                w.write_u64::<LE>(d as u64)?;
            }
            write_values(w, p.tensor.values())?;
        }
        match &self.optimizer {
            None => w.write_u8(0)?,
            Some(opt) => {
                w.write_u8(1)?;
                w.write_u64::<LE>(opt.step_count())?;
                let c = opt.config;
                for x in [c.lr, c.beta1, c.beta2, c.eps] {
                    w.write_f64::<LE>(x)?;
                }
                w.write_u32::<LE>(opt.moments.len() as u32)?;
                for (name, m) in &opt.moments {
                    write_str(w, name)?;
                    w.write_u64::<LE>(m.first.len() as u64)?;
                    write_values(w, &m.first)?;
                    write_values(w, &m.second)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::format("checkpoint header is truncated"))?;
        if &magic != MAGIC {
            return Err(Error::format("not a checkpoint archive"));
        }
        let version = r.read_u32::<LE>()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!(
                "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let width = r.read_u8()?;
        let mut metadata = BTreeMap::new();
        for _ in 0..r.read_u32::<LE>()? {
            let k = read_str(r)?;
            let v = read_str(r)?;
            metadata.insert(k, v);
        }
        let count = r.read_u32::<LE>()?;
        let mut params = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name = read_str(r)?;
            let trainable = r.read_u8()? != 0;
            let ndim = r.read_u32::<LE>()? as usize;
            if ndim == 0 || ndim > 8 {
                return Err(Error::format(format!("parameter {name} has rank {ndim}")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.read_u64::<LE>()? as usize);
            }
            let n: usize = shape.iter().product();
            let values = read_values(r, n, width)?;
            params.push(Parameter {
                name,
                tensor: Tensor::parameter(&shape, values)?,
                trainable,
            });
        }
        let optimizer = match r.read_u8()? {
            0 => None,
            1 => {
                let step = r.read_u64::<LE>()?;
                let config = AdamConfig {
                    lr: r.read_f64::<LE>()?,
                    beta1: r.read_f64::<LE>()?,
                    beta2: r.read_f64::<LE>()?,
                    eps: r.read_f64::<LE>()?,
                };
                let mut moments = BTreeMap::new();
                for _ in 0..r.read_u32::<LE>()? {
                    let name = read_str(r)?;
                    let len = r.read_u64::<LE>()? as usize;
                    let first = read_values(r, len, width)?;
                    let second = read_values(r, len, width)?;
                    moments.insert(name, Moments { first, second });
                }
                Some(Adam::restore(config, step, moments))
            }
            other => return Err(Error::format(format!("bad optimizer flag {other}"))),
        };
        Ok(Checkpoint {
            metadata,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file)).map_err(|e| match e {
            Error::RawIo(io) => Error::io(path, io),
            other => other,
        })
    }
}
