//! The `MSLTW` weight file format.
//!
//! ```text
//! magic      6 bytes  "MSLTW\0"
//! version    u32
//! variant    u8       0 mslt, 1 mslt+, 2 mslt++, 3 channel-mlp
//! config     4 × u8   levels, cfd count, pooling (0 gap, 1 gsp, 2 gap+gsp), hf_shared
//! count      u32      number of tensor records
//! records    name length u16, UTF-8 name, rank u8, dims u32 × rank,
//!            payload f32 × product(dims)
//! ```
//!
//! Integers and floats are little-endian. Records appear in the canonical
//! parameter order of the variant.

use std::fs;
use std::path::Path;

use crate::bgnet::PoolingMode;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, Variant};
use crate::params::{ParamRef, Params};

pub const WEIGHTS_MAGIC: &[u8; 6] = b"MSLTW\0";
pub const WEIGHTS_VERSION: u32 = 1;

pub(crate) fn write_header(buf: &mut Vec<u8>, magic: &[u8; 6], variant: Variant, config: &ModelConfig) {
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    buf.push(variant.code());
    buf.push(config.levels as u8);
    buf.push(config.cfd_count as u8);
    buf.push(config.pooling.code());
    buf.push(config.hf_shared as u8);
}

/// Writes the record count followed by one record per tensor, each name
/// prefixed with `prefix`.
pub(crate) fn write_records(buf: &mut Vec<u8>, groups: &[(&str, Vec<ParamRef<'_>>)]) {
    let count: usize = groups.iter().map(|(_, t)| t.len()).sum();
    buf.extend_from_slice(&(count as u32).to_le_bytes());
    for (prefix, tensors) in groups {
        for t in tensors {
            let name = format!("{prefix}{}", t.name);
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(t.dims.len() as u8);
            for &d in &t.dims {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

/// Bounds-checked little-endian reader.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(Error::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Malformed(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Parses magic, version, variant and config.
pub(crate) fn read_header(r: &mut Reader<'_>, magic: &[u8; 6]) -> Result<(Variant, ModelConfig)> {
    let avail = r.bytes.len().min(magic.len());
    if r.bytes[..avail] != magic[..avail] {
        return Err(Error::BadMagic);
    }
    r.take(magic.len())?;
    let version = r.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let code = r.u8()?;
    let variant = Variant::from_code(code)
        .ok_or_else(|| Error::Malformed(format!("unknown variant code {code}")))?;
    let levels = r.u8()? as usize;
    let cfd_count = r.u8()? as usize;
    let pcode = r.u8()?;
    let pooling = PoolingMode::from_code(pcode)
        .ok_or_else(|| Error::Malformed(format!("unknown pooling code {pcode}")))?;
    let hf_shared = match r.u8()? {
        0 => false,
        1 => true,
        v => return Err(Error::Malformed(format!("bad hf_shared flag {v}"))),
    };
    let config = ModelConfig {
        levels,
        cfd_count,
        pooling,
        hf_shared,
    };
    config
        .validate()
        .map_err(|e| Error::Malformed(e.to_string()))?;
    Ok((variant, config))
}

/// Reads the record count and fills each target tensor in order, checking
/// names (with `prefix`) and shapes.
pub(crate) fn read_records(r: &mut Reader<'_>, targets: &mut [(&str, &mut dyn Params)]) -> Result<()> {
    let count = r.u32()? as usize;
    let expected: usize = targets.iter().map(|(_, p)| p.tensors().len()).sum();
    if count != expected {
        return Err(Error::Malformed(format!(
            "file holds {count} tensors, expected {expected}"
        )));
    }
    for (prefix, p) in targets.iter_mut() {
        for t in p.tensors_mut() {
            let want = format!("{prefix}{}", t.name);
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?;
            if name != want {
                return Err(Error::Malformed(format!(
                    "unexpected tensor `{name}`, expected `{want}`"
                )));
            }
            let rank = r.u8()? as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if dims != t.dims {
                return Err(Error::ShapeMismatch {
                    name: want,
                    expected: t.dims.clone(),
                    found: dims,
                });
            }
            let payload = r.take(t.data.len() * 4)?;
            for (v, b) in t.data.iter_mut().zip(payload.chunks_exact(4)) {
                *v = f32::from_le_bytes(b.try_into().expect("4 bytes"));
            }
        }
    }
    Ok(())
}

/// Serialises parameters to bytes.
pub fn to_bytes(mp: &ModelParams) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64 + mp.param_count() * 4);
    write_header(&mut buf, WEIGHTS_MAGIC, mp.variant, &mp.config);
    write_records(&mut buf, &[("", mp.tensors())]);
    buf
}

/// Parses a weight file image.
pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader::new(bytes);
    let (variant, config) = read_header(&mut r, WEIGHTS_MAGIC)?;
    let mut mp = ModelParams::zeros(variant, config)?;
    read_records(&mut r, &mut [("", &mut mp)])?;
    r.finish()?;
    Ok(mp)
}

pub fn save_weights(mp: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(mp))
        .map_err(|e| Error::io(format!("writing weights `{}`", path.display()), e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes =
        fs::read(path).map_err(|e| Error::io(format!("reading weights `{}`", path.display()), e))?;
    from_bytes(&bytes)
}

/// Loads weights and insists they belong to `variant`.
pub fn load_weights_for(path: impl AsRef<Path>, variant: Variant) -> Result<ModelParams> {
    let mp = load_weights(path)?;
    if mp.variant != variant {
        return Err(Error::VariantMismatch {
            expected: variant,
            found: mp.variant,
        });
    }
    Ok(mp)
}
