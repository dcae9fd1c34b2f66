//! Binary model container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "SFMF" | u32 version | u32 d | u32 n_layers | u32 n_hidden | u32 × n_hidden widths
//! per layer:   u32 × d order | u64 mask seed | u64 n_params | f64 × n_params
//! u8 has_columns
//!   [u32 ncols, per column: u32 name_len, name bytes, u8 kind, u32 n, f64 × n]
//! u32 crc32 of everything above
//! ```
//!
//! Masks are not stored: they are rebuilt from `(d, hidden widths, mask seed)`.

use std::fs;
use std::path::Path;

use super::{FlowLayer, MafModel, ModelColumns};
use crate::dataio::{write_atomic, ColumnTransform};
use crate::error::{Error, Result};
use crate::made::MadeParams;

pub const MAGIC: &[u8; 4] = b"SFMF";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_model(model: &MafModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    let hidden = model.layers[0].made.hidden_sizes();
    put_u32(&mut out, model.d() as u32);
    put_u32(&mut out, model.layers.len() as u32);
    put_u32(&mut out, hidden.len() as u32);
    for &h in &hidden {
        put_u32(&mut out, h as u32);
    }
    for layer in &model.layers {
        for &o in &layer.order {
            put_u32(&mut out, o as u32);
        }
        out.extend_from_slice(&layer.made.mask_seed.to_le_bytes());
        let tensors = layer.made.tensors();
        let count: usize = tensors.iter().map(|t| t.len()).sum();
        out.extend_from_slice(&(count as u64).to_le_bytes());
        for t in tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    match &model.columns {
        None => out.push(0),
        Some(cols) => {
            out.push(1);
            put_u32(&mut out, cols.names.len() as u32);
            for (name, t) in cols.names.iter().zip(&cols.transforms) {
                put_u32(&mut out, name.len() as u32);
                out.extend_from_slice(name.as_bytes());
                let (kind, params) = encode_transform(t);
                out.push(kind);
                put_u32(&mut out, params.len() as u32);
                for p in params {
                    out.extend_from_slice(&p.to_le_bytes());
                }
            }
        }
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    out
}

pub fn read_model(bytes: &[u8]) -> Result<MafModel> {
    if bytes.len() < MAGIC.len() + 8 {
        return Err(Error::Format("file is truncated".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let mut r = Reader { buf: body, pos: 8 };
    let d = r.u32()? as usize;
    let n_layers = r.u32()? as usize;
    let n_hidden = r.u32()? as usize;
    if d == 0 || n_layers == 0 {
        return Err(Error::Format("zero dimension or layer count".into()));
    }
    let hidden = (0..n_hidden).map(|_| r.u32().map(|h| h as usize)).collect::<Result<Vec<_>>>()?;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let order = (0..d).map(|_| r.u32().map(|o| o as usize)).collect::<Result<Vec<_>>>()?;
        let mask_seed = r.u64()?;
        let count = r.u64()? as usize;
        let mut made = MadeParams::zeros(d, &hidden, mask_seed)?;
        let expected: usize = made.tensors().iter().map(|t| t.len()).sum();
        if count != expected {
            return Err(Error::Format(format!("layer holds {count} parameters, expected {expected}")));
        }
        for t in made.tensors_mut() {
            for v in t.data_mut() {
                *v = r.f64()?;
            }
        }
        layers.push(FlowLayer { order, made });
    }
    let mut model = MafModel::new(layers).map_err(|e| Error::Format(e.to_string()))?;
    model.columns = match r.u8()? {
        0 => None,
        1 => {
            let ncols = r.u32()? as usize;
            let mut names = Vec::with_capacity(ncols);
            let mut transforms = Vec::with_capacity(ncols);
            for _ in 0..ncols {
                let len = r.u32()? as usize;
                let name = String::from_utf8(r.bytes(len)?.to_vec())
                    .map_err(|_| Error::Format("column name is not UTF-8".into()))?;
                let kind = r.u8()?;
                let np = r.u32()? as usize;
                let params = (0..np).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                names.push(name);
                transforms.push(decode_transform(kind, &params)?);
            }
            if ncols != d {
                return Err(Error::Format(format!("{ncols} column records for d = {d}")));
            }
            Some(ModelColumns { names, transforms })
        }
        other => return Err(Error::Format(format!("bad column flag {other}"))),
    };
    if r.pos != body.len() {
        return Err(Error::Format(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(model)
}

pub fn save(model: &MafModel, path: &Path) -> Result<()> {
    write_atomic(path, &write_model(model))
}

pub fn load(path: &Path) -> Result<MafModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_model(&bytes)
}

fn encode_transform(t: &ColumnTransform) -> (u8, Vec<f64>) {
    match *t {
        ColumnTransform::Identity => (0, vec![]),
        ColumnTransform::Zscore { mean, sd } => (1, vec![mean, sd]),
        ColumnTransform::MinmaxLogit { lo, hi, padding } => (2, vec![lo, hi, padding]),
        ColumnTransform::DequantizeBinary { threshold } => (3, vec![threshold]),
    }
}

fn decode_transform(kind: u8, p: &[f64]) -> Result<ColumnTransform> {
    let want = match kind {
        0 => 0,
        1 => 2,
        2 => 3,
        3 => 1,
        _ => return Err(Error::Format(format!("unknown transform tag {kind}"))),
    };
    if p.len() != want {
        return Err(Error::Format(format!("transform tag {kind} carries {} parameters", p.len())));
    }
    Ok(match kind {
        0 => ColumnTransform::Identity,
        1 => ColumnTransform::Zscore { mean: p[0], sd: p[1] },
        2 => ColumnTransform::MinmaxLogit {
            lo: p[0],
            hi: p[1],
            padding: p[2],
        },
        _ => ColumnTransform::DequantizeBinary { threshold: p[0] },
    })
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("file is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }
}
