//! Binary checkpoint container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic        8 bytes  "RRCKPT\0\0"
//! version      u32
//! digest       8 bytes  encoder config digest
//! n_arrays     u32
//! per array:
//!   name_len   u32, name (UTF-8)
//!   ndims      u32, dims (u64 each)
//!   data       f32 × prod(dims)
//! ```
//!
//! Arrays are named `product/<slot>`, `template/<slot>`, optionally
//! `shadow/<slot>` and `bank/<source>` (N×d).

use std::path::Path;

use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::retrieval::{BankSource, TemplateBank};

pub const MAGIC: &[u8; 8] = b"RRCKPT\0\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub product: EncoderParams,
    pub template: EncoderParams,
    pub shadow: Option<EncoderParams>,
    pub bank: Option<TemplateBank>,
}

fn tower_arrays(prefix: &str, p: &EncoderParams, out: &mut Vec<NamedArray>) {
    for slot in &p.layout().slots {
        out.push(NamedArray {
            name: format!("{prefix}/{}", slot.name),
            shape: slot.shape.clone(),
            data: p.data[slot.range()].iter().map(|&v| v as f32).collect(),
        });
    }
}

fn source_name(s: BankSource) -> String {
    s.to_string()
}

fn parse_source(s: &str) -> Result<BankSource> {
    Ok(match s {
        "live" => BankSource::Live,
        "ema" => BankSource::Ema,
        "snapshot" => BankSource::Snapshot,
        "stage1-frozen" => BankSource::Stage1Frozen,
        other => return Err(Error::Checkpoint(format!("unknown bank source `{other}`"))),
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn encode_arrays(digest: [u8; 8], arrays: &[NamedArray]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&digest);
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for a in arrays {
        out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
        out.extend_from_slice(a.name.as_bytes());
        out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
        for &d in &a.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &a.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_arrays(bytes: &[u8]) -> Result<([u8; 8], Vec<NamedArray>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let digest: [u8; 8] = r.take(8)?.try_into().expect("8 bytes");
    let n = r.u32()? as usize;
    let mut arrays = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
        let ndims = r.u32()? as usize;
        let shape = (0..ndims).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("array {name} too large")))?;
        let raw = r.take(
            count
                .checked_mul(4)
                .ok_or_else(|| Error::Checkpoint("overflow".into()))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        arrays.push(NamedArray { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last array".into()));
    }
    Ok((digest, arrays))
}

fn take_tower(prefix: &str, config: &EncoderConfig, arrays: &[NamedArray]) -> Result<Option<EncoderParams>> {
    let template = EncoderParams::from_data(config.clone(), vec![0.0; config.param_count()])?;
    let mut data = vec![0.0; config.param_count()];
    let mut found = 0;
    for slot in &template.layout().slots {
        let name = format!("{prefix}/{}", slot.name);
        let Some(a) = arrays.iter().find(|a| a.name == name) else {
            continue;
        };
        if a.shape != slot.shape {
            return Err(Error::Checkpoint(format!(
                "array {name} has shape {:?}, expected {:?}",
                a.shape, slot.shape
            )));
        }
        for (dst, &src) in data[slot.range()].iter_mut().zip(&a.data) {
            *dst = src as f64;
        }
        found += 1;
    }
    match found {
        0 => Ok(None),
        n if n == template.layout().slots.len() => Ok(Some(EncoderParams::from_data(config.clone(), data)?)),
        n => Err(Error::Checkpoint(format!(
            "tower {prefix} has {n} of {} arrays",
            template.layout().slots.len()
        ))),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut arrays = Vec::new();
        tower_arrays("product", &self.product, &mut arrays);
        tower_arrays("template", &self.template, &mut arrays);
        if let Some(s) = &self.shadow {
            tower_arrays("shadow", s, &mut arrays);
        }
        if let Some(b) = &self.bank {
            arrays.push(NamedArray {
                name: format!("bank/{}", source_name(b.source)),
                shape: vec![b.len(), b.dim()],
                data: b.as_slice().iter().map(|&v| v as f32).collect(),
            });
        }
        encode_arrays(self.product.config().digest(), &arrays)
    }

    /// Rebuilds towers for `config`; the stored digest must match.
    pub fn from_bytes(bytes: &[u8], config: &EncoderConfig) -> Result<Self> {
        let (digest, arrays) = decode_arrays(bytes)?;
        if digest != config.digest() {
            return Err(Error::Config(
                "checkpoint was written for a different encoder configuration".into(),
            ));
        }
        let missing = |t: &str| Error::Checkpoint(format!("checkpoint has no {t} tower"));
        let product = take_tower("product", config, &arrays)?.ok_or_else(|| missing("product"))?;
        let template = take_tower("template", config, &arrays)?.ok_or_else(|| missing("template"))?;
        let shadow = take_tower("shadow", config, &arrays)?;
        let bank = match arrays.iter().find(|a| a.name.starts_with("bank/")) {
            Some(a) => {
                if a.shape.len() != 2 {
                    return Err(Error::Checkpoint("bank must be two-dimensional".into()));
                }
                let source = parse_source(&a.name["bank/".len()..])?;
                let rows = a.data.iter().map(|&v| v as f64).collect();
                Some(TemplateBank::from_rows(a.shape[1], rows, source, 0)?)
            }
            None => None,
        };
        Ok(Self {
            product,
            template,
            shadow,
            bank,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path, config: &EncoderConfig) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, config)
    }
}
