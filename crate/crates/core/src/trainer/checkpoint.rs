//! Binary checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            8 bytes  "DBMNETCK"
//! format_version   u32
//! meta_len         u32, then meta_len bytes of JSON (label space, config, dims, epoch, val_top1)
//! array_count      u32
//! per array:       name_len u16, name, dtype u8 (0 = f32, 1 = f64), kind u8,
//!                  ndim u8, ndim x u64 dims, u64 byte offset into the data block
//! data_len         u64, then the raw IEEE-754 arrays
//! checksum         u64, CRC-64/ECMA-182 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crc::{Crc, CRC_64_ECMA_182};
use serde::{Deserialize, Serialize};

use crate::dataset::LabelSpace;
use crate::error::{Error, Result};
use crate::model::{ModelDims, ModelParams, ParamKind, Tensor};
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 8] = b"DBMNETCK";
pub const FORMAT_VERSION: u32 = 1;

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_ECMA_182);

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub label_space: LabelSpace,
    pub config: TrainConfig,
    pub params: ModelParams<f32>,
    pub epoch: usize,
    pub val_top1: f64,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    label_space: LabelSpace,
    config: TrainConfig,
    dims: ModelDims,
    epoch: usize,
    val_top1: f64,
}

fn kind_code(kind: ParamKind) -> u8 {
    match kind {
        ParamKind::Weight => 0,
        ParamKind::Bias => 1,
        ParamKind::Query => 2,
    }
}

fn kind_from_code(code: u8) -> Result<ParamKind> {
    match code {
        0 => Ok(ParamKind::Weight),
        1 => Ok(ParamKind::Bias),
        2 => Ok(ParamKind::Query),
        other => Err(Error::Checksum(format!("unknown parameter kind {other}"))),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&Meta {
            label_space: self.label_space.clone(),
            config: self.config.clone(),
            dims: self.params.dims().clone(),
            epoch: self.epoch,
            val_top1: self.val_top1,
        })?;

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);

        let tensors = self.params.tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        let mut data = Vec::new();
        for t in tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(0); // f32
            out.push(kind_code(t.kind));
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(data.len() as u64).to_le_bytes());
            for x in &t.data {
                data.extend_from_slice(&x.to_le_bytes());
            }
        }
        out.extend_from_slice(&(data.len() as u64).to_le_bytes());
        out.extend_from_slice(&data);
        let checksum = CRC64.checksum(&out);
        out.extend_from_slice(&checksum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 8 || &bytes[..8] != MAGIC {
            return Err(Error::Checksum("missing magic or truncated header".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if CRC64.checksum(body) != stored {
            return Err(Error::Checksum("checksum mismatch".into()));
        }

        let mut r = Reader { buf: body, pos: 12 };
        let meta_len = r.u32()? as usize;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Checksum(format!("bad metadata: {e}")))?;

        struct Header {
            name: String,
            dtype: u8,
            kind: ParamKind,
            shape: Vec<usize>,
            offset: usize,
        }
        let count = r.u32()? as usize;
        let mut headers = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checksum("array name is not UTF-8".into()))?;
            let dtype = r.u8()?;
            let kind = kind_from_code(r.u8()?)?;
            let ndim = r.u8()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = r.u64()? as usize;
            headers.push(Header {
                name,
                dtype,
                kind,
                shape,
                offset,
            });
        }
        let data_len = r.u64()? as usize;
        let data = r.take(data_len)?;

        let mut tensors = Vec::with_capacity(count);
        for h in headers {
            let n: usize = h.shape.iter().product();
            let values = match h.dtype {
                0 => data
                    .get(h.offset..h.offset + 4 * n)
                    .ok_or_else(|| Error::Checksum(format!("array {} out of bounds", h.name)))?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
                1 => data
                    .get(h.offset..h.offset + 8 * n)
                    .ok_or_else(|| Error::Checksum(format!("array {} out of bounds", h.name)))?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")) as f32)
                    .collect(),
                other => return Err(Error::Checksum(format!("unknown element type {other}"))),
            };
            tensors.push(Tensor {
                name: h.name,
                kind: h.kind,
                shape: h.shape,
                data: values,
            });
        }
        Ok(Self {
            label_space: meta.label_space,
            config: meta.config,
            params: ModelParams::from_tensors(meta.dims, tensors)?,
            epoch: meta.epoch,
            val_top1: meta.val_top1,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checksum("unexpected end of checkpoint".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, checkpoint.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    Checkpoint::from_bytes(&fs::read(path)?)
}
